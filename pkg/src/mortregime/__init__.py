"""Weekly regional mortality modeling: seasonal baseline, three-state
regime-switching layer, uncertainty quantification, and scenario forecasts."""

from .panel import (MortalityPanel, RegionGraph, WeekIndex, WEEKS_PER_YEAR,
                    build_exposures, build_week_index, load_panel, mask_weeks)
from .features import (DailyRegionalSeries, FeatureArtifacts, FeatureFrame,
                       build_features, hinge_q75, lag_average,
                       population_weighted_series, seasonal_anomaly,
                       temperature_anomalies, threshold_indices)
from .baseline import (BaselineFit, design_matrix, design_row, fit_baseline,
                       predict_baseline, ubre_select)
from .regime import (CovariateSet, RegimeParams, RegimeSpec, complete_loglik,
                     default_spec, icar_logdensity, icar_sample, initial_params,
                     spatial_hessian, spec_from_config, state_mean,
                     transition_matrix)
from .em import (EmFit, FilterState, e_step, fit_em, forward_filter,
                 incomplete_loglik, m_step_alpha, m_step_beta, m_step_rho,
                 profile_tau, update_spatial_mode)
from .uncertainty import (FisherEstimate, coefficient_covariances, score,
                          simulate_panel, spsa_fim)
from .forecast import (PredictionBands, UncertaintyToggles, best_estimate_deaths,
                       best_estimate_states, bootstrap_predict, coverage_check,
                       excess_deaths, rate_per_1000py)
from .scenario import (ScenarioSet, SirsParams, SirsPosterior, assemble_scenarios,
                       q_of_week, sirs_forecast, sirs_mcmc, sirs_step)

__version__ = "0.1.0"
