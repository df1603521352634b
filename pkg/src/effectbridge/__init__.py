"""Treatment-effect estimation in a target population from source-study data.

Point estimators (plug-in, doubly robust, quadratic), influence-based
inference, sensitivity bounds under relaxed identification assumptions,
survey-weighted target adjustment, and a reproducible simulation harness.
"""

from .data import (CombinedSample, CsvSchema, EffectEstimate, EstimandSpec,
                   FoldAssignment, SourceRecord, TargetRecord, clip_probabilities,
                   default_schema, load_combined_csv, split_folds,
                   write_combined_csv)
from .errors import (ConfigError, ConvergenceError, DataError, EffectBridgeError,
                     NumericalError, ProtocolError)
from .estimators import (InfluenceValues, ate_contrast, dr_estimate,
                         efficiency_bound_mc, influence_values, plugin_contrast,
                         plugin_estimate)
from .learners import LearnerSpec, fit_learner
from .nuisance import (NuisanceFit, cross_fit_nuisances, default_nuisance_specs,
                       fit_from_functions, oracle_noisy_nuisances,
                       pseudo_outcome_tau)
from .quadratic import (BasisSpec, GramMatrix, build_basis, estimate_gram,
                        paired_kernel_u, qr_estimate, quadratic_pipeline,
                        select_basis_dim, u_statistic_bruteforce)
from .sensitivity import (SensitivityBound, breakeven_deltas, interval_from_point,
                          sensitivity_interval)
from .simulation import (DGPSpec, DiscreteLaw, RmseTable, default_dgp,
                         identification_oracle, quadratic_compare_study,
                         rmse_study, simulate_dgp, vx_dgp)
from .survey import (SurveyDesign, combined_transport_estimate,
                     survey_transport_estimate, weighted_mean_variance)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
