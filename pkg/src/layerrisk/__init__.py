"""Per-layer privacy risk from training dynamics.

Tracks the Degrees of Freedom of intermediate activations and the Jacobian
rank of each probe layer over training, turns the per-epoch series into
Change Value / Modified Change Ratio metrics, and cross-checks them with an
activation-based membership inference attack.
"""

from .dof import DoFEstimate, estimate_dof, run_dof_schedule
from .errors import ConfigError, ContractError, DimensionError, FormatError, LayerRiskError, NumericalError
from .metrics import MetricSeries, SummaryRow, compute_cv, compute_mcr, summarize
from .nn import Model, build_model
from .rank import RankEstimate, estimate_rank, probe_gradients, run_rank_schedule

__version__ = "0.1.0"
