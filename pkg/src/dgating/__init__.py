"""D-Gating: differentiable group sparsity through gated overparametrisation."""

__version__ = "0.1.0"

from .numerics import ContractError, DivergenceError, Rng
from .grouping import GroupPartition, active_groups, contiguous, group_norms
from .gating import (
    BalanceReport,
    GatedParams,
    balance_report,
    balanced_from_effective,
    collapse,
    grads_from_effective,
    identity_gated,
    imbalance,
    misalignment,
    nonsmooth_penalty,
    surrogate_penalty,
)
from .models import Dataset, LinearModel, MlpModel, ToyObjective
from .optim import (
    TrainConfig,
    TraceRecord,
    fista_group_lasso,
    flow_integrate,
    sgd_step_exact,
    sgd_train,
    subgrad_direct,
)
