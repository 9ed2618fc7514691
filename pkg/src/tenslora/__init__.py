"""Tensor-structured low-rank adapters (Tucker-factorized LoRA) and a small
numpy transformer testbed for training and checking them."""
from .adapters import (
    PROJECTIONS,
    TENSOR_VARIANTS,
    VARIANTS,
    VIT_BASE,
    ModelDims,
    TensLoRAAdapter,
    apply,
    delta,
    init_adapter,
    merge,
    param_count,
    tensor_catalog,
)
from .planner import PlanResult, plan_isoparameters, plan_isorank, preset_table2
from .tensor import TuckerFactors, hosvd, mode_n_product, tucker_reconstruct, tucker_slice

__version__ = "0.1.0"
