"""From-scratch KAN-Mamba fusion network for binary image segmentation."""

from . import kernels
from .kan import ConfigError, KANBlock, KANLayer, KANLinear, SplineGrid, bspline_basis
from .model import (
    REFERENCE,
    TINY,
    VARIANTS,
    CheckpointError,
    FusionNet,
    ModelConfig,
    build,
    count_flops,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from .objective import LossConfig, MetricReport, bce_loss, combined_loss, dice_loss, metrics
from .ssm import ClassicalMambaBlock, MambaKanBlock, SelectiveSSM, selective_scan
from .tensor import ContractError, DimensionError, NumericDomainError, Tensor, grad_check, no_grad, precision

__version__ = "0.1.0"
