"""DMC-Net: dynamic multi-resolution and multi-scale convolution networks.

A float64 NumPy autodiff core, the DMRC and DMSC blocks, 2-D and 3-D U-shaped
networks with their ablation variants, analytic complexity accounting, the
training recipe, evaluation metrics and a small CLI.
"""

from . import _backend as backend
from .blocks import build_block, dmrc_forward, dmsc_forward
from .complexity import complexity_report, count_flops, count_params, ablation_grid
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    DmcError,
    FormatError,
    GeometryError,
    NonFiniteLossError,
)
from .io import load_checkpoint, read_volume, save_checkpoint, write_volume
from .metrics import dsc, evaluate, hd95, kfold_split, wilcoxon_signed_rank
from .networks import Model, NetworkSpec, build_network, init_params, model_forward
from .phantom import synth_phantom
from .tensor import Tape, Tensor, finite_diff_gradcheck, no_grad
from .training import (
    AugmentationConfig,
    OptimizerState,
    RunConfig,
    combined_loss,
    poly_lr,
    sgd_nesterov_step,
    train,
)

__version__ = "0.1.0"
