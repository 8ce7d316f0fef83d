"""Bayesian 3-D super-resolution for multi-channel volumes.

A numpy library implementing an efficient subpixel 3-D convolutional
super-resolver with heteroscedastic intrinsic-uncertainty estimation and
variational-dropout parameter uncertainty, together with the synthetic
data pipeline, trainer, Monte Carlo inference and evaluation metrics
needed to run it end to end at desk scale.
"""

from .data import (
    PatchPair,
    PhantomSpec,
    Volume,
    block_mean_downsample,
    generate_phantom,
    read_volume,
    sample_patch_pairs,
    split_train_valid,
    write_volume,
)
from .errors import ConfigError, DataError, NonFiniteError, ShapeMismatchError, VoxelSRError
from .infer import (
    PredictiveResult,
    ensemble_combine,
    mc_predict,
    scalar_map_propagate,
    super_resolve,
    trilinear_upsample,
)
from .losses import LossReport, hetero_nll, mse_loss, total_objective, vardrop_kl
from .metrics import RegionMasks, mssim, psnr, region_masks, rmse, uncertainty_correlation
from .model import (
    SIGMA_FLOOR,
    VARIANTS,
    ArchConfig,
    HeteroOutput,
    ModelParams,
    NormStats,
    forward_hetero,
    forward_mean,
    forward_stochastic,
    init_params,
    load_checkpoint,
    sample_weights,
    save_checkpoint,
)
from .tensor import (
    Tensor,
    conv3d,
    conv3d_vjp,
    finite_diff_check,
    relu,
    relu_vjp,
    shuffle3d,
    softplus,
    softplus_vjp,
    unshuffle3d,
)
from .train import AdamState, TrainConfig, adam_step, train, train_ensemble

__version__ = "0.1.0"
