"""Stackable, skippable patch-level diffusion backbone."""

__version__ = "0.1.0"

from .bricks import BrickSpec, ConditioningEmbedder, LegoBrick
from .config import DiffusionConfig, RunConfig, SamplerConfig, reference_config
from .data import BlobDataset, DatasetSpec, ImageDirDataset, ingest_image_dir, make_synthetic_blobs
from .errors import ConfigError, NumericError, ShapeError
from .panorama import ClassMap, WindowPlan, panorama_sample, window_plan
from .patches import PatchGrid, assemble, coord_grid, fill_missing, partition, sample_patch_indices
from .sampler import (
    EdmSamplerParams,
    SkipSchedule,
    cfg_combine,
    ddpm_sample,
    edm_heun_sample,
    skip_schedule,
)
from .schedule import (
    EdmParams,
    LossWeights,
    NoiseSchedule,
    edm_precondition,
    eps_from_x0,
    loss_weight,
    make_linear_schedule,
    posterior_params,
    q_sample,
    snr,
    x0_from_eps,
)
from .stack import (
    ExternalBrick,
    LegoStack,
    StackConfig,
    edm_denoise,
    stack_forward,
    training_loss,
    wrap_external_brick,
)
from .trainer import TrainConfig, ema_update, lr_at, train
