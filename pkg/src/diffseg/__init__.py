"""DDPM generative pre-training on 2-d grayscale slices with label-efficient
transfer to multi-class semantic segmentation, built on a self-contained
numpy autodiff core."""

__version__ = "0.1.0"

from .rng import RngStream
from .tensor import Tensor, no_grad
from .nn import Module, Parameter
from .optim import AdamState, ParamGroup, adam_step, ema_update, grad_check
from .checkpoint import ModelCheckpoint, load_weights, save_weights
from .diffusion import (
    NoiseSchedule,
    ddpm_loss,
    make_schedule,
    p_sample_step,
    posterior_mu,
    q_sample,
    q_step,
    sample_loop,
    time_embedding,
)
from .unet import (
    ClassHead,
    FreezePlan,
    SegModel,
    UNetConfig,
    apply_freeze,
    attach_head,
    build_noise_unet,
    build_plain_unet,
    fix_diffusion_step,
    model_scale,
    transfer_weights,
)
from .data import (
    IntensityStats,
    PhantomSpec,
    SliceDataset,
    SliceRecord,
    Volume,
    augment_hflip,
    corpus_intensity_stats,
    gen_phantom,
    load_slice_dataset,
    load_volume,
    normalize_intensity,
    resample_volume,
    save_slice_dataset,
    save_volume,
    slice_and_resize,
    subset_labeled,
)
from .training import (
    FinetuneConfig,
    PretrainConfig,
    RunLog,
    finetune,
    load_noise_model,
    load_seg_model,
    lr_at,
    pretrain,
    pretrain_checkpoint,
    seg_loss,
)
from .metrics import (
    FeatureSet,
    GenScore,
    SegScore,
    extract_features,
    frechet_distance,
    frechet_from_moments,
    gen_scores,
    precision_recall_f1,
    seg_scores,
)
from .config import ExperimentConfig, load_config, parse_config
from .cli import dispatch, sample_grid

__all__ = [name for name in dir() if not name.startswith("_")]
