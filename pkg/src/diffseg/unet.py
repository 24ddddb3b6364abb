"""Step-conditioned noise-predicting U-Net, its plain variant, the
segmentation head, and the weight-transfer / freezing machinery.

Parameter names partition into five stable prefixes: ``encoder.*``,
``middle.*``, ``decoder.*``, ``time.*`` and ``out.*`` (``head.*`` after the
output layer is swapped for segmentation). Freeze plans and checkpoint
transfer key on these prefixes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import ModelCheckpoint
from .diffusion import time_embedding
from .errors import ConfigError, DataError
from .nn import Conv2d, GroupNorm, BatchNorm2d, Linear, Module, ModuleList
from .rng import RngStream
from . import tensor as T
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class UNetConfig:
    """Desk-scale default: three levels mirroring the (1,1,2,2) lineage at
    256x256, shrunk by one level and width for 64x64 experiments."""

    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 1, 2)
    res_blocks: int = 1
    attn_levels: tuple[int, ...] = (2,)
    in_channels: int = 1
    out_channels: int = 1
    time_conditioned: bool = True

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_width

    @property
    def feature_width(self) -> int:
        """Channel count of the pre-output feature map."""
        return self.base_width * self.channel_mults[0]

    def validate(self):
        if self.base_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.res_blocks < 1 or not self.channel_mults:
            raise ConfigError("need at least one level and one residual block per level")
        if any(m < 1 for m in self.channel_mults):
            raise ConfigError(f"channel multipliers must be positive, got {self.channel_mults}")
        bad = [l for l in self.attn_levels if not 0 <= l < self.levels]
        if bad:
            raise ConfigError(f"attention levels {bad} outside [0, {self.levels})")

    def plain(self) -> "UNetConfig":
        return dataclasses.replace(self, time_conditioned=False)

    def to_meta(self) -> dict[str, str]:
        return {
            "arch.base_width": str(self.base_width),
            "arch.channel_mults": ",".join(map(str, self.channel_mults)),
            "arch.res_blocks": str(self.res_blocks),
            "arch.attn_levels": ",".join(map(str, self.attn_levels)),
            "arch.in_channels": str(self.in_channels),
            "arch.out_channels": str(self.out_channels),
            "arch.time_conditioned": str(self.time_conditioned).lower(),
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "UNetConfig":
        def ints(s):
            return tuple(int(x) for x in s.split(",")) if s else ()

        return UNetConfig(
            base_width=int(meta["arch.base_width"]),
            channel_mults=ints(meta["arch.channel_mults"]),
            res_blocks=int(meta["arch.res_blocks"]),
            attn_levels=ints(meta["arch.attn_levels"]),
            in_channels=int(meta["arch.in_channels"]),
            out_channels=int(meta["arch.out_channels"]),
            time_conditioned=meta["arch.time_conditioned"] == "true",
        )


_SCALES = {"S": (128, 128), "M": (128, 256), "L": (256, 256)}
_DESK_SCALES = {"S": (16, 16), "M": (16, 32), "L": (32, 32)}


def model_scale(scale: str, desk: bool = False) -> tuple[int, int]:
    """(backbone width c, head hidden width h) for scales S, M, L."""
    table = _DESK_SCALES if desk else _SCALES
    if scale not in table:
        raise ConfigError(f"unknown model scale {scale!r}; pick one of S, M, L")
    return table[scale]


# -- blocks -------------------------------------------------------------------


class TimeMLP(Module):
    """Maps the sinusoidal step embedding to the conditioning vector."""

    def __init__(self, c: int, emb_dim: int, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.c = c
        self.fc1 = Linear(c, emb_dim, rng, dtype=dtype)
        self.fc2 = Linear(emb_dim, emb_dim, rng, dtype=dtype)

    def forward(self, sinus: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(sinus)))


class ResBlock(Module):
    """Two 3x3 convolutions with group norm, SiLU and residual skip.

    When conditioned, the step embedding contributes a per-channel
    (scale, shift) applied after the second normalization; a zero
    embedding leaves the block unmodulated.
    """

    def __init__(self, cin, cout, emb_dim, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.cout = cout
        self.norm1 = GroupNorm(cin, dtype=dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.emb = Linear(emb_dim, 2 * cout, rng, dtype=dtype) if emb_dim else None
        self.norm2 = GroupNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, zero_init=True, dtype=dtype)
        self.skip = Conv2d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.emb is not None and emb is not None:
            ss = self.emb(T.silu(emb))
            B = ss.shape[0]
            scale = T.take_slice(ss, 1, 0, self.cout).reshape(B, self.cout, 1, 1)
            shift = T.take_slice(ss, 1, self.cout, 2 * self.cout).reshape(B, self.cout, 1, 1)
            h = h * (scale + 1.0) + shift
        h = self.conv2(T.silu(h))
        return h + (self.skip(x) if self.skip is not None else x)


class AttentionBlock(Module):
    """Single-head self-attention over the spatial positions."""

    def __init__(self, c: int, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.c = c
        self.norm = GroupNorm(c, dtype=dtype)
        self.qkv = Conv2d(c, 3 * c, 1, rng, dtype=dtype)
        self.proj = Conv2d(c, c, 1, rng, zero_init=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        qkv = self.qkv(self.norm(x)).reshape(B, 3 * C, H * W)
        q = T.take_slice(qkv, 1, 0, C)
        k = T.take_slice(qkv, 1, C, 2 * C)
        v = T.take_slice(qkv, 1, 2 * C, 3 * C)
        logits = q.swapaxes(1, 2) @ k
        attn = T.softmax(logits * (1.0 / math.sqrt(C)), axis=-1)
        out = (v @ attn.swapaxes(1, 2)).reshape(B, C, H, W)
        return x + self.proj(out)


class Downsample(Module):
    def __init__(self, c: int, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c, c, 3, rng, stride=2, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, c: int, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c, c, 3, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest2x(x))


class _CondUnit(Module):
    """Residual block optionally followed by self-attention."""

    def __init__(self, cin, cout, emb_dim, attn: bool, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.res = ResBlock(cin, cout, emb_dim, rng, dtype=dtype)
        self.attn = AttentionBlock(cout, rng, dtype=dtype) if attn else None

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        h = self.res(x, emb)
        return self.attn(h) if self.attn is not None else h


class _Encoder(Module):
    def __init__(self, cfg: UNetConfig, rng: RngStream, dtype=np.float32):
        super().__init__()
        c = cfg.base_width
        emb_dim = cfg.emb_dim if cfg.time_conditioned else None
        self.stem = Conv2d(cfg.in_channels, c, 3, rng, dtype=dtype)
        units, downs, skips = [], [], [c]
        ch = c
        for l, m in enumerate(cfg.channel_mults):
            for _ in range(cfg.res_blocks):
                units.append(_CondUnit(ch, c * m, emb_dim, l in cfg.attn_levels, rng, dtype))
                ch = c * m
                skips.append(ch)
            if l < cfg.levels - 1:
                downs.append(Downsample(ch, rng, dtype))
                skips.append(ch)
        self.units = ModuleList(units)
        self.downs = ModuleList(downs)
        self.skip_channels = skips
        self.out_channels = ch


class _Middle(Module):
    def __init__(self, ch: int, cfg: UNetConfig, rng: RngStream, dtype=np.float32):
        super().__init__()
        emb_dim = cfg.emb_dim if cfg.time_conditioned else None
        self.res1 = ResBlock(ch, ch, emb_dim, rng, dtype=dtype)
        self.attn = AttentionBlock(ch, rng, dtype=dtype)
        self.res2 = ResBlock(ch, ch, emb_dim, rng, dtype=dtype)

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        return self.res2(self.attn(self.res1(x, emb)), emb)


class _Decoder(Module):
    def __init__(self, ch: int, skips: list[int], cfg: UNetConfig, rng: RngStream, dtype=np.float32):
        super().__init__()
        c = cfg.base_width
        emb_dim = cfg.emb_dim if cfg.time_conditioned else None
        remaining = list(skips)
        units, ups = [], []
        for l in reversed(range(cfg.levels)):
            m = cfg.channel_mults[l]
            for _ in range(cfg.res_blocks + 1):
                units.append(
                    _CondUnit(ch + remaining.pop(), c * m, emb_dim, l in cfg.attn_levels, rng, dtype)
                )
                ch = c * m
            if l > 0:
                ups.append(Upsample(ch, rng, dtype))
        assert not remaining, "skip-connection bookkeeping out of sync"
        self.units = ModuleList(units)
        self.ups = ModuleList(ups)
        self.out_channels = ch


class _NoiseOut(Module):
    def __init__(self, ch: int, out_channels: int, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.norm = GroupNorm(ch, dtype=dtype)
        self.conv = Conv2d(ch, out_channels, 3, rng, zero_init=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.silu(self.norm(x)))


class ClassHead(Module):
    """[conv3x3 -> batch norm -> ReLU] x 2 followed by a 1x1 conv to logits."""

    def __init__(self, in_channels: int, hidden: int, n_classes: int, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.n_classes = n_classes
        self.conv1 = Conv2d(in_channels, hidden, 3, rng, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 3, rng, dtype=dtype)
        self.bn2 = BatchNorm2d(hidden, dtype=dtype)
        self.conv3 = Conv2d(hidden, n_classes, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = T.relu(self.bn2(self.conv2(h)))
        return self.conv3(h)


# -- backbone walk ------------------------------------------------------------


def _run_backbone(cfg: UNetConfig, encoder, middle, decoder, x: Tensor, emb) -> Tensor:
    H, W = x.shape[2], x.shape[3]
    div = 1 << (cfg.levels - 1)
    if H % div or W % div:
        raise ConfigError(f"input {H}x{W} not divisible by {div} (levels={cfg.levels})")
    h = encoder.stem(x)
    skips = [h]
    ui = 0
    for l in range(cfg.levels):
        for _ in range(cfg.res_blocks):
            h = encoder.units[ui](h, emb)
            ui += 1
            skips.append(h)
        if l < cfg.levels - 1:
            h = encoder.downs[l](h)
            skips.append(h)
    h = middle(h, emb)
    ui = 0
    up = 0
    for l in reversed(range(cfg.levels)):
        for _ in range(cfg.res_blocks + 1):
            h = decoder.units[ui](T.concat([h, skips.pop()], axis=1), emb)
            ui += 1
        if l > 0:
            h = decoder.ups[up](h)
            up += 1
    return h


class NoiseUNet(Module):
    """Noise predictor eps(x_t, t); the plain variant drops the step input."""

    def __init__(self, cfg: UNetConfig, rng: RngStream, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        if cfg.time_conditioned:
            self.time = TimeMLP(cfg.base_width, cfg.emb_dim, rng, dtype=dtype)
        else:
            self.time = None
        self.encoder = _Encoder(cfg, rng, dtype)
        self.middle = _Middle(self.encoder.out_channels, cfg, rng, dtype)
        self.decoder = _Decoder(
            self.encoder.out_channels, self.encoder.skip_channels, cfg, rng, dtype
        )
        self.out = _NoiseOut(self.decoder.out_channels, cfg.out_channels, rng, dtype)

    def _embed(self, t, batch: int) -> Tensor | None:
        if not self.cfg.time_conditioned:
            if t is not None:
                raise ConfigError("plain U-Net takes no step input")
            return None
        if t is None:
            raise ConfigError("time-conditioned U-Net needs a step value")
        t_vec = np.full(batch, t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t)
        sinus = time_embedding(t_vec, self.cfg.base_width).astype(self.dtype)
        return self.time(Tensor(sinus))

    def features(self, x: Tensor, t=None) -> Tensor:
        """Pre-output feature map [B, feature_width, H, W]."""
        emb = self._embed(t, x.shape[0])
        return _run_backbone(self.cfg, self.encoder, self.middle, self.decoder, x, emb)

    def forward(self, x: Tensor, t=None) -> Tensor:
        return self.out(self.features(x, t))

    def predict(self, x: np.ndarray, t=None) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(x.astype(self.dtype, copy=False)), t).data


class SegModel(Module):
    """Backbone with the output layer replaced by a classification head.

    For time-conditioned backbones the diffusion-step embedding is fixed
    once via :func:`fix_diffusion_step`; the forward pass then takes only
    the image.
    """

    def __init__(self, backbone: NoiseUNet, head: ClassHead, max_step: int = 1000):
        super().__init__()
        self.cfg = backbone.cfg
        self.dtype = backbone.dtype
        self.max_step = max_step
        self.time = backbone.time
        self.encoder = backbone.encoder
        self.middle = backbone.middle
        self.decoder = backbone.decoder
        self.head = head
        self.t_init: int | None = None
        self._fixed_emb: np.ndarray | None = None

    def features(self, x: Tensor) -> Tensor:
        emb = None
        if self.cfg.time_conditioned:
            if self._fixed_emb is None:
                raise ConfigError("diffusion step not fixed; call fix_diffusion_step first")
            emb = Tensor(np.repeat(self._fixed_emb, x.shape[0], axis=0))
        return _run_backbone(self.cfg, self.encoder, self.middle, self.decoder, x, emb)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        """Argmax class map [B, H, W] in eval mode."""
        was_training = self.training
        self.set_training(False)
        try:
            with no_grad():
                logits = self.forward(Tensor(x.astype(self.dtype, copy=False)))
        finally:
            self.set_training(was_training)
        return np.argmax(logits.data, axis=1)


# -- construction and transfer ------------------------------------------------


def build_noise_unet(cfg: UNetConfig, rng: RngStream, dtype=np.float32) -> NoiseUNet:
    """Step-conditioned noise predictor per the architecture config."""
    if not cfg.time_conditioned:
        raise ConfigError("noise U-Net must be time-conditioned; use build_plain_unet instead")
    return NoiseUNet(cfg, rng, dtype)


def build_plain_unet(cfg: UNetConfig, rng: RngStream, dtype=np.float32) -> NoiseUNet:
    """Identical topology with the step branch and conditioning removed."""
    if cfg.time_conditioned:
        raise ConfigError("plain U-Net config must have time_conditioned=False")
    return NoiseUNet(cfg, rng, dtype)


def attach_head(model: NoiseUNet, head: ClassHead, max_step: int = 1000) -> SegModel:
    """Replace the model's output layer with a freshly initialized head."""
    width = model.cfg.feature_width
    if head.in_channels != width:
        raise ConfigError(
            f"head expects {head.in_channels} input channels but backbone produces {width}"
        )
    return SegModel(model, head, max_step=max_step)


@dataclass
class TransferReport:
    loaded: list[str]
    skipped: list[str]
    missing: list[str]


def transfer_weights(ckpt: ModelCheckpoint, seg_model: SegModel) -> TransferReport:
    """Copy all backbone weights from a pre-training checkpoint, bit-exact.

    ``head.*`` stays at its fresh initialization; checkpoint tensors with no
    counterpart in the segmentation model (the old output layer) are
    reported as skipped. Any missing or shape-mismatched backbone tensor is
    a hard error: no partial loads.
    """
    arch_keys = [k for k in ckpt.meta if k.startswith("arch.")]
    if arch_keys:
        ckpt_cfg = UNetConfig.from_meta(ckpt.meta)
        backbone_cfg = seg_model.cfg
        if dataclasses.replace(ckpt_cfg, out_channels=backbone_cfg.out_channels) != backbone_cfg:
            raise ConfigError(
                f"checkpoint architecture {ckpt_cfg} does not match model {backbone_cfg}"
            )
    params = seg_model.named_parameters()
    loaded, missing = [], []
    for name in sorted(params):
        if name.startswith("head."):
            continue
        p = params[name]
        src = ckpt.tensors.get(name)
        if src is None:
            missing.append(name)
            continue
        if src.shape != p.shape:
            raise DataError(
                f"shape mismatch for {name!r}: checkpoint {src.shape} vs model {p.shape}"
            )
        p.tensor.data = src.astype(p.data.dtype)
        loaded.append(name)
    if missing:
        raise DataError(f"checkpoint is missing backbone tensors: {missing}")
    skipped = sorted(set(ckpt.tensors) - set(loaded))
    return TransferReport(loaded=loaded, skipped=skipped, missing=missing)


def fix_diffusion_step(seg_model: SegModel, t_init: int) -> SegModel:
    """Fold the embedding for one step value in as a frozen constant."""
    if seg_model.time is None:
        raise ConfigError("plain backbone has no diffusion-step branch to fix")
    if not 0 <= t_init <= seg_model.max_step:
        raise ConfigError(f"t_init={t_init} outside [0, {seg_model.max_step}]")
    sinus = time_embedding(t_init, seg_model.cfg.base_width)[None].astype(seg_model.dtype)
    with no_grad():
        emb = seg_model.time(Tensor(sinus)).data
    seg_model.t_init = t_init
    seg_model._fixed_emb = emb
    return seg_model


STRATEGIES = ("linear", "decoder", "scratch")


@dataclass(frozen=True)
class FreezePlan:
    strategy: str
    trainable: frozenset[str]


def apply_freeze(seg_model: SegModel, strategy: str, include_middle: bool = False) -> FreezePlan:
    """Set trainable flags for a fine-tuning strategy and return the plan.

    linear: only ``head.*``. decoder: ``head.*`` plus the up path
    (optionally the bottleneck). scratch: everything, plain backbones only.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; pick one of {STRATEGIES}")
    params = seg_model.named_parameters()
    if strategy == "scratch":
        if seg_model.cfg.time_conditioned:
            raise ConfigError("scratch strategy requires the plain (unconditioned) variant")
        trainable = set(params)
    elif strategy == "linear":
        trainable = {n for n in params if n.startswith("head.")}
    else:
        prefixes = ("head.", "decoder.") + (("middle.",) if include_middle else ())
        trainable = {n for n in params if n.startswith(prefixes)}
    for name, p in params.items():
        p.set_trainable(name in trainable)
    return FreezePlan(strategy=strategy, trainable=frozenset(trainable))
