"""Pre-training and fine-tuning loops.

Pre-training minimizes the noise-prediction MSE with linearly decaying
learning rate and EMA weight tracking. Fine-tuning builds the segmentation
model for one of the three strategies, trains it with the combined
cross-entropy + Dice loss at constant base learning rate, with the head
group at ten times the base rate and per-part weight decay (1e-3 head,
1e-4 body). Batches are drawn uniformly with replacement; training is
iteration-based throughout.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import ModelCheckpoint
from .data import SliceDataset
from .diffusion import NoiseSchedule, ddpm_loss, make_schedule
from .errors import ConfigError, DataError, NumericError
from .metrics import seg_scores
from .nn import Module
from .optim import AdamState, ParamGroup, adam_step, ema_update
from .rng import RngStream
from . import tensor as T
from .tensor import Tensor
from .unet import (
    ClassHead,
    SegModel,
    UNetConfig,
    apply_freeze,
    attach_head,
    build_noise_unet,
    build_plain_unet,
    fix_diffusion_step,
    transfer_weights,
)


def lr_at(iteration: int, total: int, lr0: float, lr1: float) -> float:
    """Linear learning-rate interpolation from lr0 (iter 0) to lr1 (iter total)."""
    if total <= 0:
        raise ConfigError(f"total iterations must be positive, got {total}")
    if not 0 <= iteration <= total:
        raise ConfigError(f"iteration {iteration} outside [0, {total}]")
    return lr0 + (lr1 - lr0) * iteration / total


def lr_at_cosine(iteration: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine-annealed alternative for the ambiguous scheduler phrasing."""
    if total <= 0:
        raise ConfigError(f"total iterations must be positive, got {total}")
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + np.cos(np.pi * iteration / total))


# -- run log -----------------------------------------------------------------


class RunLog:
    """Append-only per-iteration record bound to a config hash."""

    def __init__(self, config_hash: str = "", seeds=()):
        self.config_hash = config_hash
        self.seeds = tuple(int(s) for s in seeds)
        self.notes: list[str] = []
        self.records: list[tuple[int, float, float, float]] = []

    def note(self, text: str):
        self.notes.append(text)

    def log(self, iteration: int, loss: float, lr: float, wall_ms: float):
        self.records.append((iteration, float(loss), float(lr), float(wall_ms)))

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.records])

    def to_text(self) -> str:
        lines = [f"# config_hash\t{self.config_hash}", f"# seeds\t{','.join(map(str, self.seeds))}"]
        lines += [f"# {n}" for n in self.notes]
        lines += [f"{it}\t{loss:.8g}\t{lr:.8g}\t{ms:.3f}" for it, loss, lr, ms in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())


def config_hash_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _dataclass_canonical(cfg) -> str:
    pairs = []
    for k in sorted(vars(cfg)):
        v = getattr(cfg, k)
        pairs.append(f"{k}={v!r}")
    return f"{type(cfg).__name__}({', '.join(pairs)})"


# -- segmentation loss ---------------------------------------------------------


@dataclass
class SegLossValue:
    total: Tensor
    ce: float
    dice: float


def seg_loss(
    logits: Tensor,
    labels: np.ndarray,
    w: float = 0.5,
    eps: float = 1e-5,
    per_class_dice: bool = False,
) -> SegLossValue:
    """w * cross-entropy + (1-w) * Dice loss over softmax probabilities.

    Cross-entropy averages -log p(true class) over all voxels; the Dice
    term pools intersection and volume sums over every class (background
    included) and voxel, with a single epsilon guarding the ratio. The
    per-class variant averages one ratio per class instead.
    """
    B, C, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise DataError(f"labels shape {labels.shape} != {(B, H, W)}")
    if labels.min() < 0 or labels.max() >= C:
        bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
        raise DataError(f"label value {bad} outside [0, {C - 1}]")
    n_vox = B * H * W
    onehot = (labels[:, None] == np.arange(C)[None, :, None, None]).astype(logits.dtype)
    onehot_t = Tensor(onehot)
    logp = T.log_softmax(logits, axis=1)
    ce = (logp * onehot_t).sum() * (-1.0 / n_vox)
    probs = T.exp(logp)
    if per_class_dice:
        inter_c = (probs * onehot_t).sum(axis=(0, 2, 3))
        pred_c = probs.sum(axis=(0, 2, 3))
        true_c = Tensor(onehot.sum(axis=(0, 2, 3)))
        dice = 1.0 - ((inter_c * 2.0 + eps) / (pred_c + true_c + eps)).mean()
    else:
        inter = (probs * onehot_t).sum()
        dice = 1.0 - (inter * 2.0 + eps) / (probs.sum() + float(n_vox) + eps)
    total = ce * w + dice * (1.0 - w)
    return SegLossValue(total=total, ce=float(ce.data), dice=float(dice.data))


# -- pre-training ----------------------------------------------------------------


@dataclass
class PretrainConfig:
    """Desk-scale defaults; the reference run uses iterations=300000,
    base_width=128 and T=1000."""

    arch: UNetConfig = field(default_factory=UNetConfig)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"
    iterations: int = 5000
    batch_size: int = 8
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    lr_schedule: str = "linear"
    ema_momentum: float = 0.9999
    checkpoint_every: int = 1000
    augment_hflip: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.lr_end > self.lr_start:
            raise ConfigError("lr_end must not exceed lr_start")
        if self.lr_schedule not in ("linear", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def canonical(self) -> str:
        return _dataclass_canonical(self)

    def hash(self) -> str:
        return config_hash_of(self.canonical())


@dataclass
class PretrainResult:
    live: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    meta: dict[str, str]
    runlog: RunLog
    model: Module
    schedule: NoiseSchedule


def _snapshot(params) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


def _lr_for(cfg: PretrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "cosine":
        return lr_at_cosine(iteration, cfg.iterations, cfg.lr_start, cfg.lr_end)
    return lr_at(iteration, cfg.iterations, cfg.lr_start, cfg.lr_end)


def pretrain(
    cfg: PretrainConfig,
    ds: SliceDataset,
    rng: RngStream,
    out_dir=None,
    log_every: int = 1,
) -> PretrainResult:
    """Noise-prediction pre-training on unlabeled slices (labels ignored).

    Saves live and EMA checkpoints at the configured cadence when
    ``out_dir`` is given; a non-finite loss aborts with the last saved
    checkpoint retained on disk.
    """
    if len(ds) == 0:
        raise DataError("empty slice dataset")
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)
    model = build_noise_unet(cfg.arch, rng.substream("init"))
    data_rng = rng.substream("data")
    noise_rng = rng.substream("noise")
    aug_rng = rng.substream("aug")

    params = model.named_parameters()
    groups = [ParamGroup(frozenset(params), label="all")]
    state = AdamState()
    ema = _snapshot(params)
    runlog = RunLog(config_hash=cfg.hash(), seeds=(rng.seed, rng.stream))
    images = ds.image_stack()[:, None]  # [N,1,H,W]

    meta = {"kind": "pretrain", "config_hash": cfg.hash()}
    meta["image_size"] = str(ds[0].image.shape[0])
    meta.update(cfg.arch.to_meta())
    meta.update(sched.to_meta())
    if ds.stats is not None:
        meta.update(ds.stats.to_meta())

    def save_ckpt(iteration: int):
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        cfg_path = os.path.join(out_dir, "pretrain_config.txt")
        if not os.path.exists(cfg_path):
            with open(cfg_path, "w") as f:
                f.write(cfg.canonical() + "\n")
        m = dict(meta, iteration=str(iteration))
        ModelCheckpoint(_snapshot(params), dict(m, ema="false")).save(
            os.path.join(out_dir, f"ckpt_{iteration:07d}.nta")
        )
        ModelCheckpoint({k: v.copy() for k, v in ema.items()}, dict(m, ema="true")).save(
            os.path.join(out_dir, f"ckpt_{iteration:07d}_ema.nta")
        )

    last_saved = None
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        idx = data_rng.integers(0, len(ds), size=cfg.batch_size)
        x0 = images[idx]
        if cfg.augment_hflip:
            flips = aug_rng.uniform((cfg.batch_size,)) < 0.5
            if flips.any():
                x0 = x0.copy()
                x0[flips] = x0[flips, :, :, ::-1]
        model.zero_grad()
        loss = ddpm_loss(model, x0, noise_rng, sched)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(
                f"non-finite loss {loss_val} at iteration {it}; "
                f"last good checkpoint: {last_saved or 'none saved'}"
            )
        loss.backward()
        grads = {n: p.tensor.grad for n, p in params.items()}
        lr = _lr_for(cfg, it)
        adam_step(params, grads, state, groups, lr)
        ema_update(ema, params, cfg.ema_momentum)
        if it % log_every == 0 or it == cfg.iterations - 1:
            runlog.log(it, loss_val, lr, (time.perf_counter() - t0) * 1000.0)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_ckpt(it + 1)
            last_saved = os.path.join(out_dir or "", f"ckpt_{it + 1:07d}.nta")

    save_ckpt(cfg.iterations)
    if out_dir is not None:
        runlog.save(os.path.join(out_dir, "pretrain_log.tsv"))
    return PretrainResult(
        live=_snapshot(params),
        ema={k: v.copy() for k, v in ema.items()},
        meta=dict(meta, iteration=str(cfg.iterations)),
        runlog=runlog,
        model=model,
        schedule=sched,
    )


def pretrain_checkpoint(result: PretrainResult, ema: bool = True) -> ModelCheckpoint:
    """Checkpoint view of a pre-training result (EMA weights by default)."""
    tensors = result.ema if ema else result.live
    return ModelCheckpoint(
        {k: v.copy() for k, v in tensors.items()},
        dict(result.meta, ema="true" if ema else "false"),
    )


# -- fine-tuning -------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    strategy: str
    n_classes: int
    t_init: int = 0
    iterations: int = 1000
    batch_size: int = 4
    base_lr: float = 1e-4
    head_lr_scale: float = 10.0
    head_weight_decay: float = 1e-3
    body_weight_decay: float = 1e-4
    loss_weight: float = 0.5
    dice_eps: float = 1e-5
    head_hidden: int = 16
    arch: UNetConfig | None = None  # required for scratch, else from checkpoint
    include_middle: bool = False
    val_fraction: float = 0.1
    eval_every: int = 100
    per_class_dice: bool = False

    def __post_init__(self):
        if self.strategy not in ("linear", "decoder", "scratch"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes (background + 1)")
        for name in ("iterations", "batch_size", "base_lr", "head_lr_scale",
                     "head_weight_decay", "body_weight_decay", "dice_eps", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigError("loss_weight must be in [0, 1]")

    def canonical(self) -> str:
        return _dataclass_canonical(self)

    def hash(self) -> str:
        return config_hash_of(self.canonical())


@dataclass
class FinetuneResult:
    best: dict[str, np.ndarray]
    final: dict[str, np.ndarray]
    meta: dict[str, str]
    runlog: RunLog
    model: SegModel
    plan: object
    best_val_dsc: float
    best_iteration: int


def build_seg_model(cfg: FinetuneConfig, ckpt: ModelCheckpoint | None, rng: RngStream):
    """Construct, transfer, step-fix and freeze per the chosen strategy."""
    init_rng = rng.substream("init")
    if cfg.strategy == "scratch":
        arch = cfg.arch or UNetConfig()
        model = build_plain_unet(arch.plain(), init_rng)
        head = ClassHead(arch.feature_width, cfg.head_hidden, cfg.n_classes, init_rng)
        seg = attach_head(model, head)
        plan = apply_freeze(seg, "scratch")
        return seg, plan, None
    if ckpt is None:
        raise ConfigError(f"strategy {cfg.strategy!r} needs a pre-training checkpoint")
    arch = UNetConfig.from_meta(ckpt.meta)
    max_step = int(ckpt.meta.get("schedule.T", "1000"))
    backbone = build_noise_unet(arch, init_rng)
    head = ClassHead(arch.feature_width, cfg.head_hidden, cfg.n_classes, init_rng)
    seg = attach_head(backbone, head, max_step=max_step)
    report = transfer_weights(ckpt, seg)
    fix_diffusion_step(seg, cfg.t_init)
    plan = apply_freeze(seg, cfg.strategy, include_middle=cfg.include_middle)
    return seg, plan, report


def _eval_mean_dsc(seg: SegModel, images, labels, n_classes: int, batch: int = 8) -> float:
    preds = []
    for i in range(0, len(images), batch):
        preds.extend(seg.predict_labels(images[i:i + batch][:, None]))
    return seg_scores(preds, list(labels), n_classes).mean_dsc


def finetune(
    cfg: FinetuneConfig,
    ckpt: ModelCheckpoint | None,
    ds: SliceDataset,
    rng: RngStream,
    out_dir=None,
) -> FinetuneResult:
    """Fine-tune on labeled slices; tracks the best validation-DSC snapshot.

    The validation split is a deterministic 10% of the labeled slices; when
    the labeled set is too small to spare a slice the training set doubles
    as the validation set (the one-batch protocol trains on all slices).
    """
    if len(ds) == 0 or not ds.has_labels:
        raise DataError("fine-tuning needs a non-empty labeled dataset")
    seg, plan, report = build_seg_model(cfg, ckpt, rng)
    params = seg.named_parameters()

    head_names = frozenset(n for n in plan.trainable if n.startswith("head."))
    body_names = frozenset(plan.trainable) - head_names
    groups = [
        ParamGroup(head_names, lr_scale=cfg.head_lr_scale,
                   weight_decay=cfg.head_weight_decay, label="head"),
        ParamGroup(body_names, lr_scale=1.0,
                   weight_decay=cfg.body_weight_decay, label="body"),
    ]
    state = AdamState()

    runlog = RunLog(config_hash=cfg.hash(), seeds=(rng.seed, rng.stream))
    runlog.note(f"strategy\t{cfg.strategy}\tt_init\t{cfg.t_init}")
    runlog.note(f"group head (lr x{cfg.head_lr_scale}, wd {cfg.head_weight_decay}): "
                + ",".join(sorted(head_names)))
    runlog.note(f"group body (lr x1, wd {cfg.body_weight_decay}): "
                + ",".join(sorted(body_names)))
    if report is not None:
        runlog.note(f"transfer loaded={len(report.loaded)} skipped={len(report.skipped)}")

    images = ds.image_stack()
    labels = ds.label_stack().astype(np.int64)
    n = len(ds)
    n_val = int(round(cfg.val_fraction * n))
    order = rng.substream("val-split").permutation(n)
    if 0 < n_val < n:
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        val_idx = train_idx = np.arange(n)
        runlog.note("validation on the training slices (set too small to split)")

    data_rng = rng.substream("data")
    best = _snapshot(params)
    best_buffers = {k: v.copy() for k, v in seg.named_buffers().items()}
    best_dsc = -1.0
    best_iter = 0
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        idx = train_idx[data_rng.integers(0, len(train_idx), size=cfg.batch_size)]
        x = images[idx][:, None]
        y = labels[idx]
        seg.zero_grad()
        value = seg_loss(seg(Tensor(x)), y, w=cfg.loss_weight, eps=cfg.dice_eps,
                         per_class_dice=cfg.per_class_dice)
        loss_val = float(value.total.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss at iteration {it}")
        value.total.backward()
        grads = {n_: p.tensor.grad for n_, p in params.items() if p.trainable}
        adam_step(params, grads, state, groups, cfg.base_lr)
        runlog.log(it, loss_val, cfg.base_lr, (time.perf_counter() - t0) * 1000.0)
        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            dsc = _eval_mean_dsc(seg, images[val_idx], labels[val_idx], cfg.n_classes)
            runlog.note(f"eval\titer={it + 1}\tval_mean_dsc={dsc:.6f}")
            if dsc > best_dsc:
                best_dsc = dsc
                best_iter = it + 1
                best = _snapshot(params)
                best_buffers = {k: v.copy() for k, v in seg.named_buffers().items()}

    meta = {
        "kind": "finetune",
        "config_hash": cfg.hash(),
        "strategy": cfg.strategy,
        "t_init": str(cfg.t_init),
        "n_classes": str(cfg.n_classes),
        "head_hidden": str(cfg.head_hidden),
        "best_iteration": str(best_iter),
        "best_val_dsc": repr(best_dsc),
    }
    meta.update(seg.cfg.to_meta())
    if ckpt is not None and "schedule.T" in ckpt.meta:
        meta["schedule.T"] = ckpt.meta["schedule.T"]
    final = _snapshot(params)
    final_buffers = {k: v.copy() for k, v in seg.named_buffers().items()}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "finetune_config.txt"), "w") as f:
            f.write(cfg.canonical() + "\n")
        ModelCheckpoint({**best, **best_buffers}, dict(meta, which="best")).save(
            os.path.join(out_dir, "seg_best.nta"))
        ModelCheckpoint({**final, **final_buffers}, dict(meta, which="final")).save(
            os.path.join(out_dir, "seg_final.nta"))
        runlog.save(os.path.join(out_dir, f"finetune_{cfg.strategy}_log.tsv"))
    return FinetuneResult(
        best={**best, **best_buffers},
        final={**final, **final_buffers},
        meta=meta,
        runlog=runlog,
        model=seg,
        plan=plan,
        best_val_dsc=best_dsc,
        best_iteration=best_iter,
    )


def one_batch_cap(iterations: int, n_slices: int, batch_size: int, cap: int = 1000) -> int:
    """Cap fine-tuning iterations when the labeled set fits in one batch."""
    if n_slices <= batch_size:
        return min(iterations, cap)
    return iterations


def load_noise_model(ckpt: ModelCheckpoint, rng: RngStream | None = None):
    """Rebuild the noise-prediction U-Net from a pre-training checkpoint."""
    arch = UNetConfig.from_meta(ckpt.meta)
    model = build_noise_unet(arch, rng or RngStream(0))
    for name, p in model.named_parameters().items():
        if name not in ckpt.tensors:
            raise DataError(f"checkpoint missing tensor {name!r}")
        if ckpt.tensors[name].shape != p.shape:
            raise DataError(f"shape mismatch for {name!r}")
        p.tensor.data = ckpt.tensors[name].astype(p.data.dtype)
    return model


def load_seg_model(ckpt: ModelCheckpoint, rng: RngStream | None = None) -> SegModel:
    """Rebuild a segmentation model from a fine-tuning checkpoint."""
    rng = rng or RngStream(0)
    arch = UNetConfig.from_meta(ckpt.meta)
    n_classes = int(ckpt.meta["n_classes"])
    hidden = int(ckpt.meta["head_hidden"])
    if arch.time_conditioned:
        backbone = build_noise_unet(arch, rng)
    else:
        backbone = build_plain_unet(arch, rng)
    head = ClassHead(arch.feature_width, hidden, n_classes, rng)
    seg = attach_head(backbone, head, max_step=int(ckpt.meta.get("schedule.T", "1000")))
    params = seg.named_parameters()
    buffers = seg.named_buffers()
    for name, p in params.items():
        if name not in ckpt.tensors:
            raise DataError(f"checkpoint missing tensor {name!r}")
        if ckpt.tensors[name].shape != p.shape:
            raise DataError(f"shape mismatch for {name!r}")
        p.tensor.data = ckpt.tensors[name].astype(p.data.dtype)
    for name in buffers:
        if name in ckpt.tensors:
            seg.set_buffer(name, ckpt.tensors[name].astype(buffers[name].dtype))
    if arch.time_conditioned:
        fix_diffusion_step(seg, int(ckpt.meta.get("t_init", "0")))
    return seg
