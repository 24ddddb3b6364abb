"""Command-line operator surface.

Subcommands: synth-data, preprocess, pretrain, sample, finetune,
sweep-step, evaluate-seg, evaluate-gen. Every run writes a
``run_manifest.json`` listing inputs, outputs and their checksums so any
run can be replayed and verified. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import ModelCheckpoint, load_weights, save_weights
from .config import ExperimentConfig, apply_overrides, load_config
from .data import (
    PhantomSpec,
    Volume,
    corpus_intensity_stats,
    gen_phantom,
    load_slice_dataset,
    load_volume,
    median_spacing,
    normalize_intensity,
    resample_volume,
    save_slice_dataset,
    save_volume,
    sha256_hex,
    slice_and_resize,
    subset_labeled,
)
from .diffusion import NoiseSchedule, sample_loop
from .errors import ConfigError, DataError, NumericError
from .metrics import (
    FeatureSet,
    extract_features,
    format_report,
    gen_report_rows,
    gen_scores,
    seg_report_rows,
    seg_scores,
)
from .rng import RngStream
from .training import (
    FinetuneConfig,
    PretrainConfig,
    finetune,
    load_noise_model,
    load_seg_model,
    one_batch_cap,
    pretrain,
)
from .unet import UNetConfig

COMMANDS = (
    "synth-data",
    "preprocess",
    "pretrain",
    "sample",
    "finetune",
    "sweep-step",
    "evaluate-seg",
    "evaluate-gen",
)

_USAGE = f"""usage: diffseg COMMAND --config PATH [--set KEY=VALUE ...] [--seed U64] [--out DIR]
commands: {', '.join(COMMANDS)}
extra flags: --steps A:B:STRIDE (sweep-step), --real/--gen PATH (evaluate-gen)"""


def _parse_flags(args) -> dict:
    flags = {"set": []}
    i = 0
    while i < len(args):
        tok = args[i]
        if tok in ("--config", "--seed", "--out", "--steps", "--real", "--gen"):
            if i + 1 >= len(args):
                raise ConfigError(f"flag {tok} needs a value")
            flags[tok[2:]] = args[i + 1]
            i += 2
        elif tok == "--set":
            if i + 1 >= len(args):
                raise ConfigError("flag --set needs KEY=VALUE")
            flags["set"].append(args[i + 1])
            i += 2
        else:
            raise ConfigError(f"unknown flag {tok!r}")
    if "seed" in flags:
        try:
            flags["seed"] = int(flags["seed"])
        except ValueError:
            raise ConfigError(f"--seed must be an integer, got {flags['seed']!r}") from None
    return flags


def _load_cfg(flags, required: bool = True) -> ExperimentConfig:
    path = flags.get("config")
    if path is None:
        if required:
            raise ConfigError("--config PATH is required")
        cfg = ExperimentConfig()
    else:
        cfg = load_config(path)
    return apply_overrides(cfg, flags["set"])


def _out_dir(flags) -> str:
    out = flags.get("out")
    if out is None:
        raise ConfigError("--out DIR is required for this command")
    os.makedirs(out, exist_ok=True)
    return out


def _file_sha(path) -> str:
    with open(path, "rb") as f:
        return sha256_hex(f.read())


class RunManifest:
    """Checksummed record of one CLI run, written atomically at the end."""

    def __init__(self, command, cfg: ExperimentConfig, out_dir, seeds=()):
        self.command = list(command)
        self.cfg = cfg
        self.out_dir = out_dir
        self.seeds = [int(s) for s in seeds]
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S")

    def add_input(self, path):
        self.inputs[str(path)] = _file_sha(path)

    def add_output(self, path):
        self.outputs[os.path.relpath(str(path), self.out_dir)] = _file_sha(path)

    def add_output_tree(self, root):
        for dirpath, _, files in os.walk(root):
            for name in sorted(files):
                self.add_output(os.path.join(dirpath, name))

    def write(self):
        doc = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.canonical(),
            "seeds": self.seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "versions": {"diffseg": __version__, "tensor_format": "NTA1", "volume_format": "NVG1"},
        }
        path = os.path.join(self.out_dir, "run_manifest.json")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
        return path


def _case_seed(base_seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _arch_from_cfg(cfg: ExperimentConfig) -> UNetConfig:
    def ints(raw):
        return tuple(int(x) for x in raw.split(",")) if raw.strip() else ()

    return UNetConfig(
        base_width=cfg.get("arch", "base_width"),
        channel_mults=ints(cfg.get("arch", "channel_mults")),
        res_blocks=cfg.get("arch", "res_blocks"),
        attn_levels=ints(cfg.get("arch", "attn_levels")),
        in_channels=cfg.get("arch", "in_channels"),
        out_channels=cfg.get("arch", "out_channels"),
    )


# -- synth-data ----------------------------------------------------------------


def _run_synth_data(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    seed = flags.get("seed", cfg.get("phantom", "seed"))
    manifest = RunManifest(argv, cfg, out, seeds=[seed])
    shape = (cfg.get("phantom", "depth"), cfg.get("phantom", "height"), cfg.get("phantom", "width"))
    groups = (
        ("unlabeled", cfg.get("phantom", "unlabeled_cases"), False),
        ("labeled", cfg.get("phantom", "labeled_cases"), True),
        ("test", cfg.get("phantom", "test_cases"), True),
    )
    lines = []
    for group, count, keep_labels in groups:
        gdir = os.path.join(out, group)
        os.makedirs(gdir, exist_ok=True)
        for i in range(count):
            case = f"{group[0]}{i:03d}"
            spec = PhantomSpec(
                seed=_case_seed(seed, case),
                shape=shape,
                organs=cfg.get("phantom", "organs"),
                noise_sigma=cfg.get("phantom", "noise_sigma"),
            )
            vol = gen_phantom(spec)
            if not keep_labels:
                vol = Volume(vol.data, vol.spacing, labels=None)
            path = os.path.join(gdir, f"{case}.nvg")
            save_volume(vol, path)
            lines.append(f"{group}/{case}.nvg\t{_file_sha(path)}")
    vol_manifest = os.path.join(out, "volumes.tsv")
    with open(vol_manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    manifest.add_output_tree(out)
    manifest.write()
    print(f"wrote {sum(c for _, c, _ in groups)} volumes to {out}")


# -- preprocess ----------------------------------------------------------------


def _read_volume_dir(root, group):
    gdir = os.path.join(root, group)
    if not os.path.isdir(gdir):
        return []
    out = []
    for name in sorted(os.listdir(gdir)):
        if name.endswith(".nvg"):
            out.append((os.path.splitext(name)[0], load_volume(os.path.join(gdir, name))))
    return out


def _run_preprocess(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    input_dir = cfg.get("preprocess", "input_dir")
    if not input_dir:
        raise ConfigError("preprocess.input_dir must be set")
    manifest = RunManifest(argv, cfg, out)
    unlabeled = _read_volume_dir(input_dir, "unlabeled")
    if not unlabeled:
        raise DataError(f"no unlabeled volumes under {input_dir}/unlabeled")
    labeled = _read_volume_dir(input_dir, "labeled")
    test = _read_volume_dir(input_dir, "test")

    spacing_raw = cfg.get("preprocess", "target_spacing")
    if spacing_raw == "median":
        target = median_spacing([v for _, v in unlabeled])
    else:
        parts = tuple(float(x) for x in spacing_raw.split(","))
        if len(parts) != 3:
            raise ConfigError(f"target_spacing needs z,y,x or 'median', got {spacing_raw!r}")
        target = parts

    resampled = {
        group: [(case, resample_volume(vol, target)) for case, vol in vols]
        for group, vols in (("unlabeled", unlabeled), ("labeled", labeled), ("test", test))
    }
    stats = corpus_intensity_stats([v for _, v in resampled["unlabeled"]])
    out_size = cfg.get("preprocess", "out_size")
    for group, vols in resampled.items():
        if not vols:
            continue
        datasets = [
            slice_and_resize(normalize_intensity(vol, stats), case, out_size)
            for case, vol in vols
        ]
        records = [r for ds in datasets for r in ds.records]
        from .data import SliceDataset

        merged = SliceDataset(records, stats=stats)
        save_slice_dataset(merged, os.path.join(out, f"slices_{group}"))
    manifest.add_output_tree(out)
    manifest.write()
    print(f"preprocessed to spacing {tuple(round(s, 4) for s in target)}, "
          f"{out_size}x{out_size} slices at {out}")


# -- pretrain -------------------------------------------------------------------


def _run_pretrain(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    slices_dir = cfg.get("pretrain", "slices_dir")
    if not slices_dir:
        raise ConfigError("pretrain.slices_dir must be set")
    ds = load_slice_dataset(slices_dir)
    seed = flags.get("seed", cfg.get("pretrain", "seed"))
    manifest = RunManifest(argv, cfg, out, seeds=[seed])
    manifest.add_input(os.path.join(slices_dir, "manifest.tsv"))
    pt_cfg = PretrainConfig(
        arch=_arch_from_cfg(cfg),
        T=cfg.get("schedule", "T"),
        beta_start=cfg.get("schedule", "beta_start"),
        beta_end=cfg.get("schedule", "beta_end"),
        schedule_kind=cfg.get("schedule", "kind"),
        iterations=cfg.get("pretrain", "iterations"),
        batch_size=cfg.get("pretrain", "batch_size"),
        lr_start=cfg.get("pretrain", "lr_start"),
        lr_end=cfg.get("pretrain", "lr_end"),
        lr_schedule=cfg.get("pretrain", "lr_schedule"),
        ema_momentum=cfg.get("pretrain", "ema_momentum"),
        checkpoint_every=cfg.get("pretrain", "checkpoint_every"),
        augment_hflip=cfg.get("pretrain", "augment_hflip"),
    )
    result = pretrain(pt_cfg, ds, RngStream(seed), out_dir=out,
                      log_every=cfg.get("pretrain", "log_every"))
    manifest.add_output_tree(out)
    manifest.write()
    final = result.runlog.losses()[-min(100, len(result.runlog.records)):]
    print(f"pretrained {pt_cfg.iterations} iterations; "
          f"final-window mean loss {float(np.mean(final)):.5f}")


# -- sample ---------------------------------------------------------------------


def _parse_windows(raw: str):
    windows = []
    for part in raw.split(","):
        w, _, l = part.strip().partition(":")
        try:
            windows.append((float(w), float(l)))
        except ValueError:
            raise ConfigError(f"window must be W:L, got {part!r}") from None
    if not windows:
        raise ConfigError("need at least one window")
    return windows


def write_pgm(img: np.ndarray, path):
    """8-bit binary portable graymap."""
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"PGM wants a 2-d image, got {arr.shape}")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())
    os.replace(tmp, path)


def window_to_u8(intensity: np.ndarray, width: float, level: float) -> np.ndarray:
    """Window/level gray mapping: [L-W/2, L+W/2] onto [0, 255]."""
    lo = level - width / 2.0
    scaled = np.clip((intensity - lo) / width, 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def sample_grid(ckpt: ModelCheckpoint, count: int, rng: RngStream, windows, out_dir,
                grid_cols: int = 4, batch: int = 8, slices_dir=None) -> list[str]:
    """Sample images from a checkpoint and export windowed PGMs plus a
    contact sheet per window; returns the written paths.

    With ``slices_dir`` the raw samples (clamped to [-1, 1]) are also
    written as a slice dataset, ready for ``evaluate-gen``.
    """
    meta = ckpt.meta
    if "stats.p0_5" not in meta:
        raise DataError("checkpoint metadata lacks normalization stats; cannot invert")
    lo = float(meta["stats.p0_5"])
    hi = float(meta["stats.p99_5"])
    size = int(meta["image_size"])
    model = load_noise_model(ckpt)
    sched = NoiseSchedule.from_meta(meta)
    chunks = []
    done = 0
    while done < count:
        n = min(batch, count - done)
        chunks.append(sample_loop(model.predict, (n, 1, size, size), sched, rng))
        done += n
    samples = np.concatenate(chunks)[:, 0]
    clamped = np.clip(samples, -1.0, 1.0)
    if slices_dir is not None:
        from .data import SliceDataset, SliceRecord

        records = [SliceRecord(image=clamped[i], label=None, case_id="sample", slice_index=i)
                   for i in range(count)]
        save_slice_dataset(SliceDataset(records), slices_dir)
    intensity = (clamped + 1.0) / 2.0 * (hi - lo) + lo
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for width, level in windows:
        tag = f"w{width:g}_l{level:g}"
        mapped = window_to_u8(intensity, width, level)
        for i in range(count):
            p = os.path.join(out_dir, f"sample_{i:03d}_{tag}.pgm")
            write_pgm(mapped[i], p)
            paths.append(p)
        rows = math.ceil(count / grid_cols)
        sheet = np.zeros((rows * size, grid_cols * size), dtype=np.uint8)
        for i in range(count):
            r, c = divmod(i, grid_cols)
            sheet[r * size:(r + 1) * size, c * size:(c + 1) * size] = mapped[i]
        p = os.path.join(out_dir, f"grid_{tag}.pgm")
        write_pgm(sheet, p)
        paths.append(p)
    return paths


def _run_sample(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    ckpt_path = cfg.get("sample", "checkpoint")
    if not ckpt_path:
        raise ConfigError("sample.checkpoint must be set")
    ckpt = ModelCheckpoint.load(ckpt_path)
    seed = flags.get("seed", cfg.get("sample", "seed"))
    manifest = RunManifest(argv, cfg, out, seeds=[seed])
    manifest.add_input(ckpt_path)
    paths = sample_grid(
        ckpt,
        cfg.get("sample", "count"),
        RngStream(seed).substream("sample"),
        _parse_windows(cfg.get("sample", "windows")),
        out,
        grid_cols=cfg.get("sample", "grid_cols"),
        slices_dir=os.path.join(out, "samples_slices"),
    )
    manifest.add_output_tree(out)
    manifest.write()
    print(f"wrote {len(paths)} images to {out}")


# -- finetune -------------------------------------------------------------------


def _resolve_pretrain_ckpt(path: str, use_ema: bool) -> str:
    if use_ema and not path.endswith("_ema.nta"):
        sibling = path[:-4] + "_ema.nta" if path.endswith(".nta") else path + "_ema.nta"
        if os.path.exists(sibling):
            return sibling
    return path


def _finetune_cfg(cfg: ExperimentConfig, arch: UNetConfig | None, n_classes: int) -> FinetuneConfig:
    return FinetuneConfig(
        strategy=cfg.get("finetune", "strategy"),
        n_classes=n_classes,
        t_init=cfg.get("finetune", "t_init"),
        iterations=cfg.get("finetune", "iterations"),
        batch_size=cfg.get("finetune", "batch_size"),
        base_lr=cfg.get("finetune", "base_lr"),
        head_lr_scale=cfg.get("finetune", "head_lr_scale"),
        head_weight_decay=cfg.get("finetune", "head_weight_decay"),
        body_weight_decay=cfg.get("finetune", "body_weight_decay"),
        loss_weight=cfg.get("finetune", "loss_weight"),
        dice_eps=cfg.get("finetune", "dice_eps"),
        head_hidden=cfg.get("finetune", "head_hidden"),
        arch=arch,
        include_middle=cfg.get("finetune", "include_middle"),
        val_fraction=cfg.get("finetune", "val_fraction"),
        eval_every=cfg.get("finetune", "eval_every"),
        per_class_dice=cfg.get("finetune", "per_class_dice"),
    )


def _prepare_finetune(cfg: ExperimentConfig, flags, rng: RngStream):
    slices_dir = cfg.get("finetune", "slices_dir")
    if not slices_dir:
        raise ConfigError("finetune.slices_dir must be set")
    ds = load_slice_dataset(slices_dir)
    if not ds.has_labels:
        raise DataError(f"{slices_dir} holds no labels; fine-tuning needs labeled slices")
    n_classes = ds.class_count()
    ratio = cfg.get("finetune", "label_ratio")
    if ratio < 1.0:
        ds = subset_labeled(
            ds, ratio, rng.substream("subset"),
            require_full_coverage=cfg.get("finetune", "require_coverage"),
        )
    strategy = cfg.get("finetune", "strategy")
    ckpt = None
    if strategy != "scratch":
        ckpt_path = cfg.get("finetune", "checkpoint")
        if not ckpt_path:
            raise ConfigError(f"finetune.checkpoint must be set for strategy {strategy!r}")
        ckpt_path = _resolve_pretrain_ckpt(ckpt_path, cfg.get("finetune", "use_ema"))
        ckpt = ModelCheckpoint.load(ckpt_path)
    return ds, n_classes, ckpt, slices_dir


def _run_finetune(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    seed = flags.get("seed", cfg.get("finetune", "seed"))
    rng = RngStream(seed)
    manifest = RunManifest(argv, cfg, out, seeds=[seed])
    ds, n_classes, ckpt, slices_dir = _prepare_finetune(cfg, flags, rng)
    manifest.add_input(os.path.join(slices_dir, "manifest.tsv"))
    ft_cfg = _finetune_cfg(cfg, _arch_from_cfg(cfg), n_classes)
    ft_cfg.iterations = one_batch_cap(ft_cfg.iterations, len(ds), ft_cfg.batch_size)
    result = finetune(ft_cfg, ckpt, ds, rng, out_dir=out)
    manifest.add_output_tree(out)
    manifest.write()
    print(f"finetuned [{ft_cfg.strategy}] on {len(ds)} slices: "
          f"best val DSC {result.best_val_dsc:.4f} at iteration {result.best_iteration}")


# -- sweep-step -----------------------------------------------------------------


def _parse_steps(raw: str) -> list[int]:
    try:
        a, b, stride = (int(x) for x in raw.split(":"))
    except ValueError:
        raise ConfigError(f"--steps must be A:B:STRIDE, got {raw!r}") from None
    if stride <= 0 or b < a:
        raise ConfigError(f"bad step range {raw!r}")
    return list(range(a, b + 1, stride))


def _run_sweep_step(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    if "steps" not in flags:
        raise ConfigError("sweep-step needs --steps A:B:STRIDE")
    steps = _parse_steps(flags["steps"])
    strategy = cfg.get("finetune", "strategy")
    if strategy not in ("decoder", "linear"):
        raise ConfigError(
            f"sweep-step supports strategies decoder and linear, not {strategy!r} "
            "(scratch has no diffusion step)"
        )
    seed = flags.get("seed", cfg.get("finetune", "seed"))
    manifest = RunManifest(argv, cfg, out, seeds=[seed])
    rows = []
    for t in steps:
        rng = RngStream(seed).substream(f"step-{t}")
        ds, n_classes, ckpt, slices_dir = _prepare_finetune(cfg, flags, rng)
        ft_cfg = _finetune_cfg(cfg, _arch_from_cfg(cfg), n_classes)
        ft_cfg.t_init = t
        result = finetune(ft_cfg, ckpt, ds, rng, out_dir=os.path.join(out, f"step_{t:04d}"))
        rows.append((t, result.best_val_dsc))
        print(f"t_init={t}: best val DSC {result.best_val_dsc:.4f}")
    best_step = max(rows, key=lambda r: r[1])[0]
    summary = os.path.join(out, "sweep_summary.tsv")
    with open(summary, "w") as f:
        f.write("# t_init\tmean_dsc\n")
        for t, dsc in rows:
            f.write(f"{t}\t{dsc:.6f}\n")
        f.write(f"# best_step\t{best_step}\n")
    manifest.add_output_tree(out)
    manifest.write()
    print(f"sweep complete; best step {best_step} (summary at {summary})")


# -- evaluation -----------------------------------------------------------------


def _run_evaluate_seg(argv, flags):
    cfg = _load_cfg(flags)
    out = _out_dir(flags)
    ckpt_path = cfg.get("evaluate", "checkpoint")
    slices_dir = cfg.get("evaluate", "slices_dir")
    if not ckpt_path or not slices_dir:
        raise ConfigError("evaluate.checkpoint and evaluate.slices_dir must be set")
    manifest = RunManifest(argv, cfg, out)
    manifest.add_input(ckpt_path)
    manifest.add_input(os.path.join(slices_dir, "manifest.tsv"))
    ckpt = ModelCheckpoint.load(ckpt_path)
    seg = load_seg_model(ckpt)
    ds = load_slice_dataset(slices_dir)
    if not ds.has_labels:
        raise DataError("evaluate-seg needs labeled slices")
    n_classes = int(ckpt.meta["n_classes"])
    images = ds.image_stack()
    preds = []
    for i in range(0, len(ds), 8):
        preds.extend(seg.predict_labels(images[i:i + 8][:, None]))
    score = seg_scores(preds, [r.label for r in ds], n_classes,
                       case_ids=[r.case_id for r in ds])
    report = format_report(seg_report_rows(score))
    path = os.path.join(out, "seg_report.tsv")
    with open(path, "w") as f:
        f.write(report)
    manifest.add_output_tree(out)
    manifest.write()
    print(report, end="")
    print(f"mean foreground DSC {score.mean_dsc:.4f}, JA {score.mean_ja:.4f}")


def save_feature_set(fs: FeatureSet, path):
    save_weights(
        {"global": fs.global_feats, "spatial": fs.spatial_feats},
        {"extractor": fs.extractor_id, "extractor_seed": str(fs.seed)},
        path,
    )


def load_feature_set(path) -> FeatureSet:
    tensors, meta = load_weights(path)
    if "global" not in tensors or "spatial" not in tensors:
        raise DataError(f"{path} is not a feature archive")
    return FeatureSet(
        tensors["global"], tensors["spatial"],
        meta.get("extractor", "unknown"), int(meta.get("extractor_seed", "0")),
    )


def _cache_dir(out: str) -> str:
    return os.environ.get("DIFFSEG_CACHE", os.path.join(out, "feature_cache"))


def _features_for(path: str, cfg: ExperimentConfig, out: str) -> FeatureSet:
    extractor = cfg.get("evaluate", "extractor")
    seed = cfg.get("evaluate", "extractor_seed")
    if os.path.isfile(path):
        return load_feature_set(path)
    if not os.path.isdir(path):
        raise DataError(f"no such feature archive or slice directory: {path}")
    ds = load_slice_dataset(path)
    cache = _cache_dir(out)
    key = f"{extractor}_{seed}_{ds.content_checksum()[:16]}.nta"
    cached = os.path.join(cache, key)
    if os.path.exists(cached):
        return load_feature_set(cached)
    fs = extract_features(ds.image_stack(), extractor=extractor, seed=seed)
    os.makedirs(cache, exist_ok=True)
    save_feature_set(fs, cached)
    return fs


def _run_evaluate_gen(argv, flags):
    cfg = _load_cfg(flags, required=False)
    out = _out_dir(flags)
    if "real" not in flags or "gen" not in flags:
        raise ConfigError("evaluate-gen needs --real PATH and --gen PATH")
    manifest = RunManifest(argv, cfg, out)
    real = _features_for(flags["real"], cfg, out)
    gen = _features_for(flags["gen"], cfg, out)
    score = gen_scores(real, gen, k=cfg.get("evaluate", "k"))
    report = format_report(gen_report_rows(score))
    path = os.path.join(out, "gen_report.tsv")
    with open(path, "w") as f:
        f.write(report)
    manifest.add_output_tree(out)
    manifest.write()
    print(report, end="")


_RUNNERS = {
    "synth-data": _run_synth_data,
    "preprocess": _run_preprocess,
    "pretrain": _run_pretrain,
    "sample": _run_sample,
    "finetune": _run_finetune,
    "sweep-step": _run_sweep_step,
    "evaluate-seg": _run_evaluate_seg,
    "evaluate-gen": _run_evaluate_gen,
}


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        if not argv:
            raise ConfigError(_USAGE)
        command = argv[0]
        if command not in COMMANDS:
            raise ConfigError(f"unknown subcommand {command!r}\n{_USAGE}")
        flags = _parse_flags(argv[1:])
        _RUNNERS[command](["diffseg", *argv], flags)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
