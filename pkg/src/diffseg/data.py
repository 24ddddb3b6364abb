"""Volume I/O, the slice-preprocessing pipeline and the synthetic phantom.

Preprocessing follows four steps: (i) resample volumes to a target spacing
(trilinear images, nearest labels); (ii) clip intensities to the corpus
0.5/99.5 percentiles and rescale to [-1, 1], using the unlabeled-corpus
statistics for labeled data too; (iii) split volumes into transverse 2-d
slices; (iv) resize slices (bilinear/nearest), with horizontal flipping as
the only augmentation and only during generative pre-training.

Volumes are stored in the "NVG1" format: magic, u8 has_labels, 3xu32 dims
(D,H,W), 3xf32 spacing, raw little-endian float32 intensities, then raw u8
labels when present. A slice dataset on disk is a directory of per-slice
NVG1 files (D=1) plus a tab-separated manifest with per-file checksums.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .rng import RngStream

VOLUME_MAGIC = b"NVG1"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class Volume:
    """3-d grayscale volume with voxel spacing and an optional label map."""

    data: np.ndarray                      # [D,H,W] float32
    spacing: tuple[float, float, float]   # mm per voxel, (z, y, x)
    labels: np.ndarray | None = None      # [D,H,W] uint8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-d, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive reals, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.data.shape:
                raise DataError(
                    f"label shape {self.labels.shape} != volume shape {self.data.shape}"
                )

    @property
    def shape(self):
        return self.data.shape


def save_volume(vol: Volume, path) -> None:
    blob = bytearray()
    blob += VOLUME_MAGIC
    blob += struct.pack("<B", 1 if vol.labels is not None else 0)
    blob += struct.pack("<3I", *vol.shape)
    blob += struct.pack("<3f", *vol.spacing)
    blob += np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    if vol.labels is not None:
        blob += np.ascontiguousarray(vol.labels, dtype=np.uint8).tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOLUME_MAGIC:
        raise DataError(f"{path}: not an NVG1 volume")
    has_labels = raw[4]
    dims = struct.unpack("<3I", raw[5:17])
    spacing = struct.unpack("<3f", raw[17:29])
    count = int(np.prod(dims, dtype=np.int64))
    need = 29 + 4 * count + (count if has_labels else 0)
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=29).reshape(dims)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=29 + 4 * count)
        labels = labels.reshape(dims)
    return Volume(data=np.array(data), spacing=spacing,
                  labels=None if labels is None else np.array(labels))


# -- resampling ---------------------------------------------------------------


def _axis_coords(n_out: int, n_in: int, scale: float) -> np.ndarray:
    """Source coordinates for output voxel centers (half-pixel convention)."""
    return np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1.0)


def _gather_linear_nd(data: np.ndarray, coords: list[np.ndarray]) -> np.ndarray:
    """Separable multilinear interpolation at an axis-aligned coordinate grid."""
    lo = [np.floor(c).astype(np.int64) for c in coords]
    hi = [np.minimum(l + 1, data.shape[ax] - 1) for ax, l in enumerate(lo)]
    frac = [
        (c - l).astype(np.float32).reshape([-1 if ax == a else 1 for a in range(data.ndim)])
        for ax, (c, l) in enumerate(zip(coords, lo))
    ]
    out = np.zeros([len(c) for c in coords], dtype=np.float32)
    for corner in range(1 << data.ndim):
        idx = []
        weight = np.asarray(1.0, dtype=np.float32)
        for ax in range(data.ndim):
            if corner >> ax & 1:
                idx.append(hi[ax])
                weight = weight * frac[ax]
            else:
                idx.append(lo[ax])
                weight = weight * (1.0 - frac[ax])
        out += data[np.ix_(*idx)] * weight
    return out


def _gather_nearest_nd(data: np.ndarray, coords: list[np.ndarray]) -> np.ndarray:
    idx = [np.clip(np.floor(c + 0.5).astype(np.int64), 0, data.shape[ax] - 1)
           for ax, c in enumerate(coords)]
    return data[np.ix_(*idx)]


def resample_volume(
    vol: Volume,
    target_spacing,
    image_mode: str = "trilinear",
    label_mode: str = "nearest",
) -> Volume:
    """Resample to a new voxel spacing; images trilinear, labels nearest."""
    if image_mode != "trilinear" or label_mode != "nearest":
        raise ConfigError("supported modes: trilinear images, nearest labels")
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ConfigError(f"target spacing must be three positive reals, got {target}")
    if target == vol.spacing:
        return Volume(vol.data.copy(), vol.spacing,
                      None if vol.labels is None else vol.labels.copy())
    new_dims = tuple(
        int(math.floor(d * s / t + 0.5))
        for d, s, t in zip(vol.shape, vol.spacing, target)
    )
    if any(d < 1 for d in new_dims):
        raise DataError(f"target spacing {target} collapses dims to {new_dims}")
    coords = [
        _axis_coords(n_out, n_in, t / s)
        for n_out, n_in, s, t in zip(new_dims, vol.shape, vol.spacing, target)
    ]
    data = _gather_linear_nd(vol.data, coords)
    labels = None if vol.labels is None else _gather_nearest_nd(vol.labels, coords)
    return Volume(data=data, spacing=target, labels=labels)


def median_spacing(volumes) -> tuple[float, float, float]:
    """Per-axis median spacing of a corpus; the default resampling target."""
    spac = np.array([v.spacing for v in volumes], dtype=np.float64)
    if spac.size == 0:
        raise DataError("empty corpus")
    return tuple(float(x) for x in np.median(spac, axis=0))


def resize_slice(img: np.ndarray, out_size: int, nearest: bool = False) -> np.ndarray:
    """Bilinear (or nearest) square resize of one 2-d slice."""
    coords = [_axis_coords(out_size, n, n / out_size) for n in img.shape]
    if nearest:
        return _gather_nearest_nd(img, coords)
    return _gather_linear_nd(img.astype(np.float32, copy=False), coords)


# -- intensity statistics -------------------------------------------------------


@dataclass(frozen=True)
class IntensityStats:
    """Corpus-level percentile/extremum statistics, background included."""

    p0_5: float
    p99_5: float
    min: float
    max: float

    def __post_init__(self):
        if not self.min <= self.p0_5 <= self.p99_5 <= self.max:
            raise DataError(
                f"inconsistent stats: min={self.min} p0.5={self.p0_5} "
                f"p99.5={self.p99_5} max={self.max}"
            )

    def to_meta(self) -> dict[str, str]:
        return {
            "stats.p0_5": repr(self.p0_5),
            "stats.p99_5": repr(self.p99_5),
            "stats.min": repr(self.min),
            "stats.max": repr(self.max),
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "IntensityStats":
        return IntensityStats(
            p0_5=float(meta["stats.p0_5"]),
            p99_5=float(meta["stats.p99_5"]),
            min=float(meta["stats.min"]),
            max=float(meta["stats.max"]),
        )


def corpus_intensity_stats(volumes) -> IntensityStats:
    """Pooled 0.5/99.5 percentiles and extrema over every voxel of a corpus."""
    volumes = list(volumes)
    if not volumes or sum(v.data.size for v in volumes) == 0:
        raise DataError("cannot compute intensity statistics of an empty corpus")
    pooled = np.concatenate([v.data.ravel() for v in volumes])
    lo, hi = np.percentile(pooled, [0.5, 99.5])
    return IntensityStats(
        p0_5=float(lo), p99_5=float(hi), min=float(pooled.min()), max=float(pooled.max())
    )


def normalize_intensity(vol: Volume, stats: IntensityStats) -> Volume:
    """Clip to [p0.5, p99.5], min-max to [0, 1], then shift to [-1, 1]."""
    if stats.p99_5 <= stats.p0_5:
        raise DataError("degenerate corpus: p99.5 must exceed p0.5")
    # float32 bounds keep the arithmetic exactly closed over [-1, 1]
    lo = np.float32(stats.p0_5)
    hi = np.float32(stats.p99_5)
    if hi <= lo:
        raise DataError("percentile gap vanishes in float32")
    v = np.clip(vol.data, lo, hi)
    v = (v - lo) / (hi - lo)
    return Volume(2.0 * v - 1.0, vol.spacing,
                  None if vol.labels is None else vol.labels.copy())


# -- slice datasets -------------------------------------------------------------


@dataclass
class SliceRecord:
    image: np.ndarray             # [H,W] float32 in [-1, 1]
    label: np.ndarray | None      # [H,W] uint8
    case_id: str
    slice_index: int

    def content_bytes(self) -> bytes:
        parts = [self.case_id.encode(), str(self.slice_index).encode(),
                 np.ascontiguousarray(self.image, dtype="<f4").tobytes()]
        if self.label is not None:
            parts.append(np.ascontiguousarray(self.label, dtype=np.uint8).tobytes())
        return b"\x00".join(parts)


class SliceDataset:
    """In-memory slice collection with unique (case, index) provenance."""

    def __init__(self, records, stats: IntensityStats | None = None):
        self.records = list(records)
        self.stats = stats
        keys = [(r.case_id, r.slice_index) for r in self.records]
        if len(set(keys)) != len(keys):
            raise DataError("slice provenance (case id, slice index) must be unique")
        sizes = {r.image.shape for r in self.records}
        if len(sizes) > 1:
            raise DataError(f"slices must share one resolution, found {sorted(sizes)}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> SliceRecord:
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    @property
    def has_labels(self) -> bool:
        return bool(self.records) and all(r.label is not None for r in self.records)

    def class_count(self) -> int:
        if not self.has_labels:
            raise DataError("dataset has no labels")
        return int(max(int(r.label.max()) for r in self.records)) + 1

    def present_classes(self) -> set[int]:
        out: set[int] = set()
        for r in self.records:
            if r.label is not None:
                out.update(np.unique(r.label).tolist())
        return out

    def image_stack(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])

    def label_stack(self) -> np.ndarray:
        if not self.has_labels:
            raise DataError("dataset has no labels")
        return np.stack([r.label for r in self.records])

    def content_checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.content_bytes())
        return h.hexdigest()


def slice_and_resize(vol: Volume, case_id: str, out_size: int = 256) -> SliceDataset:
    """Split along the transverse plane and resize every slice to a square."""
    if out_size < 1:
        raise ConfigError(f"out_size must be positive, got {out_size}")
    records = []
    for i in range(vol.shape[0]):
        img = resize_slice(vol.data[i], out_size)
        lbl = None if vol.labels is None else resize_slice(vol.labels[i], out_size, nearest=True)
        records.append(SliceRecord(image=img, label=lbl, case_id=case_id, slice_index=i))
    return SliceDataset(records)


def concat_datasets(datasets, stats: IntensityStats | None = None) -> SliceDataset:
    records = []
    for ds in datasets:
        records.extend(ds.records)
    return SliceDataset(records, stats=stats)


def augment_hflip(rec: SliceRecord, rng: RngStream, p: float = 0.5) -> SliceRecord:
    """Mirror image (and label, in lockstep) along width with probability p."""
    if p > 0 and float(rng.uniform(())) < p:
        return SliceRecord(
            image=rec.image[:, ::-1].copy(),
            label=None if rec.label is None else rec.label[:, ::-1].copy(),
            case_id=rec.case_id,
            slice_index=rec.slice_index,
        )
    return rec


def subset_labeled(
    ds: SliceDataset,
    ratio: float,
    rng: RngStream,
    require_full_coverage: bool = False,
    max_attempts: int = 100,
) -> SliceDataset:
    """Uniform subset of ceil(ratio * N) slices, deterministic in the stream.

    With the coverage flag, redraws until every foreground class appears at
    least once; raises listing the missing classes if the bound is hit.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    n = len(ds)
    if n == 0:
        raise DataError("cannot subset an empty dataset")
    count = math.ceil(ratio * n)
    if not require_full_coverage:
        chosen = sorted(rng.choice_without_replacement(n, count).tolist())
        return SliceDataset([ds[i] for i in chosen], stats=ds.stats)
    if not ds.has_labels:
        raise DataError("coverage constraint needs a labeled dataset")
    wanted = {c for c in ds.present_classes() if c > 0}
    if not wanted:
        raise DataError("dataset has no foreground classes to cover")
    missing: set[int] = set()
    for _ in range(max_attempts):
        chosen = sorted(rng.choice_without_replacement(n, count).tolist())
        sub = SliceDataset([ds[i] for i in chosen], stats=ds.stats)
        missing = wanted - sub.present_classes()
        if not missing:
            return sub
    raise DataError(
        f"no {count}-slice subset covered all classes in {max_attempts} attempts; "
        f"still missing {sorted(missing)}"
    )


# -- manifest I/O ---------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def save_slice_dataset(ds: SliceDataset, out_dir) -> str:
    """Write per-slice NVG1 files plus the checksum manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for r in ds.records:
        rel = f"{r.case_id}_{r.slice_index:04d}.nvg"
        vol = Volume(
            data=r.image[None],
            spacing=(1.0, 1.0, 1.0),
            labels=None if r.label is None else r.label[None],
        )
        path = os.path.join(out_dir, rel)
        save_volume(vol, path)
        with open(path, "rb") as f:
            digest = sha256_hex(f.read())
        lines.append(f"{rel}\t{r.case_id}\t{r.slice_index}\t{digest}")
    manifest = "\n".join(lines) + "\n"
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    tmp = f"{manifest_path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(manifest)
    os.replace(tmp, manifest_path)
    if ds.stats is not None:
        stats_path = os.path.join(out_dir, "stats.tsv")
        with open(stats_path, "w") as f:
            for k, v in sorted(ds.stats.to_meta().items()):
                f.write(f"{k}\t{v}\n")
    return manifest_path


def load_slice_dataset(in_dir) -> SliceDataset:
    """Read a slice directory back, verifying every file checksum."""
    manifest_path = os.path.join(in_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DataError(f"no {MANIFEST_NAME} in {in_dir}")
    records = []
    with open(manifest_path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            rel, case_id, idx, digest = line.split("\t")
            path = os.path.join(in_dir, rel)
            with open(path, "rb") as g:
                raw = g.read()
            if sha256_hex(raw) != digest:
                raise DataError(f"checksum mismatch for {rel}")
            vol = load_volume(path)
            records.append(
                SliceRecord(
                    image=vol.data[0],
                    label=None if vol.labels is None else vol.labels[0],
                    case_id=case_id,
                    slice_index=int(idx),
                )
            )
    stats = None
    stats_path = os.path.join(in_dir, "stats.tsv")
    if os.path.exists(stats_path):
        meta = {}
        with open(stats_path) as f:
            for line in f:
                k, _, v = line.rstrip("\n").partition("\t")
                meta[k] = v
        stats = IntensityStats.from_meta(meta)
    return SliceDataset(records, stats=stats)


# -- synthetic phantom -----------------------------------------------------------


def default_bands(organs: int) -> tuple[tuple[float, float], ...]:
    """One shared intensity band for every organ: organs are told apart by
    geometry and position, not by brightness."""
    return ((25.0, 95.0),) * organs


# Fractional (z, y, x) anchors and radii of the canonical organ layout.
# Organ identity is carried by where a structure sits and how it is shaped,
# the way abdominal anatomy is consistent across patients.
_ANCHORS = (
    (0.50, 0.35, 0.25), (0.50, 0.35, 0.52), (0.50, 0.35, 0.79),
    (0.50, 0.67, 0.25), (0.50, 0.67, 0.52), (0.50, 0.67, 0.79),
    (0.28, 0.51, 0.38), (0.28, 0.51, 0.66), (0.72, 0.51, 0.38),
    (0.72, 0.51, 0.66), (0.28, 0.25, 0.60), (0.72, 0.79, 0.45),
    (0.30, 0.75, 0.22),
)
_RADII = (
    (0.26, 0.13, 0.14), (0.18, 0.09, 0.07), (0.22, 0.07, 0.12),
    (0.12, 0.11, 0.06), (0.30, 0.06, 0.06), (0.16, 0.12, 0.09),
    (0.10, 0.07, 0.07), (0.10, 0.06, 0.08), (0.08, 0.08, 0.06),
    (0.10, 0.07, 0.06), (0.08, 0.06, 0.07), (0.09, 0.07, 0.07),
    (0.08, 0.06, 0.06),
)


@dataclass
class PhantomSpec:
    """Deterministic synthetic stand-in for an abdominal CT corpus.

    The canonical layout jitters per-organ anchor positions and sizes, so
    cases share an anatomy while no two cases are identical; the scattered
    layout places organs uniformly at random instead.
    """

    seed: int
    shape: tuple[int, int, int] = (40, 64, 64)
    organs: int = 6
    noise_sigma: float = 20.0
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0)
    bands: tuple[tuple[float, float], ...] | None = None
    layout: str = "canonical"
    position_jitter: float = 0.03
    size_jitter: float = 0.15
    radius_frac: tuple[float, float] = (0.08, 0.16)  # scattered layout only
    background: tuple[float, float] = (-150.0, 60.0)
    max_attempts: int = 200

    def __post_init__(self):
        if not 1 <= self.organs <= 13:
            raise ConfigError(f"organ count must be in [1, 13], got {self.organs}")
        if any(d < 32 for d in self.shape):
            raise ConfigError(f"grid must be at least 32 per axis, got {self.shape}")
        if self.bands is not None and len(self.bands) != self.organs:
            raise ConfigError("need one intensity band per organ")
        if self.layout not in ("canonical", "scattered"):
            raise ConfigError(f"unknown layout {self.layout!r}")


def _propose_geometry(spec: PhantomSpec, organ: int, rng: RngStream, dims: np.ndarray):
    if spec.layout == "canonical":
        anchor = np.array(_ANCHORS[organ - 1])
        base_r = np.array(_RADII[organ - 1])
        center = (anchor + (rng.uniform((3,)) * 2.0 - 1.0) * spec.position_jitter) * dims
        radii = base_r * (1.0 + (rng.uniform((3,)) * 2.0 - 1.0) * spec.size_jitter) * dims
    else:
        frac = spec.radius_frac[0] + rng.uniform((3,)) * (
            spec.radius_frac[1] - spec.radius_frac[0]
        )
        radii = frac * dims
        margin = radii + 1.0
        if np.any(dims - 2.0 * margin <= 0):
            raise ConfigError(
                f"radius range {spec.radius_frac} leaves no room in grid {spec.shape}"
            )
        center = margin + rng.uniform((3,)) * (dims - 2.0 * margin)
    return center, np.maximum(radii, 2.0)


def gen_phantom(spec: PhantomSpec) -> Volume:
    """Background gradient + disjoint soft-edged ellipsoids + Gaussian noise.

    The label map is exact ellipsoid membership (0 = background, 1..K =
    organs); with zero noise every organ voxel lies inside its band.
    Overlap is checked exactly on the voxel grid; a proposal that clips the
    volume border or touches an earlier organ is redrawn.
    """
    rng = RngStream(spec.seed).substream("phantom")
    D, H, W = spec.shape
    bands = spec.bands if spec.bands is not None else default_bands(spec.organs)

    base, grad_amp = spec.background
    gz, gy, gx = ((rng.uniform((3,)) * 2.0 - 1.0) * grad_amp).astype(np.float32)
    zz = np.linspace(0.0, 1.0, D, dtype=np.float32)[:, None, None]
    yy = np.linspace(0.0, 1.0, H, dtype=np.float32)[None, :, None]
    xx = np.linspace(0.0, 1.0, W, dtype=np.float32)[None, None, :]
    data = np.asarray(base, dtype=np.float32) + gz * zz + gy * yy + gx * xx
    data = np.broadcast_to(data, spec.shape).copy()
    labels = np.zeros(spec.shape, dtype=np.uint8)

    dims = np.array(spec.shape, dtype=np.float64)
    for organ in range(1, spec.organs + 1):
        lo_b, hi_b = bands[organ - 1]
        for _ in range(spec.max_attempts):
            center, radii = _propose_geometry(spec, organ, rng, dims)
            if np.any(center - radii < 1.0) or np.any(center + radii > dims - 1.0):
                continue
            z0, y0, x0 = (int(math.floor(c - r)) for c, r in zip(center, radii))
            z1, y1, x1 = (
                int(min(n, math.ceil(c + r) + 1))
                for c, r, n in zip(center, radii, spec.shape)
            )
            zi = (np.arange(z0, z1, dtype=np.float64) - center[0]) / radii[0]
            yi = (np.arange(y0, y1, dtype=np.float64) - center[1]) / radii[1]
            xi = (np.arange(x0, x1, dtype=np.float64) - center[2]) / radii[2]
            r2 = zi[:, None, None] ** 2 + yi[None, :, None] ** 2 + xi[None, None, :] ** 2
            inside = r2 <= 1.0
            box_labels = labels[z0:z1, y0:y1, x0:x1]
            if np.any(box_labels[inside]):
                continue  # exact-grid overlap with an earlier organ
            rhat = np.sqrt(np.clip(r2, 0.0, 1.0))
            profile = 0.5 + 0.5 * np.cos(math.pi * rhat)  # 1 at center, 0 at rim
            value = lo_b + (hi_b - lo_b) * profile
            data[z0:z1, y0:y1, x0:x1][inside] = value[inside].astype(np.float32)
            box_labels[inside] = organ
            break
        else:
            raise DataError(
                f"could not place organ {organ} without overlap "
                f"in {spec.max_attempts} attempts"
            )

    if spec.noise_sigma > 0:
        data = data + rng.normal(spec.shape) * np.float32(spec.noise_sigma)
    return Volume(data=data, spacing=spec.spacing, labels=labels)
