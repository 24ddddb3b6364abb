"""Segmentation scores (Dice, Jaccard) and generative-quality metrics
(Fréchet distances, k-NN precision/recall/F1) with a pluggable feature
extractor.

The default extractor ("rfcnn-v1") is a frozen random-filter CNN with a
documented seed: scores are deterministic and internally comparable across
runs, but not numerically comparable to values produced with a pretrained
classifier embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import resize_slice
from .errors import ConfigError, DataError, NumericError
from .nn import fan_in_normal
from .rng import RngStream
from . import tensor as T
from .tensor import Tensor, no_grad


# -- segmentation ---------------------------------------------------------------


@dataclass
class SegScore:
    """Per-class and mean Dice/Jaccard over foreground classes 1..C-1."""

    dsc: dict[int, float]
    ja: dict[int, float]
    evaluated: dict[int, bool]
    mean_dsc: float
    mean_ja: float
    n_classes: int


def _confusion(preds, gts, n_classes: int) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != label shape {gt.shape}")
        if pred.min() < 0 or pred.max() >= n_classes or gt.min() < 0 or gt.max() >= n_classes:
            raise DataError(f"class values outside [0, {n_classes - 1}]")
        flat = pred.astype(np.int64).ravel() * n_classes + gt.astype(np.int64).ravel()
        conf += np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return conf


def _scores_from_confusion(conf: np.ndarray) -> SegScore:
    n_classes = conf.shape[0]
    dsc, ja, evaluated = {}, {}, {}
    for c in range(1, n_classes):
        inter = float(conf[c, c])
        p = float(conf[c, :].sum())
        g = float(conf[:, c].sum())
        evaluated[c] = (p + g) > 0
        if evaluated[c]:
            dsc[c] = 2.0 * inter / (p + g)
            ja[c] = inter / (p + g - inter)
        else:
            dsc[c] = float("nan")
            ja[c] = float("nan")
    used = [c for c in range(1, n_classes) if evaluated[c]]
    mean_dsc = float(np.mean([dsc[c] for c in used])) if used else float("nan")
    mean_ja = float(np.mean([ja[c] for c in used])) if used else float("nan")
    return SegScore(dsc=dsc, ja=ja, evaluated=evaluated,
                    mean_dsc=mean_dsc, mean_ja=mean_ja, n_classes=n_classes)


def seg_scores(preds, gts, n_classes: int, case_ids=None, per_case: bool = False) -> SegScore:
    """Dice and Jaccard from counts accumulated over the whole evaluation set.

    Classes absent from both prediction and ground truth are excluded from
    the mean; predicted-but-absent classes score 0. With ``per_case`` the
    per-class scores are averaged over cases instead (needs ``case_ids``).
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} labels")
    if not preds:
        raise DataError("empty evaluation set")
    if not per_case:
        return _scores_from_confusion(_confusion(preds, gts, n_classes))
    if case_ids is None or len(case_ids) != len(preds):
        raise ConfigError("per_case scoring needs one case id per slice")
    by_case: dict[str, list[int]] = {}
    for i, cid in enumerate(case_ids):
        by_case.setdefault(cid, []).append(i)
    case_scores = [
        _scores_from_confusion(_confusion([preds[i] for i in idx], [gts[i] for i in idx], n_classes))
        for idx in by_case.values()
    ]
    dsc, ja, evaluated = {}, {}, {}
    for c in range(1, n_classes):
        vals = [(s.dsc[c], s.ja[c]) for s in case_scores if s.evaluated[c]]
        evaluated[c] = bool(vals)
        dsc[c] = float(np.mean([v[0] for v in vals])) if vals else float("nan")
        ja[c] = float(np.mean([v[1] for v in vals])) if vals else float("nan")
    used = [c for c in range(1, n_classes) if evaluated[c]]
    return SegScore(
        dsc=dsc, ja=ja, evaluated=evaluated,
        mean_dsc=float(np.mean([dsc[c] for c in used])) if used else float("nan"),
        mean_ja=float(np.mean([ja[c] for c in used])) if used else float("nan"),
        n_classes=n_classes,
    )


# -- feature extraction -----------------------------------------------------------


@dataclass
class FeatureSet:
    """Global [N, d] and spatial [N, d_s] feature rows for one image set."""

    global_feats: np.ndarray
    spatial_feats: np.ndarray
    extractor_id: str
    seed: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.global_feats)) and np.all(np.isfinite(self.spatial_feats))):
            raise NumericError("feature matrices must be finite")
        if self.global_feats.shape[0] != self.spatial_feats.shape[0]:
            raise DataError("global and spatial feature row counts differ")


DEFAULT_EXTRACTOR = "rfcnn-v1"
DEFAULT_EXTRACTOR_SEED = 90210


class _RandomFilterCNN:
    """Three frozen conv+pool stages on 32x32 input.

    Stage outputs: 16x16x16 -> 16x8x8 (spatial tap, d_s=1024) -> 64x4x4,
    globally averaged to the d=64 feature.
    """

    def __init__(self, seed: int):
        rng = RngStream(seed).substream(DEFAULT_EXTRACTOR)
        self.w1 = Tensor(fan_in_normal(rng, (16, 1, 3, 3), 9))
        self.w2 = Tensor(fan_in_normal(rng, (16, 16, 3, 3), 16 * 9))
        self.w3 = Tensor(fan_in_normal(rng, (64, 16, 3, 3), 16 * 9))

    def __call__(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            h = Tensor(batch)
            h = T.avg_pool2d(T.relu(T.conv2d(h, self.w1, padding=1)))
            h = T.avg_pool2d(T.relu(T.conv2d(h, self.w2, padding=1)))
            spatial = h.data.reshape(h.shape[0], -1)
            h = T.avg_pool2d(T.relu(T.conv2d(h, self.w3, padding=1)))
            global_ = h.data.mean(axis=(2, 3))
        return global_, spatial


def extract_features(
    images: np.ndarray,
    extractor: str = DEFAULT_EXTRACTOR,
    seed: int = DEFAULT_EXTRACTOR_SEED,
    batch: int = 64,
) -> FeatureSet:
    """Deterministic feature rows for a stack of same-resolution images.

    ``images`` is [N, H, W] or [N, 1, H, W] with values in [-1, 1]. The
    "pixels" extractor returns the 8x8-resized image itself as both feature
    kinds (degenerate; used to couple FID and sFID in tests).
    """
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim == 4 and imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    if imgs.ndim != 3:
        raise DataError(f"expected [N, H, W] images, got shape {imgs.shape}")
    if extractor == "pixels":
        flat = np.stack([resize_slice(im, 8).reshape(-1) for im in imgs])
        return FeatureSet(flat, flat.copy(), extractor, seed)
    if extractor != DEFAULT_EXTRACTOR:
        raise ConfigError(f"unknown extractor {extractor!r}")
    net = _RandomFilterCNN(seed)
    resized = np.stack([resize_slice(im, 32) for im in imgs])[:, None]
    g_rows, s_rows = [], []
    for i in range(0, len(resized), batch):
        g, s = net(resized[i:i + batch])
        g_rows.append(g)
        s_rows.append(s)
    return FeatureSet(np.concatenate(g_rows), np.concatenate(s_rows), extractor, seed)


# -- Frechet distance ---------------------------------------------------------------


def _psd_sqrt_trace_product(s1: np.ndarray, s2: np.ndarray, tol: float) -> float:
    """Tr((S1 S2)^1/2) via eigendecomposition of the symmetrized product."""
    w1, v1 = np.linalg.eigh(s1)
    scale = max(1.0, float(np.max(np.abs(w1))))
    if np.min(w1) < -tol * scale:
        raise NumericError(f"covariance has negative eigenvalue {np.min(w1)}")
    root = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    m = root @ s2 @ root
    m = (m + m.T) / 2.0
    w = np.linalg.eigvalsh(m)
    scale = max(1.0, float(np.max(np.abs(w))))
    if np.min(w) < -tol * scale:
        raise NumericError(f"product matrix has negative eigenvalue {np.min(w)}")
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def frechet_from_moments(mu1, s1, mu2, s2, tol: float = 1e-6) -> float:
    """Squared Fréchet distance between two Gaussians given their moments."""
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    s1 = np.atleast_2d(np.asarray(s1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
        raise NumericError("non-finite covariance")
    diff = float(np.sum((mu1 - mu2) ** 2))
    tr_cross = _psd_sqrt_trace_product(s1, s2, tol)
    return diff + float(np.trace(s1) + np.trace(s2)) - 2.0 * tr_cross


def frechet_distance(rows_a: np.ndarray, rows_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature-row sets."""
    a = np.asarray(rows_a, dtype=np.float64)
    b = np.asarray(rows_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(f"feature sets must be [N, d] with equal d, got {a.shape}, {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DataError("need at least two rows per set to fit a covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    s_a = np.atleast_2d(np.cov(a, rowvar=False))
    s_b = np.atleast_2d(np.cov(b, rowvar=False))
    return frechet_from_moments(mu_a, s_a, mu_b, s_b)


# -- k-NN precision / recall ---------------------------------------------------------


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = np.clip(aa + bb - 2.0 * (a @ b.T), 0.0, None)
    return np.sqrt(d2)


def _knn_radii(rows: np.ndarray, k: int) -> np.ndarray:
    d = _pairwise_dist(rows, rows)
    # row-sorted position k skips the self-distance at position 0
    return np.partition(d, k, axis=1)[:, k]


def precision_recall_f1(real_rows: np.ndarray, gen_rows: np.ndarray, k: int = 3):
    """k-NN manifold precision/recall/F1 between feature-row sets.

    A point's radius is the distance to its k-th nearest neighbour within
    its own set; precision is the fraction of generated points inside some
    real point's ball, recall the converse. Duplicate rows give radius 0,
    which still covers their duplicates (balls are closed).
    """
    real = np.asarray(real_rows, dtype=np.float64)
    gen = np.asarray(gen_rows, dtype=np.float64)
    if real.shape[0] < k + 1 or gen.shape[0] < k + 1:
        raise DataError(f"need at least k+1={k + 1} rows per set")
    if real.shape[1] != gen.shape[1]:
        raise DataError("feature dimensions differ")
    radius_real = _knn_radii(real, k)
    radius_gen = _knn_radii(gen, k)
    d_gen_real = _pairwise_dist(gen, real)
    precision = float(np.mean(np.any(d_gen_real <= radius_real[None, :], axis=1)))
    recall = float(np.mean(np.any(d_gen_real.T <= radius_gen[None, :], axis=1)))
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class GenScore:
    fid: float
    sfid: float
    precision: float
    recall: float
    f1: float
    n_real: int
    n_gen: int


def gen_scores(real: FeatureSet, gen: FeatureSet, k: int = 3) -> GenScore:
    """All generative metrics between a real and a generated feature set."""
    if real.extractor_id != gen.extractor_id or real.seed != gen.seed:
        raise ConfigError("feature sets come from different extractors")
    p, r, f1 = precision_recall_f1(real.global_feats, gen.global_feats, k=k)
    return GenScore(
        fid=frechet_distance(real.global_feats, gen.global_feats),
        sfid=frechet_distance(real.spatial_feats, gen.spatial_feats),
        precision=p,
        recall=r,
        f1=f1,
        n_real=real.global_feats.shape[0],
        n_gen=gen.global_feats.shape[0],
    )


# -- reporting ---------------------------------------------------------------------

NA_THRESHOLD = 0.01  # organ-level scores below 1% print as NA


def seg_report_rows(score: SegScore) -> list[tuple[str, str, str]]:
    rows = []
    for c in range(1, score.n_classes):
        if not score.evaluated[c]:
            continue
        dsc = score.dsc[c]
        ja = score.ja[c]
        rows.append(("dsc", str(c), "NA" if dsc < NA_THRESHOLD else f"{dsc:.6f}"))
        rows.append(("ja", str(c), "NA" if ja < NA_THRESHOLD else f"{ja:.6f}"))
    rows.append(("mean_dsc", "-", f"{score.mean_dsc:.6f}"))
    rows.append(("mean_ja", "-", f"{score.mean_ja:.6f}"))
    return rows


def gen_report_rows(score: GenScore) -> list[tuple[str, str, str]]:
    return [
        ("fid", "-", f"{score.fid:.6f}"),
        ("sfid", "-", f"{score.sfid:.6f}"),
        ("precision", "-", f"{score.precision:.6f}"),
        ("recall", "-", f"{score.recall:.6f}"),
        ("f1", "-", f"{score.f1:.6f}"),
        ("n_real", "-", str(score.n_real)),
        ("n_gen", "-", str(score.n_gen)),
    ]


def format_report(rows) -> str:
    return "\n".join("\t".join(r) for r in rows) + "\n"
