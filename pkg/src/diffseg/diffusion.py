"""Noise schedules and the forward/reverse diffusion processes.

The forward chain q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I)
admits the closed form q(x_t | x_0) = N(sqrt(abar_t) x_0, (1-abar_t) I)
with alpha_t = 1 - beta_t and abar_t the running product. The reverse
step predicts the noise component and uses the fixed posterior variance
beta_tilde_t; the training objective is the mean-squared error between
drawn and predicted noise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .rng import RngStream
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/abar tables for a chain of length T.

    Tables are float64 and 0-indexed internally; the accessors take the
    1-based step t used everywhere else, with abar(0) defined as 1.
    """

    T: int
    betas: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ConfigError(f"beta table must have length T={self.T}, got {betas.shape}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("all betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise DataError(f"step t={t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
        self._check(t)
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def to_meta(self) -> dict[str, str]:
        meta = {"schedule.T": str(self.T), "schedule.kind": self.kind}
        if self.kind == "linear":
            meta["schedule.beta_start"] = repr(float(self.betas[0]))
            meta["schedule.beta_end"] = repr(float(self.betas[-1]))
        return meta

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "NoiseSchedule":
        kind = meta.get("schedule.kind", "linear")
        T = int(meta["schedule.T"])
        if kind == "cosine":
            return make_schedule(T, 0.0, 0.0, kind="cosine")
        return make_schedule(
            T, float(meta["schedule.beta_start"]), float(meta["schedule.beta_end"]), kind=kind
        )


def make_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule; ``linear`` interpolates beta_1..beta_T."""
    if T < 1:
        raise ConfigError(f"chain length T must be >= 1, got {T}")
    if kind == "linear":
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )
        if T == 1:
            betas = np.array([beta_start])
        else:
            betas = beta_start + (beta_end - beta_start) * np.arange(T) / (T - 1)
    elif kind == "cosine":
        # squared-cosine abar with the usual 0.008 offset, betas clipped at 0.999
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T=T, betas=betas, kind=kind)


def _per_item(values: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Gather a per-step table at t (scalar or per-item vector), shaped to broadcast."""
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        return np.asarray(values[int(t_arr) - 1], dtype=like.dtype)
    if np.any(t_arr < 1) or np.any(t_arr > len(values)):
        raise DataError(f"step values outside [1, {len(values)}]")
    shape = (len(t_arr),) + (1,) * (like.ndim - 1)
    return values[t_arr - 1].astype(like.dtype).reshape(shape)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Jump directly from x_0 to x_t: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    ``t`` is a 1-based step, scalar or one value per leading-axis item.
    """
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        sched._check(int(t))
    if eps.shape != x0.shape:
        raise DataError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = _per_item(sched.alpha_bars, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One forward noising step: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) noise."""
    b = sched.beta(t)
    return np.sqrt(1.0 - b).astype(x_prev.dtype) * x_prev + np.sqrt(b).astype(x_prev.dtype) * noise


def posterior_mu(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean: (x_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    sched._check(t)
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(eps_hat))):
        raise NumericError(f"non-finite input to posterior_mu at t={t}")
    a = sched.alpha(t)
    b = sched.beta(t)
    ab = sched.alpha_bar(t)
    coeff = np.asarray(b / math.sqrt(1.0 - ab), dtype=x_t.dtype)
    return (x_t - coeff * eps_hat) / np.asarray(math.sqrt(a), dtype=x_t.dtype)


def p_sample_step(
    x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule, noise: np.ndarray
) -> np.ndarray:
    """One reverse step: posterior mean plus sigma_t * noise, sigma_1 = 0."""
    mu = posterior_mu(x_t, t, eps_hat, sched)
    if t == 1:
        return mu
    sigma = math.sqrt(sched.posterior_var(t))
    return mu + np.asarray(sigma, dtype=x_t.dtype) * noise


def _model_eps(model, x: np.ndarray, t) -> np.ndarray:
    out = model(x, t)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def sample_loop(model, shape, sched: NoiseSchedule, rng: RngStream, x_init=None) -> np.ndarray:
    """Draw x_T ~ N(0, I) and denoise down to x_0 (raw, unclamped values).

    ``model`` maps an ndarray x_t and step t to the predicted noise of the
    same shape (a built network's ``predict`` method fits); clamp the result
    to [-1, 1] only when exporting images.
    """
    from .tensor import no_grad

    x = np.asarray(x_init, dtype=np.float32) if x_init is not None else rng.normal(shape)
    with no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = _model_eps(model, x, t)
            if eps_hat.shape != x.shape:
                raise DataError(
                    f"model output shape {eps_hat.shape} != state shape {x.shape} at t={t}"
                )
            noise = rng.normal(shape) if t > 1 else np.zeros(shape, dtype=np.float32)
            x = p_sample_step(x, t, eps_hat, sched, noise)
    return x


def ddpm_loss(model, x0: np.ndarray, rng: RngStream, sched: NoiseSchedule) -> Tensor:
    """Noise-prediction MSE on a batch: t ~ U[1,T] per item, eps ~ N(0,I).

    Returns the scalar loss tensor; backpropagate through the model's
    prediction only (x_t and eps are constants).
    """
    lo, hi = float(x0.min()), float(x0.max())
    if lo < -1.5 or hi > 1.5:
        warnings.warn(
            f"ddpm_loss input range [{lo:.3g}, {hi:.3g}] outside [-1.5, 1.5]; "
            "check intensity normalization",
            RuntimeWarning,
            stacklevel=2,
        )
    B = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.normal(x0.shape, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    pred = model(Tensor(x_t), t)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding: sin then cos at frequencies 10000^(-2i/dim).

    ``t`` may be a scalar (returns [dim]) or a vector (returns [N, dim]).
    """
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise DataError("step values must be non-negative")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = t_arr[..., None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return emb.astype(np.float32)
