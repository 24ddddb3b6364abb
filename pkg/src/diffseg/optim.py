"""Adam with per-group learning-rate scaling and decoupled weight decay,
EMA weight tracking, and the finite-difference gradient checker used to
validate the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .nn import Parameter
from .rng import RngStream
from .tensor import no_grad


@dataclass
class ParamGroup:
    """Set of parameter names sharing a learning-rate scale and weight decay."""

    names: frozenset[str]
    lr_scale: float = 1.0
    weight_decay: float = 0.0
    label: str = ""

    def __post_init__(self):
        self.names = frozenset(self.names)
        if self.lr_scale <= 0:
            raise ConfigError(f"lr_scale must be positive, got {self.lr_scale}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _group_of(name: str, groups) -> ParamGroup:
    hits = [g for g in groups if name in g.names]
    if len(hits) != 1:
        raise ConfigError(
            f"parameter {name!r} belongs to {len(hits)} groups; groups must partition the trainable set"
        )
    return hits[0]


def adam_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    state: AdamState,
    groups,
    base_lr: float,
) -> None:
    """One Adam update over all trainable parameters, in name order.

    Effective learning rate is base_lr * group.lr_scale; weight decay is
    decoupled (applied directly to the weights, scaled by the effective
    learning rate). Frozen parameters are untouched.
    """
    if base_lr <= 0:
        raise ConfigError(f"base_lr must be positive, got {base_lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in sorted(params):
        p = params[name]
        if not p.trainable:
            continue
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for trainable parameter {name!r}")
        group = _group_of(name, groups)
        lr = base_lr * group.lr_scale
        dtype = p.data.dtype
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / np.asarray(bc1, dtype=dtype)
        vhat = v / np.asarray(bc2, dtype=dtype)
        upd = mhat / (np.sqrt(vhat) + np.asarray(state.eps, dtype=dtype))
        if group.weight_decay:
            upd = upd + np.asarray(group.weight_decay, dtype=dtype) * p.data
        p.tensor.data -= np.asarray(lr, dtype=dtype) * upd


def _as_array(value) -> np.ndarray:
    if isinstance(value, Parameter):
        return value.data
    return value


def ema_update(ema: dict, live: dict, momentum: float) -> None:
    """In-place ema <- momentum * ema + (1 - momentum) * live, per name."""
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1), got {momentum}")
    if set(ema) != set(live):
        diff = sorted(set(ema) ^ set(live))
        raise ConfigError(f"EMA/live name sets differ: {diff}")
    for name in ema:
        e = _as_array(ema[name])
        l = _as_array(live[name])
        e *= momentum
        e += (1.0 - momentum) * l


def grad_check(
    loss_fn,
    params: dict[str, Parameter],
    probe_count: int = 20,
    epsilon: float = 1e-3,
    rng: RngStream | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``probe_count`` random coordinates of the trainable parameters;
    relative error is |analytic - fd| / max(1, |analytic|) with
    fd = (f(w+eps) - f(w-eps)) / (2 eps).
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    rng = rng or RngStream(0, stream=17)
    names = sorted(n for n, p in params.items() if p.trainable)
    if not names:
        raise ConfigError("grad_check needs at least one trainable parameter")

    for p in params.values():
        p.tensor.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError(f"loss is not finite: {float(loss.data)}")
    loss.backward()
    analytic = {n: np.array(params[n].tensor.grad, copy=True) for n in names}

    sizes = np.array([params[n].data.size for n in names])
    offsets = np.cumsum(sizes)
    total = int(offsets[-1])
    max_rel = 0.0
    for flat_idx in rng.integers(0, total, size=probe_count):
        k = int(np.searchsorted(offsets, flat_idx, side="right"))
        local = int(flat_idx - (offsets[k - 1] if k else 0))
        p = params[names[k]]
        flat = p.data.reshape(-1)
        orig = flat[local]
        with no_grad():
            flat[local] = orig + epsilon
            f_plus = float(loss_fn().data)
            flat[local] = orig - epsilon
            f_minus = float(loss_fn().data)
            flat[local] = orig
        fd = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[names[k]].reshape(-1)[local])
        rel = abs(a - fd) / max(1.0, abs(a))
        max_rel = max(max_rel, rel)
    return max_rel
