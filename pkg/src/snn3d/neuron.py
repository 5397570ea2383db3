"""Spiking neuron dynamics with surrogate-gradient spikes.

Three membrane models share one stepping loop:

* ``if``         H = V + X
* ``lif``        H = V + (X - (V - V_reset)) / tau
* ``parametric`` H = l[t] * V + i[t] * X, with per-timestep learnable ``l``
  and ``i`` and a learnable firing magnitude ``v_re``.

IF/LIF default to the plain threshold with hard reset; the parametric neuron
defaults to the ``v_re``-scaled threshold with soft reset.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype, record

KINDS = ("if", "lif", "parametric")
V_RE_MIN = 0.05

_smooth = threading.local()


@dataclass(frozen=True)
class SurrogateConfig:
    kind: str = "rectangular"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rectangular", "arctan"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError(f"surrogate width must be positive, got {self.alpha}")

    def derivative(self, x: np.ndarray) -> np.ndarray:
        a = x.dtype.type(self.alpha)
        if self.kind == "rectangular":
            return (np.abs(x) <= a / 2).astype(x.dtype) / a
        return (a / np.pi) / (1 + (np.pi * a * x) ** 2)

    def primitive(self, x: np.ndarray) -> np.ndarray:
        """Smooth stand-in for the step whose derivative is :meth:`derivative`."""
        a = x.dtype.type(self.alpha)
        if self.kind == "rectangular":
            return np.clip(x / a + 0.5, 0, 1)
        return np.arctan(np.pi * a * x) / np.pi**2 + 0.5


def surrogate_derivative(x, cfg: SurrogateConfig):
    if isinstance(x, Tensor):
        return Tensor._wrap(cfg.derivative(x.data))
    return cfg.derivative(np.asarray(x, dtype=default_dtype()))


@contextlib.contextmanager
def smooth_spikes():
    """Replace the Heaviside forward by the surrogate primitive (gradient checks only)."""
    old = getattr(_smooth, "on", False)
    _smooth.on = True
    try:
        yield
    finally:
        _smooth.on = old


def spike(x: Tensor, cfg: SurrogateConfig) -> Tensor:
    """theta(x) with theta(0) = 1; backward uses the surrogate derivative at x."""
    xd = x.data
    if getattr(_smooth, "on", False):
        out = cfg.primitive(xd)
    else:
        out = (xd >= 0).astype(xd.dtype)
    return record((x,), out, lambda g: (g * cfg.derivative(xd),))


@dataclass
class NeuronParams:
    """Neuron hyperparameters and, for the parametric kind, its learnable tensors.

    ``l`` and ``i`` have one entry per time step and are shared across
    channels and positions; ``v_re`` is a single learnable scalar.
    """

    kind: str = "parametric"
    v_th: float = 1.0
    v_reset: float = 0.0
    tau: float = 2.0
    l: Tensor | None = None
    i: Tensor | None = None
    v_re: Tensor | None = None
    spike_rule: str | None = None
    reset_rule: str | None = None
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown neuron kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "lif" and not self.tau > 1:
            raise ValueError(f"LIF time constant must exceed 1, got {self.tau}")
        if self.kind == "parametric":
            if self.l is None or self.i is None or self.v_re is None:
                raise ValueError("parametric neuron needs l, i and v_re tensors")
            if self.l.shape != self.i.shape or self.l.ndim != 1:
                raise ValueError(f"l {self.l.shape} and i {self.i.shape} must be equal-length vectors")
        for rule, allowed in ((self.spike_rule, ("plain", "scaled")), (self.reset_rule, ("hard", "soft"))):
            if rule is not None and rule not in allowed:
                raise ValueError(f"unknown rule {rule!r}; expected one of {allowed}")
        if self.spike_rule == "scaled" or self.reset_rule == "soft":
            if self.v_re is None:
                raise ValueError("scaled threshold and soft reset need v_re")

    @classmethod
    def parametric(cls, T: int, l: float = 0.5, i: float = 0.5, v_re: float = 1.0, **kw) -> "NeuronParams":
        dt = default_dtype()
        return cls(
            kind="parametric",
            l=Tensor(np.full(T, l, dtype=dt), requires_grad=True, name="l"),
            i=Tensor(np.full(T, i, dtype=dt), requires_grad=True, name="i"),
            v_re=Tensor(np.asarray(v_re, dtype=dt), requires_grad=True, name="v_re"),
            **kw,
        )

    @property
    def T(self) -> int | None:
        return None if self.l is None else self.l.shape[0]

    @property
    def rules(self) -> tuple[str, str]:
        if self.kind == "parametric":
            return self.spike_rule or "scaled", self.reset_rule or "soft"
        return self.spike_rule or "plain", self.reset_rule or "hard"

    def tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in (("l", self.l), ("i", self.i), ("v_re", self.v_re)) if v is not None}


def membrane_update(v_prev: Tensor, x_t: Tensor, params: NeuronParams, t: int) -> Tensor:
    if params.kind == "if":
        return ops.add(v_prev, x_t)
    if params.kind == "lif":
        leak = ops.sub(x_t, ops.add_scalar(v_prev, -params.v_reset))
        return ops.add(v_prev, ops.mul_scalar(leak, 1.0 / params.tau))
    T = params.T
    if not 0 <= t < T:
        raise IndexError(f"time index {t} out of range for a {T}-step parametric neuron")
    l_t = ops.getitem(params.l, t)
    i_t = ops.getitem(params.i, t)
    return ops.add(ops.scale(v_prev, l_t), ops.scale(x_t, i_t))


def spike_threshold(h_t: Tensor, params: NeuronParams, rule: str, surrogate: SurrogateConfig | None = None) -> Tensor:
    cfg = surrogate or params.surrogate
    if rule == "plain":
        return spike(ops.add_scalar(h_t, -params.v_th), cfg)
    if rule == "scaled":
        return spike(ops.add_scalar(ops.div_scalar(h_t, params.v_re), -params.v_th), cfg)
    raise ValueError(f"unknown spike rule {rule!r}")


def reset(h_t: Tensor, s_t: Tensor, params: NeuronParams, rule: str) -> Tensor:
    if rule == "hard":
        kept = ops.sub(h_t, ops.mul(h_t, s_t))
        if params.v_reset == 0:
            return kept
        return ops.add(kept, ops.mul_scalar(s_t, params.v_reset))
    if rule == "soft":
        return ops.sub(h_t, ops.scale(s_t, params.v_re))
    raise ValueError(f"unknown reset rule {rule!r}")


def _run(x: Tensor, params: NeuronParams, init: str, surrogate: SurrogateConfig | None, keep_traces: bool):
    if x.ndim < 2:
        raise ValueError(f"neuron input must be N×T×…, got shape {x.shape}")
    T = x.shape[1]
    if T == 0:
        raise ValueError("neuron input has no time steps")
    if params.kind == "parametric" and params.T != T:
        raise ValueError(f"parametric neuron built for T={params.T} received T={T}")
    spike_rule, reset_rule = params.rules
    if init == "zero":
        v = Tensor._wrap(np.zeros((x.shape[0],) + x.shape[2:], dtype=x.dtype))
    elif init == "recurrence":
        v = ops.select_time(x, T - 1)
    else:
        raise ValueError(f"unknown membrane initialisation {init!r}")
    spikes, hs, vs = [], [], []
    for t in range(T):
        h = membrane_update(v, ops.select_time(x, t), params, t)
        s = spike_threshold(h, params, spike_rule, surrogate)
        v = reset(h, s, params, reset_rule)
        spikes.append(s)
        if keep_traces:
            hs.append(h)
            vs.append(v)
    out = ops.stack_time(spikes)
    if keep_traces:
        return out, ops.stack_time(hs), ops.stack_time(vs)
    return out


def neuron_forward(x: Tensor, params: NeuronParams, init: str = "zero", surrogate: SurrogateConfig | None = None) -> Tensor:
    """Spike train for an N×T×… input current.

    ``init="recurrence"`` seeds the membrane with the last step's raw input
    current ``x[:, T-1]`` instead of zero; that edge is differentiable.
    """
    return _run(x, params, init, surrogate, keep_traces=False)


def neuron_forward_traced(x: Tensor, params: NeuronParams, init: str = "zero", surrogate: SurrogateConfig | None = None):
    """Like :func:`neuron_forward` but also returns the H and V sequences."""
    return _run(x, params, init, surrogate, keep_traces=True)


def time_permutations(n: int, T: int, seed: int, sample_ids=None) -> np.ndarray:
    """One uniform permutation of range(T) per sample, keyed by (seed, sample id)."""
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    if ids.shape != (n,):
        raise ValueError(f"expected {n} sample ids, got {ids.shape}")
    return np.stack([np.random.default_rng([int(seed), int(sid)]).permutation(T) for sid in ids]) if n else np.zeros((0, T), dtype=np.intp)


def shuffle_time(x: Tensor, seed: int, sample_ids=None) -> Tensor:
    """Permute the time slices of each sample of an N×T×… tensor."""
    n, T = x.shape[:2]
    if T < 1:
        raise ValueError("shuffle_time needs at least one time step")
    return ops.permute_time(x, time_permutations(n, T, seed, sample_ids))


def clamp_v_re(params: NeuronParams) -> None:
    if params.v_re is not None:
        np.maximum(params.v_re.data, V_RE_MIN, out=params.v_re.data)
