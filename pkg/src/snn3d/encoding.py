"""Static-image to spike-domain encoders.

``direct`` repeats a learned feature map over time, ``ttfs`` turns pixel
intensity into the latency of a single spike, ``hybrid`` concatenates the two
along the time axis, and ``sequence`` marks inputs that already carry a time
axis (the temporal-order task).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype

ENCODER_KINDS = ("direct", "ttfs", "hybrid", "sequence")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "direct"
    T: int = 4
    t_direct: int | None = None
    t_ttfs: int | None = None

    def __post_init__(self):
        if self.kind == "gac":
            raise NotImplementedError("gated attention coding is not provided by this package")
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.T < 1:
            raise ValueError(f"T must be at least 1, got {self.T}")
        if self.kind == "hybrid":
            td, tt = self.split
            if td < 1 or tt < 1:
                raise ValueError(f"hybrid coding needs both segments non-empty, got {td}+{tt}")
            if td + tt != self.T:
                raise ValueError(f"hybrid segments {td}+{tt} do not add up to T={self.T}")

    @property
    def split(self) -> tuple[int, int]:
        """(direct steps, ttfs steps); defaults to ceil(T/2), floor(T/2)."""
        td = self.t_direct if self.t_direct is not None else math.ceil(self.T / 2)
        tt = self.t_ttfs if self.t_ttfs is not None else self.T - td
        return td, tt


def direct_encode(features: Tensor, T: int) -> Tensor:
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    return ops.repeat_time(features, T)


def ttfs_times(image: np.ndarray, T: int) -> np.ndarray:
    """1-based spike step per element; 0 where the intensity is zero (silent)."""
    p = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    t = 1 + np.floor((1.0 - p) * (T - 1))
    t = np.clip(t, 1, T).astype(np.int64)
    t[p <= 0] = 0
    return t


def ttfs_encode(image, T: int) -> Tensor:
    """N×C×H×W intensities in [0, 1] -> N×T×C×H×W single-spike trains."""
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    times = ttfs_times(data, T)
    steps = np.arange(1, T + 1).reshape((1, T) + (1,) * (times.ndim - 1))
    spikes = (times[:, None] == steps).astype(default_dtype())
    return Tensor._wrap(spikes)


def hybrid_encode(image, features: Tensor, cfg: EncoderConfig, ttfs_branch) -> Tensor:
    """Direct segment followed by a TTFS segment.

    ``ttfs_branch`` maps the N×T_ttfs×C_img×H×W spike train to the feature
    channel count (the network passes its own learnable convolution).
    """
    if cfg.kind != "hybrid":
        raise ValueError(f"hybrid_encode called with a {cfg.kind!r} config")
    td, tt = cfg.split
    direct = direct_encode(features, td)
    timed = ttfs_branch(ttfs_encode(image, tt))
    if timed.shape[2:] != direct.shape[2:] or timed.shape[0] != direct.shape[0]:
        raise ValueError(f"ttfs branch output {timed.shape} does not match direct branch {direct.shape}")
    return ops.concat_time(direct, timed)
