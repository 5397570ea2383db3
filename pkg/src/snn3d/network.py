"""Spiking networks: encoder stem, spiking conv blocks, SEW residuals and heads.

A block is convolution -> spiking neuron.  Under ``shared2d`` one 2D kernel is
applied to every time slice independently; under ``conv3d`` the N×T×C×H×W
activation is transposed to N×C×T×H×W, convolved jointly over (T, H, W) with
"same" temporal padding, and transposed back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import from_dict, to_dict
from .encoding import EncoderConfig, direct_encode, ttfs_encode
from .neuron import NeuronParams, SurrogateConfig, neuron_forward, shuffle_time
from .tensor import Tensor, default_dtype

CONV_MODES = ("shared2d", "conv3d")
HEAD_KINDS = ("classification", "detection")


@dataclass
class BlockSpec:
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: int = 1
    residual: bool = False
    padding: int | None = None

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be at least 1, got {self.out_channels}")
        if len(self.kernel) != 3 or min(self.kernel) < 1:
            raise ValueError(f"kernel must be three positive extents (kT, kH, kW), got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be at least 1, got {self.stride}")

    @property
    def spatial_pad(self) -> int:
        return (self.kernel[1] - 1) // 2 if self.padding is None else self.padding


@dataclass
class HeadSpec:
    kind: str = "classification"
    num_classes: int = 2
    grid: int = 4

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.num_classes < 1 or self.grid < 1:
            raise ValueError("num_classes and grid must be positive")

    @property
    def out_features(self) -> int:
        return self.num_classes if self.kind == "classification" else 5 + self.num_classes


@dataclass
class NeuronSpec:
    """Serializable template from which every neuron layer is instantiated."""

    kind: str = "parametric"
    v_th: float = 1.0
    v_reset: float = 0.0
    tau: float = 2.0
    l_init: float = 0.5
    i_init: float = 0.5
    v_re_init: float = 1.0
    surrogate: str = "rectangular"
    alpha: float = 1.0
    spike_rule: str | None = None
    reset_rule: str | None = None

    def build(self, T: int) -> NeuronParams:
        common = dict(
            v_th=self.v_th,
            v_reset=self.v_reset,
            tau=self.tau,
            spike_rule=self.spike_rule,
            reset_rule=self.reset_rule,
            surrogate=SurrogateConfig(self.surrogate, self.alpha),
        )
        if self.kind == "parametric":
            return NeuronParams.parametric(T, self.l_init, self.i_init, self.v_re_init, **common)
        if self.spike_rule == "scaled" or self.reset_rule == "soft":
            v_re = Tensor(np.asarray(self.v_re_init, dtype=default_dtype()), requires_grad=True, name="v_re")
            return NeuronParams(kind=self.kind, v_re=v_re, **common)
        return NeuronParams(kind=self.kind, **common)


@dataclass
class NetworkSpec:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    blocks: list[BlockSpec] = field(default_factory=list)
    conv_mode: str = "conv3d"
    neuron: NeuronSpec = field(default_factory=NeuronSpec)
    recurrence: bool = False
    head: HeadSpec = field(default_factory=HeadSpec)
    in_channels: int = 1
    input_size: int = 16
    stem_channels: int = 8
    stem_kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.conv_mode not in CONV_MODES:
            raise ValueError(f"unknown conv mode {self.conv_mode!r}; expected one of {CONV_MODES}")
        if self.conv_mode == "conv3d":
            for b in self.blocks:
                if b.kernel[0] % 2 == 0:
                    raise ValueError(f"temporal kernel extent must be odd to preserve T, got {b.kernel[0]}")

    @property
    def T(self) -> int:
        return self.encoder.T

    @property
    def init(self) -> str:
        return "recurrence" if self.recurrence else "zero"

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return from_dict(cls, data)


def sew_add(a: Tensor, b: Tensor) -> Tensor:
    """Spike-element-wise residual: integer spike counts add up (may exceed 1)."""
    if a.shape != b.shape:
        raise ValueError(f"sew_add: shape mismatch {a.shape} vs {b.shape}")
    return ops.add(a, b)


def rate_decode(x: Tensor) -> Tensor:
    """Mean over the time axis of an N×T×… tensor."""
    if x.ndim < 2 or x.shape[1] < 1:
        raise ValueError(f"rate_decode: expected N×T×… with T ≥ 1, got {x.shape}")
    return ops.reduce_mean(x, 1)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"extent {size} with kernel {k}, stride {stride}, pad {pad} is not evenly covered")
    return span // stride + 1


def shared2d_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """One 2D kernel applied independently to every time slice of N×T×C×H×W."""
    n, t = x.shape[:2]
    flat = ops.reshape(x, (n * t,) + x.shape[2:])
    y = ops.conv2d(flat, weight, bias, stride, pad)
    return ops.reshape(y, (n, t) + y.shape[1:])


def spatiotemporal_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """3D convolution over (T, H, W) of an N×T×C×H×W tensor; T is preserved for odd kT."""
    kt = weight.shape[2]
    if kt % 2 == 0:
        raise ValueError(f"temporal kernel extent must be odd, got {kt}")
    y = ops.conv3d(ops.transpose_time_channel(x), weight, bias, (1, stride, stride), ((kt - 1) // 2, pad, pad))
    return ops.transpose_time_channel(y)


def _layer_seed(seed: int, layer: int) -> int:
    return int(np.random.SeedSequence([int(seed), layer + 1]).generate_state(1)[0])


def decode_boxes(raw: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell (cx, cy, w, h) in normalized image coordinates from raw N×S×S×(5+K) output."""
    sig = 1 / (1 + np.exp(-raw[..., :4].astype(np.float64)))
    cols = np.arange(grid).reshape(1, 1, grid)
    rows = np.arange(grid).reshape(1, grid, 1)
    cx = (cols + sig[..., 0]) / grid
    cy = (rows + sig[..., 1]) / grid
    return np.stack([cx, cy, sig[..., 2], sig[..., 3]], axis=-1)


class Network:
    """Trainable spiking network built from a :class:`NetworkSpec`.

    Parameters live in ``self.params`` (insertion-ordered, named).  Forward
    accepts N×C×H×W images for the direct/ttfs/hybrid encoders and
    N×T×C×H×W sequences for the ``sequence`` encoder.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.neurons: list[NeuronParams] = []
        self._rng = np.random.default_rng(spec.seed)
        self.shapes: list[tuple[int, int, int]] = []
        self._build()
        del self._rng

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape, fan_in: int | None) -> Tensor:
        dt = default_dtype()
        if fan_in is None:
            data = np.zeros(shape, dtype=dt)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = self._rng.uniform(-bound, bound, size=shape).astype(dt)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv_params(self, prefix: str, co: int, ci: int, kernel: tuple[int, ...]) -> None:
        fan_in = ci * int(np.prod(kernel))
        self._param(prefix + ".weight", (co, ci) + tuple(kernel), fan_in)
        self._param(prefix + ".bias", (co,), None)

    def _build(self) -> None:
        spec = self.spec
        enc = spec.encoder
        size = spec.input_size
        if enc.kind == "sequence":
            channels = spec.in_channels
        else:
            k = spec.stem_kernel
            self._conv_params("stem", spec.stem_channels, spec.in_channels, (k, k))
            if enc.kind == "hybrid":
                self._conv_params("ttfs", spec.stem_channels, spec.in_channels, (k, k))
            size = _conv_out(size, k, 1, (k - 1) // 2)
            channels = spec.stem_channels
        self.shapes.append((channels, size, size))
        for idx, b in enumerate(spec.blocks):
            kt, kh, kw = b.kernel
            kernel = (kh, kw) if spec.conv_mode == "shared2d" else (kt, kh, kw)
            self._conv_params(f"blocks.{idx}.conv", b.out_channels, channels, kernel)
            out_size = _conv_out(size, kh, b.stride, b.spatial_pad)
            _conv_out(size, kw, b.stride, b.spatial_pad)
            if b.residual:
                if idx == 0:
                    raise ValueError("block 0 receives real-valued encoder currents; a spike residual needs spike input")
                if (b.out_channels, out_size) != (channels, size):
                    raise ValueError(
                        f"block {idx} residual: input {(channels, size, size)} vs output "
                        f"{(b.out_channels, out_size, out_size)}"
                    )
            neuron = spec.neuron.build(spec.T)
            for pname, t in neuron.tensors().items():
                t.name = f"blocks.{idx}.neuron.{pname}"
                self.params[t.name] = t
            self.neurons.append(neuron)
            channels, size = b.out_channels, out_size
            self.shapes.append((channels, size, size))
        head = spec.head
        if head.kind == "classification":
            self._param("head.weight", (head.num_classes, channels), channels)
            self._param("head.bias", (head.num_classes,), None)
        else:
            if head.grid > size:
                raise ValueError(f"detection grid {head.grid} larger than the {size}×{size} feature map")
            if size % head.grid:
                raise ValueError(f"feature map {size} is not a multiple of grid {head.grid}")
            self._conv_params("head", head.out_features, channels, (1, 1))

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> "Network":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward ------------------------------------------------------------

    def encode(self, x) -> Tensor:
        spec = self.spec
        x = x if isinstance(x, Tensor) else Tensor(x)
        enc = spec.encoder
        pad = (spec.stem_kernel - 1) // 2
        if enc.kind == "sequence":
            if x.ndim != 5 or x.shape[1] != spec.T:
                raise ValueError(f"sequence input must be N×{spec.T}×C×H×W, got {x.shape}")
            return x
        if x.ndim != 4:
            raise ValueError(f"image input must be N×C×H×W, got {x.shape}")
        w, b = self.params["stem.weight"], self.params["stem.bias"]
        if enc.kind == "direct":
            return direct_encode(ops.conv2d(x, w, b, 1, pad), enc.T)
        if enc.kind == "ttfs":
            return shared2d_conv(ttfs_encode(x, enc.T), w, b, 1, pad)
        td, tt = enc.split
        feats = direct_encode(ops.conv2d(x, w, b, 1, pad), td)
        timed = shared2d_conv(ttfs_encode(x, tt), self.params["ttfs.weight"], self.params["ttfs.bias"], 1, pad)
        return ops.concat_time(feats, timed)

    def block_currents(self, idx: int, x: Tensor) -> Tensor:
        b = self.spec.blocks[idx]
        w = self.params[f"blocks.{idx}.conv.weight"]
        bias = self.params[f"blocks.{idx}.conv.bias"]
        if self.spec.conv_mode == "shared2d":
            return shared2d_conv(x, w, bias, b.stride, b.spatial_pad)
        return spatiotemporal_conv(x, w, bias, b.stride, b.spatial_pad)

    def block_forward(self, idx: int, x: Tensor, shuffle_seed: int | None = None, sample_ids=None) -> Tensor:
        cur = self.block_currents(idx, x)
        if shuffle_seed is not None:
            cur = shuffle_time(cur, _layer_seed(shuffle_seed, idx), sample_ids)
        out = neuron_forward(cur, self.neurons[idx], self.spec.init)
        if self.spec.blocks[idx].residual:
            out = sew_add(out, x)
        return out

    def features(self, x, shuffle_seed: int | None = None, sample_ids=None) -> Tensor:
        h = self.encode(x)
        if shuffle_seed is not None:
            # the encoder output is the signal entering block 0; it loses its order too
            h = shuffle_time(h, _layer_seed(shuffle_seed, -1), sample_ids)
        for idx in range(len(self.spec.blocks)):
            h = self.block_forward(idx, h, shuffle_seed, sample_ids)
        return h

    def head_forward(self, h: Tensor) -> Tensor:
        head = self.spec.head
        n, t, c = h.shape[:3]
        if head.kind == "classification":
            pooled = ops.reduce_mean(h, (3, 4))
            y = ops.linear(ops.reshape(pooled, (n * t, c)), self.params["head.weight"], self.params["head.bias"])
            return rate_decode(ops.reshape(y, (n, t, head.num_classes)))
        size = h.shape[3]
        if size > head.grid:
            h = ops.avg_pool(h, size // head.grid)
        y = shared2d_conv(h, self.params["head.weight"], self.params["head.bias"])
        y = rate_decode(y)
        return ops.transpose(y, (0, 2, 3, 1))

    def forward(self, x, shuffle_seed: int | None = None, sample_ids=None) -> Tensor:
        """Head output: N×K logits, or N×S×S×(5+K) raw detection maps.

        ``shuffle_seed`` enables the temporal-shuffle diagnostic: every neuron
        layer's input currents are permuted along time, keyed by the seed,
        the layer index and ``sample_ids``.
        """
        return self.head_forward(self.features(x, shuffle_seed, sample_ids))

    __call__ = forward


def build_network(spec: NetworkSpec) -> Network:
    return Network(spec)
