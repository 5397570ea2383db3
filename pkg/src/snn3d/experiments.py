"""Experiment harness: configs, single runs, the ablation matrix and the shuffle diagnostic.

An :class:`ExperimentConfig` is a JSON document mirroring the dataclasses
below field for field.  Datasets are regenerated from their seed on every run
and pinned by a content hash in the run manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, from_dict, load_json, to_dict
from .datasets import (
    content_hash,
    gen_shapes_dataset,
    gen_temporal_order_dataset,
    train_test_split,
)
from .encoding import EncoderConfig
from .network import (
    BlockSpec,
    HeadSpec,
    Network,
    NetworkSpec,
    NeuronSpec,
    spatiotemporal_conv,
)
from .neuron import NeuronParams, SurrogateConfig, neuron_forward
from .tensor import Tensor, precision
from .training import GradcheckReport, TrainConfig, evaluate, fit, gradcheck

log = logging.getLogger(__name__)

DATASET_KINDS = ("temporal_order", "shapes")
THREADS_ENV = "SNN3D_THREADS"
GRADCHECK_TOLERANCE = 1e-4

TRAIN_COLUMNS = ("epoch", "loss", "accuracy", "test_metric", "test_value")
CELL_COLUMNS = ("conv_mode", "recurrence", "neuron", "T", "coding")
# wall time lives in its own file so the metrics CSV stays bit-reproducible
ABLATION_COLUMNS = CELL_COLUMNS + ("metric", "value", "error")
TIMING_COLUMNS = CELL_COLUMNS + ("wall_time",)
DIAGNOSTIC_COLUMNS = ("metric", "ordered", "shuffled", "absolute_drop", "relative_drop", "mode")


@dataclass
class DatasetSpec:
    """Synthetic dataset parameters; T and frame size come from the network spec."""

    kind: str = "temporal_order"
    n: int = 2000
    seed: int = 0
    test_fraction: float = 0.2
    max_objects: int = 3

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.n < 2:
            raise ValueError(f"dataset needs at least 2 samples, got {self.n}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


@dataclass
class DiagnosticSpec:
    shuffle: bool = False  # train and evaluate with temporally shuffled neuron inputs
    retrain: bool = True  # shuffle diagnostic: False reuses the ordered model and only re-evaluates


@dataclass
class AblationSpec:
    """Axis values swept by ``ablate``; an empty list keeps the base config's value."""

    conv_mode: list[str] = field(default_factory=list)
    recurrence: list[bool] = field(default_factory=list)
    neuron: list[str] = field(default_factory=list)
    T: list[int] = field(default_factory=list)
    coding: list[str] = field(default_factory=list)


@dataclass
class OutputSpec:
    dir: str = "runs/default"
    metrics: str = "metrics.csv"
    checkpoint: str | None = "model.cspk"
    manifest: str = "manifest.json"

    def path(self, name: str) -> Path:
        return Path(self.dir) / name


def default_network() -> NetworkSpec:
    """Three stride-2 Conv3D blocks on 8-step 16×16 spike sequences."""
    return NetworkSpec(
        encoder=EncoderConfig("sequence", 8),
        blocks=[BlockSpec(8, (3, 4, 4), 2), BlockSpec(8, (3, 4, 4), 2), BlockSpec(16, (3, 4, 4), 2)],
        neuron=NeuronSpec(surrogate="arctan", alpha=2.0),
        recurrence=True,
        input_size=16,
    )


@dataclass
class ExperimentConfig:
    network: NetworkSpec = field(default_factory=default_network)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    diagnostic: DiagnosticSpec = field(default_factory=DiagnosticSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def __post_init__(self):
        head = self.network.head.kind
        sequences = self.network.encoder.kind == "sequence"
        if self.dataset.kind == "temporal_order" and (head != "classification" or not sequences):
            raise ValueError("the temporal_order dataset needs a sequence encoder and a classification head")
        if self.dataset.kind == "shapes" and (head != "detection" or sequences):
            raise ValueError("the shapes dataset needs an image encoder and a detection head")

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return from_dict(cls, data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return load_json(cls, path)


def make_dataset(cfg: ExperimentConfig):
    """(train, test) split regenerated from the dataset seed."""
    ds, net = cfg.dataset, cfg.network
    if ds.kind == "temporal_order":
        data = gen_temporal_order_dataset(ds.n, net.T, net.input_size, ds.seed)
    else:
        data = gen_shapes_dataset(ds.n, net.input_size, ds.seed, ds.max_objects)
    return train_test_split(data, ds.test_fraction, ds.seed)


def metric_name(cfg: ExperimentConfig) -> str:
    return "accuracy" if cfg.network.head.kind == "classification" else "map50"


def with_train(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    net: Network
    history: list[dict]
    metric: str
    value: float
    dataset_hash: str


def run_train(cfg: ExperimentConfig, data=None) -> RunResult:
    """Train ``cfg`` from scratch and evaluate on its test split."""
    train, test = make_dataset(cfg) if data is None else data
    net = Network(cfg.network)
    history = fit(net, train, cfg.train, test)
    name = metric_name(cfg)
    value = history[-1][f"test_{name}"]
    return RunResult(net, history, name, value, dataset_hash(train, test))


def dataset_hash(train, test) -> str:
    return content_hash(np.frombuffer((train.content_hash() + test.content_hash()).encode(), dtype=np.uint8))


def history_rows(result: RunResult) -> list[dict]:
    rows = []
    for h in result.history:
        rows.append(
            {
                "epoch": h["epoch"],
                "loss": h["loss"],
                "accuracy": h.get("accuracy", ""),
                "test_metric": result.metric,
                "test_value": h[f"test_{result.metric}"],
            }
        )
    return rows


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, shuffle: bool | None = None) -> tuple[str, float, str]:
    """Evaluate saved parameters on the config's test split."""
    train, test = make_dataset(cfg)
    net = Network(cfg.network)
    net.load_state_dict(load_checkpoint(checkpoint))
    name = metric_name(cfg)
    value = evaluate(net, test, cfg.train, shuffle)[name]
    return name, value, dataset_hash(train, test)


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------


def ablation_cells(cfg: ExperimentConfig) -> list[dict]:
    """Cartesian product of the swept axes, in a fixed order."""
    net = cfg.network
    ab = cfg.ablation
    axes = {
        "conv_mode": ab.conv_mode or [net.conv_mode],
        "recurrence": ab.recurrence or [net.recurrence],
        "neuron": ab.neuron or [net.neuron.kind],
        "T": ab.T or [net.T],
        "coding": ab.coding or [net.encoder.kind],
    }
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def apply_cell(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    net = cfg.network
    enc = net.encoder
    if cell["coding"] != enc.kind or cell["T"] != enc.T:
        # segment lengths only carry over when T is unchanged
        keep = cell["T"] == enc.T
        enc = EncoderConfig(cell["coding"], cell["T"], enc.t_direct if keep else None, enc.t_ttfs if keep else None)
    spec = dataclasses.replace(
        net,
        encoder=enc,
        conv_mode=cell["conv_mode"],
        recurrence=cell["recurrence"],
        neuron=dataclasses.replace(net.neuron, kind=cell["neuron"]),
    )
    return dataclasses.replace(cfg, network=spec)


def _run_cell(cfg: ExperimentConfig, cell: dict) -> dict:
    row = {**cell, "metric": metric_name(cfg), "value": "", "wall_time": "", "error": ""}
    start = time.perf_counter()
    try:
        result = run_train(apply_cell(cfg, cell))
        row["value"] = result.value
    except Exception as exc:  # a failing cell is reported in its row; the others proceed
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - start
    return row


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1, got {n}")
    return n


def run_ablation(cfg: ExperimentConfig, threads: int | None = None) -> list[dict]:
    """One train+eval run per matrix cell, rows in cell order.

    Cells run on ``threads`` workers (default from the SNN3D_THREADS
    environment variable); results do not depend on the worker count.
    """
    cells = ablation_cells(cfg)
    threads = thread_count() if threads is None else threads
    if threads == 1:
        return [_run_cell(cfg, c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: _run_cell(cfg, c), cells))


# ---------------------------------------------------------------------------
# temporal-shuffle diagnostic
# ---------------------------------------------------------------------------


@dataclass
class ShuffleReport:
    metric: str
    ordered: float
    shuffled: float
    mode: str

    @property
    def absolute_drop(self) -> float:
        return self.ordered - self.shuffled

    @property
    def relative_drop(self) -> float:
        """Drop as a fraction of the ordered metric (0 when the ordered metric is 0)."""
        return self.absolute_drop / self.ordered if self.ordered else 0.0

    def row(self) -> dict:
        return {
            "metric": self.metric,
            "ordered": self.ordered,
            "shuffled": self.shuffled,
            "absolute_drop": self.absolute_drop,
            "relative_drop": self.relative_drop,
            "mode": self.mode,
        }


def run_shuffle_diagnostic(cfg: ExperimentConfig, retrain: bool | None = None, data=None) -> ShuffleReport:
    """Ordered arm vs an arm whose neuron inputs are shuffled along time.

    With ``retrain`` (the default, from ``cfg.diagnostic.retrain``) the
    shuffled arm is trained and tested under shuffling; otherwise the ordered
    model is only re-evaluated with shuffling switched on.
    """
    retrain = cfg.diagnostic.retrain if retrain is None else retrain
    data = make_dataset(cfg) if data is None else data
    ordered = run_train(with_train(cfg, shuffle_eval=False), data)
    if retrain:
        shuffled = run_train(with_train(cfg, shuffle_eval=True), data).value
    else:
        shuffled = evaluate(ordered.net, data[1], cfg.train, shuffle=True)[ordered.metric]
    return ShuffleReport(ordered.metric, ordered.value, shuffled, "retrain" if retrain else "eval-only")


# ---------------------------------------------------------------------------
# gradient-check targets
# ---------------------------------------------------------------------------


def _leaf(rng: np.random.Generator, shape, name: str, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, name=name)


def _probe(rng: np.random.Generator, shape) -> Tensor:
    """Fixed random weights that turn an output into a scalar loss."""
    return Tensor(rng.standard_normal(shape))


def _smooth_neuron(T: int, rng: np.random.Generator) -> NeuronParams:
    return NeuronParams.parametric(
        T,
        l=rng.uniform(0.3, 0.9, T),
        i=rng.uniform(0.3, 0.9, T),
        v_re=1.2,
        v_th=0.5,
        surrogate=SurrogateConfig("arctan", 1.0),
    )


def _gc_linear(rng):
    x, w, b = _leaf(rng, (3, 5), "x"), _leaf(rng, (4, 5), "weight"), _leaf(rng, (4,), "bias")
    r = _probe(rng, (3, 4))
    return (lambda: ops.sum_all(ops.mul(ops.linear(x, w, b), r))), {"x": x, "weight": w, "bias": b}


def _gc_conv2d(rng):
    x, w, b = _leaf(rng, (2, 2, 5, 5), "x"), _leaf(rng, (3, 2, 3, 3), "weight"), _leaf(rng, (3,), "bias")
    r = _probe(rng, (2, 3, 3, 3))
    return (lambda: ops.sum_all(ops.mul(ops.conv2d(x, w, b, 2, 1), r))), {"x": x, "weight": w, "bias": b}


def _gc_conv3d(rng):
    """A Conv3D block: transpose, 3D convolution with same temporal padding, neuron."""
    # fan-in scaled weights keep the currents at unit scale, as in a trained block
    w = _leaf(rng, (3, 2, 3, 3, 3), "weight", 54**-0.5)
    x, b = _leaf(rng, (2, 4, 2, 5, 5), "x"), _leaf(rng, (3,), "bias")
    neuron = _smooth_neuron(4, rng)
    r = _probe(rng, (2, 4, 3, 5, 5))
    fn = lambda: ops.sum_all(ops.mul(neuron_forward(spatiotemporal_conv(x, w, b, 1, 1), neuron, "recurrence"), r))  # noqa: E731
    return fn, {"x": x, "weight": w, "bias": b, **neuron.tensors()}


def _gc_neuron(rng):
    x = _leaf(rng, (3, 4, 2, 3, 3), "x")
    neuron = _smooth_neuron(4, rng)
    r = _probe(rng, x.shape)
    return (lambda: ops.sum_all(ops.mul(neuron_forward(x, neuron, "recurrence"), r))), {"x": x, **neuron.tensors()}


def gradcheck_network_spec(seed: int = 0) -> NetworkSpec:
    """Two Conv3D blocks with recurrence, small enough for exhaustive finite differences."""
    return NetworkSpec(
        encoder=EncoderConfig("sequence", 4),
        blocks=[BlockSpec(2, (3, 3, 3)), BlockSpec(2, (3, 3, 3), residual=True)],
        neuron=NeuronSpec(v_th=0.5, surrogate="arctan"),
        recurrence=True,
        head=HeadSpec("classification", 3),
        input_size=4,
        seed=seed,
    )


def _gc_network(rng):
    net = Network(gradcheck_network_spec(int(rng.integers(1 << 16))))
    x = rng.uniform(0, 1, (2, 4, 1, 4, 4))
    labels = np.array([0, 2])
    return (lambda: ops.cross_entropy(net(x), labels)), dict(net.params)


GRADCHECK_TARGETS = {
    "linear": _gc_linear,
    "conv2d": _gc_conv2d,
    "conv3d": _gc_conv3d,
    "neuron": _gc_neuron,
    "network": _gc_network,
}


def run_gradcheck(target: str, seed: int = 0) -> GradcheckReport:
    if target not in GRADCHECK_TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}; expected one of {sorted(GRADCHECK_TARGETS)}")
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        fn, tensors = GRADCHECK_TARGETS[target](rng)
    return gradcheck(fn, tensors)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    """Fixed header; floats written with ``repr`` (shortest round-tripping decimal)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c, "")) for c in columns])


def write_manifest(path, command: str, cfg: ExperimentConfig, dataset_hash: str | None, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": {"network": cfg.network.seed, "train": cfg.train.seed, "dataset": cfg.dataset.seed},
        "dataset": {**to_dict(cfg.dataset), "content_hash": dataset_hash},
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def save_network(path, net: Network) -> None:
    save_checkpoint(path, net.state_dict())
