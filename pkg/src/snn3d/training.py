"""Losses, AdamW, the training loop and finite-difference gradient checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .neuron import V_RE_MIN, smooth_spikes
from .tensor import Tensor, backward, fresh_tape, no_grad, precision

log = logging.getLogger(__name__)

BOX_WEIGHT = 5.0


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def decays(name: str) -> bool:
    """Weight decay applies to conv/linear weights only (not l, i, v_re or biases)."""
    return name.endswith(".weight")


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState, grads: dict[str, np.ndarray] | None = None) -> None:
    """One AdamW update in place: decoupled decay, bias-corrected moments, v_re clamp."""
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        data = p.data
        if decays(name) and state.weight_decay:
            data = data * p.dtype.type(1 - lr * state.weight_decay)
        data = data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if name.endswith("v_re"):
            data = np.maximum(data, V_RE_MIN)
        p.data = data.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_classification(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)


@dataclass
class DetectionTargets:
    obj: np.ndarray  # N×S×S, 1 where a box centre falls
    box: np.ndarray  # N×S×S×4, (cx, cy, w, h)
    cls: np.ndarray  # N×S×S int


def build_targets(boxes_per_image, grid: int, num_classes: int) -> DetectionTargets:
    """Assign each box to the cell holding its centre (first box wins a shared cell)."""
    n = len(boxes_per_image)
    obj = np.zeros((n, grid, grid))
    box = np.zeros((n, grid, grid, 4))
    cls = np.zeros((n, grid, grid), dtype=np.intp)
    for k, boxes in enumerate(boxes_per_image):
        for x0, y0, x1, y1, c in np.asarray(boxes, dtype=np.float64).reshape(-1, 5):
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ValueError(f"box {(x0, y0, x1, y1)} is not inside the unit square")
            if not 0 <= c < num_classes:
                raise ValueError(f"class id {c} out of range [0, {num_classes})")
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            col = min(int(cx * grid), grid - 1)
            row = min(int(cy * grid), grid - 1)
            if obj[k, row, col]:
                continue
            obj[k, row, col] = 1
            box[k, row, col] = (cx, cy, x1 - x0, y1 - y0)
            cls[k, row, col] = int(c)
    return DetectionTargets(obj, box, cls)


def loss_detection(head_out: Tensor, targets: DetectionTargets) -> Tensor:
    """Objectness BCE over all cells + 5 × squared box error + class CE on positive cells.

    Each term is summed over cells and averaged over images.
    """
    n, s, _, f = head_out.shape
    dt = head_out.dtype
    flat = ops.reshape(head_out, (n * s * s, f))
    obj = targets.obj.reshape(-1).astype(dt)
    obj_term = ops.bce_with_logits(ops.getitem(flat, (slice(None), 4)), obj, reduction="sum")

    sig = ops.sigmoid(ops.getitem(flat, (slice(None), slice(0, 4))))
    cols = np.broadcast_to(np.arange(s), (n, s, s)).reshape(-1)
    rows = np.broadcast_to(np.arange(s)[:, None], (n, s, s)).reshape(-1)
    offset = np.zeros((n * s * s, 4), dtype=dt)
    offset[:, 0] = cols / s
    offset[:, 1] = rows / s
    factor = np.broadcast_to(np.array([1 / s, 1 / s, 1, 1], dtype=dt), offset.shape)
    pred = ops.add(ops.mul(sig, Tensor(factor, dtype=dt)), Tensor(offset, dtype=dt))
    err = ops.sub(pred, Tensor(targets.box.reshape(-1, 4), dtype=dt))
    mask = np.repeat(obj[:, None], 4, axis=1)
    box_term = ops.sum_all(ops.mul(ops.square(err), Tensor(mask, dtype=dt)))

    cls_logits = ops.getitem(flat, (slice(None), slice(5, None)))
    cls_term = ops.cross_entropy(cls_logits, targets.cls.reshape(-1), weights=obj, reduction="sum")
    total = ops.add(ops.add(obj_term, ops.mul_scalar(box_term, BOX_WEIGHT)), cls_term)
    return ops.mul_scalar(total, 1.0 / n)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-2
    shuffle_eval: bool = False
    checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


def shuffle_seed_for(seed: int, epoch: int | None) -> int:
    """Seed handed to the network's shuffle diagnostic; epoch None means evaluation."""
    key = [int(seed), 1 << 20] if epoch is None else [int(seed), int(epoch)]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _inputs_and_targets(net, data, idx):
    if net.spec.head.kind == "classification":
        return data.X[idx], data.y[idx]
    head = net.spec.head
    return data.images[idx], build_targets([data.boxes[i] for i in idx], head.grid, head.num_classes)


def _loss(net, out: Tensor, target) -> Tensor:
    if net.spec.head.kind == "classification":
        return loss_classification(out, target)
    return loss_detection(out, target)


def train_epoch(net, data, cfg: TrainConfig, state: AdamWState, epoch: int = 0) -> dict:
    """One pass over ``data`` in a seeded order; returns {"loss", "accuracy"?}."""
    n = len(data)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    shuffle_seed = shuffle_seed_for(cfg.seed, epoch) if cfg.shuffle_eval else None
    total, correct = 0.0, 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        xb, target = _inputs_and_targets(net, data, idx)
        with fresh_tape():
            out = net(xb, shuffle_seed=shuffle_seed, sample_ids=idx)
            loss = _loss(net, out, target)
            backward(loss)
        adamw_step(net.params, state)
        net.zero_grad()
        total += float(loss.item()) * len(idx)
        if net.spec.head.kind == "classification":
            correct += int((out.data.argmax(axis=1) == target).sum())
    metrics = {"loss": total / n}
    if net.spec.head.kind == "classification":
        metrics["accuracy"] = correct / n
    return metrics


def predict_logits(net, X, batch_size: int = 128, shuffle_seed: int | None = None, sample_ids=None) -> np.ndarray:
    ids = np.arange(len(X)) if sample_ids is None else np.asarray(sample_ids)
    outs = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            sl = slice(start, start + batch_size)
            outs.append(net(X[sl], shuffle_seed=shuffle_seed, sample_ids=ids[sl]).data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate(net, data, cfg: TrainConfig | None = None, shuffle: bool | None = None) -> dict:
    """Accuracy (classification) or mAP@0.5 (detection) on ``data``."""
    from .metrics import detections_from_output, map_at_50

    seed = cfg.seed if cfg is not None else 0
    shuffle = cfg.shuffle_eval if shuffle is None and cfg is not None else bool(shuffle)
    sseed = shuffle_seed_for(seed, None) if shuffle else None
    if net.spec.head.kind == "classification":
        logits = predict_logits(net, data.X, shuffle_seed=sseed)
        return {"accuracy": float((logits.argmax(axis=1) == data.y).mean())}
    raw = predict_logits(net, data.images, shuffle_seed=sseed)
    preds = detections_from_output(raw, net.spec.head.grid)
    return {"map50": map_at_50(preds, data.boxes)}


def fit(net, train, cfg: TrainConfig, test=None, callback: Callable | None = None) -> list[dict]:
    """Train for ``cfg.epochs``; returns one metrics row per epoch."""
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        row = {"epoch": epoch + 1, **train_epoch(net, train, cfg, state, epoch)}
        if test is not None:
            row.update({f"test_{k}": v for k, v in evaluate(net, test, cfg).items()})
        log.info("epoch %d: %s", epoch + 1, row)
        history.append(row)
        if callback is not None:
            callback(row)
    return history


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: str
    per_tensor: dict


def gradcheck(fn: Callable[[], Tensor], tensors: dict[str, Tensor], step: float = 1e-3) -> GradcheckReport:
    """Compare tape gradients of ``fn()`` with central finite differences.

    Runs in 64-bit mode with spikes smoothed by their surrogate primitive.  The
    relative error of a tensor is max|analytic - numeric| divided by the
    largest gradient magnitude of either estimate.  Tensors are restored
    afterwards.
    """
    saved = {k: (t.data, t.grad) for k, t in tensors.items()}
    per_tensor = {}
    try:
        with precision(np.float64), smooth_spikes():
            for t in tensors.values():
                t.data = t.data.astype(np.float64)
                t.grad = None
            with fresh_tape():
                grads = backward(fn(), inputs=list(tensors.values()))
            with no_grad():
                for (name, t), analytic in zip(tensors.items(), grads):
                    numeric = np.zeros_like(t.data)
                    flat = t.data.reshape(-1)
                    for j in range(flat.size):
                        orig = flat[j]
                        flat[j] = orig + step
                        up = fn().item()
                        flat[j] = orig - step
                        down = fn().item()
                        flat[j] = orig
                        numeric.reshape(-1)[j] = (up - down) / (2 * step)
                    scale_ = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), 1e-12)
                    per_tensor[name] = float(np.abs(analytic - numeric).max(initial=0) / scale_)
    finally:
        for k, t in tensors.items():
            t.data, t.grad = saved[k]
    worst = max(per_tensor, key=per_tensor.get) if per_tensor else ""
    return GradcheckReport(per_tensor.get(worst, 0.0), worst, per_tensor)
