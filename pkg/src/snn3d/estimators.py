"""scikit-learn wrappers around the spiking networks and encoders.

The estimators own a :class:`~snn3d.network.Network` built at ``fit`` time
from their constructor parameters, so they clone, grid-search and pipeline
like any other sklearn estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import DetectionDataset, SequenceDataset
from .encoding import EncoderConfig, ttfs_encode
from .metrics import detections_from_output, map_at_50
from .network import BlockSpec, HeadSpec, Network, NetworkSpec, NeuronSpec
from .neuron import shuffle_time
from .tensor import Tensor, no_grad
from .training import TrainConfig, fit, predict_logits, shuffle_seed_for

DEFAULT_BLOCKS = ((8, (3, 4, 4), 2), (8, (3, 4, 4), 2), (16, (3, 4, 4), 2))
DETECTOR_BLOCKS = ((16, (3, 4, 4), 2), (32, (3, 4, 4), 2), (32, (3, 3, 3), 1, True))


def _as_sequences(X) -> np.ndarray:
    """N×T×H×W or N×T×C×H×W float32 array."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 4:
        X = X[:, :, None]
    if X.ndim != 5:
        raise ValueError(f"expected N×T×[C×]H×W sequences, got shape {X.shape}")
    return X


def _as_images(X) -> np.ndarray:
    """N×H×W or N×C×H×W float32 array."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected N×[C×]H×W images, got shape {X.shape}")
    return X


def _blocks(blocks) -> list[BlockSpec]:
    """BlockSpecs or (channels, kernel, stride[, residual]) tuples."""
    return [b if isinstance(b, BlockSpec) else BlockSpec(b[0], tuple(b[1]), *b[2:]) for b in blocks]


class _SpikingBase(BaseEstimator):
    def _spec(self, encoder: EncoderConfig, channels: int, size: int, head: HeadSpec) -> NetworkSpec:
        neuron = NeuronSpec(kind=self.neuron, surrogate=self.surrogate, alpha=self.alpha)
        return NetworkSpec(
            encoder=encoder,
            blocks=_blocks(self.blocks),
            conv_mode=self.conv_mode,
            neuron=neuron,
            recurrence=self.recurrence,
            head=head,
            in_channels=channels,
            input_size=size,
            seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            lr=self.lr,
            weight_decay=self.weight_decay,
            shuffle_eval=self.shuffle_time,
        )


class SpikingClassifier(ClassifierMixin, _SpikingBase):
    """Spiking convolutional classifier for N×T×[C×]H×W spike sequences.

    With ``shuffle_time=True`` every neuron layer sees its input currents in a
    random temporal order, both while training and while predicting.
    """

    def __init__(
        self,
        conv_mode="conv3d",
        recurrence=True,
        neuron="parametric",
        blocks=DEFAULT_BLOCKS,
        surrogate="arctan",
        alpha=2.0,
        epochs=10,
        batch_size=32,
        lr=3e-3,
        weight_decay=1e-2,
        shuffle_time=False,
        random_state=0,
    ):
        self.conv_mode = conv_mode
        self.recurrence = recurrence
        self.neuron = neuron
        self.blocks = blocks
        self.surrogate = surrogate
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.shuffle_time = shuffle_time
        self.random_state = random_state

    def fit(self, X, y):
        X = _as_sequences(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if X.shape[3] != X.shape[4]:
            raise ValueError(f"frames must be square, got {X.shape[3]}×{X.shape[4]}")
        T = X.shape[1]
        head = HeadSpec("classification", num_classes=len(self.classes_))
        self.net_ = Network(self._spec(EncoderConfig("sequence", T), X.shape[2], X.shape[3], head))
        self.history_ = fit(self.net_, SequenceDataset(X, codes.astype(np.int64)), self._train_config())
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = _as_sequences(X)
        seed = shuffle_seed_for(self.random_state, None) if self.shuffle_time else None
        return predict_logits(self.net_, X, shuffle_seed=seed)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class SpikingDetector(_SpikingBase):
    """Toy single-scale detector for N×[C×]H×W images.

    ``fit(images, boxes)`` takes one k×5 array of normalized
    (x_min, y_min, x_max, y_max, class_id) rows per image; ``predict`` returns
    lists of :class:`~snn3d.metrics.DetectionBox` and ``score`` is mAP@0.5.
    """

    def __init__(
        self,
        conv_mode="conv3d",
        recurrence=True,
        neuron="parametric",
        blocks=DETECTOR_BLOCKS,
        encoding="direct",
        T=4,
        num_classes=2,
        grid=4,
        surrogate="arctan",
        alpha=2.0,
        epochs=10,
        batch_size=16,
        lr=3e-3,
        weight_decay=1e-2,
        shuffle_time=False,
        conf_threshold=0.05,
        random_state=0,
    ):
        self.conv_mode = conv_mode
        self.recurrence = recurrence
        self.neuron = neuron
        self.blocks = blocks
        self.encoding = encoding
        self.T = T
        self.num_classes = num_classes
        self.grid = grid
        self.surrogate = surrogate
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.shuffle_time = shuffle_time
        self.conf_threshold = conf_threshold
        self.random_state = random_state

    def fit(self, X, boxes):
        X = _as_images(X)
        if len(boxes) != len(X):
            raise ValueError(f"X has {len(X)} images but boxes has {len(boxes)} entries")
        head = HeadSpec("detection", num_classes=self.num_classes, grid=self.grid)
        spec = self._spec(EncoderConfig(self.encoding, self.T), X.shape[1], X.shape[2], head)
        self.net_ = Network(spec)
        data = DetectionDataset(X, [np.asarray(b, dtype=np.float64).reshape(-1, 5) for b in boxes])
        self.history_ = fit(self.net_, data, self._train_config())
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "net_")
        raw = predict_logits(self.net_, _as_images(X))
        return detections_from_output(raw, self.grid, conf_threshold=self.conf_threshold)

    def score(self, X, boxes) -> float:
        return map_at_50(self.predict(X), boxes)


class TTFSEncoder(TransformerMixin, BaseEstimator):
    """N×[C×]H×W intensities in [0, 1] -> N×T×C×H×W time-to-first-spike trains."""

    def __init__(self, T=4):
        self.T = T

    def fit(self, X, y=None):
        _as_images(X)
        return self

    def transform(self, X):
        return ttfs_encode(_as_images(X), self.T).data


class DirectEncoder(TransformerMixin, BaseEstimator):
    """Repeats each N×[C×]H×W input over ``T`` steps (no learned stem)."""

    def __init__(self, T=4):
        self.T = T

    def fit(self, X, y=None):
        _as_images(X)
        return self

    def transform(self, X):
        X = _as_images(X)
        return np.repeat(X[:, None], self.T, axis=1)


class TimeShuffler(TransformerMixin, BaseEstimator):
    """Permutes the time axis of each N×T×… sample; per-sample time-sums are kept."""

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
        if X.ndim < 2:
            raise ValueError(f"expected N×T×… input, got shape {X.shape}")
        with no_grad():
            return shuffle_time(Tensor(X), self.random_state).data
