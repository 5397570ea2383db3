"""Spiking neural networks with spatiotemporal 3D convolution blocks.

A small numpy reverse-mode autodiff core (:mod:`snn3d.tensor`,
:mod:`snn3d.ops`) carries IF, LIF and parametric spiking neurons, shared-2D
and 3D convolution blocks, spike encoders, a toy detection head, AdamW
training and the temporal-shuffle diagnostic.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import gen_shapes_dataset, gen_temporal_order_dataset
from .encoding import EncoderConfig
from .estimators import (
    DirectEncoder,
    SpikingClassifier,
    SpikingDetector,
    TimeShuffler,
    TTFSEncoder,
)
from .experiments import ExperimentConfig, run_ablation, run_shuffle_diagnostic
from .metrics import DetectionBox, iou, map_at_50, nms
from .network import (
    BlockSpec,
    HeadSpec,
    Network,
    NetworkSpec,
    NeuronSpec,
    build_network,
)
from .neuron import NeuronParams, SurrogateConfig, neuron_forward, shuffle_time
from .tensor import Tensor
from .training import AdamWState, TrainConfig, adamw_step, fit, gradcheck

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "BlockSpec",
    "DetectionBox",
    "DirectEncoder",
    "EncoderConfig",
    "ExperimentConfig",
    "HeadSpec",
    "Network",
    "NetworkSpec",
    "NeuronParams",
    "NeuronSpec",
    "SpikingClassifier",
    "SpikingDetector",
    "SurrogateConfig",
    "TTFSEncoder",
    "Tensor",
    "TimeShuffler",
    "TrainConfig",
    "adamw_step",
    "build_network",
    "fit",
    "gen_shapes_dataset",
    "gen_temporal_order_dataset",
    "gradcheck",
    "iou",
    "load_checkpoint",
    "map_at_50",
    "neuron_forward",
    "nms",
    "run_ablation",
    "run_shuffle_diagnostic",
    "save_checkpoint",
    "shuffle_time",
]
