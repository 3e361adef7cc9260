"""Spiking CNN engine with a fused spatial-channel attention gate.

The compute core is a from-scratch reverse-mode autodiff engine over numpy
arrays; on top of it sit LIF layer dynamics whose decayed membrane history
can be gated by an attention tensor built from the layer's own past spikes,
an event-stream data pipeline, a training loop, and a CLI harness for
ablation, decay-factor and corruption sweeps.
"""

from .attention import AttentionVariant
from .errors import SpikefuseError
from .events import EventStream, FrameSequence, slice_to_frames
from .network import SpikingNetwork, count_mult_adds, count_parameters, parse_architecture
from .neuron import LifConfig
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "AttentionVariant",
    "EventStream",
    "FrameSequence",
    "LifConfig",
    "Rng",
    "SpikefuseError",
    "SpikingNetwork",
    "Tensor",
    "count_mult_adds",
    "count_parameters",
    "parse_architecture",
    "slice_to_frames",
]
