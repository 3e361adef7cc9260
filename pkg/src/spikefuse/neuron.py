"""Leaky integrate-and-fire layer dynamics.

The membrane update is the hard-reset iterative form

    v' = kappa * v * (1 - s) + input_current

with an optional gating tensor ``u`` multiplying the decayed history term:

    v' = kappa * v * u * (1 - s) + input_current

``u`` is the per-neuron attention value from the previous timestep; with
``u`` identically one the gated update degenerates to the plain one bitwise
(the factor ordering below is chosen to guarantee that). The reset factor
and the carried membrane potential stay attached to the autodiff graph, so
backpropagation flows through both the layer and the time edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, smooth_spike, spike


@dataclass(frozen=True)
class LifConfig:
    """Threshold and decay of one LIF population (resting potential is 0)."""

    v_th: float
    kappa: float

    def __post_init__(self):
        if self.v_th <= 0:
            raise ParameterError(f"v_th must be positive, got {self.v_th}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ParameterError(f"kappa must be in [0, 1], got {self.kappa}")


@dataclass
class LayerState:
    """Carried across timesteps: membrane potential, previous spikes, and the
    attention tensor computed from them (absent before the second step)."""

    v: Tensor
    s: Tensor
    u: Optional[Tensor] = None


def initial_state(shape, dtype=np.float32) -> LayerState:
    zeros = np.zeros(shape, dtype=dtype)
    return LayerState(v=Tensor(zeros), s=Tensor(zeros.copy()))


def lif_step(state: LayerState, input_current: Tensor, cfg: LifConfig, smooth: bool = False):
    """One plain membrane update; returns (new_state, spikes).

    ``smooth`` swaps the Heaviside spike for its smooth surrogate so that the
    whole trajectory is finite-difference checkable.
    """
    if state.v.shape != input_current.shape:
        raise ShapeError(
            f"lif_step: state {state.v.shape} vs input {input_current.shape}"
        )
    v_new = (cfg.kappa * state.v) * (1.0 - state.s) + input_current
    s_new = smooth_spike(v_new, cfg.v_th) if smooth else spike(v_new, cfg.v_th)
    return LayerState(v=v_new, s=s_new), s_new


def lif_step_attended(
    state: LayerState,
    input_current: Tensor,
    u: Tensor,
    cfg: LifConfig,
    smooth: bool = False,
):
    """Gated membrane update: the decayed history is scaled elementwise by u.

    u must broadcast to the membrane shape; gradient flows into u through
    the saved kappa * v * (1 - s) factor.
    """
    if u is None:
        raise ParameterError("lif_step_attended requires a gating tensor; use lif_step")
    if state.v.shape != input_current.shape:
        raise ShapeError(
            f"lif_step_attended: state {state.v.shape} vs input {input_current.shape}"
        )
    try:
        np.broadcast_shapes(u.shape, state.v.shape)
    except ValueError:
        raise ShapeError(f"gate shape {u.shape} does not broadcast to {state.v.shape}")
    v_new = ((cfg.kappa * state.v) * u) * (1.0 - state.s) + input_current
    s_new = smooth_spike(v_new, cfg.v_th) if smooth else spike(v_new, cfg.v_th)
    return LayerState(v=v_new, s=s_new, u=u), s_new


def reset_states(network) -> None:
    """Zero all layer states of a network before a new sample/batch."""
    network.reset_states()
