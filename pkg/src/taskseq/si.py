"""Synaptic intelligence: path-integral importance and its quadratic penalty.

All quantities are flat float64 vectors over the trunk parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SIState:
    omega: np.ndarray
    importance: np.ndarray
    anchor: np.ndarray
    xi: float = 0.1
    c: float = 1.0

    @classmethod
    def start(cls, theta: np.ndarray, xi: float = 0.1, c: float = 1.0) -> "SIState":
        theta = np.asarray(theta, dtype=np.float64)
        if not xi > 0:
            raise ValueError("damping xi must be positive")
        return cls(np.zeros_like(theta), np.zeros_like(theta), theta.copy(), xi, c)


def _same_shape(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {np.shape(a)} vs {shape}")


def si_path_update(state: SIState, grad, delta_theta) -> SIState:
    """Accumulate ``-grad * delta_theta`` after one optimizer step."""
    grad = np.asarray(grad, dtype=np.float64)
    delta_theta = np.asarray(delta_theta, dtype=np.float64)
    _same_shape(state.omega, grad, delta_theta)
    state.omega -= grad * delta_theta
    return state


def si_consolidate(state: SIState, theta_end, clamp: bool = True) -> SIState:
    """Fold the task's path integral into the importance and move the anchor."""
    if not state.xi > 0:
        raise ValueError("damping xi must be positive")
    theta_end = np.asarray(theta_end, dtype=np.float64)
    _same_shape(state.anchor, theta_end)
    state.importance = state.importance + state.omega / ((theta_end - state.anchor) ** 2 + state.xi)
    if clamp:
        np.maximum(state.importance, 0.0, out=state.importance)
    state.omega = np.zeros_like(state.omega)
    state.anchor = theta_end.copy()
    return state


def si_penalty(theta, state: SIState) -> tuple[float, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    _same_shape(theta, state.anchor)
    diff = theta - state.anchor
    weighted = state.importance * diff
    return float(state.c * np.dot(weighted, diff)), 2.0 * state.c * weighted
