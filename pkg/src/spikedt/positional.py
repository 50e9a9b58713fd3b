"""Phase-shifted sine-threshold positional spike generators.

Each attention head k owns a learnable frequency omega_k and phase phi_k.
At window step t (t = 1..T) the head emits a spike whenever
sin(omega_k * t + phi_k) >= 0, so every head carries a distinct rhythmic
binary code. The hard sign is crossed in the backward pass by the same
surrogate used for LIF thresholds, applied to the sine pre-activation, so
omega and phi receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neurons import SurrogateSpec, spike_threshold
from .tape import Tensor, as_tensor, concat, reshape, sin, tile

OMEGA_FLOOR = 1e-6
TWO_PI = 2.0 * np.pi


@dataclass
class PhaseBank:
    """Per-head oscillator parameters: omega > 0, phi in [0, 2*pi)."""

    omega: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.omega.shape != self.phi.shape:
            raise ValueError("omega and phi must have matching shapes")


def init_phase_bank(heads: int, rng: np.random.Generator) -> PhaseBank:
    """Draw omega ~ U(0.1, 10) and phi ~ U(0, 2*pi)."""
    return PhaseBank(
        omega=rng.uniform(0.1, 10.0, size=heads),
        phi=rng.uniform(0.0, TWO_PI, size=heads),
    )


def generate(omega, phi, window: int, surrogate: SurrogateSpec) -> Tensor:
    """Binary positional trains, one row per head, columns t = 1..window."""
    if window < 1:
        raise ValueError("window must be at least 1")
    omega, phi = as_tensor(omega), as_tensor(phi)
    heads = omega.shape[0]
    steps = np.arange(1, window + 1, dtype=np.float64)
    pre = sin(reshape(omega, (heads, 1)) * steps + reshape(phi, (heads, 1)))
    return spike_threshold(pre, surrogate)


def augment(content: Tensor, positional: Tensor) -> Tensor:
    """Tile the head trains across tokens and append them as channels.

    content is (tokens, channels, window), positional (heads, window);
    the result is (tokens, channels + heads, window) with the positional
    block identical for every token.
    """
    content, positional = as_tensor(content), as_tensor(positional)
    tokens, _, window = content.shape
    heads, pos_window = positional.shape
    if pos_window != window:
        raise ValueError(
            f"window mismatch: content has {window} steps, positional {pos_window}"
        )
    tiled = tile(reshape(positional, (1, heads, window)), (tokens, 1, 1))
    return concat([content, tiled], axis=1)


def project_phase_bank(omega: np.ndarray, phi: np.ndarray) -> None:
    """Clamp omega positive and wrap phi modulo 2*pi, in place.

    Called after every optimizer step so the bank invariants survive
    unconstrained gradient updates.
    """
    np.maximum(omega, OMEGA_FLOOR, out=omega)
    np.mod(phi, TWO_PI, out=phi)


def phase_rows(omega: np.ndarray, phi: np.ndarray) -> list[tuple[int, float, float]]:
    """(head, omega, phi) rows for the scatter diagnostic CSV."""
    return [(k, float(w), float(p)) for k, (w, p) in enumerate(zip(omega, phi))]
