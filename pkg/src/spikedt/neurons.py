"""Discrete-time LIF neurons, surrogate gradients, and Bernoulli rate coding.

The membrane update is the forward-Euler step

    v' = v + (dt / tau_m) * (v_rest - v) + dt * c_m * I

with a spike whenever v' >= v_th and a hard reset to v_reset afterwards.
Spikes are binary in the forward pass; gradients cross the threshold via
the configured surrogate derivative evaluated at u = v' - v_th.

Training consumes expected firing rates (the sigmoid-squashed values) for
rate-coded inputs; Bernoulli sampling is only used when metering spike
counts at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tape import Array, CustomGradSpec, Tensor, as_tensor, custom_unary, record, smoothing_active

SURROGATE_KINDS = ("sigmoid", "fast-sigmoid", "piecewise-linear")


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate derivative for the spike threshold.

    kind selects the shape, slope its steepness:
      sigmoid           s(k*u) * (1 - s(k*u))
      fast-sigmoid      1 / (1 + |k*u|)^2
      piecewise-linear  max(0, 1 - |k*u|), zero outside |u| > 1/k
    """

    kind: str = "sigmoid"
    slope: float = 10.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.slope <= 0:
            raise ValueError("surrogate slope must be positive")

    def backward_map(self, u: Array) -> Array:
        ku = self.slope * np.asarray(u, dtype=np.float64)
        if self.kind == "sigmoid":
            s = expit(ku)
            return s * (1.0 - s)
        if self.kind == "fast-sigmoid":
            return 1.0 / (1.0 + np.abs(ku)) ** 2
        return np.maximum(0.0, 1.0 - np.abs(ku))

    def smooth_map(self, u: Array) -> Array:
        """Antiderivative of ``backward_map`` (smoothed stand-in forward)."""
        k = self.slope
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "sigmoid":
            return expit(k * u) / k
        if self.kind == "fast-sigmoid":
            return u / (1.0 + k * np.abs(u))
        inside = u - 0.5 * k * u * np.abs(u)
        return np.where(np.abs(u) <= 1.0 / k, inside, np.sign(u) / (2.0 * k))

    def threshold_spec(self) -> CustomGradSpec:
        return CustomGradSpec(
            forward=lambda u: (u >= 0.0).astype(np.float64),
            backward=self.backward_map,
            smooth=self.smooth_map,
        )


def surrogate_backward(u, spec: SurrogateSpec) -> Array:
    """Surrogate derivative values at pre-activation ``u``."""
    if isinstance(u, Tensor):
        u = u.data
    return spec.backward_map(np.asarray(u, dtype=np.float64))


def spike_threshold(u, spec: SurrogateSpec) -> Tensor:
    """Binary spike (u >= 0) with surrogate backward."""
    return custom_unary(u, spec.threshold_spec())


@dataclass(frozen=True)
class LIFParams:
    """Membrane constants; times are in the same unit as ``dt``."""

    tau_m: float = 20.0
    v_rest: float = 0.0
    v_th: float = 1.0
    v_reset: float = 0.0
    dt: float = 1.0
    c_m: float = 1.0

    def __post_init__(self):
        if self.tau_m <= 0:
            raise ValueError("tau_m must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.v_th > self.v_reset:
            raise ValueError("v_th must exceed v_reset")


@dataclass
class LIFState:
    """Membrane potentials and the spikes emitted on the last step."""

    v: Tensor
    spikes: Tensor


def lif_init(shape: tuple[int, ...], params: LIFParams) -> LIFState:
    return LIFState(
        v=Tensor(np.full(shape, params.v_rest)),
        spikes=Tensor(np.zeros(shape)),
    )


def lif_step(
    state: LIFState,
    input_current,
    params: LIFParams,
    surrogate: SurrogateSpec,
) -> tuple[LIFState, Tensor]:
    """One Euler step: integrate, threshold, hard-reset where spiking.

    Returns the new state and the spike tensor. Wherever a spike fires the
    returned membrane equals v_reset exactly.
    """
    current = as_tensor(input_current)
    if not np.all(np.isfinite(current.data)):
        raise ValueError("non-finite input current")
    leak = params.dt / params.tau_m
    drive = params.dt * params.c_m
    v_next = state.v + (params.v_rest - state.v) * leak + current * drive
    spikes = spike_threshold(v_next - params.v_th, surrogate)
    v_out = v_next * (1.0 - spikes) + spikes * params.v_reset
    return LIFState(v=v_out, spikes=spikes), spikes


class SpikeMeter:
    """Running count of binary spike events across an inference."""

    def __init__(self):
        self.total = 0.0

    def add(self, spikes: Array) -> None:
        self.total += float(np.asarray(spikes).sum())

    def add_count(self, count: float) -> None:
        self.total += float(count)


def lif_rate(
    currents: list[Tensor],
    params: LIFParams,
    surrogate: SurrogateSpec,
    meter: SpikeMeter | None = None,
) -> Tensor:
    """Run a LIF layer over a window of input currents; return mean spike rate.

    Fused equivalent of chaining ``lif_step`` over the window and averaging
    the spikes: one tape node with the full backward-through-time adjoint,
    which keeps the per-batch op count independent of the window length.
    Arithmetic matches the per-step composition bitwise.
    """
    window = len(currents)
    if window < 1:
        raise ValueError("window must hold at least one step")
    arrs = [as_tensor(c).data for c in currents]
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input current")
    leak = params.dt / params.tau_m
    drive = params.dt * params.c_m
    smooth = smoothing_active()

    v = np.full_like(arrs[0], params.v_rest)
    acc = np.zeros_like(arrs[0])
    pre_reset: list[Array] = []
    spikes: list[Array] = []
    for cur in arrs:
        v_next = v + (params.v_rest - v) * leak + cur * drive
        u = v_next - params.v_th
        if smooth:
            s = surrogate.smooth_map(u)
        else:
            s = (u >= 0.0).astype(np.float64)
            if meter is not None:
                meter.add(s)
        acc = acc + s
        pre_reset.append(v_next)
        spikes.append(s)
        v = v_next * (1.0 - s) + s * params.v_reset
    rates = acc * (1.0 / window)

    def adjoint(g):
        g_spike = g * (1.0 / window)
        dv = np.zeros_like(g)
        grads: list[Array] = [None] * window  # type: ignore[list-item]
        for t in range(window - 1, -1, -1):
            ds = g_spike + dv * (params.v_reset - pre_reset[t])
            du = ds * surrogate.backward_map(pre_reset[t] - params.v_th)
            dvp = dv * (1.0 - spikes[t]) + du
            grads[t] = dvp * drive
            dv = dvp * (1.0 - leak)
        return grads

    return record("lif_rate", list(currents), rates, adjoint)


def rate_code(embeddings, window: int, rng: np.random.Generator) -> Array:
    """Sample a Bernoulli spike train from sigmoid-squashed embeddings.

    Each entry of the result is an independent draw with probability equal
    to the squashed embedding value; shape is ``embeddings.shape + (window,)``.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    values = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    probs = expit(values.astype(np.float64))
    draws = rng.random(probs.shape + (window,))
    return (draws < probs[..., None]).astype(np.float64)
