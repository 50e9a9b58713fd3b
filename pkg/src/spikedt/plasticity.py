"""Local three-factor learning rule for the action head.

Each action-head weight carries an eligibility trace that accumulates
pre (transformer state feature) x post (decoded output) coincidences with
exponential decay. A modulatory scalar, the return-to-go normalized by
dataset statistics and clipped to [-1, 1], gates the traces into weight
updates. Updates are accumulated over one clip (with a fresh trace per
clip), clamped elementwise, and applied in one shot, so no gradient ever
flows through the deep layers; online fine-tuning touches the action head
and nothing else.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ClipBatch, clip_segments
from .model import SpikingDT, greedy_episode


@dataclass(frozen=True)
class ReturnStats:
    """Dataset-wide return-to-go mean/std, frozen at training time."""

    mu: float
    sigma: float


@dataclass
class PlasticityState:
    """Trace and accumulated update, both shaped like the (out, in) head."""

    decay: float = 0.9  # trace memory; no published value exists for it
    eta_local: float = 0.05
    clamp: float = 0.5  # elementwise bound on the per-clip update
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    delta_w: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def reset(self, out_dim: int, in_dim: int) -> None:
        self.trace = np.zeros((out_dim, in_dim))
        self.delta_w = np.zeros((out_dim, in_dim))


def trace_update(trace: np.ndarray, x: np.ndarray, y: np.ndarray, decay: float) -> np.ndarray:
    """One step of the eligibility dynamics: decay, then add post x pre."""
    return decay * trace + np.outer(y, x)


def modulator(g: float, mu: float, sigma: float) -> float:
    """Normalized, clipped return signal in [-1, 1]; zero when sigma is 0."""
    if sigma == 0.0:
        warnings.warn(
            "degenerate return statistics (sigma == 0); modulator forced to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return float(np.clip((g - mu) / sigma, -1.0, 1.0))


def clip_delta(
    state: PlasticityState,
    feats: np.ndarray,  # (n, d) pre-synaptic state features
    outputs: np.ndarray,  # (n, action_dim) decoded post-synaptic values
    returns: np.ndarray,  # (n,) return-to-go per step
    pad_mask: np.ndarray,
    stats: ReturnStats,
) -> np.ndarray:
    """Accumulated local update for one clip, starting from a fresh trace.

    Padded steps carry fabricated zero activity and are skipped entirely.
    """
    out_dim, in_dim = outputs.shape[1], feats.shape[1]
    state.reset(out_dim, in_dim)
    for t in range(len(returns)):
        if pad_mask[t]:
            continue
        state.trace = trace_update(state.trace, feats[t], outputs[t], state.decay)
        delta = modulator(float(returns[t]), stats.mu, stats.sigma)
        state.delta_w = state.delta_w + state.eta_local * delta * state.trace
    return state.delta_w


def accumulate_and_apply(
    model: SpikingDT,
    state: PlasticityState,
    batch: ClipBatch,
    feats: np.ndarray,  # (batch, n, d)
    outputs: np.ndarray,  # (batch, n, action_dim)
    stats: ReturnStats,
) -> None:
    """Apply the clamped per-clip updates to the action head, in place.

    ``head.w`` is stored input-major (d, action_dim), the transpose of the
    (action_dim, d) trace layout.
    """
    for b in range(len(batch)):
        delta = clip_delta(
            state, feats[b], outputs[b], batch.rtg[b], batch.pad_mask[b], stats
        )
        np.clip(delta, -state.clamp, state.clamp, out=delta)
        model.params["head.w"] += delta.T


def online_finetune(
    model: SpikingDT,
    env,
    episodes: int,
    seed: int,
    stats: ReturnStats,
    state: PlasticityState | None = None,
) -> SpikingDT:
    """Greedy rollouts with action-head-only adaptation.

    Returns a copy of the model whose non-head parameters are bitwise
    identical to the input; only ``head.w`` receives the three-factor
    updates, computed from each finished episode's realized returns.
    """
    tuned = SpikingDT(model.config, params={k: v.copy() for k, v in model.params.items()})
    if state is None:
        state = PlasticityState()
    seeder = np.random.default_rng(seed)
    for _ in range(episodes):
        ep_seed = int(seeder.integers(2**31 - 1))
        traj = greedy_episode(tuned, env, ep_seed)
        for clip in clip_segments(traj, tuned.config.context):
            batch = ClipBatch.from_clips([clip])
            out = tuned.forward(batch, tuned.bind(None))
            accumulate_and_apply(
                tuned, state, batch, out.state_feats.data, out.decoded.data, stats
            )
    return tuned
