"""Causally-masked self-attention over LIF spike rates, with dendritic routing.

Per block, the incoming token features are squashed to firing
probabilities, fused with the (optional) positional spike channels, and
driven through one LIF layer per projection. The resulting spike trains
are averaged over the temporal window into rates before the similarity
product, so attention itself runs on dense rate vectors while all the
spiking happens in the Q/K/V layers.

Head outputs are merged either by a uniform mean or by the routing MLP,
which scores the concatenated heads and softmax-normalizes the scores
into per-token gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .neurons import LIFParams, SpikeMeter, SurrogateSpec, lif_rate
from .tape import (
    Tensor,
    concat,
    index_select,
    masked_fill,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

# Finite stand-in for -inf: exp underflows to exactly 0 after the softmax
# shift, without generating inf - inf paths.
MASK_FILL = -1e30


@dataclass(frozen=True)
class RouterWeights:
    """Two-layer routing MLP: scores = w2 @ relu(w1 @ u + b1) + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def causal_mask(length: int) -> np.ndarray:
    """Boolean (length, length) mask, true where column j > row i."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def qkv_rates(
    x: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    pos_spikes: Tensor | None,
    lif: LIFParams,
    surrogate: SurrogateSpec,
    window: int,
    sample_rng: np.random.Generator | None = None,
    meter: SpikeMeter | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Spike-rate Q/K/V for a (batch, tokens, d) feature tensor.

    The projection weights span d + heads input channels; the trailing
    head channels consume the tiled positional trains and see zeros when
    positional coding is off. With ``sample_rng`` the content channels are
    Bernoulli-sampled per window step (metering mode); otherwise the LIF
    layers integrate the expected rates, constant across the window.
    """
    batch, tokens, d = x.shape
    w_all = concat([w_q, w_k, w_v], axis=1)
    out_ch = w_all.shape[1]
    w_content = index_select(w_all, 0, np.arange(d))
    heads_in = w_all.shape[0] - d

    if sample_rng is None:
        base = matmul(sigmoid(x), w_content)
        if pos_spikes is None:
            currents = [base] * window
        else:
            w_pos = index_select(w_all, 0, np.arange(d, d + heads_in))
            pos_cur = matmul(transpose(pos_spikes), w_pos)  # (window, out_ch)
            currents = [
                base + index_select(pos_cur, 0, np.array([t])) for t in range(window)
            ]
    else:
        probs = expit(x.data)
        content = (
            sample_rng.random(probs.shape + (window,)) < probs[..., None]
        ).astype(np.float64)
        if meter is not None:
            meter.add(content)
            if pos_spikes is not None:
                # positional channels are tiled across batch and tokens
                meter.add_count(batch * tokens * float(pos_spikes.data.sum()))
        wc = w_content.data
        if pos_spikes is None:
            currents = [Tensor(content[..., t] @ wc) for t in range(window)]
        else:
            wp = w_all.data[d:]
            pos = pos_spikes.data  # (heads, window)
            currents = [
                Tensor(content[..., t] @ wc + pos[:, t] @ wp) for t in range(window)
            ]
    rates = lif_rate(currents, lif, surrogate, meter=meter)
    third = out_ch // 3
    q = index_select(rates, 2, np.arange(0, third))
    k = index_select(rates, 2, np.arange(third, 2 * third))
    v = index_select(rates, 2, np.arange(2 * third, 3 * third))
    return q, k, v


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Per-head causal attention over rates.

    q, k, v are (batch, tokens, heads * d_head); returns head outputs
    (batch, tokens, heads, d_head). Masked positions are filled before the
    softmax, so row i carries exactly zero weight on columns j > i.
    """
    batch, tokens, ch = q.shape
    d_head = ch // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, tokens, heads, d_head)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(d_head))
    scores = masked_fill(scores, causal_mask(tokens), MASK_FILL)
    weights = softmax(scores)
    out = matmul(weights, vh)  # (batch, heads, tokens, d_head)
    return transpose(out, (0, 2, 1, 3))


def route(y: Tensor, router: RouterWeights | None) -> tuple[Tensor, Tensor]:
    """Merge head outputs into one vector per token.

    With a router, gates are the softmax of the MLP scores over heads
    (rows sum to one); without one, every head gets weight 1/heads. Both
    paths share the same gated-sum contraction, so a zero-initialized
    router reproduces the uniform mean bitwise.
    """
    batch, tokens, heads, d_head = y.shape
    if router is not None:
        u = reshape(y, (batch, tokens, heads * d_head))
        hidden = relu(matmul(u, router.w1) + router.b1)
        gates = softmax(matmul(hidden, router.w2) + router.b2)
        gates4 = reshape(gates, (batch, tokens, heads, 1))
    else:
        gates = Tensor(np.full(heads, 1.0 / heads))
        gates4 = reshape(gates, (1, 1, heads, 1))
    merged = (y * gates4).sum(axis=2)
    return merged, gates
