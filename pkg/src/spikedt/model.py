"""Return-conditioned spiking sequence model.

A clip of N (return-to-go, state, action) triples is embedded into a
3N-token sequence [g_1, s_1, a_1, ..., g_N, s_N, a_N], normalized, and run
through a stack of spiking attention blocks. The action for step t is
decoded from the transformer output at the state token s_t, so the causal
mask guarantees it depends only on tokens up to and including s_t.

Four wiring modes share one parameter set:

  baseline    learned timestep embeddings, uniform head averaging
  pos-only    phase-shifted positional spike channels, uniform averaging
  route-only  learned timestep embeddings, dendritic routing
  full        positional spikes and routing together

The timestep table and the phase bank are allocated in every mode (the
unused one simply receives no gradient), so parameter counts differ across
modes only by the routing MLP.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tape
from .attention import RouterWeights, attend, qkv_rates, route
from .data import ClipBatch, Trajectory
from .neurons import LIFParams, SpikeMeter, SurrogateSpec
from .positional import generate, init_phase_bank, project_phase_bank
from .tape import Tape, Tensor, cross_entropy_logits, index_select, layer_norm, mse

MODES = ("baseline", "pos-only", "route-only", "full")

CKPT_MAGIC = b"SDTC"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """File is not a model checkpoint, or its version is unsupported."""


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    action_dim: int
    action_space: str = "discrete"  # "discrete" | "continuous"
    mode: str = "full"
    d: int = 128
    heads: int = 4
    layers: int = 2
    window: int = 10  # LIF / rate-coding timesteps per token
    context: int = 20  # clip length N
    router_hidden: int = 16
    surrogate: str = "sigmoid"
    surrogate_slope: float = 10.0
    tau_m: float = 20.0
    v_rest: float = 0.0
    v_th: float = 1.0
    v_reset: float = 0.0
    dt: float = 1.0
    c_m: float = 1.0
    return_scale: float = 1.0
    action_scale: float = 1.0
    env_name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.action_space not in ("discrete", "continuous"):
            raise ValueError(f"bad action space {self.action_space!r}")
        if self.d % self.heads != 0:
            raise ValueError("hidden size must divide evenly across heads")
        for name in ("d", "heads", "layers", "window", "context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def uses_positional(self) -> bool:
        return self.mode in ("pos-only", "full")

    @property
    def uses_router(self) -> bool:
        return self.mode in ("route-only", "full")

    @property
    def discrete(self) -> bool:
        return self.action_space == "discrete"

    def lif_params(self) -> LIFParams:
        return LIFParams(
            tau_m=self.tau_m, v_rest=self.v_rest, v_th=self.v_th,
            v_reset=self.v_reset, dt=self.dt, c_m=self.c_m,
        )

    def surrogate_spec(self) -> SurrogateSpec:
        return SurrogateSpec(kind=self.surrogate, slope=self.surrogate_slope)


@dataclass
class ModelOutput:
    logits: Tensor  # (batch, N, action_dim) pre-decode
    decoded: Tensor  # softmax probabilities or tanh values
    state_feats: Tensor  # (batch, N, d) transformer output at state tokens
    gates: list[np.ndarray]  # per-layer routing gates, detached


class SpikingDT:
    """Model = config + named parameter arrays; forwards are pure tape runs."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = _init_params(config, seed) if params is None else params

    # -- parameters ---------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def bind(self, tp: Tape | None) -> dict[str, Tensor]:
        """Lift parameters onto a tape (or to constants for inference)."""
        if tp is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tp.leaf(v) for k, v in self.params.items()}

    def project(self) -> None:
        """Re-impose parameter-domain constraints after an optimizer step."""
        project_phase_bank(self.params["pos.omega"], self.params["pos.phi"])

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        batch: ClipBatch,
        pt: dict[str, Tensor],
        sample_rng: np.random.Generator | None = None,
        meter: SpikeMeter | None = None,
    ) -> ModelOutput:
        cfg = self.config
        n = cfg.context
        b = len(batch)
        if batch.states.shape[1] != n:
            raise ValueError(f"clip length {batch.states.shape[1]} != context {n}")
        if not (np.all(np.isfinite(batch.states)) and np.all(np.isfinite(batch.rtg))):
            raise ValueError("non-finite clip inputs")

        g_in = Tensor((batch.rtg / cfg.return_scale)[..., None])
        g_emb = g_in @ pt["embed.w_g"] + pt["embed.b_g"]
        s_emb = Tensor(batch.states) @ pt["embed.w_s"] + pt["embed.b_s"]
        if cfg.discrete:
            act_in = np.eye(cfg.action_dim)[batch.actions.astype(np.intp)]
        else:
            act_in = batch.actions
        a_emb = Tensor(act_in) @ pt["embed.w_a"] + pt["embed.b_a"]

        if not cfg.uses_positional:
            idx = (batch.timesteps.astype(np.intp) - 1).ravel()
            te = index_select(pt["embed.timestep"], 0, idx).reshape((b, n, cfg.d))
            g_emb = g_emb + te
            s_emb = s_emb + te
            a_emb = a_emb + te

        tokens = tape.concat([g_emb, s_emb, a_emb], axis=2).reshape((b, 3 * n, cfg.d))
        x = layer_norm(tokens, pt["embed.ln_g"], pt["embed.ln_b"])

        pos_spikes = None
        if cfg.uses_positional:
            pos_spikes = generate(
                pt["pos.omega"], pt["pos.phi"], cfg.window, cfg.surrogate_spec()
            )

        gates_log: list[np.ndarray] = []
        lif = cfg.lif_params()
        surr = cfg.surrogate_spec()
        for i in range(cfg.layers):
            x, gates = self._block(x, i, pt, pos_spikes, lif, surr, sample_rng, meter)
            gates_log.append(np.broadcast_to(gates.data, (b, 3 * n, cfg.heads)).copy())

        state_idx = np.arange(1, 3 * n, 3)
        feats = index_select(x, 1, state_idx)
        logits = feats @ pt["head.w"] + pt["head.b"]
        decoded = tape.softmax(logits) if cfg.discrete else tape.tanh(logits)
        return ModelOutput(logits, decoded, feats, gates_log)

    def _block(self, x, i, pt, pos_spikes, lif, surr, sample_rng, meter):
        cfg = self.config
        q, k, v = qkv_rates(
            x, pt[f"block{i}.w_q"], pt[f"block{i}.w_k"], pt[f"block{i}.w_v"],
            pos_spikes, lif, surr, cfg.window, sample_rng, meter,
        )
        heads_out = attend(q, k, v, cfg.heads)
        router = None
        if cfg.uses_router:
            router = RouterWeights(
                w1=pt[f"block{i}.router_w1"], b1=pt[f"block{i}.router_b1"],
                w2=pt[f"block{i}.router_w2"], b2=pt[f"block{i}.router_b2"],
            )
        merged, gates = route(heads_out, router)
        attn_out = merged @ pt[f"block{i}.w_o"] + pt[f"block{i}.b_o"]
        x1 = layer_norm(x + attn_out, pt[f"block{i}.ln1_g"], pt[f"block{i}.ln1_b"])
        hidden = tape.relu(x1 @ pt[f"block{i}.ffn_w1"] + pt[f"block{i}.ffn_b1"])
        ffn = hidden @ pt[f"block{i}.ffn_w2"] + pt[f"block{i}.ffn_b2"]
        x2 = layer_norm(x1 + ffn, pt[f"block{i}.ln2_g"], pt[f"block{i}.ln2_b"])
        return x2, gates

    # -- losses --------------------------------------------------------------

    def loss(self, out: ModelOutput, batch: ClipBatch) -> Tensor:
        """Training objective, averaged over unpadded steps.

        Cross-entropy on logits for discrete actions; mean squared error in
        the tanh-normalized action space for continuous ones.
        """
        cfg = self.config
        keep = (~batch.pad_mask).astype(np.float64)
        count = max(keep.sum(), 1.0)
        if cfg.discrete:
            b, n, a = out.logits.shape
            return cross_entropy_logits(
                out.logits.reshape((b * n, a)),
                batch.actions.ravel(),
                weight=keep.ravel(),
                denom=count,
            )
        target = batch.actions / cfg.action_scale
        return mse(out.decoded, Tensor(target), weight=keep[..., None], denom=count)

    def val_loss(self, out: ModelOutput, batch: ClipBatch) -> float:
        """Validation metric: squared error of decoded actions per step.

        Uses one-hot targets against the softmax output for discrete
        actions, so the same metric applies to every task.
        """
        cfg = self.config
        keep = (~batch.pad_mask).astype(np.float64)
        count = max(keep.sum(), 1.0)
        if cfg.discrete:
            target = np.eye(cfg.action_dim)[batch.actions.astype(np.intp)]
        else:
            target = batch.actions / cfg.action_scale
        diff = out.decoded.data - target
        return float((keep[..., None] * diff * diff).sum() / count)

    # -- acting ---------------------------------------------------------------

    def act_greedy(
        self,
        states: list[np.ndarray],
        actions: list,
        rtgs: list[float],
    ) -> object:
        """Greedy action for the newest state in a running episode.

        ``states`` and ``rtgs`` include the current step; ``actions`` holds
        only completed steps. Keeps the most recent ``context`` steps; the
        current step sits at the last position with a placeholder action
        (causality makes the placeholder unobservable to its own
        prediction). Discrete ties break toward the lowest index.
        """
        cfg = self.config
        batch = self._rollout_batch(states, actions, rtgs)
        out = self.forward(batch, self.bind(None))
        if cfg.discrete:
            return int(np.argmax(out.logits.data[0, -1]))
        return out.decoded.data[0, -1] * cfg.action_scale

    def _rollout_batch(self, states, actions, rtgs) -> ClipBatch:
        cfg = self.config
        n = cfg.context
        k = min(len(states), n)
        st = np.zeros((n, cfg.state_dim))
        g = np.zeros(n)
        mask = np.zeros(n, dtype=bool)
        mask[: n - k] = True
        st[n - k:] = np.asarray(states[-k:], dtype=np.float64)
        g[n - k:] = np.asarray(rtgs[-k:], dtype=np.float64)
        if cfg.discrete:
            act = np.zeros(n, dtype=np.int64)
            tail = np.asarray(actions[-(k - 1):] if k > 1 else [], dtype=np.int64)
        else:
            act = np.zeros((n, cfg.action_dim))
            tail = np.asarray(
                actions[-(k - 1):] if k > 1 else [], dtype=np.float64
            ).reshape(-1, cfg.action_dim)
        if len(tail):
            act[n - k: n - 1] = tail
        return ClipBatch(
            states=st[None],
            actions=act[None],
            rtg=g[None],
            timesteps=np.arange(1, n + 1, dtype=np.int64)[None],
            pad_mask=mask[None],
        )

    # -- diagnostics -----------------------------------------------------------

    def routing_gates(self, batch: ClipBatch) -> list[np.ndarray]:
        """Per-layer (tokens, heads) gate matrices for the first batch item."""
        out = self.forward(batch, self.bind(None))
        return [g[0] for g in out.gates]


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, heads, dh, m = cfg.d, cfg.heads, cfg.d_head, cfg.router_hidden
    in_ch = d + heads

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    p: dict[str, np.ndarray] = {}
    p["embed.w_g"] = normal((1, d), 0.02)
    p["embed.b_g"] = np.zeros(d)
    p["embed.w_s"] = normal((cfg.state_dim, d), 0.02)
    p["embed.b_s"] = np.zeros(d)
    p["embed.w_a"] = normal((cfg.action_dim, d), 0.02)
    p["embed.b_a"] = np.zeros(d)
    p["embed.timestep"] = normal((cfg.context, d), 0.02)
    p["embed.ln_g"] = np.ones(d)
    p["embed.ln_b"] = np.zeros(d)
    bank = init_phase_bank(heads, rng)
    p["pos.omega"] = bank.omega
    p["pos.phi"] = bank.phi
    for i in range(cfg.layers):
        for name in ("w_q", "w_k", "w_v"):
            p[f"block{i}.{name}"] = normal((in_ch, heads * dh), 1.0 / np.sqrt(in_ch))
        p[f"block{i}.w_o"] = normal((dh, d), 1.0 / np.sqrt(dh))
        p[f"block{i}.b_o"] = np.zeros(d)
        p[f"block{i}.ln1_g"] = np.ones(d)
        p[f"block{i}.ln1_b"] = np.zeros(d)
        p[f"block{i}.ffn_w1"] = normal((d, 4 * d), 1.0 / np.sqrt(d))
        p[f"block{i}.ffn_b1"] = np.zeros(4 * d)
        p[f"block{i}.ffn_w2"] = normal((4 * d, d), 1.0 / np.sqrt(4 * d))
        p[f"block{i}.ffn_b2"] = np.zeros(d)
        p[f"block{i}.ln2_g"] = np.ones(d)
        p[f"block{i}.ln2_b"] = np.zeros(d)
        if cfg.uses_router:
            p[f"block{i}.router_w1"] = normal((heads * dh, m), 1.0 / np.sqrt(heads * dh))
            p[f"block{i}.router_b1"] = np.zeros(m)
            p[f"block{i}.router_w2"] = normal((m, heads), 1.0 / np.sqrt(m))
            p[f"block{i}.router_b2"] = np.zeros(heads)
    p["head.w"] = normal((d, cfg.action_dim), 1.0 / np.sqrt(d))
    p["head.b"] = np.zeros(cfg.action_dim)
    return p


def batch_loss(model: SpikingDT, batch: ClipBatch) -> tuple[Tensor, dict[str, Tensor], ModelOutput]:
    """Forward on a fresh tape; returns (loss, bound params, outputs)."""
    tp = Tape()
    bound = model.bind(tp)
    out = model.forward(batch, bound)
    return model.loss(out, batch), bound, out


def greedy_episode(model: SpikingDT, env, seed: int) -> Trajectory:
    """Run one episode with the deterministic greedy policy.

    Conditioning starts at the environment's target return and is
    decremented by each observed reward.
    """
    obs = env.reset(seed)
    rtg_now = float(env.spec.target_return)
    states: list[np.ndarray] = []
    actions: list = []
    rtgs: list[float] = []
    rewards: list[float] = []
    done = False
    while not done:
        states.append(obs)
        rtgs.append(rtg_now)
        action = model.act_greedy(states, actions, rtgs)
        tr = env.step(action)
        actions.append(action)
        rewards.append(tr.reward)
        rtg_now -= tr.reward
        obs = tr.next_state
        done = tr.done
    if model.config.discrete:
        acts = np.asarray(actions, dtype=np.int64)
    else:
        acts = np.asarray(actions, dtype=np.float64).reshape(len(actions), -1)
    return Trajectory(
        states=np.asarray(states, dtype=np.float64),
        actions=acts,
        rewards=np.asarray(rewards, dtype=np.float64),
        source="greedy",
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: SpikingDT) -> None:
    names = sorted(model.params)
    header = json.dumps(
        {
            "config": asdict(model.config),
            "tensors": [
                {"name": k, "shape": list(model.params[k].shape)} for k in names
            ],
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes([CKPT_VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for k in names:
            fh.write(model.params[k].astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> SpikingDT:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}; not a checkpoint")
        version = fh.read(1)
        if len(version) != 1 or version[0] != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise CheckpointFormatError("truncated checkpoint header")
        (hlen,) = struct.unpack("<I", raw)
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointFormatError("truncated checkpoint payload")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return SpikingDT(config, params=params)
