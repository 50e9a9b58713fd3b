"""Offline dataset construction and persistence.

Trajectories from a 50/50 expert/random policy mix are segmented into
non-overlapping fixed-length clips. Return-to-go is the undiscounted suffix
sum of rewards, computed over the whole episode before slicing. A short
final window is front-padded: zero states, zero actions, zero return-to-go,
and a pad mask that is true exactly on the padded entries. Padded steps are
kept in the attention context but masked out of every loss.

Clips are stored in a portable little-endian binary format (magic bytes,
version, header, then raw float64 tensors) with a JSON-lines sidecar of
per-episode metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import ENV_SPECS, EnvSpec, Policy, expert_policy, make_env, random_policy

MAGIC = b"SDTD"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """File is not a clip dataset, or its version is unsupported."""


class DatasetCorruptError(ValueError):
    """File ends before the advertised payload does."""


@dataclass
class Trajectory:
    states: np.ndarray  # (steps, state_dim)
    actions: np.ndarray  # (steps,) int64 or (steps, action_dim) float64
    rewards: np.ndarray  # (steps,)
    source: str  # "expert" | "random"

    def __post_init__(self):
        n = len(self.rewards)
        if len(self.states) != n or len(self.actions) != n:
            raise ValueError("misaligned trajectory arrays")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite rewards")

    @property
    def steps(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class Clip:
    """Fixed-length training segment: front-padded (state, action, rtg) rows."""

    states: np.ndarray  # (n, state_dim)
    actions: np.ndarray  # (n,) int64 or (n, action_dim)
    rtg: np.ndarray  # (n,)
    timesteps: np.ndarray  # (n,) 1..n
    pad_mask: np.ndarray  # (n,) bool, true on padded rows

    @property
    def real_steps(self) -> int:
        return int((~self.pad_mask).sum())


@dataclass
class ClipBatch:
    states: np.ndarray
    actions: np.ndarray
    rtg: np.ndarray
    timesteps: np.ndarray
    pad_mask: np.ndarray

    @staticmethod
    def from_clips(clips: list[Clip]) -> "ClipBatch":
        return ClipBatch(
            states=np.stack([c.states for c in clips]),
            actions=np.stack([c.actions for c in clips]),
            rtg=np.stack([c.rtg for c in clips]),
            timesteps=np.stack([c.timesteps for c in clips]),
            pad_mask=np.stack([c.pad_mask for c in clips]),
        )

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class ClipDataset:
    env_name: str
    clip_length: int
    clips: list[Clip]
    episodes: list[dict] = field(default_factory=list)  # sidecar metadata

    @property
    def spec(self) -> EnvSpec:
        return ENV_SPECS[self.env_name]

    def __len__(self) -> int:
        return len(self.clips)


def rtg(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted return-to-go: suffix sums accumulated from the end."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0)
    return np.cumsum(r[::-1])[::-1].copy()


def clip_segments(traj: Trajectory, n: int = 20) -> list[Clip]:
    """Cut a trajectory into consecutive non-overlapping n-step clips.

    Return-to-go is computed over the full episode first; the trailing
    short window (if any) is front-padded.
    """
    if n < 1:
        raise ValueError("clip length must be at least 1")
    full_rtg = rtg(traj.rewards)
    action_pad: np.ndarray
    if traj.actions.ndim == 1:
        action_pad = np.zeros(n, dtype=np.int64)
    else:
        action_pad = np.zeros((n, traj.actions.shape[1]), dtype=np.float64)
    clips = []
    for start in range(0, traj.steps, n):
        stop = min(start + n, traj.steps)
        real = stop - start
        pad = n - real
        states = np.zeros((n, traj.states.shape[1]))
        actions = action_pad.copy()
        g = np.zeros(n)
        mask = np.zeros(n, dtype=bool)
        states[pad:] = traj.states[start:stop]
        actions[pad:] = traj.actions[start:stop]
        g[pad:] = full_rtg[start:stop]
        mask[:pad] = True
        clips.append(
            Clip(
                states=states,
                actions=actions,
                rtg=g,
                timesteps=np.arange(1, n + 1, dtype=np.int64),
                pad_mask=mask,
            )
        )
    return clips


def run_episode(env, policy: Policy, seed: int, policy_seed: int, source: str) -> Trajectory:
    state = env.reset(seed)
    rng = np.random.default_rng(policy_seed)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        action = policy(state, rng)
        tr = env.step(action)
        states.append(tr.state)
        actions.append(action)
        rewards.append(tr.reward)
        state = tr.next_state
        done = tr.done
    spec = env.spec
    if spec.action_kind == "discrete":
        acts = np.asarray(actions, dtype=np.int64)
    else:
        acts = np.asarray(actions, dtype=np.float64).reshape(len(actions), -1)
    return Trajectory(
        states=np.asarray(states, dtype=np.float64),
        actions=acts,
        rewards=np.asarray(rewards, dtype=np.float64),
        source=source,
    )


def collect(
    env_name: str,
    total_steps: int,
    seed: int,
    expert_fraction: float = 0.5,
) -> list[Trajectory]:
    """Gather whole episodes until ``total_steps`` is covered.

    Episodes alternate between the expert and random policies so that each
    source ends within one episode of its target share of steps.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    spec = ENV_SPECS[env_name]
    env = make_env(env_name)
    policies = {"expert": expert_policy(env_name), "random": random_policy(spec)}
    counts = {"expert": 0, "random": 0}
    targets = {"expert": expert_fraction, "random": 1.0 - expert_fraction}
    seeder = np.random.default_rng(seed)
    trajectories: list[Trajectory] = []
    while counts["expert"] + counts["random"] < total_steps:
        # pick whichever source is furthest below its target share
        done = counts["expert"] + counts["random"]
        deficits = {
            k: targets[k] * (done + 1) - counts[k] for k in ("expert", "random")
        }
        source = "expert" if deficits["expert"] >= deficits["random"] else "random"
        ep_seed = int(seeder.integers(2**31 - 1))
        pol_seed = int(seeder.integers(2**31 - 1))
        traj = run_episode(env, policies[source], ep_seed, pol_seed, source)
        counts[source] += traj.steps
        trajectories.append(traj)
    return trajectories


def build_dataset(
    env_name: str, total_steps: int, seed: int, clip_length: int = 20,
    expert_fraction: float = 0.5,
) -> ClipDataset:
    trajectories = collect(env_name, total_steps, seed, expert_fraction)
    clips: list[Clip] = []
    episodes = []
    for traj in trajectories:
        clips.extend(clip_segments(traj, clip_length))
        episodes.append(
            {"source": traj.source, "return": traj.episode_return, "length": traj.steps}
        )
    return ClipDataset(env_name, clip_length, clips, episodes)


def return_stats(clips: list[Clip]) -> tuple[float, float]:
    """Mean and population std of return-to-go over all unpadded rows."""
    values = np.concatenate([c.rtg[~c.pad_mask] for c in clips])
    return float(values.mean()), float(values.std())


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def save_dataset(dataset: ClipDataset, path: str | Path) -> None:
    path = Path(path)
    spec = dataset.spec
    first = dataset.clips[0] if dataset.clips else None
    state_dim = spec.state_dim
    action_dim = 1 if spec.action_kind == "discrete" else spec.action_dim
    if first is not None and first.actions.ndim == 2:
        action_dim = first.actions.shape[1]
    name_bytes = dataset.env_name.encode("utf-8")
    kind_byte = 0 if spec.action_kind == "discrete" else 1
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<H", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<BIIIQ", kind_byte, dataset.clip_length, state_dim,
                             action_dim, len(dataset.clips)))
        for clip in dataset.clips:
            fh.write(clip.states.astype("<f8").tobytes())
            fh.write(clip.actions.astype("<f8").tobytes())
            fh.write(clip.rtg.astype("<f8").tobytes())
            fh.write(clip.timesteps.astype("<f8").tobytes())
            fh.write(clip.pad_mask.astype("<f8").tobytes())
    if dataset.episodes:
        with open(sidecar_path(path), "w") as fh:
            for ep in dataset.episodes:
                fh.write(json.dumps(ep) + "\n")


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.jsonl")


def _read_exact(fh, count: int) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise DatasetCorruptError("dataset file is truncated")
    return buf


def load_dataset(path: str | Path) -> ClipDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}; not a clip dataset")
        version = _read_exact(fh, 1)[0]
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        env_name = _read_exact(fh, name_len).decode("utf-8")
        kind_byte, n, state_dim, action_dim, count = struct.unpack(
            "<BIIIQ", _read_exact(fh, 21)
        )
        discrete = kind_byte == 0
        clips = []
        for _ in range(count):
            states = np.frombuffer(
                _read_exact(fh, 8 * n * state_dim), dtype="<f8"
            ).reshape(n, state_dim).copy()
            actions_f = np.frombuffer(
                _read_exact(fh, 8 * n * action_dim), dtype="<f8"
            ).reshape(n, action_dim).copy()
            g = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").copy()
            ts = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").copy()
            mask = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").copy()
            actions = (
                actions_f[:, 0].astype(np.int64) if discrete else actions_f
            )
            clips.append(
                Clip(
                    states=states,
                    actions=actions,
                    rtg=g,
                    timesteps=ts.astype(np.int64),
                    pad_mask=mask.astype(bool),
                )
            )
        trailing = fh.read(1)
        if trailing:
            raise DatasetCorruptError("trailing bytes after advertised payload")
    episodes = []
    side = sidecar_path(path)
    if side.exists():
        with open(side) as fh:
            episodes = [json.loads(line) for line in fh if line.strip()]
    return ClipDataset(env_name, n, clips, episodes)


def split_train_val(
    dataset: ClipDataset, val_fraction: float, seed: int
) -> tuple[list[Clip], list[Clip]]:
    """Seeded shuffle-and-split of clips (validation share rounded down)."""
    order = np.random.default_rng(seed).permutation(len(dataset.clips))
    n_val = int(len(order) * val_fraction)
    val_idx = set(order[:n_val].tolist())
    train = [c for i, c in enumerate(dataset.clips) if i not in val_idx]
    val = [dataset.clips[i] for i in sorted(val_idx)]
    return train, val
