"""Training, evaluation, metering, and report emission.

All reports are CSV with header rows. Wall-clock numbers never enter the
ablation report, so two runs with the same seed produce byte-identical
files; latency lives only in the sweep output.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Clip,
    ClipBatch,
    ClipDataset,
    return_stats,
    split_train_val,
)
from .envs import ENV_SPECS, make_env
from .model import (
    MODES,
    ModelConfig,
    SpikingDT,
    batch_loss,
    greedy_episode,
    save_checkpoint,
)
from .neurons import SpikeMeter
from .optim import AdamW
from .plasticity import PlasticityState, ReturnStats, accumulate_and_apply
from .positional import phase_rows
from .tape import backward

SPIKE_ENERGY_PJ = 5.0
PJ_PER_NJ = 1000.0

# Named hyperparameter bundles; the tables in circulation disagree, so all
# three are shipped and selectable.
PRESETS: dict[str, dict] = {
    # conservative long run: lr 1e-4, batch 16, 100 epochs, report every 5
    "default": dict(lr=1e-4, weight_decay=1e-2, batch_size=16, epochs=100,
                    val_interval=5),
    # larger-batch fast run: lr 3e-4, batch 64, 50 epochs
    "fast": dict(lr=3e-4, weight_decay=1e-2, batch_size=64, epochs=50,
                 val_interval=5),
    # evaluation-protocol variant: batch 16 with a 50-step context
    "long-context": dict(lr=1e-4, weight_decay=1e-2, batch_size=16, epochs=100,
                         val_interval=5, context=50),
}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborts with the offending epoch/batch."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    epochs: int = 100
    val_interval: int = 5
    seed: int = 0
    mode: str = "full"
    plasticity: bool = False
    eta_local: float = 0.05
    plasticity_decay: float = 0.9

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("lr", "batch_size", "val_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs and weight_decay must be non-negative")


@dataclass
class RunMetrics:
    val_epochs: list[int] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    # (epoch, omega, phi) snapshots taken at each validation interval
    phase_history: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    sbar: float = 0.0
    spikes_per_inference: float = 0.0
    energy_nj: float = 0.0
    latency_ms: float = 0.0  # only meaningful when a probe ran; never in reports
    eval_mean: float = 0.0
    eval_std: float = 0.0

    @property
    def final_val_loss(self) -> float:
        return self.val_losses[-1]


@dataclass
class TrainResult:
    model: SpikingDT
    metrics: RunMetrics
    stats: ReturnStats


def auto_return_scale(clips: list[Clip]) -> float:
    """Conditioning-signal scale: largest |return-to-go| in the data."""
    peak = max((float(np.abs(c.rtg).max()) for c in clips), default=1.0)
    return max(peak, 1.0)


def make_model_config(
    env_name: str,
    mode: str = "full",
    dataset: ClipDataset | None = None,
    **overrides,
) -> ModelConfig:
    spec = ENV_SPECS[env_name]
    fields: dict = dict(
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        action_space=spec.action_kind,
        mode=mode,
        env_name=env_name,
        action_scale=spec.action_high if spec.action_kind == "continuous" else 1.0,
    )
    if dataset is not None:
        fields["return_scale"] = auto_return_scale(dataset.clips)
        fields["context"] = dataset.clip_length
    fields.update(overrides)
    return ModelConfig(**fields)


def _validation_loss(model: SpikingDT, clips: list[Clip], batch_size: int) -> float:
    """Squared decode error over all unpadded validation steps."""
    total, count = 0.0, 0.0
    for start in range(0, len(clips), batch_size):
        batch = ClipBatch.from_clips(clips[start:start + batch_size])
        out = model.forward(batch, model.bind(None))
        steps = float((~batch.pad_mask).sum())
        total += model.val_loss(out, batch) * steps
        count += steps
    return total / max(count, 1.0)


def train(
    cfg: TrainConfig,
    dataset: ClipDataset,
    model: SpikingDT | None = None,
    model_overrides: dict | None = None,
) -> TrainResult:
    """AdamW training with a seeded 90/10 train/validation split.

    Validation loss is logged before training (epoch 0) and then at every
    ``val_interval`` epochs plus the final one. Optional three-factor
    updates are applied per batch from the same forward pass that feeds
    backprop, before the gradient step.
    """
    if not dataset.clips:
        raise ValueError("dataset is empty")
    if model is None:
        mcfg = make_model_config(
            dataset.env_name, cfg.mode, dataset=dataset, **(model_overrides or {})
        )
        model = SpikingDT(mcfg, seed=cfg.seed)
    train_clips, val_clips = split_train_val(dataset, 0.1, cfg.seed)
    if not val_clips:
        val_clips = train_clips
    stats = ReturnStats(*return_stats(dataset.clips))
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    plast = None
    if cfg.plasticity:
        plast = PlasticityState(decay=cfg.plasticity_decay, eta_local=cfg.eta_local)
    shuffler = np.random.default_rng(cfg.seed + 1)

    metrics = RunMetrics()

    def log_validation(epoch: int) -> None:
        metrics.val_epochs.append(epoch)
        metrics.val_losses.append(_validation_loss(model, val_clips, cfg.batch_size))
        if model.config.uses_positional:
            metrics.phase_history.append(
                (epoch, model.params["pos.omega"].copy(), model.params["pos.phi"].copy())
            )

    log_validation(0)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffler.permutation(len(train_clips))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            batch = ClipBatch.from_clips([train_clips[i] for i in chunk])
            loss, bound, out = batch_loss(model, batch)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            if plast is not None:
                accumulate_and_apply(
                    model, plast, batch, out.state_feats.data, out.decoded.data, stats
                )
            gm = backward(loss, wrt=bound.values())
            opt.step(model.params, {k: gm.grad(t) for k, t in bound.items()})
            model.project()
        if epoch % cfg.val_interval == 0 or epoch == cfg.epochs:
            log_validation(epoch)
    return TrainResult(model, metrics, stats)


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: list[float]


def evaluate(model: SpikingDT, env_name: str, episodes: int = 50, seed: int = 0) -> EvalResult:
    """Mean and population std of greedy returns over seeded episodes."""
    if model.config.env_name and model.config.env_name != env_name:
        raise ValueError(
            f"checkpoint was trained for {model.config.env_name!r}, not {env_name!r}"
        )
    env = make_env(env_name)
    returns = [
        greedy_episode(model, env, seed + i).episode_return for i in range(episodes)
    ]
    return EvalResult(float(np.mean(returns)), float(np.std(returns)), returns)


def spikes_per_inference(
    model: SpikingDT, batch: ClipBatch, seed: int = 0
) -> tuple[float, float]:
    """(normalized, raw) spike counts with sampled rate coding.

    The normalized figure divides the total over every spiking site by
    batch * context * window; the raw figure is total spikes per single
    inference (batch element).
    """
    meter = SpikeMeter()
    model.forward(batch, model.bind(None), sample_rng=np.random.default_rng(seed),
                  meter=meter)
    b = len(batch)
    denom = b * model.config.context * model.config.window
    return meter.total / denom, meter.total / b


def energy_estimate(total_spikes: float) -> float:
    """Energy proxy in nanojoules at 5 pJ per spike event."""
    if total_spikes < 0:
        raise ValueError("spike count cannot be negative")
    return total_spikes * SPIKE_ENERGY_PJ / PJ_PER_NJ


def latency_probe(
    model: SpikingDT, batch: ClipBatch, warmup: int = 3, iters: int = 10
) -> float:
    """Median wall-clock milliseconds of one forward+backward pass."""
    if warmup < 3 or iters < 10:
        raise ValueError("latency probe needs >= 3 warmup and >= 10 timed passes")
    times = []
    for i in range(warmup + iters):
        start = time.perf_counter()
        loss, bound, _ = batch_loss(model, batch)
        backward(loss, wrt=bound.values())
        elapsed = (time.perf_counter() - start) * 1000.0
        if i >= warmup:
            times.append(elapsed)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def gate_csv_rows(gates: np.ndarray) -> tuple[list[str], list[list]]:
    tokens, heads = gates.shape
    header = ["token"] + [f"head_{h}" for h in range(heads)]
    return header, [[t] + [gates[t, h] for h in range(heads)] for t in range(tokens)]


def ablate(
    dataset: ClipDataset,
    env_name: str,
    outdir: str | Path,
    cfg: TrainConfig | None = None,
    eval_episodes: int = 50,
    model_overrides: dict | None = None,
) -> dict[str, RunMetrics]:
    """Train all four wiring modes on shared data/seed and emit reports.

    Writes ablation_report.csv (per-mode losses, returns, spikes, energy,
    and the relative improvements over baseline), val_curves.csv, the
    learned phase-parameter scatter, and per-layer routing-gate heatmaps.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or TrainConfig()
    results: dict[str, TrainResult] = {}
    for mode in MODES:
        run_cfg = replace(cfg, mode=mode)
        results[mode] = train(run_cfg, dataset, model_overrides=model_overrides)

    probe = ClipBatch.from_clips(dataset.clips[: min(8, len(dataset.clips))])
    metrics: dict[str, RunMetrics] = {}
    for mode, res in results.items():
        m = res.metrics
        m.sbar, m.spikes_per_inference = spikes_per_inference(
            res.model, probe, seed=cfg.seed
        )
        m.energy_nj = energy_estimate(m.spikes_per_inference)
        ev = evaluate(res.model, env_name, episodes=eval_episodes, seed=cfg.seed)
        m.eval_mean, m.eval_std = ev.mean, ev.std
        metrics[mode] = m

    base = metrics["baseline"]
    report_rows = []
    for mode in MODES:
        m = metrics[mode]
        delta_l = (base.final_val_loss - m.final_val_loss) / base.final_val_loss * 100.0
        delta_r = (m.eval_mean - base.eval_mean) / abs(base.eval_mean) * 100.0
        report_rows.append([
            mode, m.final_val_loss, delta_l, m.eval_mean, m.eval_std, delta_r,
            m.sbar, m.spikes_per_inference, m.energy_nj,
        ])
    write_csv(
        outdir / "ablation_report.csv",
        ["mode", "val_loss", "delta_val_loss_pct", "mean_return", "return_std",
         "delta_return_pct", "sbar", "spikes_per_inference", "energy_nj"],
        report_rows,
    )

    epochs = metrics["baseline"].val_epochs
    curve_rows = [
        [e] + [metrics[mode].val_losses[i] for mode in MODES]
        for i, e in enumerate(epochs)
    ]
    write_csv(outdir / "val_curves.csv", ["epoch", *MODES], curve_rows)

    full = results["full"].model
    write_csv(
        outdir / "phase_params.csv",
        ["head", "omega", "phi"],
        [list(r) for r in phase_rows(full.params["pos.omega"], full.params["pos.phi"])],
    )
    history_rows = [
        [epoch, head, w, p]
        for epoch, omega, phi in results["full"].metrics.phase_history
        for head, w, p in phase_rows(omega, phi)
    ]
    write_csv(outdir / "phase_history.csv", ["epoch", "head", "omega", "phi"],
              history_rows)
    held_out = ClipBatch.from_clips(dataset.clips[:1])
    for mode in ("full", "route-only"):
        tag = mode.replace("-", "_")
        for layer, g in enumerate(results[mode].model.routing_gates(held_out)):
            header, rows = gate_csv_rows(g)
            write_csv(outdir / f"routing_gates_{tag}_layer{layer}.csv", header, rows)

    for mode, res in results.items():
        save_checkpoint(outdir / f"model_{mode}.ckpt", res.model)
    return metrics


def synthetic_batch(config: ModelConfig, batch: int, seed: int) -> ClipBatch:
    """Random clips matching a model's shapes, for metering and sweeps."""
    rng = np.random.default_rng(seed)
    n = config.context
    states = rng.normal(0.0, 1.0, size=(batch, n, config.state_dim))
    if config.discrete:
        actions = rng.integers(0, config.action_dim, size=(batch, n)).astype(np.int64)
    else:
        actions = rng.uniform(-1.0, 1.0, size=(batch, n, config.action_dim))
    g = rng.uniform(0.0, 1.0, size=(batch, n)) * config.return_scale
    return ClipBatch(
        states=states,
        actions=actions,
        rtg=g,
        timesteps=np.tile(np.arange(1, n + 1, dtype=np.int64), (batch, 1)),
        pad_mask=np.zeros((batch, n), dtype=bool),
    )


def sweep(
    axis: str,
    values: list[int],
    env_name: str = "cartpole",
    seed: int = 0,
    model_overrides: dict | None = None,
    batch: int = 2,
) -> tuple[list[str], list[list]]:
    """Spike and latency scaling along the window (T) or context (N) axis."""
    if axis not in ("T", "N"):
        raise ValueError("axis must be 'T' (window) or 'N' (context)")
    if any(v < 1 for v in values):
        raise ValueError("sweep values must be positive")
    header = [axis, "spikes_per_inference", "sbar", "latency_ms"]
    rows = []
    for value in values:
        overrides = dict(model_overrides or {})
        overrides["window" if axis == "T" else "context"] = int(value)
        config = make_model_config(env_name, "full", **overrides)
        model = SpikingDT(config, seed=seed)
        data = synthetic_batch(config, batch, seed)
        sbar, per_inf = spikes_per_inference(model, data, seed=seed)
        ms = latency_probe(model, data)
        rows.append([int(value), per_inf, sbar, ms])
    return header, rows
