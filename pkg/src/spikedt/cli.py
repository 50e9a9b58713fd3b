"""Command-line front end.

Subcommands: gen-data, train, eval, ablate, sweep, diag. Config files are
flat key=value text ('#' starts a comment); unknown keys are rejected.
Every report is CSV with a header row. Exit status is 0 on success and
nonzero with a message on stderr for any error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import ClipBatch, build_dataset, load_dataset, save_dataset
from .harness import (
    PRESETS,
    TrainConfig,
    ablate,
    evaluate,
    gate_csv_rows,
    sweep,
    train,
    write_csv,
)
from .model import MODES, load_checkpoint, save_checkpoint
from .positional import phase_rows

# config keys -> (target, attribute); "train" feeds TrainConfig, "model"
# feeds ModelConfig overrides
_CONFIG_KEYS: dict[str, tuple[str, str, type]] = {
    "lr": ("train", "lr", float),
    "weight_decay": ("train", "weight_decay", float),
    "batch_size": ("train", "batch_size", int),
    "epochs": ("train", "epochs", int),
    "val_interval": ("train", "val_interval", int),
    "seed": ("train", "seed", int),
    "mode": ("train", "mode", str),
    "plasticity": ("train", "plasticity", bool),
    "eta_local": ("train", "eta_local", float),
    "plasticity_decay": ("train", "plasticity_decay", float),
    "d": ("model", "d", int),
    "heads": ("model", "heads", int),
    "layers": ("model", "layers", int),
    "window": ("model", "window", int),
    "context": ("model", "context", int),
    "router_hidden": ("model", "router_hidden", int),
    "surrogate": ("model", "surrogate", str),
    "surrogate_slope": ("model", "surrogate_slope", float),
    "tau_m": ("model", "tau_m", float),
    "v_th": ("model", "v_th", float),
    "v_reset": ("model", "v_reset", float),
    "v_rest": ("model", "v_rest", float),
    "return_scale": ("model", "return_scale", float),
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"cannot parse boolean from {text!r}")


def read_config(path: str | Path) -> tuple[dict, dict]:
    """Parse key=value lines into (train kwargs, model overrides)."""
    train_kw: dict = {}
    model_kw: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            if value not in PRESETS:
                raise ValueError(f"unknown preset {value!r}; have {sorted(PRESETS)}")
            preset = dict(PRESETS[value])
            context = preset.pop("context", None)
            train_kw.update(preset)
            if context is not None:
                model_kw["context"] = context
            continue
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        target, attr, typ = _CONFIG_KEYS[key]
        parsed = _parse_bool(value) if typ is bool else typ(value)
        (train_kw if target == "train" else model_kw)[attr] = parsed
    return train_kw, model_kw


def _cmd_gen_data(args) -> int:
    dataset = build_dataset(args.env, args.steps, args.seed)
    save_dataset(dataset, args.out)
    expert = sum(e["length"] for e in dataset.episodes if e["source"] == "expert")
    total = sum(e["length"] for e in dataset.episodes)
    print(
        f"wrote {len(dataset.clips)} clips ({total} steps, "
        f"{expert / total:.1%} expert) to {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    train_kw, model_kw = ({}, {})
    if args.config:
        train_kw, model_kw = read_config(args.config)
    if args.mode:
        train_kw["mode"] = args.mode
    if args.seed is not None:
        train_kw["seed"] = args.seed
    cfg = TrainConfig(**train_kw)
    dataset = load_dataset(args.data)
    result = train(cfg, dataset, model_overrides=model_kw)
    save_checkpoint(args.out, result.model)
    for epoch, loss in zip(result.metrics.val_epochs, result.metrics.val_losses):
        print(f"epoch {epoch}: val_loss {loss:.6f}")
    print(f"saved checkpoint to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    result = evaluate(model, args.env, episodes=args.episodes, seed=args.seed)
    print(f"mean_return {result.mean:.3f} std {result.std:.3f} "
          f"episodes {args.episodes}")
    return 0


def _cmd_ablate(args) -> int:
    train_kw, model_kw = ({}, {})
    if args.config:
        train_kw, model_kw = read_config(args.config)
    train_kw.pop("mode", None)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    cfg = TrainConfig(**train_kw)
    dataset = load_dataset(args.data)
    metrics = ablate(dataset, args.env, args.outdir, cfg=cfg,
                     eval_episodes=args.episodes, model_overrides=model_kw)
    for mode in MODES:
        m = metrics[mode]
        print(f"{mode}: val_loss {m.final_val_loss:.6f} "
              f"return {m.eval_mean:.1f}±{m.eval_std:.1f}")
    print(f"reports in {args.outdir}")
    return 0


def _cmd_sweep(args) -> int:
    values = [int(v) for v in args.values.split(",") if v.strip()]
    model_kw = {}
    if args.config:
        _, model_kw = read_config(args.config)
    header, rows = sweep(args.axis, values, env_name=args.env, seed=args.seed,
                         model_overrides=model_kw)
    write_csv(args.out, header, rows)
    for row in rows:
        print(" ".join(f"{h}={v}" for h, v in zip(header, row)))
    return 0


def _cmd_diag(args) -> int:
    model = load_checkpoint(args.ckpt)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(
        outdir / "phase_params.csv",
        ["head", "omega", "phi"],
        [list(r) for r in phase_rows(model.params["pos.omega"], model.params["pos.phi"])],
    )
    if args.data:
        dataset = load_dataset(args.data)
        batch = ClipBatch.from_clips(dataset.clips[:1])
    else:
        from .harness import synthetic_batch

        batch = synthetic_batch(model.config, 1, args.seed)
    for layer, gates in enumerate(model.routing_gates(batch)):
        header, rows = gate_csv_rows(gates)
        write_csv(outdir / f"routing_gates_layer{layer}.csv", header, rows)
    print(f"diagnostics in {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikedt", description="spiking decision transformer toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect an offline expert/random dataset")
    p.add_argument("--env", required=True, choices=["cartpole", "mountaincar",
                                                    "acrobot", "pendulum"])
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=list(MODES), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all four modes")
    p.add_argument("--data", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="spike/latency scaling along T or N")
    p.add_argument("--axis", required=True, choices=["T", "N"])
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--env", default="cartpole")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("diag", help="emit phase scatter and gate heatmap CSVs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--outdir", default="diagnostics")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_diag)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
