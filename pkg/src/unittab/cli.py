"""Command-line surface: gen-data, pretrain, finetune, eval, grad-check.

Runs are pure functions of (config file, flags, referenced input files);
flag overrides beat the UNITTAB_SEED environment variable, which beats the
config file. Unknown config keys are errors. Exit codes: 0 success,
1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CsvSpec, MultitypeConfig, PollutionConfig, export_dataset,
    gen_multitype_transactions, gen_pollution_like, last_crop, read_csv,
    split_by_entity, window,
)
from .embedding import prepare_series
from .metrics import format_report_table
from .model import Model, ModelConfig
from .schema import schema_from_json
from .training import TrainConfig, evaluate, finetune, pretrain
from .verify import run_suite


class UsageError(Exception):
    pass


_DATA_KEYS = {"dir", "checkpoint", "test_fraction", "window_t", "window_stride", "split_seed"}


def load_run_config(path, overrides: dict) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}")
    problems = []
    known_top = {"model", "train", "data", "out_dir"}
    for key in raw:
        if key not in known_top:
            problems.append(f"unknown config key {key!r}")
    model_fields = set(ModelConfig().to_dict())
    for key in raw.get("model", {}):
        if key not in model_fields:
            problems.append(f"unknown model config key {key!r}")
    train_fields = set(TrainConfig().to_dict())
    for key in raw.get("train", {}):
        if key not in train_fields:
            problems.append(f"unknown train config key {key!r}")
    for key in raw.get("data", {}):
        if key not in _DATA_KEYS:
            problems.append(f"unknown data config key {key!r}")
    if problems:
        raise UsageError("; ".join(problems))
    cfg = {"model": dict(raw.get("model", {})), "train": dict(raw.get("train", {})),
           "data": dict(raw.get("data", {})), "out_dir": raw.get("out_dir", "run")}
    env_seed = os.environ.get("UNITTAB_SEED")
    if env_seed is not None:
        cfg["train"]["seed"] = int(env_seed)
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "out_dir":
            cfg["out_dir"] = value
        elif key in ("dir", "checkpoint"):
            cfg["data"][key] = value
        else:
            cfg["train"][key] = value
    return cfg


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg, sort_keys=True, indent=2))


def _load_dataset(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory {d} does not exist")
    schema = schema_from_json((d / "schema.json").read_text())
    series, _ = read_csv(d / "data.csv", schema, CsvSpec())
    manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
    labels = json.loads((d / "labels.json").read_text()) if (d / "labels.json").exists() else None
    targets = json.loads((d / "targets.json").read_text()) if (d / "targets.json").exists() else None
    return schema, series, manifest, labels, targets


def _task_samples(cfg: dict, model_t_max: int, schema, series, manifest, labels, targets):
    """Fine-tuning protocol per generator kind: randomly split sliding
    windows (non-overlapping by stride) with a regression target for
    pollution-like data, by-entity splits of last-t_max crops with the
    entity churn label for multitype transactions."""
    kind = manifest.get("kind", "multitype_transactions" if labels else "pollution_like")
    data_cfg = cfg["data"]
    split_seed = int(data_cfg.get("split_seed", cfg["train"].get("seed", 0)))
    test_fraction = float(data_cfg.get("test_fraction", 0.25))
    expanded, encoded = prepare_series(series, schema)
    if kind == "pollution_like":
        if targets is None:
            raise UsageError("pollution-like fine-tuning needs targets.json next to data.csv")
        t = int(data_cfg.get("window_t", 10))
        stride = int(data_cfg.get("window_stride", 10))
        if t > model_t_max:
            raise UsageError(f"window_t={t} exceeds the model's t_max={model_t_max}")
        wins = []
        for s in encoded:
            for w in window(s, t, stride):
                w.label = float(targets[s.entity_id][w.start + t - 1])
                wins.append(w)
        rng = np.random.default_rng(np.random.SeedSequence([split_seed]))
        order = rng.permutation(len(wins))
        n_test = int(round(test_fraction * len(wins)))
        test_w = [wins[i] for i in order[:n_test]]
        train_w = [wins[i] for i in order[n_test:]]
        return train_w, test_w, "regression", expanded
    if labels is None:
        raise UsageError("binary fine-tuning needs labels.json next to data.csv")
    for s in encoded:
        s.label = int(labels[s.entity_id])
    split = split_by_entity(encoded, test_fraction, split_seed)
    train = [last_crop(s, model_t_max) for s in split.train]
    test = [last_crop(s, model_t_max) for s in split.test]
    return train, test, "binary", expanded


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    seed = int(os.environ.get("UNITTAB_SEED", args.seed))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        print(f"error: output directory {out} is not writable: {e}", file=sys.stderr)
        return 2
    if args.kind == "pollution_like":
        cfg = PollutionConfig(n_entities=args.entities, rows_per_entity=args.rows,
                              noise=args.noise, q_bins=args.q_bins)
        ds = gen_pollution_like(cfg, seed)
        export_dataset(out, ds.series, ds.schema, row_targets=ds.row_targets,
                       extra={"kind": "pollution_like", "seed": seed, "noise": args.noise})
    else:
        cfg = MultitypeConfig(n_entities=args.entities, mean_len=args.mean_len,
                              churn_rate=args.churn_rate, q_bins=args.q_bins)
        ds = gen_multitype_transactions(cfg, seed)
        export_dataset(out, ds.series, ds.schema,
                       labels={s.entity_id: int(s.label) for s in ds.series},
                       extra={"kind": "multitype_transactions", "seed": seed,
                              "churn_rate": args.churn_rate, "rule": ds.rule})
    print(f"wrote {args.kind} dataset to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed, "epochs": args.epochs,
                                        "lr": args.lr, "batch_size": args.batch_size,
                                        "max_steps": args.max_steps, "out_dir": args.out,
                                        "dir": args.data})
    out = Path(cfg["out_dir"])
    _write_resolved(cfg, out)
    schema, series, *_ = _load_dataset(cfg["data"].get("dir"))
    expanded, encoded = prepare_series(series, schema)
    model_cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **cfg["model"],
                                       "n_row_types": expanded.n_row_types})
    train_cfg = TrainConfig.from_dict({**TrainConfig().to_dict(), **cfg["train"]})
    model = Model(model_cfg, expanded, seed=train_cfg.seed)
    result = pretrain(encoded, model, train_cfg,
                      metrics_path=out / "metrics.ndjson",
                      checkpoint_path=out / "model.ckpt")
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"pretrained {result.steps} steps: loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed, "epochs": args.epochs,
                                        "lr": args.lr, "batch_size": args.batch_size,
                                        "max_steps": args.max_steps, "out_dir": args.out,
                                        "dir": args.data, "checkpoint": args.checkpoint})
    out = Path(cfg["out_dir"])
    _write_resolved(cfg, out)
    ckpt_path = cfg["data"].get("checkpoint")
    if not ckpt_path or not Path(ckpt_path).exists():
        raise UsageError(f"checkpoint {ckpt_path!r} not found")
    schema, series, manifest, labels, targets = _load_dataset(cfg["data"].get("dir"))
    expanded, _ = prepare_series(series, schema)
    state = load_checkpoint(ckpt_path, expanded)
    model = state.model
    train, test, task, _ = _task_samples(cfg, model.config.t_max, schema, series,
                                         manifest, labels, targets)
    train_cfg = TrainConfig.from_dict({**TrainConfig().to_dict(), **cfg["train"]})
    result = finetune(train, test, model, task, train_cfg,
                      metrics_path=out / "finetune_metrics.ndjson")
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed]))
    save_checkpoint(out / "finetuned.ckpt", model, None, train_cfg, rng, 0)
    (out / "eval_report.json").write_text(result.report.to_json())
    print(format_report_table({"finetuned": result.report}))
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, {"out_dir": args.out, "dir": args.data,
                                        "checkpoint": args.checkpoint})
    ckpt_path = cfg["data"].get("checkpoint")
    if not ckpt_path or not Path(ckpt_path).exists():
        raise UsageError(f"checkpoint {ckpt_path!r} not found")
    schema, series, manifest, labels, targets = _load_dataset(cfg["data"].get("dir"))
    expanded, _ = prepare_series(series, schema)
    state = load_checkpoint(ckpt_path, expanded)
    model = state.model
    _, test, task, _ = _task_samples(cfg, model.config.t_max, schema, series,
                                     manifest, labels, targets)
    report = evaluate(model, test, task)
    print(format_report_table({"checkpoint": report}))
    if args.out:
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(report.to_json())
    return 0


def cmd_grad_check(args) -> int:
    results = run_suite(ops=args.op or None, inject_bug=args.inject_bug,
                        trials=args.trials)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok = ok and r.passed
        print(f"{r.name.ljust(width)}  max_rel_err={r.max_err:.3e}  tol={r.tol:.0e}  {status}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unittab")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--kind", required=True, choices=["pollution_like", "multitype_transactions"])
    g.add_argument("--entities", type=int, default=12)
    g.add_argument("--rows", type=int, default=1000, help="rows per entity (pollution_like)")
    g.add_argument("--mean-len", type=int, default=100, help="mean history length (multitype)")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--churn-rate", type=float, default=0.15)
    g.add_argument("--q-bins", type=int, default=100)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--data", help="dataset directory (overrides config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--out")
        if name == "finetune":
            p.add_argument("--checkpoint")
        p.set_defaults(func=fn)

    e = sub.add_parser("eval")
    e.add_argument("--config", required=True)
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check")
    c.add_argument("--op", action="append", help="check only the named primitive(s)")
    c.add_argument("--trials", type=int, default=10)
    c.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
