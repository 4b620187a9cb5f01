"""Command-line entry points: gen-data, train, eval, inspect-cache, plot.

Every failure exits nonzero after printing one JSON line ``{"error": ..., "message": ...}``
to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import zlib
from collections import defaultdict
from pathlib import Path

import yaml

from . import checkpoint as ckpt
from . import tensor as T
from .config import ConfigError, RunConfig, from_dict, load
from .evaluation import EvalReport, evaluate_dataset
from .experiments import make_trainer
from .scheduler import MODES, jsonl_sink
from .synth import ShardError, ShardSource, materialize


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _shard_source(cfg: RunConfig):
    if cfg.data_dir is None:
        return None
    root = Path(cfg.data_dir)
    for spec in cfg.dataset_specs():
        path = root / f"{spec.name}-train.shard"
        if not path.exists():
            raise CLIError(f"missing shard {path}; run gen-data first")
    return ShardSource(root)


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "mode", "steps"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    if getattr(args, "out", None) is not None:
        out["out_dir"] = args.out
    return out


def _config(args) -> RunConfig:
    if args.config is None:
        raise CLIError("--config is required")
    return load(args.config, _overrides(args))


# ---------------------------------------------------------------------------
# verbs

def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    root = Path(cfg.data_dir or Path(cfg.out_dir) / "data")
    root.mkdir(parents=True, exist_ok=True)
    written = {}
    for spec in cfg.dataset_specs():
        for split in ("train", "eval"):
            path = materialize(spec, root, split)
            written[path.name] = f"{zlib.crc32(path.read_bytes()):08x}"
    return {"data_dir": str(root), "shards": written}


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = _shard_source(cfg)
    metrics = out / "metrics.jsonl"
    state = None
    if args.checkpoint:
        man = ckpt.read_manifest(args.checkpoint)
        if man.get("config_hash") not in (None, cfg.hash()):
            raise CLIError(f"checkpoint {args.checkpoint} was written under config "
                           f"{man['config_hash']}, current config is {cfg.hash()}")
        T.set_precision(cfg.precision)
        state = ckpt.restore(args.checkpoint, cfg.model_config())
        _truncate_metrics(metrics, state.step)
    elif metrics.exists():
        metrics.unlink()
    trainer = make_trainer(cfg, state, source)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    extra = {"config_hash": cfg.hash(), "config": cfg.to_dict()}

    def on_step(step: int):
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            ckpt.save(trainer.state, out / "checkpoints" / f"step-{step:06d}", extra)

    remaining = cfg.steps - trainer.state.step
    if remaining < 0:
        raise CLIError(f"checkpoint is at step {trainer.state.step}, past steps={cfg.steps}")
    trainer.run(remaining, jsonl_sink(metrics), on_step)
    final = ckpt.save(trainer.state, out / "checkpoints" / "final", extra)
    return {"steps": trainer.state.step, "plan_builds": trainer.state.plan_builds,
            "routing_violations": trainer.state.monitor.violations,
            "checkpoint": str(final), "metrics": str(metrics), "config_hash": cfg.hash()}


def _truncate_metrics(path: Path, step: int):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in keep))


def cmd_eval(args) -> dict:
    if not args.checkpoint:
        raise CLIError("--checkpoint is required")
    manifest, _ = ckpt.load_arrays(args.checkpoint)
    if args.config is not None:
        cfg = _config(args)
    elif "config" in manifest:
        cfg = from_dict(manifest["config"])
    else:
        raise CLIError("checkpoint carries no config; pass --config")
    T.set_precision(cfg.precision)
    model = cfg.model_config()
    state = ckpt.restore(args.checkpoint, model)
    specs = {s.name: s for s in cfg.dataset_specs()}
    if args.suite in (None, "default"):
        names = cfg.eval.datasets or list(specs)
    elif args.suite == "all":
        names = list(specs)
    else:
        names = args.suite.split(",")
    unknown = [n for n in names if n not in specs]
    if unknown:
        raise CLIError(f"suite references unknown datasets {unknown}; known {sorted(specs)}")
    metrics = {n: evaluate_dataset(specs[n], state.params, model, cfg.eval.probe_iters,
                                   cfg.eval.probe_lr, cfg.eval.max_examples) for n in names}
    report = EvalReport(cfg.hash(), str(Path(args.checkpoint).resolve()), state.step, metrics)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(report.to_json())
    return json.loads(report.to_json())


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics file {path} not found")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise CLIError(f"{path}:{n}: unparseable metrics line ({e})") from None
    return out


def inspect_cache(records: list[dict]) -> dict:
    sigs: dict = {}
    for r in records:
        for key in r.get("signature", "").split(";"):
            if key:
                sigs.setdefault(key, {"builds": 0, "first_build_step": None, "uses": 0})
                sigs[key]["uses"] += 1
        for key in r.get("built_signatures", []):
            entry = sigs.setdefault(key, {"builds": 0, "first_build_step": None, "uses": 0})
            entry["builds"] += 1
            if entry["first_build_step"] is None:
                entry["first_build_step"] = r["step"]
    builds = sum(v["builds"] for v in sigs.values())
    return {"distinct_signatures": len(sigs), "builds": builds,
            "violations": sorted(k for k, v in sigs.items() if v["builds"] > 1),
            "signatures": sigs}


def cmd_inspect_cache(args) -> dict:
    summary = inspect_cache(read_metrics(args.metrics))
    if summary["violations"]:
        raise CLIError(f"signatures built more than once: {summary['violations']}")
    return summary


def ema(values, decay: float = 0.99) -> list:
    out, acc = [], None
    for x in values:
        acc = x if acc is None else decay * acc + (1 - decay) * x
        out.append(acc)
    return out


def loss_series(records: list[dict]) -> dict:
    """task -> list of (step, loss); combined-mode runs contribute every task each step."""
    series = defaultdict(list)
    for r in records:
        per = r.get("task_losses") or {r["task"]: r["loss"]}
        for task, loss in per.items():
            series[task].append((r["step"], loss))
    return dict(series)


def cmd_plot(args) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_metrics(args.metrics)
    out = Path(args.out or Path(args.metrics).parent)
    out.mkdir(parents=True, exist_ok=True)
    series = loss_series(records)
    tasks = sorted(series)
    smooth = {t: dict(zip([s for s, _ in series[t]], ema([v for _, v in series[t]])))
              for t in tasks}
    raw = {t: dict(series[t]) for t in tasks}
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr"] + [f"{k}:{t}" for t in tasks for k in ("loss", "ema")])
        for r in records:
            row = [r["step"], repr(r["lr"])]
            for t in tasks:
                row += [repr(raw[t][r["step"]]) if r["step"] in raw[t] else "",
                        repr(smooth[t][r["step"]]) if r["step"] in smooth[t] else ""]
            w.writerow(row)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for t in tasks:
        ax1.plot(list(smooth[t]), list(smooth[t].values()), label=t)
    ax1.set_ylabel("loss (EMA 0.99)")
    if tasks:
        ax1.legend(fontsize=7)
    ax2.plot([r["step"] for r in records], [r["lr"] for r in records])
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100)
    plt.close(fig)
    return {"csv": str(out / "curves.csv"), "png": str(out / "curves.png"),
            "rows": len(records), "series": tasks}


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
         "inspect-cache": cmd_inspect_cache, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impmoe")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("gen-data", "train", "eval"):
        s = sub.add_parser(verb)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if verb == "train":
            s.add_argument("--mode", choices=MODES)
            s.add_argument("--steps", type=int)
        if verb in ("train", "eval"):
            s.add_argument("--checkpoint")
        if verb == "eval":
            s.add_argument("--suite")
    for verb in ("inspect-cache", "plot"):
        s = sub.add_parser(verb)
        s.add_argument("metrics")
        if verb == "plot":
            s.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        if e.code:
            print(json.dumps({"error": "UsageError", "message": "invalid arguments"}),
                  file=sys.stderr)
        return int(e.code or 0)
    try:
        result = VERBS[args.verb](args)
    except (CLIError, ConfigError, ckpt.CheckpointError, ShardError, FileNotFoundError,
            OSError, ValueError, KeyError, RuntimeError) as e:
        err = {"error": type(e).__name__, "message": str(e)}
        for field in ("step", "task", "loss"):
            if hasattr(e, field):
                err[field] = getattr(e, field)
        print(json.dumps(err, default=str), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
