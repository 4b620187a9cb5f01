"""Alternating vs single-objective vs summed NCE+SCE on the synthetic suite."""
import argparse
import json

from impmoe.experiments import as_record, load_config, objective_comparison, objective_verdict

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
ap.add_argument("--steps", type=int)
args = ap.parse_args()
cfg = load_config("objectives", **({"steps": args.steps} if args.steps else {}))
res = objective_comparison(cfg, args.seeds)
verdicts = {m: objective_verdict(res, metric=m) for m in ("downstream_probe", "linear_probe")}
print(json.dumps(as_record({"results": res, "verdicts": verdicts}), indent=2))
