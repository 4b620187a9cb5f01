"""10x learning-rate runs with and without QK LayerNorm, plus the rescaling check."""
import argparse
import json

from impmoe.experiments import as_record, load_config, qk_invariance, qk_stress

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--lr-mult", type=float, default=10.0)
args = ap.parse_args()
out = qk_stress(load_config("router"), args.steps, args.lr_mult)
out["max_prob_change_under_rescale"] = qk_invariance()
print(json.dumps(as_record(out), indent=2))
