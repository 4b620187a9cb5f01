"""Expert-choice vs tokens-choose routing at equal budget."""
import argparse
import json

from impmoe.experiments import as_record, load_config, router_comparison

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
args = ap.parse_args()
print(json.dumps(as_record(router_comparison(load_config("router"), args.seeds)), indent=2))
