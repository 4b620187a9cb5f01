"""Train the tiny model on synthetic image-text NCE and report held-out retrieval."""
import json

from impmoe.experiments import as_record, contrastive_run, load_config

print(json.dumps(as_record(contrastive_run(load_config("contrastive"))), indent=2))
