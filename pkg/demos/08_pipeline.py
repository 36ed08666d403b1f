"""The full staged pipeline through the command line, on a config small enough to finish in seconds."""

import json
import sys
import tempfile
from pathlib import Path

from preroute import cli

tiny = {
    "source_sequences": 256, "target_sequences": 256, "valid_sequences": 32,
    "source_tokens": 20000, "distill_tokens": 20000, "tune_tokens": 20000, "target_tokens": 20000,
    "fold_sample_sequences": 64, "target_seeds": [0], "arms": ["grouter", "aux", "hash"], "checkpoint_every": 20,
}
with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "tiny.json"
    cfg.write_text(json.dumps(tiny))
    run = Path(tmp) / "run"
    if cli.main(["all", "--run", str(run), "--config", str(cfg)]):
        sys.exit(1)
    report = json.loads((run / "report" / "report.json").read_text())
    for row in report["maxvio_vs_loss"]:
        print(f"{row['run']:12s} valid loss {row['valid_loss']:.3f}  MaxVio {row['maxvio']:.3f}  {row['quadrant']}")
    print("comm savings vs random", round(report["comm_savings"][0]["savings_vs_random"], 3))
    print("cache bytes/token", report["cache_storage"][0]["bytes_per_token"])
