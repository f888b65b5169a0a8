"""Side-by-side comparison of finished run directories."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..errors import ComparisonError
from .config import loads

COLUMNS = ("run", "preset", "seed", "final_train_loss", "final_val_ppl", "bytes_up", "bytes_down", "payload_up",
           "ratio_up", "ratio_total", "ratio_payload_up", "latency_s")


def load_run(path) -> dict:
    p = Path(path)
    return {"dir": p, "config": loads((p / "config.txt").read_text()),
            "summary": json.loads((p / "summary.json").read_text())}


def compare_runs(run_dirs) -> str:
    """CSV table, one row per run in input order; ratios are relative to the first run."""
    runs = [load_run(d) for d in run_dirs]
    if len(runs) < 2:
        raise ComparisonError("need at least two runs to compare")
    seeds = {r["config"].seed for r in runs}
    if len(seeds) != 1:
        raise ComparisonError(f"runs use different corpus seeds: {sorted(seeds)}")
    ref = runs[0]["summary"]

    def ratio(a, b):
        return a / b if b else float("nan")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in runs:
        s = r["summary"]
        w.writerow([r["dir"].name, s["preset"], s["seed"], repr(s["final_train_loss"]), repr(s["final_val_ppl"]),
                    s["bytes_up"], s["bytes_down"], s["payload_up"],
                    repr(ratio(s["bytes_up"], ref["bytes_up"])),
                    repr(ratio(s["bytes_up"] + s["bytes_down"], ref["bytes_up"] + ref["bytes_down"])),
                    repr(ratio(s["payload_up"], ref["payload_up"])), repr(s["latency_s"])])
    return buf.getvalue()
