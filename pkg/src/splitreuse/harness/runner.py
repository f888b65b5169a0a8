"""Run a configuration end to end and write a self-describing run directory.

Files written:

* ``config.txt``        resolved configuration (every default materialized)
* ``metrics.csv``       one row per epoch, fixed header
* ``epochs.jsonl``      full per-epoch reports (per-interface counts, per-client losses, ...)
* ``summary.json``      headline numbers, ratios against the always-send baseline
* ``ledger_client.csv`` / ``ledger_server.csv``  every message as seen by each side
* ``audit.json``        label-flow audit
* ``checkpoints/``      final global adapters and controller weights (tensor container)
* ``timing.json``       wall-clock seconds (the only nondeterministic file)
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

from ..errors import TransportError
from ..model.checkpoint import save_checkpoint
from ..protocol.engine import INTERFACE_MESSAGES, World
from ..protocol.ledger import DOWN, UP, label_flow_audit
from ..protocol.wire import MsgType
from .config import RunConfig, dumps
from .presets import baseline_for, preset_config

CSV_HEADER = ("epoch", "train_loss", "val_ppl", "theta_f2s", "theta_s2t", "theta_t2s", "theta_s2f",
              "sends_up", "reuses_up", "bytes_up", "bytes_down", "latency_s")
SUMMARY_KEYS = ("preset", "seed", "comm_ratio_up", "comm_ratio_total", "final_val_ppl", "wall_clock_s")

UPLINK_DATA = {MsgType.ACTIVATION_UPLOAD, MsgType.TAIL_GRADIENT_UP}


@dataclass
class RunResult:
    config: RunConfig
    reports: list
    summary: dict
    totals: dict
    out_dir: Path | None = None


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        th = [_fmt(r.theta[f]) if f in r.theta else "" for f in ("f2s", "s2t", "t2s", "s2f")]
        w.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.val_ppl), *th, r.sends_up, r.reuses_up,
                    r.bytes_up, r.bytes_down, _fmt(r.latency_s)])
    return buf.getvalue()


def _report_dict(r) -> dict:
    d = dict(r.__dict__)
    d.pop("wall_s")
    d["similarities"] = {k: [None if math.isnan(x) else x for x in v] for k, v in r.similarities.items()}
    return d


def ledger_totals(world: World) -> dict:
    led = world.network.client_ledger
    return {
        "bytes_up": led.bytes(UP),
        "bytes_down": led.bytes(DOWN),
        "payload_up": led.bytes(UP, types=UPLINK_DATA, payload_only=True),
        "notice_up": led.bytes(UP, types={INTERFACE_MESSAGES["f2s"][1], INTERFACE_MESSAGES["t2s"][1]}),
        "label_up": led.bytes(UP, types={MsgType.LABEL_BLOCK}, payload_only=True),
    }


def execute(cfg: RunConfig, out_dir: Path | None = None) -> tuple:
    """Train; returns ``(world, reports)``. On a transport failure the ledgers are flushed first."""
    world = World(cfg)
    try:
        reports = world.run()
    except TransportError:
        if out_dir is not None:
            _write_ledgers(world, Path(out_dir))
        raise
    return world, reports


@functools.lru_cache(maxsize=16)
def _baseline_totals(config_text: str) -> dict:
    from .config import loads
    world, _ = execute(loads(config_text))
    return ledger_totals(world)


def baseline_totals(cfg: RunConfig) -> dict:
    """Byte totals of the always-send fp32 run matching ``cfg`` (memoized per process)."""
    return _baseline_totals(dumps(baseline_for(cfg.resolved())))


def _ratio(a, b) -> float:
    return a / b if b else float("nan")


def _write_ledgers(world: World, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "ledger_client.csv").write_text(world.network.client_ledger.to_csv())
    (out / "ledger_server.csv").write_text(world.network.server_ledger.to_csv())


def run_config(cfg: RunConfig, out_dir=None, *, baseline: dict | None = None) -> RunResult:
    """Run ``cfg``; ``baseline`` (byte totals) defaults to a matching always-send run."""
    cfg = cfg.resolved().validate()
    t0 = time.perf_counter()
    world, reports = execute(cfg, out_dir)
    wall = time.perf_counter() - t0
    totals = ledger_totals(world)
    if baseline is None:
        is_base = baseline_for(cfg) == replace(cfg, preset=f"baseline_{cfg.topology}")
        baseline = totals if is_base else baseline_totals(cfg)
    audit = label_flow_audit(world.network.client_ledger, cfg.topology)
    summary = {
        "preset": cfg.preset,
        "seed": cfg.seed,
        "comm_ratio_up": _ratio(totals["bytes_up"], baseline["bytes_up"]),
        "comm_ratio_total": _ratio(totals["bytes_up"] + totals["bytes_down"],
                                   baseline["bytes_up"] + baseline["bytes_down"]),
        "final_val_ppl": reports[-1].val_ppl,
        "wall_clock_s": wall if cfg.record_wall_clock else None,
        "comm_ratio_up_payload": _ratio(totals["payload_up"], baseline["payload_up"]),
        "final_train_loss": reports[-1].train_loss,
        "topology": cfg.topology,
        "policy": cfg.policy,
        "quantize_int8": cfg.quantize_int8,
        "epochs": cfg.epochs,
        "latency_s": sum(r.latency_s for r in reports),
        "coherent_all_epochs": all(r.coherent for r in reports),
        "label_audit_passed": audit.passed,
        **totals,
        "baseline": baseline,
    }
    result = RunResult(cfg, reports, summary, totals)
    if out_dir is not None:
        out = Path(out_dir)
        result.out_dir = out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dumps(cfg))
        (out / "metrics.csv").write_text(metrics_csv(reports))
        (out / "epochs.jsonl").write_text("".join(json.dumps(_report_dict(r), sort_keys=True) + "\n"
                                                  for r in reports))
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (out / "audit.json").write_text(json.dumps(audit.__dict__, indent=2) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": wall,
                                                     "epoch_s": [r.wall_s for r in reports]}, indent=2) + "\n")
        _write_ledgers(world, out)
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        save_checkpoint(ck / "adapters.scmd", world.global_adapters().tensors, dumps(cfg))
        ctl = world.policy.tensors()
        if ctl:
            save_checkpoint(ck / "controller.scmd", ctl, dumps(cfg))
    return result


def run_preset(name: str, overrides: dict | None = None, out_dir=None, **kw) -> RunResult:
    from .config import with_overrides
    cfg = preset_config(name)
    if overrides:
        cfg = with_overrides(cfg, overrides)
    return run_config(cfg, out_dir, **kw)
