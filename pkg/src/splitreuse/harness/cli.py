"""Command line: ``splitreuse run | audit | report | presets``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ComparisonError, ConfigError
from ..protocol.ledger import CommLedger, label_flow_audit
from .compare import compare_runs
from .config import RunConfig, loads, with_overrides
from .presets import preset_config, preset_names
from .runner import run_config


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> RunConfig:
    """Precedence: defaults < preset < config file < explicit flags."""
    cfg = preset_config(args.preset) if args.preset else RunConfig()
    if args.config:
        cfg = loads(Path(args.config).read_text(), base=cfg)
    flags = {
        "topology": args.topology, "policy": args.policy, "theta": args.theta, "epochs": args.epochs,
        "clients": args.clients, "seed": args.seed, "schedule": args.schedule, "transport": args.transport,
    }
    overrides = {k: v for k, v in flags.items() if v is not None}
    if args.quantize_int8:
        overrides["quantize_int8"] = True
    overrides.update(_parse_set(args.set))
    return with_overrides(cfg, overrides)


def cmd_run(args) -> int:
    cfg = build_config(args)
    out = Path(args.out) if args.out else Path("runs") / (cfg.preset if cfg.preset != "custom" else "run")
    res = run_config(cfg, out)
    s = res.summary
    print(f"run dir: {out}")
    print(f"final val PPL {s['final_val_ppl']:.4f}  uplink ratio {s['comm_ratio_up']:.4f}  "
          f"total ratio {s['comm_ratio_total']:.4f}  latency {s['latency_s']:.3f} s")
    return 0


def cmd_audit(args) -> int:
    run = Path(args.run_dir)
    cfg = loads((run / "config.txt").read_text())
    res = label_flow_audit(CommLedger.from_csv((run / "ledger_client.csv").read_text()), cfg.topology)
    verdict = "PASS" if res.passed else "FAIL"
    print(f"label-flow audit ({cfg.topology}): {verdict}; "
          f"{res.label_messages_up} label messages, {res.label_bytes_up} label bytes client->server")
    return 0 if res.passed else 1


def cmd_report(args) -> int:
    if len(args.run_dirs) == 1:
        run = Path(args.run_dirs[0])
        sys.stdout.write((run / "metrics.csv").read_text())
        print(json.dumps(json.loads((run / "summary.json").read_text()), indent=2))
        return 0
    table = compare_runs(args.run_dirs)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitreuse", description="Split-federated LoRA fine-tuning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration and write a run directory")
    r.add_argument("--preset", choices=preset_names(), metavar="NAME", help="named bundle (see `presets`)")
    r.add_argument("--topology", choices=("standard", "bidirectional", "ushape"))
    r.add_argument("--policy", choices=("fixed", "bbc", "ddpg"))
    r.add_argument("--theta", type=float, help="fixed-policy threshold (>1 always sends, <-1 never resends)")
    r.add_argument("--epochs", type=int)
    r.add_argument("--clients", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--quantize-int8", action="store_true")
    r.add_argument("--schedule", choices=("sequential", "concurrent"))
    r.add_argument("--transport", choices=("inprocess", "socket"))
    r.add_argument("--config", help="flat key = value file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    r.add_argument("--out", help="run directory (default runs/<preset>)")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("audit", help="check that no labels travelled client->server")
    a.add_argument("run_dir")
    a.set_defaults(fn=cmd_audit)

    rep = sub.add_parser("report", help="show one run, or compare several (ratios vs the first)")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", help="write the comparison CSV here")
    rep.set_defaults(fn=cmd_report)

    ps = sub.add_parser("presets", help="list preset names")
    ps.set_defaults(fn=lambda args: print("\n".join(preset_names())) or 0)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ComparisonError, FileNotFoundError) as e:
        parser.error(str(e))


if __name__ == "__main__":
    sys.exit(main())
