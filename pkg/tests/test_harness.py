import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from splitreuse.errors import ComparisonError, ConfigError
from splitreuse.harness.cli import main
from splitreuse.harness.compare import compare_runs
from splitreuse.harness.config import RunConfig, dumps, loads, with_overrides
from splitreuse.harness.corpus import entropy_rate, generate_corpus
from splitreuse.harness.presets import baseline_for, preset_config, preset_names
from splitreuse.harness.runner import CSV_HEADER, SUMMARY_KEYS, run_config
from splitreuse.model import load_checkpoint

GOLDEN_HEADER = ("epoch,train_loss,val_ppl,theta_f2s,theta_s2t,theta_t2s,theta_s2f,"
                 "sends_up,reuses_up,bytes_up,bytes_down,latency_s")
GOLDEN_PRESETS = [
    "baseline_standard", "baseline_bidirectional", "baseline_ushape",
    "fixed_standard", "fixed_bidirectional", "fixed_ushape",
    "bbc_standard", "bbc_bidirectional", "bbc_ushape",
    "ddpg_standard", "ddpg_bidirectional", "ddpg_ushape",
]
TINY_SET = ["epochs=2", "samples=40", "val_size=20", "test_size=20", "pretrain_samples=200", "pretrain_steps=20"]


# ---- corpus ---------------------------------------------------------------------------------

def test_corpus_is_deterministic_and_partitioned():
    a, b = generate_corpus(3, 1000, 10), generate_corpus(3, 1000, 10)
    np.testing.assert_array_equal(a.train, b.train)
    assert not np.array_equal(a.train, generate_corpus(4, 1000, 10).train)
    assert [len(s) for s in a.shards] == [100] * 10
    allidx = np.concatenate(a.shards)
    assert sorted(allidx) == list(range(1000))
    assert a.client_weights() == [0.1] * 10
    assert a.train.shape == (1000, 17) and a.train.max() < 32
    with pytest.raises(ConfigError):
        generate_corpus(0, 5, 10)


def test_corpus_is_learnable():
    c = generate_corpus(0, 100, 2)
    np.testing.assert_allclose(c.transition.sum(1), 1.0)
    assert np.exp(entropy_rate(c.transition)) < 32 / 2


# ---- config ---------------------------------------------------------------------------------

def test_config_text_roundtrip_and_overrides():
    cfg = replace(RunConfig(), theta=0.975, quantize_int8=True, topology="ushape", lr=3e-4)
    assert loads(dumps(cfg)) == cfg
    assert loads("# comment\ntheta = 0.5  # trailing\n\nclients=3\n") == replace(RunConfig(), theta=0.5, clients=3)
    assert with_overrides(RunConfig(), {"epochs": "7", "gating": "off"}) == replace(RunConfig(), epochs=7,
                                                                                   gating=False)
    for bad in ("nokey\n", "bogus = 1\n", "epochs = many\n", "gating = maybe\n"):
        with pytest.raises(ConfigError):
            loads(bad)


def test_resolved_config_materializes_topology_defaults():
    std = RunConfig().resolved()
    ush = RunConfig(topology="ushape").resolved()
    assert (std.ddpg_sigma0, std.ddpg_alpha, std.ddpg_beta) == (0.002, 2.0, 1.0)
    assert (ush.ddpg_sigma0, ush.ddpg_alpha, ush.ddpg_beta) == (0.005, 1.5, 2.0)
    assert RunConfig().sha256() == RunConfig().sha256() != RunConfig(seed=1).sha256()


# ---- presets --------------------------------------------------------------------------------

def test_preset_names_are_stable():
    names = preset_names()
    assert len(names) == 24
    assert names[:12] == GOLDEN_PRESETS
    assert names[12:] == [n + "_q" for n in GOLDEN_PRESETS]


def test_preset_contents():
    c = preset_config("ddpg_ushape_q")
    assert (c.policy, c.topology, c.quantize_int8, c.preset) == ("ddpg", "ushape", True, "ddpg_ushape_q")
    assert preset_config("baseline_standard").theta > 1
    b = baseline_for(replace(c, schedule="concurrent"))
    assert (b.policy, b.theta, b.quantize_int8, b.topology, b.schedule) == ("fixed", 1.01, False, "ushape",
                                                                            "sequential")
    for bad in ("fast_standard", "fixed_ring", "fixed", "fixed_standard_x"):
        with pytest.raises(ConfigError):
            preset_config(bad)


# ---- runner ---------------------------------------------------------------------------------

def test_run_directory_contents(tmp_path):
    res = run_config(tiny_config(policy="ddpg", topology="ushape", preset="ddpg_ushape"), tmp_path / "r")
    out = tmp_path / "r"
    for f in ("config.txt", "metrics.csv", "epochs.jsonl", "summary.json", "audit.json", "timing.json",
              "ledger_client.csv", "ledger_server.csv", "checkpoints/adapters.scmd", "checkpoints/controller.scmd"):
        assert (out / f).exists(), f
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == GOLDEN_HEADER == ",".join(CSV_HEADER)
    rows = list(csv.DictReader(lines))
    assert len(rows) == 2 and all(0.0 <= float(r[f"theta_{f}"]) <= 1.0 for r in rows
                                  for f in ("f2s", "s2t", "t2s", "s2f"))
    summary = json.loads((out / "summary.json").read_text())
    assert set(SUMMARY_KEYS) <= set(summary)
    assert summary["wall_clock_s"] is None and summary["label_audit_passed"]
    assert loads((out / "config.txt").read_text()) == res.config
    tensors, text = load_checkpoint(out / "checkpoints" / "adapters.scmd")
    assert loads(text) == res.config and "h0.q.A" in tensors


def test_baseline_ratio_is_one_and_fixed_matches_epoch_one(tmp_path):
    base = run_config(tiny_config(theta=1.01, preset="baseline_standard"))
    assert base.summary["comm_ratio_up"] == 1.0 == base.summary["comm_ratio_total"]
    fixed = run_config(tiny_config(epochs=3))
    assert fixed.summary["comm_ratio_up"] < 1.0
    b3 = run_config(tiny_config(theta=1.01, epochs=3))
    assert fixed.reports[0].bytes_up == b3.reports[0].bytes_up
    assert fixed.reports[0].bytes_down == b3.reports[0].bytes_down


def test_compare_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_config(tiny_config(theta=1.01, epochs=3), a)
    run_config(tiny_config(theta=-1.01, epochs=3), b)
    rows = list(csv.DictReader(compare_runs([a, a]).splitlines()))
    assert all(float(r[k]) == 1.0 for r in rows for k in ("ratio_up", "ratio_total", "ratio_payload_up"))
    rows = list(csv.DictReader(compare_runs([a, b]).splitlines()))
    assert [r["run"] for r in rows] == ["a", "b"]
    assert float(rows[1]["ratio_payload_up"]) == pytest.approx(1 / 3)
    c = tmp_path / "c"
    run_config(tiny_config(seed=1, epochs=1), c)
    with pytest.raises(ComparisonError):
        compare_runs([a, c])
    with pytest.raises(ComparisonError):
        compare_runs([a])


# ---- CLI ------------------------------------------------------------------------------------

def _cli_run(tmp_path, name, *extra):
    args = ["run", "--out", str(tmp_path / name), "--clients", "2"]
    for s in TINY_SET:
        args += ["--set", s]
    return main(args + list(extra))


def test_cli_run_audit_report(tmp_path, capsys):
    assert _cli_run(tmp_path, "u", "--preset", "fixed_ushape_q") == 0
    assert "final val PPL" in capsys.readouterr().out
    cfg = loads((tmp_path / "u" / "config.txt").read_text())
    assert (cfg.topology, cfg.quantize_int8, cfg.clients, cfg.epochs) == ("ushape", True, 2, 2)
    assert main(["audit", str(tmp_path / "u")]) == 0
    assert "PASS" in capsys.readouterr().out
    assert _cli_run(tmp_path, "s", "--topology", "standard", "--theta", "1.01") == 0
    assert main(["audit", str(tmp_path / "s")]) == 1
    capsys.readouterr()
    assert main(["report", str(tmp_path / "s")]) == 0
    assert capsys.readouterr().out.startswith(GOLDEN_HEADER)
    assert main(["report", str(tmp_path / "s"), str(tmp_path / "u"), "--out", str(tmp_path / "cmp.csv")]) == 0
    assert (tmp_path / "cmp.csv").read_text().startswith("run,preset,seed")


def test_cli_config_file_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("theta = 0.5\npolicy = fixed\n")
    assert _cli_run(tmp_path, "p", "--config", str(f), "--theta", "0.9") == 0
    assert loads((tmp_path / "p" / "config.txt").read_text()).theta == 0.9


def test_cli_errors(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["run", "--preset", "nope_standard"])
    with pytest.raises(SystemExit):
        main(["run", "--set", "notakey=1", "--out", str(tmp_path / "x")])
    with pytest.raises(SystemExit):
        main(["report", str(tmp_path / "missing")])
    assert main(["presets"]) == 0
    assert capsys.readouterr().out.split() == preset_names()
