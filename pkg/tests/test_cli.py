import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from qkdfilter import presets
from qkdfilter.cli import EXIT_CONFIG, EXIT_EMPTY, EXIT_IO, EXIT_OK, main
from qkdfilter.core import ClockConfig, TagStream, read_timetag_file, write_timetag_file
from qkdfilter.simulator import expected_rates


def run(*argv):
    return main([str(a) for a in argv])


def read_table(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture()
def outdir(tmp_path, monkeypatch):
    monkeypatch.setenv("QKDFILTER_OUTPUT_DIR", str(tmp_path))
    return tmp_path


def test_simulate_is_deterministic(outdir, monkeypatch):
    import qkdfilter.simulator as sim
    monkeypatch.setattr(sim, "BLOCK_PERIODS", 1 << 22)
    assert run("simulate", "--duration", 0.5, "--seed", 7, "-o", "a.ttag") == EXIT_OK
    assert run("simulate", "--duration", 0.5, "--seed", 7, "-o", "b.ttag", "--threads", 4) == EXIT_OK
    assert (outdir / "a.ttag").read_bytes() == (outdir / "b.ttag").read_bytes()
    meta = json.loads((outdir / "a.ttag.json").read_text())
    assert meta["seed"] == 7 and meta["n_tags"] == sum(meta["tags_per_channel"].values())
    side = json.loads((outdir / "a.ttag.config.json").read_text())
    assert side["subcommand"] == "simulate" and side["model"]["mu"] == presets.TESTBED_MU


def test_synthetic_preset_writes_histograms(outdir):
    assert run("simulate", "--preset", "fig5-case2") == EXIT_OK
    rows = read_table(outdir / "fig5-case2.csv")
    assert len(rows) == 500
    correct = np.array([float(r["correct"]) for r in rows])
    wrong = np.array([float(r["wrong"]) for r in rows])
    assert np.all(correct >= wrong) and wrong.min() == pytest.approx(0.3, rel=1e-3)


def test_invalid_photon_statistics_exit_code(outdir, capsys):
    assert run("simulate", "--mu", 0.9, "--g2", 5) == EXIT_CONFIG
    assert "photon-number" in capsys.readouterr().err


def test_missing_input_exit_code(outdir):
    assert run("analyze", outdir / "missing.ttag") == EXIT_IO


def test_corrupt_input_exit_code(outdir):
    p = outdir / "bad.ttag"
    p.write_bytes(b"XXXX0000000000")
    assert run("analyze", p) == EXIT_IO


def test_empty_input_exit_code(outdir):
    p = outdir / "empty.ttag"
    write_timetag_file(p, ClockConfig(), TagStream.empty())
    assert run("analyze", p) == EXIT_EMPTY


def test_unknown_config_key(outdir):
    cfg = outdir / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("simulate", "--config", cfg) == EXIT_CONFIG


def test_config_overrides_flags(outdir):
    cfg = outdir / "c.json"
    cfg.write_text(json.dumps({"duration": 0.2, "seed": 3, "model": {"mu": 0.01}}))
    assert run("simulate", "--duration", 5, "--config", cfg, "-o", "c.ttag") == EXIT_OK
    meta = json.loads((outdir / "c.ttag.json").read_text())
    assert meta["duration_s"] == 0.2 and meta["seed"] == 3 and meta["model"]["mu"] == 0.01


@pytest.fixture(scope="module")
def sim_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--duration", "20", "--seed", "11", "--output-dir", str(d), "-o", "tb.ttag"]) == 0
    return d / "tb.ttag"


def test_analyze_full_window_qber(sim_file, outdir, capsys):
    assert run("analyze", sim_file) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    exp = expected_rates(presets.TESTBED)
    full = info["full_window"]
    n = full["n_correct"] + full["n_wrong"]
    assert abs(full["qber"] - exp.eq1_qber) < 3 * np.sqrt(exp.eq1_qber / n)
    sweep_rows = read_table(outdir / "tb-sweep.csv")
    assert {"dt_ps", "tc_ps", "qber", "sifted_fraction", "n_correct", "n_wrong"} <= set(sweep_rows[0])
    hist = read_table(outdir / "tb-g2hist.csv")
    assert list(hist[0]) == ["tau_ps", "counts"] and len(hist) == 1001


def test_analyze_outputs_are_reproducible(sim_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("analyze", sim_file, "--output-dir", d, "--window", 1000, "--threads", 2) == EXIT_OK
    for name in ("tb-sweep.csv", "tb-g2hist.csv", "tb-analysis.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_window_lowers_g2_on_reexcitation_profile(outdir, capsys):
    assert run("simulate", "--preset", "testbed-reexcitation", "--duration", 30, "--seed", 2,
               "-o", "re.ttag") == EXIT_OK
    capsys.readouterr()
    run("analyze", outdir / "re.ttag", "--no-sweep")
    full = json.loads(capsys.readouterr().out)["g2"]["g2"]
    run("analyze", outdir / "re.ttag", "--no-sweep", "--window", 2500, "--center", 0)
    narrow = json.loads(capsys.readouterr().out)["g2"]["g2"]
    assert narrow < full


def test_optimize_synthetic_presets(outdir, capsys):
    assert run("optimize", "--preset", *presets.SYNTHETIC_PRESETS) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("gain") == 4
    summary = json.loads((outdir / "optimize-summary.json").read_text())
    gains = {k: v["gain"] for k, v in summary.items()}
    assert gains["fig5-case2"] > gains["fig5-case4"] > gains["fig5-case1"] > 0
    rows = read_table(outdir / "fig5-case2-optimize.csv")
    assert "s_per_pulse" in rows[0]


def test_optimize_without_key_exit_code(sim_file, outdir):
    assert run("optimize", "--input", sim_file, "--mu", 0.0043, "--loss-db", 80) == EXIT_EMPTY


def test_ratecurve_ordering(outdir, capsys):
    assert run("ratecurve") == EXIT_OK
    summary = json.loads((outdir / "ratecurve-summary.json").read_text())
    loss = [summary[k]["max_tolerable_loss_db"] for k in ("full", "1000", "250")]
    assert loss[0] < loss[1] < loss[2]
    rows = read_table(outdir / "ratecurve-full.csv")
    assert list(rows[0]) == ["loss_db", "qber", "p_click", "secret_bits_per_pulse",
                             "secret_bits_per_second"]


def test_ratecurve_custom_windows(outdir):
    assert run("ratecurve", "--windows", "full", "1000:0.55", "250:0.24:0.005") == EXIT_OK
    assert run("ratecurve", "--windows", "1000:abc") == EXIT_CONFIG


def test_ratecurve_without_key(outdir):
    assert run("ratecurve", "--q", 0.2) == EXIT_EMPTY


def test_monitor_file_blocks(sim_file, outdir):
    assert run("monitor", sim_file, "--block", 5, "--reference-g2", 0.089, "-o", "m.jsonl") == EXIT_OK
    recs = [json.loads(l) for l in (outdir / "m.jsonl").read_text().splitlines()]
    assert [r["block_index"] for r in recs] == [0, 1, 2, 3]
    assert not any(r["truncated"] for r in recs)
    assert all(len(r["rates_hz"]) == 4 for r in recs)


def test_monitor_stdin_csv(sim_file, tmp_path):
    clock, s = read_timetag_file(sim_file)
    part = s.between(0, 4 * 10**12)
    text = "channel,timestamp_ps\n" + "\n".join(f"{c},{t}" for c, t in zip(part.channels, part.timestamps))
    proc = subprocess.run([sys.executable, "-m", "qkdfilter", "monitor", "-", "--block", "2",
                           "--duration", "4"], input=text, capture_output=True, text=True, check=True)
    recs = [json.loads(l) for l in proc.stdout.splitlines()]
    assert len(recs) == 2 and recs[1]["t_start_s"] == 2.0


def test_help_lists_subcommands():
    proc = subprocess.run([sys.executable, "-m", "qkdfilter", "--help"], capture_output=True, text=True)
    for name in ("simulate", "analyze", "optimize", "ratecurve", "monitor"):
        assert name in proc.stdout
