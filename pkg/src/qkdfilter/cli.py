"""Command-line front end: ``qkdfilter {simulate,analyze,optimize,ratecurve,monitor}``.

Exit codes: 0 success, 1 nothing to report (empty input, no key anywhere),
2 I/O error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import presets
from .core import (AcceptanceWindow, Channel, ClockConfig, FormatError, ParameterError,
                   iter_timetag_file, parse_csv_records, read_timetag_file, shift_channels,
                   write_timetag_file)
from .filtering import (SynchronizationError, metrics_for_window, peak_reference, sweep, sweep_model,
                        synchronize_channels)
from .keyrate import (KeyRateParams, WindowSetting, max_tolerable_loss, optimize_window, rate_curve,
                      write_rate_curve)
from .photonstats import (DEFAULT_CORR_BIN, DEFAULT_MAX_DELAY, G2Error, correlate, estimate_g2,
                          iter_block_reports)
from .pulsemodel import model_params, synthetic_histograms
from .simulator import SimulationRun, expected_rates, simulate, write_run_metadata

log = logging.getLogger("qkdfilter")

EXIT_OK, EXIT_EMPTY, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
OUTPUT_DIR_ENV = "QKDFILTER_OUTPUT_DIR"


class ConfigError(Exception):
    pass


class EmptyResult(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _output_dir(args) -> Path:
    d = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _out_path(args, default_name: str) -> Path:
    if getattr(args, "output", None):
        p = Path(args.output)
        if not p.is_absolute() and p.parent == Path("."):
            p = _output_dir(args) / p
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
    return _output_dir(args) / default_name


def _write_sidecar(path: Path, args, extra: dict | None = None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    doc = {"subcommand": args.command, "arguments": resolved}
    if extra:
        doc.update(extra)
    Path(str(path) + ".config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _apply_config(args, parser: argparse.ArgumentParser) -> None:
    """Values from ``--config`` JSON take precedence over command-line flags."""
    if not args.config:
        return
    try:
        doc = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest == "model":
            if not isinstance(value, dict):
                raise ConfigError("'model' must be an object of model fields")
            args.model_overrides = value
        elif hasattr(args, dest) and dest not in ("command", "func"):
            setattr(args, dest, value)
        else:
            raise ConfigError(f"unknown config key {key!r} for '{args.command}'")


def _load_stream(path: str):
    clock, stream = read_timetag_file(path)
    return clock, stream.sorted()


def _window(args) -> AcceptanceWindow | None:
    if args.window is None:
        return None
    return AcceptanceWindow(int(args.window), int(args.center), bool(args.absolute))


def _keyrate_params(args) -> KeyRateParams:
    base = presets.TESTBED_KEYRATE
    return replace(
        base,
        mu=base.mu if args.mu is None else args.mu,
        g2=base.g2 if args.g2 is None else args.g2,
        p_dc=base.p_dc if args.p_dc is None else args.p_dc,
        q=base.q if args.q is None else args.q,
        f_ec=base.f_ec if args.f_ec is None else args.f_ec,
        eta_bob=base.eta_bob if args.eta_bob is None else args.eta_bob,
        tau_argument=args.tau_argument,
    )


# ------------------------------------------------------------------ commands

def cmd_simulate(args) -> int:
    name = args.preset
    if name in presets.SYNTHETIC_PRESETS:
        model = presets.fig5_model(name)
        correct, wrong = synthetic_histograms(model)
        out = _out_path(args, f"{name}.csv")
        values = np.column_stack([correct, wrong])
        params = {"preset": name, "bin_width_ps": 25, **model_params(model)}
        with open(out, "w") as f:
            for k, v in params.items():
                f.write(f"# {k}={v}\n")
            f.write("bin_start_ps,correct,wrong\n")
            for i, (c, w) in enumerate(values.tolist()):
                f.write(f"{i * 25},{c!r},{w!r}\n")
        _write_sidecar(out, args, {"synthetic_model": params})
        print(f"wrote analytic histograms ({len(correct)} bins) to {out}")
        return EXIT_OK

    model = presets.SIMULATION_PRESETS[name]
    overrides = dict(getattr(args, "model_overrides", None) or {})
    for flag, field in (("mu", "mu"), ("g2", "g2_target"), ("loss_db", "channel_loss_db")):
        if getattr(args, flag) is not None:
            overrides.setdefault(field, getattr(args, flag))
    if overrides:
        d = model.to_dict()
        unknown = set(overrides) - set(d)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        d.update(overrides)
        model = type(model).from_dict(d)
    run = SimulationRun(model, float(args.duration), int(args.seed))
    stream = simulate(run, threads=args.threads)
    suffix = ".csv" if args.format == "csv" else ".ttag"
    out = _out_path(args, f"{name}-seed{args.seed}{suffix}")
    write_timetag_file(out, model.clock, stream)
    exp = expected_rates(model)
    write_run_metadata(str(out) + ".json", run, stream,
                       {"expected_rates_hz": exp.rates_hz.tolist(), "expected_qber": exp.qber})
    _write_sidecar(out, args, {"model": model.to_dict()})
    counts = stream.counts()
    print(f"wrote {len(stream)} tags over {args.duration:g} s to {out}")
    for c in Channel:
        print(f"  {c.name}: {int(counts[c])} tags ({counts[c] / args.duration:.1f} Hz)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    clock, stream = _load_stream(args.input)
    if not len(stream):
        raise EmptyResult(f"{args.input} contains no tags")
    pol = Channel.parse(args.pol)
    info = {"input": str(args.input), "n_tags": len(stream), "period_ps": clock.period,
            "input_polarization": pol.name}
    if args.sync:
        delays = synchronize_channels(stream, clock, pol)
        stream = shift_channels(stream, delays, clock.period)
        info["channel_delays_ps"] = {c.name: int(d) for c, d in delays.items()}
    ref = peak_reference(stream, clock, pol)
    info["peak_ref_ps"] = int(ref)

    full = metrics_for_window(stream, clock, pol, AcceptanceWindow(clock.period), ref)
    info["full_window"] = {"qber": full.qber, "n_correct": full.n_correct, "n_wrong": full.n_wrong}
    window = _window(args)
    analysed = stream
    if window is not None:
        m = metrics_for_window(stream, clock, pol, window, ref)
        info["window"] = {"width_ps": window.width, "center_ps": window.center, "qber": m.qber,
                          "sifted_fraction": m.sifted_fraction, "n_correct": m.n_correct,
                          "n_wrong": m.n_wrong}
        analysed = stream[window.contains(stream.timestamps % clock.period, clock.period, ref)]

    outdir = _output_dir(args)
    stem = Path(args.input).stem
    if not args.no_sweep:
        grid = sweep(stream, clock, pol, peak_ref=ref)
        grid.to_csv(outdir / f"{stem}-sweep.csv", header={"input": args.input})
    hist = correlate(analysed, args.max_delay, args.corr_bin, args.threads)
    hist.to_csv(outdir / f"{stem}-g2hist.csv")
    try:
        est = estimate_g2(hist, clock, side_error=args.side_error)
        info["g2"] = {"g2": est.g2, "sigma": est.sigma, "n_zero": est.n_zero,
                      "side_areas": est.side_areas}
    except G2Error as exc:
        info["g2"] = None
        log.warning("%s", exc)
    summary = outdir / f"{stem}-analysis.json"
    summary.write_text(json.dumps(info, indent=2, sort_keys=True))
    _write_sidecar(summary, args)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_optimize(args) -> int:
    any_key = False
    results = {}
    for name in args.preset or []:
        if name not in presets.SYNTHETIC_PRESETS:
            raise ConfigError(f"optimize presets must be synthetic cases, not {name!r}")
        params = replace(presets.FIG5_KEYRATE, f_ec=presets.FIG5_KEYRATE.f_ec if args.f_ec is None else args.f_ec)
        grid = sweep_model(presets.fig5_model(name), 25)
        opt = optimize_window(grid, params, 0.0)
        out = _output_dir(args) / f"{name}-optimize.csv"
        grid.to_csv(out, extra={"s_per_pulse": opt.s_map}, header={"preset": name, "f_ec": params.f_ec})
        results[name] = opt
    if args.input:
        clock, stream = _load_stream(args.input)
        if not len(stream):
            raise EmptyResult(f"{args.input} contains no tags")
        grid = sweep(stream, clock, Channel.parse(args.pol))
        params = replace(_keyrate_params(args), clock=clock)
        opt = optimize_window(grid, params, args.loss_db, args.g2_filtered)
        out = _out_path(args, f"{Path(args.input).stem}-optimize.csv")
        grid.to_csv(out, extra={"s_per_pulse": opt.s_map}, header={"loss_db": args.loss_db})
        results[str(args.input)] = opt
    if not results:
        raise ConfigError("optimize needs --preset or --input")
    summary = {}
    for name, opt in results.items():
        any_key = any_key or opt.s_best > 0
        summary[name] = {"width_ps": opt.width, "center_ps": opt.center, "s_best": opt.s_best,
                         "s_full": opt.s_full, "gain": opt.gain}
        print(f"{name}: best window {opt.width} ps at {opt.center:+d} ps, "
              f"S={opt.s_best:.6g}, gain {100 * opt.gain:.2f}% over full window")
    path = _output_dir(args) / "optimize-summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_sidecar(path, args)
    if not any_key:
        raise EmptyResult("no window yields a positive key")
    return EXIT_OK


def _parse_window_spec(spec: str) -> tuple[str, WindowSetting]:
    """``full`` | ``WIDTH`` (testbed profile) | ``WIDTH:F`` | ``WIDTH:F:QBER``."""
    spec = spec.strip()
    if spec == "full":
        return spec, WindowSetting()
    parts = spec.split(":")
    try:
        width = int(parts[0])
        if len(parts) == 1:
            return spec, presets.testbed_window_setting(width)
        frac = float(parts[1])
        q = float(parts[2]) if len(parts) > 2 else None
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad window spec {spec!r}") from exc
    if len(parts) > 3 or not 0 < frac <= 1:
        raise ConfigError(f"bad window spec {spec!r}")
    return spec, WindowSetting(frac, width, q)


def cmd_ratecurve(args) -> int:
    params = _keyrate_params(args)
    windows = args.windows
    if isinstance(windows, str):
        windows = windows.split(",")
    losses = np.arange(args.loss_min, args.loss_max + args.loss_step / 2, args.loss_step)
    any_key = False
    summary = {}
    for spec in windows:
        label, setting = _parse_window_spec(str(spec))
        pts = rate_curve(params, losses, setting)
        tol = max_tolerable_loss(params, setting)
        any_key = any_key or tol > 0
        safe = label.replace(":", "_")
        out = _output_dir(args) / f"ratecurve-{safe}.csv"
        write_rate_curve(out, pts, params.clock, {
            "window": label, "sifted_fraction": setting.sifted_fraction,
            "max_tolerable_loss_db": tol, "mu": params.mu, "g2": params.g2, "p_dc": params.p_dc,
            "q": params.q, "f_ec": params.f_ec})
        summary[label] = {"sifted_fraction": setting.sifted_fraction, "max_tolerable_loss_db": tol}
        print(f"window {label}: F={setting.sifted_fraction:.4f}, max tolerable loss {tol:.2f} dB")
    path = _output_dir(args) / "ratecurve-summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_sidecar(path, args, {"keyrate": {k: getattr(params, k) for k in
                                            ("mu", "g2", "p_dc", "q", "f_ec", "eta_bob", "tau_argument")}})
    if not any_key:
        raise EmptyResult("no key at any loss")
    return EXIT_OK


def _stdin_chunks(stream, chunk_lines: int = 100_000):
    header = None
    buf = []
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = line
            continue
        buf.append(line)
        if len(buf) >= chunk_lines:
            yield parse_csv_records([header, *buf])
            buf = []
    if header is None:
        return
    yield parse_csv_records([header, *buf])


def cmd_monitor(args) -> int:
    if args.input == "-":
        clock = presets.CLOCK if args.period is None else ClockConfig.from_period(args.period)
        chunks = _stdin_chunks(sys.stdin)
    else:
        if args.input.lower().endswith(".csv"):
            clock, stream = _load_stream(args.input)
            chunks = iter([stream])
        else:
            first = next(iter_timetag_file(args.input, 1), None)
            if first is None:
                raise EmptyResult(f"{args.input} contains no tags")
            clock = first[0]
            chunks = (c for _, c in iter_timetag_file(args.input))
    duration = args.duration
    meta = Path(str(args.input) + ".json")
    if duration is None and args.input != "-" and meta.exists():
        duration = json.loads(meta.read_text()).get("duration_s")
    reports = iter_block_reports(
        chunks, clock, args.block, args.reference_g2, args.alarm_k, args.pol, _window(args),
        0 if args.window is None else args.peak_ref, duration, args.max_delay, args.corr_bin,
        threads=args.threads)
    out = open(_out_path(args, "monitor.jsonl"), "w") if args.output else sys.stdout
    n = 0
    try:
        for rep in reports:
            out.write(rep.to_json() + "\n")
            out.flush()
            n += 1
    finally:
        if out is not sys.stdout:
            out.close()
            _write_sidecar(Path(out.name), args)
    if n == 0:
        raise EmptyResult("no data blocks")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_keyrate_flags(p):
    p.add_argument("--mu", type=float, help="mean photon number into the channel")
    p.add_argument("--g2", type=float, help="g2(0) of the source")
    p.add_argument("--p-dc", type=float, help="dark-count probability per pulse (full window)")
    p.add_argument("--q", type=float, help="intrinsic QBER floor")
    p.add_argument("--f-ec", type=float, help=f"error-correction inefficiency (preset {presets.PRESET_F_EC})")
    p.add_argument("--eta-bob", type=float, help="receiver efficiency (default 1)")
    p.add_argument("--tau-argument", choices=("e/beta", "e"), default="e/beta")


def _add_window_flags(p):
    p.add_argument("--window", type=int, help="acceptance window width (ps)")
    p.add_argument("--center", type=int, default=0, help="window centre relative to the peak (ps)")
    p.add_argument("--absolute", action="store_true", help="centre is an absolute phase, not peak-relative")


def _add_corr_flags(p):
    p.add_argument("--max-delay", type=int, default=DEFAULT_MAX_DELAY, help="correlation span (ps)")
    p.add_argument("--corr-bin", type=int, default=DEFAULT_CORR_BIN, help="correlation bin (ps)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file; its keys override command-line flags")
    common.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
    common.add_argument("--threads", type=int, default=1, help="worker thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qkdfilter", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a time-tag stream")
    p.add_argument("--preset", choices=presets.ALL_PRESETS, default="testbed")
    p.add_argument("--duration", type=float, default=10.0, help="seconds of acquisition")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mu", type=float)
    p.add_argument("--g2", type=float)
    p.add_argument("--loss-db", type=float)
    p.add_argument("--format", choices=("ttag", "csv"), default="ttag")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="QBER, sweeps and g2 of a tag file")
    p.add_argument("input")
    p.add_argument("--pol", default="H", help="input polarization")
    p.add_argument("--sync", action="store_true", help="estimate and remove channel delays first")
    p.add_argument("--no-sweep", action="store_true")
    p.add_argument("--side-error", choices=("sem", "std"), default="sem")
    _add_window_flags(p)
    _add_corr_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("optimize", parents=[common], help="best acceptance window")
    p.add_argument("--preset", nargs="+", choices=presets.SYNTHETIC_PRESETS)
    p.add_argument("--input", help="tag file to sweep instead of a synthetic preset")
    p.add_argument("--pol", default="H")
    p.add_argument("--loss-db", type=float, default=0.0)
    p.add_argument("--g2-filtered", type=float, help="use this g2 for filtered windows")
    p.add_argument("-o", "--output")
    _add_keyrate_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("ratecurve", parents=[common], help="secret rate versus channel loss")
    p.add_argument("--preset", choices=("testbed",), default="testbed")
    p.add_argument("--windows", nargs="+", default=["full", "1000", "250"],
                   help="full | WIDTH | WIDTH:F | WIDTH:F:QBER")
    p.add_argument("--loss-min", type=float, default=0.0)
    p.add_argument("--loss-max", type=float, default=45.0)
    p.add_argument("--loss-step", type=float, default=0.25)
    _add_keyrate_flags(p)
    p.set_defaults(func=cmd_ratecurve)

    p = sub.add_parser("monitor", parents=[common], help="block-wise g2/QBER monitoring (JSON Lines)")
    p.add_argument("input", help="TTAG/CSV file, or '-' for CSV records on stdin")
    p.add_argument("--block", type=float, default=60.0, help="block length (s)")
    p.add_argument("--reference-g2", type=float, help="alarm when a block deviates from this")
    p.add_argument("--alarm-k", type=float, default=3.0, help="alarm threshold in sigmas")
    p.add_argument("--pol", default="H")
    p.add_argument("--peak-ref", type=int, default=0, help="peak phase (ps) for --window")
    p.add_argument("--period", type=int, help="clock period (ps) for stdin input")
    p.add_argument("--duration", type=float, help="acquisition length (s); flags a short last block")
    p.add_argument("-o", "--output")
    _add_window_flags(p)
    _add_corr_flags(p)
    p.set_defaults(func=cmd_monitor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        _apply_config(args, parser)
        return args.func(args)
    except (ConfigError, ParameterError, G2Error, SynchronizationError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EmptyResult as exc:
        print(f"nothing to report: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
