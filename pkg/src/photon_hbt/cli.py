"""Command-line entry point tying simulation, correlation and calibration
into reproducible runs.

Subcommands: simulate, correlate, scan-n, pulsechain, factorize.
Every command is deterministic given (config, seed); simulate writes a
manifest (config echo, seed, content hash) that makes the output stream
replayable bit for bit.

Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 numerical or degenerate-data error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import tempfile

from . import __version__, calibration, tagstream
from .calibration import (
    DegenerateFitError,
    InconsistentDataError,
    extinction_budget,
    factorize_fidelities,
    fit_power_vs_reprate,
    read_power_scan,
)
from .config import ConfigError, RunConfig, load_config
from .correlator import (
    DegenerateDenominatorError,
    analyze_stream,
    format_g2_report,
    g2_n_prediction,
    measure_rates,
    offline_report,
    write_histogram_csv,
)
from .tagstream import read_stream, simulate_stream, write_stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _atomic_write(path: str, payload, binary: bool = False):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb" if binary else "w") as fh:
            if callable(payload):
                payload(fh)
            else:
                fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolve_threads(args, cfg: RunConfig) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    if cfg.io.threads is not None:
        return cfg.io.threads
    env = os.environ.get("PHOTON_HBT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as err:
            raise ConfigError(f"PHOTON_HBT_THREADS is not an integer: {env!r}") from err
    return 1


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.io.seed = args.seed
    if getattr(args, "format", None) is not None:
        cfg.io.format = args.format
    cfg.validate()
    return cfg


def _stream_bytes(stream, fmt: str) -> bytes:
    if fmt == "binary":
        buf = io.BytesIO()
        write_stream(stream, buf, format="binary")
        return buf.getvalue()
    buf = io.StringIO()
    write_stream(stream, buf, format="text")
    return buf.getvalue().encode()


def cmd_simulate(cfg: RunConfig, out_path: str, threads: int = 1) -> dict:
    """Simulate a stream per the config; write it plus a replay manifest."""
    exp = cfg.experiment
    stream = simulate_stream(
        exp.emitter(), exp.detector(), exp.timeline(),
        n_ions=exp.n_ions, duration_ps=cfg.io.duration_ps,
        seed=cfg.io.seed, threads=threads,
    )
    payload = _stream_bytes(stream, cfg.io.format)
    _atomic_write(out_path, payload, binary=True)
    manifest = {
        "command": "simulate",
        "creator": f"photon-hbt {__version__}",
        "config": cfg.to_dict(),
        "seed": cfg.io.seed,
        "output": os.path.basename(out_path),
        "format": cfg.io.format,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "tag_count": len(stream),
        "duration_ps": stream.duration_ps,
    }
    _atomic_write(out_path + ".manifest.json",
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _rates_for(cfg: RunConfig, stream, background_path, fmt):
    mode = cfg.analysis.rates_mode
    if background_path:
        background = read_stream(background_path, format=fmt)
        return measure_rates(stream, background, cfg.experiment.timeline())
    if mode == "background-run":
        raise ConfigError(
            "no background source: analysis.rates_mode is 'background-run' "
            "but no --background-stream was given")
    return cfg.analysis.rate_set()


def cmd_correlate(stream_path: str, cfg: RunConfig, background_path=None,
                  out_prefix=None, threads: int = 1):
    """Gate, correlate and estimate g2(0) for a stream file."""
    fmt = cfg.io.format
    stream = read_stream(stream_path, format=fmt)
    if stream.rep_period_ps != cfg.experiment.rep_period_ps:
        raise ConfigError(
            f"stream repetition period {stream.rep_period_ps} ps does not match "
            f"the configured {cfg.experiment.rep_period_ps} ps")
    rates = _rates_for(cfg, stream, background_path, fmt)
    hist, report = analyze_stream(
        stream, cfg.experiment.timeline(), rates,
        bin_width_ps=cfg.analysis.bin_width_ps,
        peak_half_width_ps=cfg.analysis.peak_half_width_ps,
        n_side_peaks=cfg.analysis.n_side_peaks,
        threads=threads, n_shards=max(threads, 1),
    )
    text = format_g2_report(report, extra={
        "source": os.path.basename(stream_path),
        "duration_s": f"{stream.duration_s():.6f}",
        "rep_period_ps": stream.rep_period_ps,
    })
    if out_prefix:
        buf = io.StringIO()
        write_histogram_csv(hist, buf, extra={"source": os.path.basename(stream_path)})
        _atomic_write(out_prefix + ".hist.csv", buf.getvalue())
        _atomic_write(out_prefix + ".report.txt", text)
    return hist, report, text


def cmd_correlate_offline(cfg: RunConfig, c0: float, c_tau: float,
                          t_exp_s: float, out_prefix=None):
    """g2(0) from pre-integrated counts plus the configured rates."""
    report = offline_report(
        c0, c_tau, cfg.analysis.n_side_peaks, cfg.analysis.rate_set(),
        t_exp_s, cfg.experiment.rep_period_ps * 1e-12,
    )
    text = format_g2_report(report, extra={
        "source": "offline",
        "duration_s": f"{t_exp_s:.6f}",
        "rep_period_ps": cfg.experiment.rep_period_ps,
    })
    if out_prefix:
        _atomic_write(out_prefix + ".report.txt", text)
    return report, text


def cmd_scan_n(cfg: RunConfig, n_max: int, out_path=None, threads: int = 1):
    """Simulate and analyze runs for n = 1..n_max ions.

    Per-n streams use seed + n; the shared no-ion background run uses
    seed + 1000.  Returns the table rows (n, g2, g2_err, prediction).
    """
    if n_max < 1:
        raise ConfigError(f"n_max must be >= 1, got {n_max}")
    exp = cfg.experiment
    timeline = exp.timeline()
    background = simulate_stream(
        exp.emitter(), exp.detector(), timeline, n_ions=0,
        duration_ps=cfg.io.background_duration_ps,
        seed=cfg.io.seed + 1000, threads=threads,
    )
    rows = []
    for n in range(1, n_max + 1):
        stream = simulate_stream(
            exp.emitter(), exp.detector(), timeline, n_ions=n,
            duration_ps=cfg.io.duration_ps, seed=cfg.io.seed + n,
            threads=threads,
        )
        rates = measure_rates(stream, background, timeline)
        _hist, report = analyze_stream(
            stream, timeline, rates,
            bin_width_ps=cfg.analysis.bin_width_ps,
            peak_half_width_ps=cfg.analysis.peak_half_width_ps,
            n_side_peaks=cfg.analysis.n_side_peaks,
            threads=threads, n_shards=max(threads, 1),
        )
        rows.append((n, report.g2_corrected.value, report.g2_corrected.sigma,
                     g2_n_prediction(n)))
    if out_path:
        lines = ["n,g2,g2_err,prediction"]
        lines.extend(f"{n},{g2:.9g},{err:.9g},{pred:.9g}"
                     for n, g2, err, pred in rows)
        _atomic_write(out_path, "\n".join(lines) + "\n")
    return rows


def read_scan_table(source):
    """Parse the scan-n CSV back into (n, g2, g2_err, prediction) rows."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("n,"):
            continue
        n, g2, err, pred = line.split(",")
        rows.append((int(n), float(g2), float(err), float(pred)))
    return rows


def cmd_pulsechain(scan_path: str, cfg: RunConfig, out_path=None):
    """Fit the power scan and assemble the labeled extinction budget."""
    points = read_power_scan(scan_path)
    fit = fit_power_vs_reprate(points)
    trace = calibration.srd_pulse_shape(
        tail_fraction=calibration.RF_TAIL_FRACTION,
        tail_tau_ps=calibration.RF_TAIL_TAU_PS,
    )
    peak_w = calibration.peak_power_from_trace(*trace, fit.pulse_energy_j)
    measured_db = calibration.extinction_db(peak_w, fit.cw_background_w)
    budget = extinction_budget(rep_period_ps=cfg.experiment.rep_period_ps)
    text = calibration.format_budget_report(budget, extra={
        "pulse_energy_pj": f"{fit.pulse_energy_j * 1e12:.6g}",
        "pulse_energy_sigma_pj": f"{fit.pulse_energy_sigma_j * 1e12:.6g}",
        "cw_background_uw": f"{fit.cw_background_w * 1e6:.6g}",
        "cw_background_sigma_uw": f"{fit.cw_background_sigma_w * 1e6:.6g}",
        "peak_power_mw": f"{peak_w * 1e3:.6g}",
        "measured_extinction_db": f"{measured_db:.6g}",
    })
    if out_path:
        _atomic_write(out_path, text)
    return fit, budget, text


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="photon-hbt",
        description="Pulsed single-photon HBT simulation and g2(0) analysis",
    )
    parser.add_argument("--version", action="version",
                        version=f"photon-hbt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override io.seed")
        p.add_argument("--out", help="output path (or prefix)")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: config, then "
                            "PHOTON_HBT_THREADS, then 1)")
        p.add_argument("--format", choices=("binary", "text"),
                       help="stream file format")

    p = sub.add_parser("simulate", help="generate a detector tag stream")
    common(p)

    p = sub.add_parser("correlate", help="g2(0) analysis of a stream file")
    common(p)
    p.add_argument("stream", nargs="?", help="input stream file")
    p.add_argument("--background-stream", help="no-ion stream for rate measurement")
    p.add_argument("--offline", action="store_true",
                   help="use pre-integrated counts instead of a stream")
    p.add_argument("--c0", type=float, help="integrated tau=0 coincidences (offline)")
    p.add_argument("--c-tau", type=float, help="mean side-peak coincidences (offline)")
    p.add_argument("--t-exp-s", type=float, help="experiment time in s (offline)")

    p = sub.add_parser("scan-n", help="g2 versus emitter number table")
    common(p)
    p.add_argument("--n-max", type=int, default=6)

    p = sub.add_parser("pulsechain", help="power-scan fit and extinction budget")
    common(p)
    p.add_argument("scan", help="power scan table: rep_rate_hz,avg_power_w[,sigma]")

    p = sub.add_parser("factorize", help="double-shelving fidelity factorization")
    p.add_argument("f_a", type=float)
    p.add_argument("f_b", type=float)
    p.add_argument("f_ab", type=float)
    p.add_argument("--model", choices=("rescue", "product"), default="rescue")
    return parser


def _run(args) -> int:
    if args.command == "factorize":
        f_pump, f_1, f_2 = factorize_fidelities(args.f_a, args.f_b, args.f_ab,
                                                model=args.model)
        print(f"f_pump = {f_pump:.9f}")
        print(f"f_1 = {f_1:.9f}")
        print(f"f_2 = {f_2:.9f}")
        return EXIT_OK

    cfg = _load_run_config(args)
    threads = _resolve_threads(args, cfg)

    if args.command == "simulate":
        if not args.out:
            raise ConfigError("simulate requires --out")
        manifest = cmd_simulate(cfg, args.out, threads=threads)
        print(f"wrote {manifest['tag_count']} tags to {args.out} "
              f"(sha256 {manifest['sha256'][:16]}...)")
        return EXIT_OK

    if args.command == "correlate":
        if args.offline:
            if args.c0 is None or args.c_tau is None or args.t_exp_s is None:
                raise ConfigError("offline mode requires --c0, --c-tau and --t-exp-s")
            _report, text = cmd_correlate_offline(cfg, args.c0, args.c_tau,
                                                  args.t_exp_s, out_prefix=args.out)
        else:
            if not args.stream:
                raise ConfigError("correlate requires a stream file (or --offline)")
            _hist, _report, text = cmd_correlate(
                args.stream, cfg, background_path=args.background_stream,
                out_prefix=args.out, threads=threads)
        print(text, end="")
        return EXIT_OK

    if args.command == "scan-n":
        rows = cmd_scan_n(cfg, args.n_max, out_path=args.out, threads=threads)
        print("n,g2,g2_err,prediction")
        for n, g2, err, pred in rows:
            print(f"{n},{g2:.9g},{err:.9g},{pred:.9g}")
        return EXIT_OK

    if args.command == "pulsechain":
        _fit, _budget, text = cmd_pulsechain(args.scan, cfg, out_path=args.out)
        print(text, end="")
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, tagstream.ParseError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateFitError, InconsistentDataError,
            DegenerateDenominatorError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
