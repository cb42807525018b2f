"""Command-line front end: ``sqfluor <command> [options]``.

Exit status is 0 on success, 1 when a check or fit fails, 2 on usage or
configuration errors. Every run writes ``manifest.json`` next to its outputs;
identical command lines produce byte-identical output directories.
"""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, pipelines
from .fitting import FitError, fit_full_joint, fit_no_drive, fit_three_lorentzian
from .formats import (
    JobError,
    json_safe,
    TraceFormatError,
    dumps_canonical,
    parse_job,
    read_job,
    read_trace,
    report_dict,
    sha256_file,
    write_json,
    write_table,
    write_trace,
)
from .model import UnphysicalBathError, squeezing_db
from .spectra import (
    DegenerateRootsWarning,
    fluorescence_spectrum,
    reflection_spectrum,
    strong_drive_reflection,
    weak_drive_reflection,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

WORKERS_ENV = "SQFLUOR_WORKERS"

# values fixed by the reproduce presets, with where each comes from
CONSTANT_NOTES = {
    "gamma_hz": "total emitter linewidth, 304 kHz",
    "eta_c": "fraction of emission leaving through the strongly coupled port",
    "eta": "overall efficiency from squeezer to emitter, eta_c times component loss",
    "rabi_hz": "Rabi frequency of the driven traces, 1.2 MHz",
    "squeezer_bandwidth_hz": "squeezer noise bandwidth used for the filtered background, 21 MHz",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- argument helpers


def parse_grid(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("grid must look like start:stop:points")
    try:
        start, stop, points = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if points < 2 or not stop > start:
        raise argparse.ArgumentTypeError("grid needs stop > start and at least 2 points")
    return np.linspace(start, stop, points)


def parse_floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON job file")
    common.add_argument("--seed", type=int, help="noise / parameter-draw seed")
    common.add_argument("--out-dir", help="directory for outputs (default: the job's output.dir, else current)")
    common.add_argument("--format", choices=("text", "json"), default="text", help="stdout summary format")
    common.add_argument("--grid", type=parse_grid,
                        help="detuning grid start:stop:points in units of gamma; write --grid=-8:8:401 "
                             "when start is negative")

    p = argparse.ArgumentParser(
        prog="sqfluor",
        description="Spectra of a driven two-level emitter in squeezed vacuum.",
        epilog=f"Set {WORKERS_ENV}=<n> to spread sweeps and oracle checks over n processes.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sim", parents=[common], help="simulate one spectrum and write it as a trace file")
    s.add_argument("--preset", choices=sorted(pipelines.PRESETS), help="named parameter set")
    s.add_argument("--rabi", type=float, help="drive amplitude in units of gamma (overrides preset/config)")
    s.add_argument("--phi", type=float, help="squeezing phase in rad (overrides preset/config)")
    s.add_argument("--spectrum", choices=("fluorescence", "reflection", "no-drive", "strong-drive"))
    s.add_argument("--noise", type=float, help="relative multiplicative noise")

    o = sub.add_parser("oracle-check", parents=[common],
                       help="compare closed-form spectra with the master-equation integrator")
    o.add_argument("--preset", choices=("random", "mollow-threshold"), default="random")
    o.add_argument("--sets", type=int, help="number of random parameter sets (default 50)")
    o.add_argument("--tolerance", type=float, help="relative L-infinity tolerance (default 1e-3)")
    o.add_argument("--corrupt-rate-sign", action="store_true", help=argparse.SUPPRESS)

    f = sub.add_parser("fit", parents=[common], help="fit trace files")
    f.add_argument("traces", nargs="*", help="trace files (or list them under 'traces' in --config)")
    f.add_argument("--model", choices=("no-drive", "three-lorentzian", "full-analytic"))
    f.add_argument("--rabi", type=float, help="starting drive amplitude for full-analytic fits")

    ph = sub.add_parser("sweep-phase", parents=[common],
                        help="three-Lorentzian widths versus squeezing phase, with sinusoid fits")
    ph.add_argument("traces", nargs="*", help="driven trace files; synthesised when omitted")
    ph.add_argument("--gain-db", type=float, default=1.5)
    ph.add_argument("--phi", type=parse_floats, help="comma-separated phases in rad")
    ph.add_argument("--rabi", type=float, help="drive amplitude in units of gamma")
    ph.add_argument("--noise", type=float, default=0.01)

    g = sub.add_parser("sweep-gain", parents=[common], help="M - N versus squeezer gain, with an efficiency fit")
    g.add_argument("traces", nargs="*", help="undriven trace files carrying gain_db; synthesised when omitted")
    g.add_argument("--gains", type=parse_floats, help="comma-separated gains in dB")
    g.add_argument("--eta", type=float, default=pipelines.ETA, help="overall efficiency of the synthetic chain")
    g.add_argument("--noise", type=float, default=0.01)

    r = sub.add_parser("reproduce", parents=[common], help="regenerate a figure's data set from synthetic traces")
    r.add_argument("figure", choices=("fig2a", "fig3", "fig4", "fig6"))
    r.add_argument("--phi", type=parse_floats, help="fig3: comma-separated phases in rad")
    r.add_argument("--noise", type=float, default=0.01)
    return p


# ---------------------------------------------------------------- run context


class Run:
    """Collects output files and summary values, then writes the manifest."""

    def __init__(self, args, argv):
        self.args = args
        out_dir = args.out_dir
        if out_dir is None and args.config:
            out_dir = read_job(args.config).data["output"]["dir"]
        self.out = Path(out_dir or ".")
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.summary = {}
        self.argv = [a for a in argv]

    def path(self, name):
        self.files.append(name)
        return self.out / name

    def manifest(self, extra=None):
        doc = {
            "command": _argv_without_out_dir(self.argv),
            "version": __version__,
            "seed": self.args.seed,
            "files": {name: sha256_file(self.out / name) for name in sorted(set(self.files))},
            "summary": self.summary,
        }
        if extra:
            doc.update(extra)
        write_json(doc, self.out / "manifest.json")

    def emit(self):
        if self.args.format == "json":
            sys.stdout.write(dumps_canonical(self.summary))
        else:
            for key, value in self.summary.items():
                print(f"{key}: {_show(json_safe(value))}")


def _show(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_show(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{k}={_show(v)}" for k, v in value.items()) + "}"
    return str(value)


def _argv_without_out_dir(argv):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out-dir":
            skip = True
            continue
        if a.startswith("--out-dir="):
            continue
        out.append(a)
    return out


def _workers():
    return pipelines.worker_count()


def _job(args):
    return read_job(args.config) if args.config else None


def _constants():
    return {k: {"value": v, "note": CONSTANT_NOTES[k]} for k, v in pipelines.PRESET_CONSTANTS.items()}


def _fit_row(name, result):
    row = {"trace": name, "kind": result.kind}
    for key in ("n_photons", "m_mag", "rabi", "phi"):
        if key in result.names:
            row[key] = result[key]
    for key in ("m_minus_n", "squeezing_db", "center_hwhm", "sideband_hwhm"):
        if key in result.derived:
            row[key] = result[key]
            row[key + "_sigma"] = result.sigma(key)
    return row


# ---------------------------------------------------------------- commands


def cmd_sim(args, run):
    doc = {}
    if args.preset:
        doc = {k: dict(v) if isinstance(v, dict) else v for k, v in pipelines.PRESETS[args.preset].items()
               if k != "description"}
    job = _job(args)
    if job is not None:
        if args.preset:
            raise UsageError("give either --preset or --config, not both")
        doc = None
    if doc is not None:
        job = parse_job(doc, f"preset {args.preset}" if args.preset else None)
    data = job.data
    if args.rabi is not None:
        data["atom"]["rabi"] = args.rabi
    if args.phi is not None:
        data["bath"]["phi"] = args.phi
    if args.spectrum:
        data["spectrum"] = args.spectrum
    bath, atom = job.bath(), job.atom()
    grid = args.grid if args.grid is not None else job.grid()
    kind = data["spectrum"]
    background = job.background()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateRootsWarning)
        if kind == "fluorescence":
            trace, k = fluorescence_spectrum(bath, atom, grid)
            run.summary["coherent_weight"] = float(np.real(k))
        elif kind == "reflection":
            trace = reflection_spectrum(bath, atom, grid, background)
        elif kind == "no-drive":
            trace = weak_drive_reflection(bath, atom, grid)
        else:
            trace = strong_drive_reflection(bath, atom, grid, background)
    for w in caught:
        if issubclass(w.category, DegenerateRootsWarning):
            print(f"warning: {w.message}", file=sys.stderr)
    relative = args.noise if args.noise is not None else data["noise"]["relative"]
    seed = args.seed if args.seed is not None else data["noise"]["seed"]
    if relative > 0:
        rng = np.random.default_rng(seed)
        values = trace.values * (1.0 + relative * rng.standard_normal(trace.values.size))
        meta = dict(trace.metadata, seed=seed, noise=float(relative))
        sigma = relative * np.abs(trace.values)
        # noise-free points (a model value of exactly zero) cannot carry a relative sigma
        trace = type(trace)(trace.offsets, values, meta, sigma if np.all(sigma > 0) else None)
    name = f"{data['output']['prefix']}.txt"
    write_trace(trace, run.path(name))
    run.summary.update({
        "spectrum": kind,
        "points": int(trace.offsets.size),
        "n_photons": bath.n_photons,
        "m_mag": bath.m_mag,
        "phi": bath.phi,
        "rabi": atom.rabi,
        "degenerate": trace.metadata.get("flags") == "degenerate",
        "trace": name,
    })
    run.manifest({"parameters": data})
    return EXIT_OK


def cmd_oracle_check(args, run):
    job = _job(args)
    settings = job.data["oracle"] if job else {"sets": 50, "seed": 1, "tolerance": 1e-3}
    sets = args.sets if args.sets is not None else settings["sets"]
    seed = args.seed if args.seed is not None else settings["seed"]
    tol = args.tolerance if args.tolerance is not None else settings["tolerance"]
    if args.preset == "mollow-threshold":
        cases = [pipelines.threshold_case()]
    else:
        cases = pipelines.random_cases(sets, seed)
    report = pipelines.oracle_check(cases, tol, _workers(), corrupt=args.corrupt_rate_sign)
    for label in report["degenerate"]:
        print(f"warning: {label}: near-degenerate spectral roots, resolvent path used", file=sys.stderr)
    for row in report["cases"]:
        if row["error"]:
            print(f"error: {row['label']}: {row['error']}", file=sys.stderr)
    write_json(report, run.path("oracle_report.json"))
    run.summary.update({
        "sets": len(cases),
        "tolerance": tol,
        "worst_linf_relative": report["worst"]["linf_relative"],
        "worst_sum_rule_error": report["worst"]["sum_rule_error"],
        "worst_steady_state_error": report["worst"]["steady_state_error"],
        "degenerate": report["degenerate"],
        "failures": report["failures"],
        "result": "pass" if report["passed"] else "FAIL",
    })
    run.manifest()
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _load_traces(paths):
    return [(Path(p).name, read_trace(p), p) for p in paths]


def cmd_fit(args, run):
    job = _job(args)
    paths = list(args.traces) or (job.data["traces"] if job else [])
    if not paths:
        raise UsageError("no trace files given")
    model = args.model or (job.data["model"] if job else "no-drive")
    atom = job.atom() if job else None
    loaded = _load_traces(paths)
    rows, failures = [], []

    def atom_for(trace):
        if atom is not None:
            return atom
        return pipelines.lab_atom(eta_c=trace.metadata.get("eta_c", pipelines.ETA_C))

    if model == "full-analytic":
        offsets = job.data["phase_offsets"] if job else None
        guess = {"rabi": args.rabi} if args.rabi is not None else None
        try:
            result = fit_full_joint([t for _, t, _ in loaded], atom_for(loaded[0][1]), offsets, guess)
            write_json(report_dict(result, [p for *_, p in loaded], args.seed), run.path("fit_joint.json"))
            rows.append(_fit_row("joint", result))
        except FitError as exc:
            failures.append({"trace": "joint", "error": str(exc)})
    else:
        fitter = fit_no_drive if model == "no-drive" else fit_three_lorentzian
        for name, trace, path in loaded:
            try:
                result = fitter(trace, atom_for(trace))
            except FitError as exc:
                failures.append({"trace": name, "error": str(exc)})
                continue
            write_json(report_dict(result, [path], args.seed), run.path(f"fit_{Path(name).stem}.json"))
            rows.append(_fit_row(name, result))
    for f in failures:
        print(f"error: {f['trace']}: {f['error']}", file=sys.stderr)
    run.summary.update({"model": model, "fits": rows, "failures": failures})
    run.manifest()
    return EXIT_FAIL if failures else EXIT_OK


def _phase_outputs(run, out, prefix):
    rows = []
    pred = out.get("predicted")
    for k, r in enumerate(out["rows"]):
        row = [r["phi"], r.get("center_hwhm", math.nan), r.get("center_sigma", math.nan),
               r.get("sideband_hwhm", math.nan), r.get("sideband_sigma", math.nan)]
        if pred is not None:
            row += [pred["center_hwhm"][k], pred["sideband_hwhm"][k]]
        rows.append(row)
    header = ["phi", "center_hwhm", "center_sigma", "sideband_hwhm", "sideband_sigma"]
    if pred is not None:
        header += ["predicted_center_hwhm", "predicted_sideband_hwhm"]
    write_table(run.path(f"{prefix}_widths.tsv"), header, rows)
    fits = {}
    for key in ("center_fit", "sideband_fit"):
        if key in out:
            s = out[key]
            fits[key] = {"mean": s.mean, "amplitude": s.amplitude, "phase": s.phase, "r_squared": s.r_squared}
    if "r_squared_vs_prediction" in out:
        fits["r_squared_vs_prediction"] = out["r_squared_vs_prediction"]
    write_json(fits, run.path(f"{prefix}_sinusoids.json"))
    run.summary["failures"] = out["failures"]
    for key, value in fits.items():
        if key.endswith("_fit"):
            run.summary[key.replace("_fit", "_mean")] = value["mean"]
            run.summary[key.replace("_fit", "_amplitude")] = value["amplitude"]
            run.summary[key.replace("_fit", "_phase")] = value["phase"]
            run.summary[key.replace("_fit", "_r_squared")] = value["r_squared"]
    if "center_fit" in fits and "sideband_fit" in fits:
        # sinusoid phases are angles in 2 phi; report the lag in phi
        lag = ((fits["center_fit"]["phase"] - fits["sideband_fit"]["phase"]) % (2 * math.pi)) / 2
        run.summary["phase_lag"] = lag
    if "r_squared_vs_prediction" in fits:
        run.summary["r_squared_vs_prediction"] = fits["r_squared_vs_prediction"]


def cmd_sweep_phase(args, run, prefix="phase"):
    seed = args.seed if args.seed is not None else 0
    if args.traces:
        loaded = _load_traces(args.traces)
        atom = pipelines.lab_atom(eta_c=loaded[0][1].metadata.get("eta_c", pipelines.ETA_C))
        out = pipelines.phase_sweep_fits([t for _, t, _ in loaded], atom, _workers())
    else:
        grid = args.grid
        out = pipelines.phase_sweep(args.gain_db, args.phi, args.rabi, args.noise, seed, grid, _workers())
        for k, trace in enumerate(out["traces"]):
            write_trace(trace, run.path(f"{prefix}_trace{k:02d}.txt"))
    _phase_outputs(run, out, prefix)
    run.manifest({"constants": _constants()})
    return EXIT_FAIL if out["failures"] else EXIT_OK


def _gain_outputs(run, out, prefix):
    rows = [[r["gain_db"], r.get("m_minus_n", math.nan), r.get("sigma", math.nan)] for r in out["rows"]]
    write_table(run.path(f"{prefix}_gain.tsv"), ["gain_db", "m_minus_n", "sigma"], rows)
    run.summary["failures"] = out["failures"]
    if "efficiency" in out:
        eff = out["efficiency"]
        write_json(report_dict(eff, seed=run.args.seed), run.path(f"{prefix}_efficiency.json"))
        run.summary["eta"] = eff["eta"]
        run.summary["eta_sigma"] = eff.sigma("eta")
        run.summary["eta_loss"] = eff["eta_loss"]


def cmd_sweep_gain(args, run, prefix="gain"):
    seed = args.seed if args.seed is not None else 0
    if args.traces:
        loaded = _load_traces(args.traces)
        missing = [name for name, t, _ in loaded if "gain_db" not in t.metadata]
        if missing:
            raise UsageError(f"traces lack a gain_db header: {', '.join(missing)}")
        atom = pipelines.lab_atom(eta_c=loaded[0][1].metadata.get("eta_c", pipelines.ETA_C))
        out = pipelines.gain_sweep_fits([t for _, t, _ in loaded], atom, _workers())
    else:
        gains = args.gains or pipelines.DEFAULT_GAINS
        out = pipelines.gain_sweep(gains, args.eta, args.noise, seed, _workers())
        for k, trace in enumerate(out["traces"]):
            write_trace(trace, run.path(f"{prefix}_trace{k:02d}.txt"))
    _gain_outputs(run, out, prefix)
    run.manifest({"constants": _constants()})
    failed = bool(out["failures"]) or "efficiency" not in out
    return EXIT_FAIL if failed else EXIT_OK


def cmd_reproduce(args, run):
    fig = args.figure
    seed = args.seed
    if fig == "fig2a":
        res = pipelines.no_drive_reproduction(noise=args.noise, seed=7 if seed is None else seed)
        write_trace(res["trace"], run.path("fig2a_trace.txt"))
        truth = {"n_photons": res["truth"].n_photons, "m_mag": res["truth"].m_mag, "squeezing_db": res["truth_db"]}
        write_json(report_dict(res["fit"], seed=seed, extra={"truth": truth}), run.path("fig2a_fit.json"))
        fit = res["fit"]
        run.summary.update({
            "gamma_y": fit["gamma_y"], "gamma_y_sigma": fit.sigma("gamma_y"),
            "squeezing_db": fit["squeezing_db"], "squeezing_db_sigma": fit.sigma("squeezing_db"),
            "truth_squeezing_db": res["truth_db"],
        })
        code = EXIT_OK
    elif fig == "fig3":
        args.gain_db, args.rabi, args.traces = 1.5, None, []
        code = cmd_sweep_phase(args, run, prefix="fig3")
        return code
    elif fig == "fig4":
        args.gains, args.eta, args.traces = None, pipelines.ETA, []
        return cmd_sweep_gain(args, run, prefix="fig4")
    else:
        res = pipelines.joint_reproduction(noise=args.noise, seed=60 if seed is None else seed)
        for k, trace in enumerate(res["traces"]):
            write_trace(trace, run.path(f"fig6_trace{k}.txt"))
        truth = res["truth"]
        extra = {"truth": {"n_photons": truth.n_photons, "m_mag": truth.m_mag,
                           "m_minus_n": truth.m_mag - truth.n_photons, "squeezing_db": squeezing_db(truth)}}
        write_json(report_dict(res["fit"], seed=seed, extra=extra), run.path("fig6_fit.json"))
        fit = res["fit"]
        run.summary.update({
            "m_minus_n": fit["m_minus_n"], "m_minus_n_sigma": fit.sigma("m_minus_n"),
            "rabi": fit["rabi"], "truth_m_minus_n": truth.m_mag - truth.n_photons,
        })
        code = EXIT_OK
    run.manifest({"constants": _constants()})
    return code


COMMANDS = {
    "sim": cmd_sim,
    "oracle-check": cmd_oracle_check,
    "fit": cmd_fit,
    "sweep-phase": cmd_sweep_phase,
    "sweep-gain": cmd_sweep_gain,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        run = Run(args, argv)
        code = COMMANDS[args.command](args, run)
    except (JobError, TraceFormatError, UsageError, UnphysicalBathError, FileNotFoundError) as exc:
        print(f"sqfluor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"sqfluor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitError as exc:
        print(f"sqfluor: fit failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    run.emit()
    return code


if __name__ == "__main__":
    sys.exit(main())
