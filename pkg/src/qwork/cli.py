"""Command-line front end.

Every subcommand prints a summary (JSON by default) and, with --out-dir,
writes its CSV/JSON artifacts there. Exit codes: 0 ok, 2 invalid
parameters, 3 validation failure, 4 dimension cap exceeded.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .coherence import CoherentInput, coherence_report, coherent_qubit
from .errors import DimensionCapExceeded, QWorkError
from .protocol import (
    DiagonalState,
    LedgerOptions,
    ProtocolTrace,
    optimality_gap,
    qubit_reference_work,
    qubit_schedule,
    run_qubit_protocol,
    run_state_to_state,
)
from .qcore import DEFAULT_DIM_CAP, diagonal_operator
from .serialize import csv_text, dumps_json, write_atomic
from .thermo import ThermalContext, excitation_from_gap, gap_from_excitation
from .verify import oracle_run, second_law_sampler
from .weight import discretization_error_bound, ledger_to_csv, mean_energy, variance

EXIT_OK, EXIT_INVALID, EXIT_VALIDATION, EXIT_CAP = 0, 2, 3, 4
CONSISTENCY_TOL = 1e-10


class ValidationFailure(Exception):
    """An internal consistency check failed."""


class UsageError(Exception):
    """Missing or inconsistent parameters."""


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _resolution(text):
    if text is None or text == "auto":
        return "auto"
    if text == "exact":
        return None
    return float(text)


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("common")
    g.add_argument("--temp", type=float, default=1.0, help="bath temperature T (k_B = 1)")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out-dir", default=None, help="directory for CSV/JSON artifacts")
    g.add_argument("--merge-tol", type=float, default=None, help="offset merge tolerance (default 1e-9 T)")
    g.add_argument("--mass-floor", type=float, default=1e-15)
    g.add_argument("--lattice-spacing", type=float, default=None,
                   help="run on a discrete weight ladder with this spacing")
    g.add_argument("--resolution", default="auto",
                   help="weight grid spacing: a number, 'auto' or 'exact'")
    g.add_argument("--format", choices=("csv", "json"), default="json", help="what to print on stdout")
    g.add_argument("--config", default=None, help="flat key=value file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qwork", description="Work extraction with thermal baths and a weight.")
    ap.add_argument("--version", action="version", version=f"qwork {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qubit", help="thermalise a diagonal qubit")
    p.add_argument("--p", type=float, default=None, help="initial excited population")
    p.add_argument("--es", type=float, default=None, help="system gap E_S")
    p.add_argument("--steps", type=int, default=None, help="number of bath qubits N")
    _common(p)
    p.set_defaults(func=cmd_qubit)

    p = sub.add_parser("isothermal", help="degenerate qubit expanded from a pure state")
    p.add_argument("--steps", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_isothermal)

    p = sub.add_parser("qudit", help="thermalise a diagonal qudit")
    p.add_argument("--probs", type=_floats, default=None)
    p.add_argument("--energies", type=_floats, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--hub", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_qudit)

    p = sub.add_parser("state-to-state", help="transform one diagonal state into another")
    p.add_argument("--probs", type=_floats, default=None)
    p.add_argument("--target", type=_floats, default=None)
    p.add_argument("--energies", type=_floats, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--hub", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_state_to_state)

    p = sub.add_parser("coherence", help="n copies of a coherent qubit with thermal populations")
    p.add_argument("--n", type=int, default=None, help="number of copies")
    p.add_argument("--peq", type=float, default=None, help="excited population of the coherent qubit")
    p.add_argument("--grouping", choices=("type", "energy"), default="type")
    p.add_argument("--sim-steps", type=int, default=None,
                   help="simulate the diagonal stage with this many steps (default: asymptotic value)")
    p.add_argument("--cap", type=int, default=DEFAULT_DIM_CAP)
    _common(p)
    p.set_defaults(func=cmd_coherence)

    p = sub.add_parser("second-law", help="random permutations on thermal qubits")
    p.add_argument("--bath-gaps", type=_floats, default=None)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--two-cycles", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_second_law)

    p = sub.add_parser("oracle", help="compare the engine with the Hilbert-space oracle")
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--es", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cap", type=int, default=DEFAULT_DIM_CAP)
    _common(p)
    p.set_defaults(func=cmd_oracle, lattice_spacing=1e-4)

    p = sub.add_parser("sweep", help="grid over the number of steps or copies")
    p.add_argument("--param", choices=("steps", "n"), default=None)
    p.add_argument("--values", type=_ints, default=None)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--es", type=float, default=None)
    p.add_argument("--peq", type=float, default=None)
    p.add_argument("--grouping", choices=("type", "energy"), default="type")
    p.add_argument("--jobs", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing parameters: " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _options(args) -> LedgerOptions:
    return LedgerOptions(resolution=_resolution(args.resolution), lattice_spacing=args.lattice_spacing,
                         merge_tol=args.merge_tol, mass_floor=args.mass_floor)


def _config_dict(args) -> dict:
    # output location is not a run parameter; leaving it out keeps summaries byte-identical across directories
    skip = {"func", "config_values", "out_dir"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _emit(args, summary: dict, artifacts: dict[str, str], stdout_csv: str):
    if args.out_dir:
        out = Path(args.out_dir)
        for name, text in artifacts.items():
            write_atomic(out / name, text)
        write_atomic(out / "summary.json", dumps_json(summary))
    sys.stdout.write(stdout_csv if args.format == "csv" else dumps_json(summary))


def _check_trace(trace: ProtocolTrace):
    err = trace.ledger_discrepancy()
    if not err <= CONSISTENCY_TOL:
        raise ValidationFailure(f"work-ledger mismatch {err:.3e}")


def _trace_summary(args, trace: ProtocolTrace, rho: DiagonalState, sigma: DiagonalState) -> dict:
    ctx = ThermalContext(args.temp)
    peaks = []
    for level, led in sorted(trace.conditional_ledgers.items()):
        peaks.append({"initial_level": level, "mass": float(trace.initial_probs[level]),
                      "mean": mean_energy(led), "variance": variance(led)})
    df = rho.free_energy(ctx) - sigma.free_energy(ctx)
    return {
        "work": trace.work,
        "free_energy_delta": df,
        "gap": optimality_gap(trace.work, rho, sigma, ctx),
        "peaks": peaks,
        "variance": variance(trace.final_ledger),
        "ledger_points": len(trace.final_ledger),
        "truncated_mass": trace.final_ledger.truncated_mass,
        "config": _config_dict(args),
    }


def _run_and_emit(args, trace, rho, sigma) -> int:
    _check_trace(trace)
    summary = _trace_summary(args, trace, rho, sigma)
    trace_csv = trace.to_csv()
    _emit(args, summary, {"trace.csv": trace_csv, "ledger.csv": ledger_to_csv(trace.final_ledger)}, trace_csv)
    return EXIT_OK


def _qubit(args, p, es):
    trace = run_qubit_protocol(p, es, args.temp, args.steps, _options(args))
    ctx = ThermalContext(args.temp)
    return _run_and_emit(args, trace, DiagonalState.qubit(p, es), DiagonalState.thermal([0.0, es], ctx))


def cmd_qubit(args) -> int:
    _need(args, "p", "es", "steps")
    return _qubit(args, args.p, args.es)


def cmd_isothermal(args) -> int:
    _need(args, "steps")
    return _qubit(args, 0.0, 0.0)


def cmd_qudit(args) -> int:
    _need(args, "probs", "energies", "steps")
    ctx = ThermalContext(args.temp)
    rho = DiagonalState(args.probs, args.energies)
    sigma = DiagonalState.thermal(rho.energies, ctx)
    trace = run_state_to_state(rho, sigma, ctx, args.steps, hub=args.hub, options=_options(args))
    return _run_and_emit(args, trace, rho, sigma)


def cmd_state_to_state(args) -> int:
    _need(args, "probs", "target", "energies", "steps")
    ctx = ThermalContext(args.temp)
    rho = DiagonalState(args.probs, args.energies)
    sigma = DiagonalState(args.target, args.energies)
    trace = run_state_to_state(rho, sigma, ctx, args.steps, hub=args.hub, options=_options(args))
    return _run_and_emit(args, trace, rho, sigma)


def _coherent_input(peq: float, n: int, temp: float, cap: int = DEFAULT_DIM_CAP) -> CoherentInput:
    if not 0.0 < peq < 1.0:
        raise UsageError(f"--peq must lie in (0, 1), got {peq}")
    gap = gap_from_excitation(peq, ThermalContext(temp))
    return CoherentInput(coherent_qubit(peq), diagonal_operator([0.0, gap]), n, cap)


def cmd_coherence(args) -> int:
    _need(args, "n", "peq")
    ctx = ThermalContext(args.temp)
    inp = _coherent_input(args.peq, args.n, args.temp, args.cap)
    report = coherence_report(inp, ctx, args.grouping, args.sim_steps)
    summary = {"work": args.n * report["work_per_copy"], **report, "config": _config_dict(args)}
    rows = [(i, b["energy"], b["rank"], b["probability"], b["entropy"]) for i, b in enumerate(report["blocks"])]
    table = csv_text(["block", "energy", "rank", "probability", "entropy"], rows)
    _emit(args, summary, {"blocks.csv": table}, table)
    return EXIT_OK


def cmd_second_law(args) -> int:
    _need(args, "bath_gaps", "seed")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    rep = second_law_sampler(args.bath_gaps, ThermalContext(args.temp), args.trials, args.seed,
                             two_cycles=args.two_cycles)
    summary = rep.to_json()
    summary["config"] = _config_dict(args)
    row = csv_text(["test", "trials", "seed", "max_violation", "pass"],
                   [(rep.test, rep.trials, rep.seed, rep.max_violation, str(rep.passed).lower())])
    _emit(args, summary, {"second_law.csv": row}, row)
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def cmd_oracle(args) -> int:
    _need(args, "p", "es", "steps", "lattice_spacing")
    ctx = ThermalContext(args.temp)
    p, es, n, h = args.p, args.es, args.steps, args.lattice_spacing
    if not (0.0 < p < 1.0) or n < 1 or not h > 0:
        raise UsageError("need p in (0, 1), steps >= 1 and a positive lattice spacing")
    p_eq = excitation_from_gap(es, ctx)
    schedule = qubit_schedule(p, p_eq, n, ctx)
    oracle = oracle_run(np.array([1.0 - p, p]), [0.0, es], schedule, h, cap=args.cap)
    engine = run_qubit_protocol(p, es, args.temp, n, LedgerOptions(resolution=None))
    bound = discretization_error_bound(h, n, p, p_eq)
    diff = abs(oracle.work - engine.work)
    passed = diff <= bound + 1e-9
    summary = {"test": "oracle", "oracle_work": oracle.work, "engine_work": engine.work, "abs_diff": diff,
               "bound": bound, "window_M": oracle.weight.M, "lattice_steps": oracle.lattice_steps,
               "epsilons": oracle.epsilons, "pass": passed, "config": _config_dict(args)}
    led = ledger_to_csv(oracle.weight_ledger())
    _emit(args, summary, {"oracle_ledger.csv": led}, led)
    return EXIT_OK if passed else EXIT_VALIDATION


def _sweep_point(job):
    kind, value, params = job
    if kind == "steps":
        trace = run_qubit_protocol(params["p"], params["es"], params["temp"], value,
                                   LedgerOptions(resolution=params["resolution"]))
        ref = qubit_reference_work(params["p"], params["es"], params["temp"])
        return value, trace.work, ref
    ctx = ThermalContext(params["temp"])
    inp = _coherent_input(params["peq"], value, params["temp"])
    rep = coherence_report(inp, ctx, params["grouping"])
    return value, rep["work_per_copy"], rep["free_energy_target"]


def cmd_sweep(args) -> int:
    _need(args, "param", "values")
    if args.param == "steps":
        _need(args, "p", "es")
        if not 0.0 <= args.p <= 1.0:
            raise UsageError(f"--p must lie in [0, 1], got {args.p}")
    else:
        _need(args, "peq")
    if any(v < 1 for v in args.values):
        raise UsageError("sweep values must be >= 1")
    params = {"p": args.p, "es": args.es, "peq": args.peq, "temp": args.temp,
              "grouping": args.grouping, "resolution": _resolution(args.resolution)}
    jobs = [(args.param, v, params) for v in args.values]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    rows = [(v, w, ref, abs(ref - w)) for v, w, ref in results]
    if args.out_dir:
        for v, w, ref, gap in rows:
            point = {"param": args.param, "value": v, "work": w, "reference": ref, "abs_gap": gap}
            write_atomic(Path(args.out_dir) / f"point_{args.param}_{v}.json", dumps_json(point))
    table = csv_text(["param", "work", "reference", "abs_gap"], rows)
    summary = {"param": args.param,
               "rows": [{"param": v, "work": w, "reference": ref, "abs_gap": g} for v, w, ref, g in rows],
               "config": _config_dict(args)}
    _emit(args, summary, {"sweep.csv": table}, table)
    return EXIT_OK


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    values = read_config(known.config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = sub.choices.get(known.command)
    if target is None:
        return
    dests = {a.dest: a for a in target._actions}
    unknown = sorted(set(values) - set(dests))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    converted = {}
    for key, raw in values.items():
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            converted[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            converted[key] = action.type(raw)
        else:
            converted[key] = raw
    target.set_defaults(**converted)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (UsageError, OSError, ValueError) as exc:
        print(f"qwork: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INVALID
    try:
        return args.func(args)
    except DimensionCapExceeded as exc:
        print(f"qwork: error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ValidationFailure as exc:
        print(f"qwork: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UsageError, QWorkError, ValueError) as exc:
        print(f"qwork: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
