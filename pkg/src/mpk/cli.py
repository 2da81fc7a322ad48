"""Command line entry point: ``mpk <subcommand> --model PATH ...``.

Every subcommand writes one JSON run report (stdout or ``-o PATH``).
Exit status: 0 when every verdict passes, 1 when some verdict fails,
2 for invalid input (bad flags, malformed model, violated preconditions).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .duality import (
    check_subinvariant,
    dirichlet_bound_constant,
    dirichlet_form,
    equivalence_suite,
    invariant_partition,
)
from .errors import (
    InconsistentVerdict,
    InvariantViolation,
    MPKError,
    NegativeFunction,
    NonIntegerTime,
    NotAuxiliary,
    NotMarkovian,
    NotSubInvariant,
    SchemaError,
)
from .excessive import harmonic_residual, is_excessive, rao_decompose
from .invariant_measure import (
    almost_invariance_report,
    cesaro_invariant_density,
    check_auxiliary,
    check_markovian,
    eigen_invariant_density,
    theorem4_harness,
)
from .model_core import MarkovModel, document_digest, load_model
from .quasivar import dyadic_sequence, quasimartingale_verdict
from .trajectory_sim import empirical_variation, martingale_test, supermartingale_test
from .verdict import Verdict, jsonable

log = logging.getLogger("mpk")

COMMANDS = (
    "check-excessive",
    "variation",
    "decompose",
    "invariance-suite",
    "invariant-measure",
    "simulate",
    "dirichlet",
    "report",
)

# precondition failures are input errors, not failed verdicts
INPUT_ERRORS = (
    SchemaError,
    InvariantViolation,
    NegativeFunction,
    NonIntegerTime,
    NotSubInvariant,
    NotMarkovian,
    NotAuxiliary,
)

_verdict = {
    "type": "object",
    "required": ["property", "pass", "worst_violation", "witness", "tolerance"],
    "properties": {
        "property": {"type": "string"},
        "pass": {"type": "boolean"},
        "worst_violation": {"type": ["number", "null"]},
        "witness": {
            "type": "object",
            "required": ["state", "parameter"],
            "properties": {
                "state": {"type": ["string", "null"]},
                "parameter": {"type": ["number", "null"]},
            },
        },
        "tolerance": {"type": "number"},
        "details": {"type": "object"},
    },
}

REPORT_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["command", "tool_version", "model_digest", "seed", "pass", "verdicts", "sections"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "tool_version": {"type": "string"},
        "model_digest": {"type": "string", "pattern": "^sha256:[0-9a-f]{64}$"},
        "seed": {"type": ["integer", "null"]},
        "pass": {"type": "boolean"},
        "verdicts": {"type": "array", "items": _verdict},
        "sections": {"type": "object"},
    },
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, metavar="PATH", help="model JSON document")
    common.add_argument("--function", metavar="NAME", help="named function from the document")
    common.add_argument("--beta", type=float, metavar="F", help="discount level beta >= 0")
    common.add_argument("--alpha", type=float, metavar="F", help="resolvent parameter alpha > 0")
    common.add_argument("--paths", type=int, metavar="N", default=10000, help="Monte Carlo paths")
    common.add_argument("--seed", type=int, metavar="N", help="random seed")
    common.add_argument("--horizon", type=float, metavar="F", help="time horizon")
    common.add_argument("--start", metavar="STATE", help="start state label")
    common.add_argument("--method", metavar="NAME", default="cesaro", choices=("cesaro", "eigen"))
    common.add_argument("--rho0", metavar="SEL", default="uniform",
                        help="initial density: 'uniform', a state label, or a function name")
    common.add_argument("--tolerance", type=float, metavar="F", help="override default tolerances")
    common.add_argument("-o", dest="output", metavar="PATH", help="write the report here")
    common.add_argument("--all", action="store_true", help="use every function in the document")

    parser = argparse.ArgumentParser(prog="mpk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mpk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


# --- helpers ----------------------------------------------------------------


def _functions(model: MarkovModel, args, required: bool = True) -> dict[str, np.ndarray]:
    if args.all:
        if not model.functions and required:
            raise UsageError("--all: the model document defines no functions")
        return dict(model.functions)
    if args.function is None:
        if required:
            raise UsageError("--function is required (or --all)")
        return {}
    if args.function not in model.functions:
        raise UsageError(f"--function: {args.function!r} not defined in the model document")
    return {args.function: model.functions[args.function]}


def _beta(args, default: float, positive: bool = False) -> float:
    beta = default if args.beta is None else args.beta
    if beta < 0 or (positive and beta <= 0):
        raise UsageError(f"--beta must be {'positive' if positive else 'nonnegative'}, got {beta}")
    return beta


def _tol(args, default: float) -> float:
    return default if args.tolerance is None else args.tolerance


def _flag(prop: str, ok: bool, detail: dict | None = None) -> Verdict:
    return Verdict(prop, bool(ok), 0.0 if ok else 1.0, 0.0, details=detail or {})


def _rho0(model: MarkovModel, sel: str):
    if sel == "uniform":
        return None
    if sel in model.functions:
        return model.functions[sel]
    if sel in model.labels:
        i = model.labels.index(sel)
        rho = np.zeros(model.n)
        if model.measure[i] <= 0:
            raise UsageError(f"--rho0: state {sel!r} has zero mass")
        rho[i] = 1.0 / model.measure[i]
        return rho
    raise UsageError(f"--rho0: {sel!r} is neither 'uniform', a state, nor a function")


# --- subcommands ------------------------------------------------------------


def cmd_check_excessive(model, args, verdicts, sections):
    beta = _beta(args, 0.0)
    out = {}
    for name, u in _functions(model, args).items():
        v = is_excessive(model, u, beta, _tol(args, 1e-10))
        v.details["function"] = name
        verdicts.append(v)
        out[name] = {"supermedian": v.is_supermedian, "excessive": v.is_excessive}
    sections["excessive"] = out


def cmd_variation(model, args, verdicts, sections):
    beta = _beta(args, 1.0)
    out = {}
    for name, u in _functions(model, args).items():
        seq = dyadic_sequence(args.horizon, 40) if args.horizon else None
        rep = quasimartingale_verdict(model, u, beta, seq)
        ok = rep.is_quasimartingale and (rep.bound_check is None or rep.bound_check["pass"])
        verdicts.append(
            Verdict("quasimartingale", ok, rep.monotonicity_violation, 1e-10,
                    details={"function": name, "levels": len(rep.levels)})
        )
        out[name] = rep.to_json()
    sections["variation"] = out


def cmd_decompose(model, args, verdicts, sections):
    beta = _beta(args, 1.0, positive=True)
    out = {}
    for name, u in _functions(model, args).items():
        dec = rao_decompose(model, u, beta, _tol(args, 1e-10))
        for part, cert in zip(("u1", "u2"), dec.certificates):
            cert.details["function"] = f"{name}.{part}"
            verdicts.append(cert)
        verdicts.append(Verdict("reassembly", dec.reassembly_residual <= 1e-10, dec.reassembly_residual, 1e-10,
                                details={"function": name}))
        out[name] = dec.to_json()
    sections["decomposition"] = out


def cmd_invariance_suite(model, args, verdicts, sections):
    sub = check_subinvariant(model)
    verdicts.append(sub)
    if not sub.passed:
        raise NotSubInvariant(f"m^T L has positive entry at state {sub.witness_state}")
    part = invariant_partition(model)
    out: dict[str, Any] = {"partition": part.to_json(), "functions": {}}
    alpha = 1.0 if args.alpha is None else args.alpha
    for name, u in _functions(model, args, required=False).items():
        try:
            em = equivalence_suite(model, u, alpha, _tol(args, 1e-8))
            ok, data = True, em.to_json()
        except InconsistentVerdict as exc:
            ok, data = False, {"error": str(exc)}
        verdicts.append(_flag("equivalence_structure", ok, {"function": name}))
        out["functions"][name] = data
    sections["invariance"] = out


def cmd_invariant_measure(model, args, verdicts, sections):
    rho0 = _rho0(model, args.rho0)
    if args.method == "eigen":
        dens = eigen_invariant_density(model, rho0)
    else:
        dens = cesaro_invariant_density(model, rho0)
    verdicts.append(
        Verdict("invariant_density", dens.converged, dens.invariance_residual, 1e-6,
                details={"method": dens.method, "co_excessive_residual": dens.co_excessive_residual})
    )
    cert = almost_invariance_report(model)
    try:
        harness = theorem4_harness(model, rho0)
    except InconsistentVerdict as exc:
        harness = _flag("invariant_measure_equivalence", False, {"error": str(exc)})
    verdicts.append(harness)
    phi = cert.to_json()
    if len(cert.phi) > 64:
        phi["phi"] = {"count": len(cert.phi), "max": max(cert.phi.values())}
    sections["invariant_measure"] = {"density": dens.to_json(), "almost_invariance": phi,
                                     "harness": harness.to_json()["details"]}


def cmd_simulate(model, args, verdicts, sections):
    beta = _beta(args, 0.0)
    seed = 0 if args.seed is None else args.seed
    horizon = 1.0 if args.horizon is None else args.horizon
    start = args.start if args.start is not None else model.labels[0]
    if start not in model.labels:
        raise UsageError(f"--start: unknown state {start!r}")
    if args.paths < 2:
        raise UsageError("--paths must be at least 2")
    out = {}
    for name, u in _functions(model, args).items():
        res: dict[str, Any] = {}
        tau = dyadic_sequence(horizon, 3).level(3)
        rep = empirical_variation(model, u, beta, start, tau, args.paths, seed)
        res["variation"] = rep.to_json()
        verdicts.append(Verdict("mc_variation", rep.passed, float(np.abs(rep.z_score).max()), 3.0,
                                witness_state=start, details={"function": name}))
        times = [horizon / 4, horizon / 2, horizon]
        if u.min() >= 0 and is_excessive(model, u, beta).passed:
            rep = supermartingale_test(model, u, beta, start, times, args.paths, seed + 1)
            res["supermartingale"] = rep.to_json()
            verdicts.append(Verdict("mc_supermartingale", rep.passed, float(np.abs(rep.z_score).max()), 3.0,
                                    witness_state=start, details={"function": name}))
        if harmonic_residual(model, u) <= 1e-10 * (1 + np.abs(u).max()):
            rep = martingale_test(model, u, start, times, args.paths, seed + 2)
            res["martingale"] = rep.to_json()
            verdicts.append(Verdict("mc_martingale", rep.passed, float(np.abs(rep.z_score).max()), 3.0,
                                    witness_state=start, details={"function": name}))
        out[name] = res
    sections["simulation"] = out


def _sign_sup(model: MarkovModel, u: np.ndarray) -> float | None:
    if model.n > 16:
        return None
    codes = np.arange(2**model.n)
    signs = np.where((codes[:, None] >> np.arange(model.n)[None, :]) & 1, 1.0, -1.0)
    return float(((-(model.generator @ u) * model.measure) @ signs.T).max())


def cmd_dirichlet(model, args, verdicts, sections):
    out = {}
    for name, u in _functions(model, args).items():
        c = dirichlet_bound_constant(model, u)
        brute = _sign_sup(model, u)
        forms = {v: dirichlet_form(model, u, w) for v, w in model.functions.items()}
        ok = brute is None or abs(c - brute) <= 1e-12 * max(1.0, abs(c))
        verdicts.append(Verdict("dirichlet_bound", ok, 0.0 if brute is None else abs(c - brute), 1e-12,
                                details={"function": name}))
        out[name] = {"bound_constant": c, "sign_enumeration": brute, "form": forms}
    sections["dirichlet"] = out


def cmd_report(model, args, verdicts, sections):
    beta = _beta(args, 1.0, positive=True)
    funcs = _functions(model, args)
    classification = {}
    for name, u in funcs.items():
        entry: dict[str, Any] = {"harmonic_residual": harmonic_residual(model, u)}
        if u.min() >= 0:
            entry["excessive"] = {b: is_excessive(model, u, b).passed for b in (0.0, beta)}
        classification[name] = entry
    sections["classification"] = {k: jsonable(v) for k, v in classification.items()}

    sub_args = argparse.Namespace(**{**vars(args), "beta": beta})
    cmd_decompose(model, sub_args, verdicts, sections)
    cmd_variation(model, sub_args, verdicts, sections)
    if check_subinvariant(model).passed:
        cmd_invariance_suite(model, args, verdicts, sections)
        if model.positive_mass.all():
            cmd_dirichlet(model, args, verdicts, sections)
    if check_markovian(model).passed and check_auxiliary(model).passed:
        cmd_invariant_measure(model, args, verdicts, sections)
    if args.seed is not None and model.is_ctmc:
        cmd_simulate(model, argparse.Namespace(**{**vars(args), "beta": beta}), verdicts, sections)


HANDLERS = {
    "check-excessive": cmd_check_excessive,
    "variation": cmd_variation,
    "decompose": cmd_decompose,
    "invariance-suite": cmd_invariance_suite,
    "invariant-measure": cmd_invariant_measure,
    "simulate": cmd_simulate,
    "dirichlet": cmd_dirichlet,
    "report": cmd_report,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    started = time.perf_counter()
    try:
        raw = Path(args.model).read_bytes()
    except OSError as exc:
        print(f"mpk: error: --model: {exc}", file=sys.stderr)
        return 2
    verdicts: list[Verdict] = []
    sections: dict[str, Any] = {}
    try:
        model = load_model(raw.decode("utf-8"))
        HANDLERS[args.command](model, args, verdicts, sections)
    except (UsageError, ValueError, KeyError, *INPUT_ERRORS) as exc:
        print(f"mpk: error: {exc}", file=sys.stderr)
        return 2
    except MPKError as exc:
        verdicts.append(_flag(type(exc).__name__, False, {"error": str(exc)}))

    passed = all(v.passed for v in verdicts)
    report = {
        "command": args.command,
        "tool_version": __version__,
        "model_digest": document_digest(raw),
        "seed": args.seed,
        "pass": passed,
        "verdicts": [v.to_json() for v in verdicts],
        "sections": jsonable(sections),
    }
    text = json.dumps(report, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    # kept off the report so identical inputs give byte-identical output
    log.info("%s finished in %.3f s", args.command, time.perf_counter() - started)
    return 0 if passed else 1


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
