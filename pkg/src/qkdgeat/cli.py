"""Command-line front end: ``qkdgeat {bound,keyrate,simulate,decoy}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from decimal import Decimal
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import decoy, keyrate, protocol, simrun, tradeoff
from .keyrate import ParameterError, SecurityParams
from .protocol import ProtocolError

log = logging.getLogger("qkdgeat")

CACHE_ENV = "QKDGEAT_CACHE_DIR"
CSV_HEADER = ("p", "n", "s", "rate", "l", "alpha", "gamma", "lambda_ec", "k_ca", "eps_sec", "eps_cor")
EPS_FIELDS = ("eps_s", "eps_a", "eps_pa", "eps_kv", "eps_comp_kv", "eps_comp_ev")


class ConfigError(ValueError):
    pass


CONFIG_ERRORS = (ConfigError, ProtocolError, ParameterError, decoy.DecoyError, simrun.SimError,
                 json.JSONDecodeError, KeyError, TypeError, OSError)


# --------------------------------------------------------------------------
# config parsing


def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_spec(ref, gamma: Optional[float] = None) -> protocol.ProtocolSpec:
    """A preset name (``b92``, ``bb84``) or a JSON spec file."""
    try:
        if isinstance(ref, str) and ref in protocol.PRESETS:
            return protocol.PRESETS[ref](0.1 if gamma is None else gamma)
        doc = _load_json(ref) if isinstance(ref, (str, Path)) else ref
        if gamma is not None and "preset" in doc:
            doc = dict(doc, gamma=gamma)
        return protocol.spec_from_json(doc)
    except (ProtocolError, json.JSONDecodeError, OSError):
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid spec: {exc}") from exc


def parse_params(doc: dict, n: float, s: int = 1) -> SecurityParams:
    """Security parameters; ε values must be decimal strings."""
    kw = {}
    for k in EPS_FIELDS:
        if k in doc:
            if not isinstance(doc[k], str):
                raise ConfigError(f"{k} must be a decimal string, got {doc[k]!r}")
            kw[k] = float(Decimal(doc[k]))
    return SecurityParams(n=n, s=s, **kw)


def cache_dir(flag: Optional[str]) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "qkdgeat"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


# --------------------------------------------------------------------------
# bound


def _stats_for(spec, stats_arg: str):
    """``honest:P`` or a JSON file mapping labels to probabilities."""
    if stats_arg.startswith("honest:"):
        return protocol.honest_model(spec, float(stats_arg.split(":", 1)[1]))[0].probs
    doc = _load_json(stats_arg)
    missing = set(spec.c_labels) - set(doc)
    if missing:
        raise ConfigError(f"statistics file lacks labels {sorted(missing)}")
    return {c: float(doc[c]) for c in spec.c_labels}


def compute_bound(spec, stats: dict, budget: int, tol: float = 1e-8):
    ops = protocol.source_replacement(spec)
    lam = tradeoff.heuristic_lambda(ops, stats, maxiter=budget)
    c, rep = tradeoff.certified_c_lambda(ops, lam, tol)
    tf = tradeoff.generic_tradeoff(spec.c_labels, lam, c)
    report = {"upper_value": rep.upper_value, "certified_lower": rep.certified_lower,
              "gap": rep.gap, "iterations": rep.iterations,
              "perturbation_penalty": rep.perturbation_penalty, "budget": budget}
    return tf, report


def cmd_bound(args) -> int:
    spec = load_spec(args.spec, args.gamma)
    stats = _stats_for(spec, args.stats)
    key = hashlib.sha256(json.dumps([protocol.spec_to_json(spec), stats, args.budget],
                                    sort_keys=True, default=str).encode()).hexdigest()[:24]
    cdir = cache_dir(args.cache_dir)
    cached = cdir / f"bound-{key}.json"
    if cached.exists():
        doc = _load_json(cached)
        log.info("cache hit %s", cached)
    else:
        tf, report = compute_bound(spec, stats, args.budget)
        doc = {"tradeoff": json.loads(tf.to_json()), "report": report, "cache_key": key}
        cdir.mkdir(parents=True, exist_ok=True)
        cached.write_text(json.dumps(doc, sort_keys=True, indent=2))
    text = json.dumps(doc, sort_keys=True, indent=2)
    _emit(text, args.output)
    if args.output:
        Path(args.output + ".report.json").write_text(json.dumps(doc["report"], sort_keys=True, indent=2))
    return 0 if doc["report"]["gap"] <= args.max_gap else 1


# --------------------------------------------------------------------------
# keyrate


def _keyrate_point(job):
    spec_doc, p, n, s, params_doc, budget = job
    spec = protocol.spec_from_json(spec_doc)
    try:
        params = parse_params(params_doc, n, s)
        res = keyrate.optimize_keyrate(spec, p, params, solver_budget=budget)
        return [p, n, s, res.rate, res.key_length, res.breakdown.alpha, res.gamma,
                res.plan.lambda_ec, res.plan.k_ca, res.eps_sec, res.eps_cor], None
    except Exception as exc:  # recorded as a NaN row, the sweep continues
        return [p, n, s] + [math.nan] * 8, f"p={p} n={n} s={s}: {exc}"


def _asymptotic_point(job):
    spec_doc, p = job
    spec = protocol.spec_from_json(spec_doc)
    try:
        if spec.name == "b92":
            rate = keyrate.asymptotic_rate(spec, p)[0]
        else:
            stats, h_sv = protocol.honest_model(spec, p)
            ops = protocol.source_replacement(spec)
            lam = tradeoff.heuristic_lambda(ops, stats)
            c, _ = tradeoff.certified_c_lambda(ops, lam)
            rate = tradeoff.generic_tradeoff(spec.c_labels, lam, c).value(stats) - h_sv
        return [p, math.inf, 1, rate] + [math.nan] * 7, None
    except Exception as exc:
        return [p, math.inf, 1] + [math.nan] * 8, f"asymptotic p={p}: {exc}"


def sweep_config(args) -> dict:
    doc = _load_json(args.config) if args.config else {}
    cfg = {
        "spec": doc.get("spec", doc.get("preset", "b92")),
        "gamma": doc.get("gamma"),
        "p": doc.get("p", [0.0]),
        "n": doc.get("n", [1e7]),
        "s": doc.get("s", [1]),
        "params": doc.get("params", {}),
        "asymptotic": doc.get("asymptotic", True),
    }
    for k in ("p", "n", "s"):
        flag = getattr(args, k)
        if flag is not None:
            cfg[k] = [float(x) if k != "s" else int(x) for x in flag.split(",") if x.strip()]
    for k in ("p", "n", "s"):
        if not cfg[k]:
            raise ConfigError(f"{k} list is empty")
    if any(not 0.0 <= float(p) <= 1.0 for p in cfg["p"]):
        raise ConfigError("p values must lie in [0, 1]")
    return cfg


def run_sweep(cfg: dict, budget: int, threads: int = 1):
    """All rows of a sweep in grid order, plus the list of failures."""
    spec = load_spec(cfg["spec"], cfg["gamma"])
    for n, s in ((n, s) for n in cfg["n"] for s in cfg["s"]):
        parse_params(cfg["params"], float(n), int(s))  # fail fast on bad parameters
    sdoc = protocol.spec_to_json(spec)
    jobs = [(sdoc, float(p), float(n), int(s), cfg["params"], budget)
            for p in cfg["p"] for n in cfg["n"] for s in cfg["s"]]
    ajobs = [(sdoc, float(p)) for p in cfg["p"]] if cfg["asymptotic"] else []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(_keyrate_point, jobs)) + list(ex.map(_asymptotic_point, ajobs))
    else:
        out = [_keyrate_point(j) for j in jobs] + [_asymptotic_point(j) for j in ajobs]
    return [r for r, _ in out], [e for _, e in out if e]


def write_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def read_keyrate_csv(text: str) -> List[dict]:
    """Parse a keyrate CSV; ``n = inf`` marks the asymptotic rows."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ConfigError(f"unexpected header {reader.fieldnames}")
    ints = {"s"}
    return [{k: (int(float(v)) if k in ints else float(v)) for k, v in row.items()} for row in reader]


def cmd_keyrate(args) -> int:
    cfg = sweep_config(args)
    rows, errors = run_sweep(cfg, args.budget, args.threads)
    for e in errors:
        log.error("%s", e)
    _emit(write_csv(rows), args.output)
    return 0


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    p = float(doc.get("p", args.p if args.p is not None else 0.0))
    n = int(float(doc.get("n", args.n if args.n is not None else 10 ** 5)))
    trials = int(doc.get("trials", args.trials))
    gamma = float(doc.get("gamma", 0.1))
    if doc.get("spec", doc.get("preset", "b92")) != "b92":
        raise ConfigError("the simulator plan builder supports the b92 preset only")
    params = parse_params(doc.get("params", {}), n)
    extra = {}
    if "key_length" in doc:
        extra["key_length"] = int(doc["key_length"])
    cfg = simrun.b92_config(p, n, params, gamma=gamma, seed=args.seed,
                            flip_rate=float(doc.get("flip_rate", 0.0)), **extra)
    rep = simrun.empirical_completeness(cfg, trials, threads=args.threads)
    meta = {"p": p, "n": n, "gamma": gamma, "seed": args.seed, "key_length": cfg.key_length,
            "lambda_ec": cfg.plan.lambda_ec, "k_ca": cfg.plan.k_ca,
            "budget": params.eps_comp_kv + params.eps_comp_ev}
    _emit(simrun.summary_json(rep, meta), args.output)
    return 0


# --------------------------------------------------------------------------
# decoy


def decoy_report(gains: decoy.ObservedGains, settings: decoy.DecoySettings) -> dict:
    t0 = decoy.bound_t0(gains, settings, "X")
    t1 = decoy.bound_t1(gains, settings, max(t0, 0.0), "X")
    return {"tau0": decoy.tau(settings, 0), "tau1": decoy.tau(settings, 1),
            "t0_lower": t0, "t1_lower": t1, "f1_upper": decoy.bound_f1(gains, settings, "Z"),
            "entropy_lower": decoy.decoy_entropy_bound(gains, settings)}


def _floats(text: str, k: int) -> tuple:
    vals = tuple(float(x) for x in text.split(","))
    if len(vals) != k:
        raise ConfigError(f"expected {k} comma-separated values, got {text!r}")
    return vals


def cmd_decoy(args) -> int:
    settings = decoy.DecoySettings(_floats(args.mu, 3), _floats(args.p_mu, 3), args.q_x)
    with open(args.gains) as fh:
        gains = decoy.gains_from_csv(fh.read())
    rep = decoy_report(gains, settings)
    _emit(json.dumps(rep, sort_keys=True, indent=2), args.output)
    return 0


# --------------------------------------------------------------------------
# entry point


def _emit(text: str, path: Optional[str]):
    if path:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qkdgeat", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--budget", type=int, default=120, help="solver iteration cap")
    common.add_argument("--cache-dir", default=None)
    common.add_argument("--output", "-o", default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bound", parents=[common], help="certified tradeoff function")
    b.add_argument("--spec", default="b92", help="preset name or JSON spec file")
    b.add_argument("--gamma", type=float, default=None)
    b.add_argument("--stats", default="honest:0.0", help="honest:P or a JSON statistics file")
    b.add_argument("--max-gap", type=float, default=1e-3)
    b.set_defaults(func=cmd_bound)

    k = sub.add_parser("keyrate", parents=[common], help="key-rate sweep as CSV")
    k.add_argument("--config", default=None, help="JSON sweep config")
    k.add_argument("--p", default=None, help="comma-separated noise values")
    k.add_argument("--n", default=None, help="comma-separated round counts")
    k.add_argument("--s", default=None, help="comma-separated step sizes")
    k.set_defaults(func=cmd_keyrate)

    s = sub.add_parser("simulate", parents=[common], help="Monte-Carlo protocol runs")
    s.add_argument("--config", default=None)
    s.add_argument("--p", type=float, default=None)
    s.add_argument("--n", type=float, default=None)
    s.add_argument("--trials", type=int, default=100)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("decoy", parents=[common], help="decoy-state entropy bound")
    d.add_argument("--gains", required=True, help="CSV with columns basis,intensity,t,f")
    d.add_argument("--mu", required=True, help="mu1,mu2,mu3")
    d.add_argument("--p-mu", required=True, help="selection probabilities")
    d.add_argument("--q-x", type=float, default=0.5)
    d.set_defaults(func=cmd_decoy)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
