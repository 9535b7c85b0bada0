"""Command line front end: ``stealthy-estimation <command> --config cfg.json``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
4 infeasible stealth constraint.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import attack, chain, simulator, stackelberg, sysmodel
from .errors import InfeasibleStealth, StealthError

log = logging.getLogger("stealthy_estimation")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4

_prob = {"type": "number", "minimum": 0, "maximum": 1}
_count = {"type": "integer", "minimum": 1}
_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "out": {"type": "string"},
        "model": {
            "oneOf": [
                {"const": "paper"},
                {"type": "object", "required": ["A", "C", "Q", "R"], "additionalProperties": False,
                 "properties": {k: _matrix for k in "ACQR"}},
            ]
        },
        "model_file": {"type": "string"},
        "channel": {
            "type": "object", "required": ["lambda", "lambda_a", "lambda_e"], "additionalProperties": False,
            "properties": {"lambda": _prob, "lambda_a": _prob, "lambda_e": _prob},
        },
        "policy": {
            "oneOf": [
                {"type": "object", "required": ["taus"], "additionalProperties": False,
                 "properties": {"taus": {"type": "array", "items": _prob}, "n_r": _count, "tail": _prob}},
                {"type": "object", "required": ["threshold", "n_r"], "additionalProperties": False,
                 "properties": {"threshold": {"type": "integer", "minimum": 0}, "n_r": _count}},
            ]
        },
        "policy_file": {"type": "string"},
        "attack": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_t": _count,
                "eps_s": {"type": "number", "minimum": 0},
                "boundary": {"enum": list(attack.BOUNDARY_MODES)},
                "n_t_list": {"type": "array", "items": _count},
            },
        },
        "defend": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "alpha": _prob, "beta1": _prob, "beta2": _prob,
                "eps_s": {"type": "number", "minimum": 0},
                "n_r": _count, "n_t": _count,
                "method": {"enum": ["branch_and_bound", "exhaustive"]},
            },
        },
        "simulate": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "horizon": {"type": "integer"},
                "window": _count,
                "burn_in": {"type": "integer", "minimum": 0},
                "signal_level": {"type": "boolean"},
                "hijack": {"type": "boolean"},
                "write_trace": {"type": "boolean"},
            },
        },
        "reproduce": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_r_list": {"type": "array", "items": _count},
                "n_t": _count,
                "n_t_by_n_r": {"type": "object", "additionalProperties": _count},
                "eps_list": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "kl_horizon": _count,
                "window": _count,
                "search": {"enum": ["both", "branch_and_bound", "exhaustive"]},
            },
        },
    },
}

DEFAULTS = {
    "attack": {"n_t": 50, "eps_s": 0.05, "boundary": "transmit", "n_t_list": [10, 20, 30, 40, 50]},
    "defend": {"alpha": 0.2, "beta1": 0.99, "beta2": 0.5, "eps_s": 0.05, "n_r": 5, "n_t": 50,
               "method": "branch_and_bound"},
    "simulate": {"horizon": 10**6, "burn_in": simulator.BURN_IN, "signal_level": False, "hijack": False,
                 "write_trace": False},
    "reproduce": {"n_r_list": [5, 10], "n_t": 50, "n_t_by_n_r": {"10": 30},
                  "eps_list": [0.0, 0.02, 0.05, 0.08, 0.1], "kl_horizon": 10**6, "window": 10, "search": "both"},
}


class ConfigError(Exception):
    exit_code = EXIT_CONFIG


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: invalid config at {where}: {exc.message}") from exc
    base = path.parent
    for key in ("model_file", "policy_file"):
        if key in doc:
            ref = Path(doc[key])
            ref = ref if ref.is_absolute() else base / ref
            if not ref.exists():
                raise ConfigError(f"{path}: {key} {doc[key]!r} does not exist")
            doc[key] = str(ref)
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def section(doc: dict, name: str) -> dict:
    return {**DEFAULTS.get(name, {}), **doc.get(name, {})}


def build_model(doc: dict) -> sysmodel.SystemModel:
    if "model_file" in doc:
        return sysmodel.load_model(doc["model_file"])
    spec = doc.get("model", "paper")
    if spec == "paper":
        return sysmodel.paper_model()
    return sysmodel.SystemModel.from_dict(spec)


def build_channel(doc: dict) -> chain.ChannelParams:
    if "channel" not in doc:
        return chain.PAPER_CHANNEL
    return chain.ChannelParams.from_dict(doc["channel"])


def build_policy(doc: dict) -> chain.ReferencePolicy:
    if "policy_file" in doc:
        with open(doc["policy_file"]) as fh:
            spec = json.load(fh)
    else:
        spec = doc.get("policy", {"threshold": 6, "n_r": 10})
    if "threshold" in spec:
        return chain.ReferencePolicy.threshold(spec["threshold"], spec["n_r"])
    return chain.ReferencePolicy.from_dict(spec)


# ---------------------------------------------------------------------------
# output helpers


class Output:
    """Writes artifacts stamped with the config hash and seed."""

    def __init__(self, out_dir, digest: str, seed: int):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.digest, self.seed = digest, seed
        self.written = []

    def json(self, name: str, payload: dict) -> Path:
        path = self.dir / name
        doc = {"config_sha256": self.digest, "seed": self.seed, **payload}
        path.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n")
        self.written.append(path)
        return path

    def csv(self, name: str, header, rows) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_sha256={self.digest} seed={self.seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.written.append(path)
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_steady(doc, out: Output):
    model = build_model(doc)
    steady = sysmodel.solve_steady_covariance(model)
    out.json("steady.json", {
        "PBar": steady.PBar, "trace": float(np.trace(steady.PBar)),
        "iterations": steady.iterations, "residual": steady.residual,
        "spectral_radius": model.spectral_radius,
    })


def cmd_analyze(doc, out: Output):
    model, chan, policy = build_model(doc), build_channel(doc), build_policy(doc)
    steady = sysmodel.solve_steady_covariance(model)
    dist = chain.stationary_sensor_belief(policy, chan)
    verdict = chain.check_boundedness(policy, chan, model)
    try:
        J_u = chain.j_upper(policy, chan, steady, model)
    except StealthError:
        J_u = math.inf
    thresholds = {}
    for mode in ("loss_only", "ack_weighted"):
        try:
            thresholds[mode] = chain.min_secrecy_threshold(chan, model, mode=mode)
        except StealthError as exc:
            thresholds[mode] = None
            log.info("min_secrecy_threshold(%s): %s", mode, exc)
    out.csv("pi_s.csv", ("eta_s", "probability"), dist.to_csv_rows())
    out.json("analysis.json", {
        "policy": policy.to_dict(), "channel": chan.to_dict(), "J_u": J_u, "verdict": verdict.value,
        "tail_mass": dist.tail_mass, "min_secrecy_threshold": thresholds,
    })


def cmd_attack(doc, out: Output):
    model, chan, policy = build_model(doc), build_channel(doc), build_policy(doc)
    opts = section(doc, "attack")
    steady = sysmodel.solve_steady_covariance(model)
    res = attack.synthesize_malicious_policy(policy, chan, steady, model, opts["n_t"], opts["eps_s"],
                                             boundary=opts["boundary"])
    n_t = opts["n_t"]
    full = res.policy.full()
    out.csv("malicious_policy.csv", ("eta_s", "eta_e", "tau_tilde"),
            [(i, j, full[i, j]) for i in range(n_t + 1) for j in range(n_t + 1)])
    out.csv("occupation.csv", ("eta_s", "eta_e", "action", "rho"), res.occupation.to_csv_rows())
    Jhat_u, Jhat_e, _ = attack.reference_costs(policy, chan, steady, model, n_t, boundary=opts["boundary"])
    out.json("attack.json", {
        "n_t": n_t, "eps_s": opts["eps_s"], "boundary": opts["boundary"], "J_e": res.J_e, "J_u": res.J_u,
        "l1": res.l1, "reference_J_u": Jhat_u, "reference_J_e": Jhat_e,
        "malicious_policy": res.policy.to_dict(),
    })


def _stackelberg_config(doc, opts, n_r=None, n_t=None):
    model, chan = build_model(doc), build_channel(doc)
    return stackelberg.StackelbergConfig(
        alpha=opts["alpha"], beta1=opts["beta1"], beta2=opts["beta2"], eps_s=opts["eps_s"],
        n_r=n_r or opts["n_r"], n_t=n_t or opts["n_t"], chan=chan, model=model)


def cmd_defend(doc, out: Output, verbose=False):
    opts = section(doc, "defend")
    cfg = _stackelberg_config(doc, opts)
    search = stackelberg.exhaustive_search if opts["method"] == "exhaustive" else stackelberg.branch_and_bound
    report = search(cfg)
    out.json("defend.json", {"method": opts["method"], "n_r": cfg.n_r, "n_t": cfg.n_t,
                             **report.to_dict(verbose=verbose)})


def cmd_simulate(doc, out: Output, seed: int):
    model, chan, policy = build_model(doc), build_channel(doc), build_policy(doc)
    opts = section(doc, "simulate")
    steady = sysmodel.solve_steady_covariance(model)
    sim_policy = policy
    payload = {}
    if opts["hijack"]:
        a = section(doc, "attack")
        res = attack.synthesize_malicious_policy(policy, chan, steady, model, a["n_t"], a["eps_s"],
                                                 boundary=a["boundary"])
        sim_policy = res.policy
        payload["attack"] = {"n_t": a["n_t"], "eps_s": a["eps_s"], "J_e": res.J_e, "J_u": res.J_u}
    cfg = simulator.SimConfig(opts["horizon"], seed, sim_policy, chan, signal_level=opts["signal_level"])
    trace = simulator.simulate(cfg, model, steady)
    costs = simulator.empirical_costs(trace, steady, model, burn_in=opts["burn_in"])
    payload.update(summary=trace.summary(), costs={
        "J_l": costs.J_l, "J_e": costs.J_e, "J_u": costs.J_u,
        "se_l": costs.se_l, "se_e": costs.se_e, "se_u": costs.se_u})
    if opts["signal_level"]:
        buckets = simulator.signal_level_check(trace, model, steady, burn_in=opts["burn_in"])
        payload["signal_level"] = [{"h": b.h, "samples": b.samples, "empirical": b.empirical,
                                    "analytic": b.analytic, "rel_error": b.rel_error} for b in buckets]
    if opts["hijack"]:
        n_r = opts.get("window", policy.n_r)
        audit = simulator.stealth_audit(policy, sim_policy, chan, n_r, opts["horizon"], seed,
                                        n_t=section(doc, "attack")["n_t"], burn_in=opts["burn_in"])
        payload["audit"] = audit._asdict()
    if opts["write_trace"]:
        trace.to_csv(out.dir / "trace.csv")
    out.json("simulate.json", payload)


def cmd_reproduce(doc, out: Output, seed: int, verbose=False):
    model, chan, policy = build_model(doc), build_channel(doc), build_policy(doc)
    steady = sysmodel.solve_steady_covariance(model)
    rep = section(doc, "reproduce")
    dopts = section(doc, "defend")
    aopts = section(doc, "attack")

    rows = []
    for n_r in rep["n_r_list"]:
        n_t = rep["n_t_by_n_r"].get(str(n_r), rep["n_t"])
        cfg = stackelberg.StackelbergConfig(dopts["alpha"], dopts["beta1"], dopts["beta2"], dopts["eps_s"],
                                            n_r, n_t, chan, model, steady)
        cache = {}
        searches = {"exhaustive": stackelberg.exhaustive_search, "branch_and_bound": stackelberg.branch_and_bound}
        for name, fn in searches.items():
            if rep["search"] not in ("both", name):
                continue
            log.info("table1: %s n_r=%d n_t=%d", name, n_r, n_t)
            r = fn(cfg, cache=cache)
            rows.append((n_r, n_t, name, r.best_policy.threshold_value, r.best_value, r.leaves_evaluated,
                         r.bounds_computed, r.pruned_subtrees))
    out.csv("table1.csv", ("n_r", "n_t", "method", "threshold", "J_c", "leaves_evaluated", "bounds_computed",
                           "pruned_subtrees"), rows)

    n_t = aopts["n_t"]
    res = attack.synthesize_malicious_policy(policy, chan, steady, model, n_t, aopts["eps_s"])
    full = res.policy.full()
    out.csv("fig5_policy.csv", ("eta_s", "eta_e", "tau_tilde"),
            [(i, j, full[i, j]) for i in range(n_t + 1) for j in range(n_t + 1)])

    sweep = attack.stealth_sweep(policy, chan, steady, model, n_t, rep["eps_list"])
    srows = []
    for row, pol in sweep:
        audit = simulator.stealth_audit(policy, pol, chan, rep["window"], rep["kl_horizon"], seed, n_t=n_t)
        srows.append((row.eps_s, row.J_u, row.J_e, row.l1, audit.eps_kl_hat, audit.l1_hat, row.reference_fallback))
    out.csv("fig6_sweep.csv", ("eps_s", "J_u", "J_e", "l1", "kl_hat", "l1_hat", "reference_fallback"), srows)

    # lumped boundary: the transmitting one is infeasible at small n_t for this budget
    conv = attack.truncation_sweep(policy, chan, steady, model, aopts["n_t_list"], aopts["eps_s"], boundary="lumped")
    out.csv("convergence.csv", ("n_t", "boundary", "J_e", "J_u", "l1", "feasible"),
            [(r.n_t, "lumped", r.J_e, r.J_u, r.l1, r.feasible) for r in conv])
    out.json("reproduce.json", {"files": [p.name for p in out.written]})


COMMANDS = ("steady", "analyze", "attack", "defend", "simulate", "reproduce")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stealthy-estimation", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment configuration")
    common.add_argument("--seed", type=int, default=None, help="64-bit seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory (default: ./out)")
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} pipeline")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        doc = load_config(args.config)
        seed = args.seed if args.seed is not None else doc.get("seed", 0)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed {seed} is not an unsigned 64-bit integer")
        out = Output(args.out or doc.get("out", "out"), config_hash(doc), seed)
        if args.command == "steady":
            cmd_steady(doc, out)
        elif args.command == "analyze":
            cmd_analyze(doc, out)
        elif args.command == "attack":
            cmd_attack(doc, out)
        elif args.command == "defend":
            cmd_defend(doc, out, verbose=args.verbose)
        elif args.command == "simulate":
            cmd_simulate(doc, out, seed)
        else:
            cmd_reproduce(doc, out, seed, verbose=args.verbose)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleStealth as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except StealthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())
