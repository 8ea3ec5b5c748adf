"""
Command-line entry point.

    smallnoise --config run.yaml [--set key=value ...] [--out DIR]
               [--check] [--dry-run] [--threads N] [COMMAND]

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
4 an acceptance check failed under ``--check``. A one-line JSON summary is
printed to standard output; result files go to the output directory.
"""
import argparse
import copy
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import experiments as ex
from .drifts import make_drift
from .errors import NumericalError, UsageError
from .klmetrics import INF, kl_continuous, kl_discrete, rate_functional
from .moments import TimeGrid, euler_trajectory, solve_reference, write_trajectory_csv
from .simulate import Dirac, GaussianInit, SdeSpec, simulate_linearized, simulate_nonlinear, write_ensemble_csv

COMMANDS = ("simulate", "moments", "kl-continuous", "kl-discrete", "sweep-eps", "sweep-dt", "wrong-mean-tv", "rate")

# allowed keys; a nested dict lists the keys of a sub-table, None accepts any value
SCHEMA = {
    "command": None,
    "seed": None,
    "out": None,
    "drift": {"name": None, "params": None},
    "Sigma": None,
    "eps": None,
    "T": None,
    "K": None,
    "initial": {"type": None, "v0": None, "m0": None, "C0": None},
    "estimator": {"space_method": None, "n": None, "order": None, "threads": None},
    "moments": {"scheme": None, "ref_nodes": None},
    "simulate": {"n_paths": None, "law": None, "dump_paths": None},
    "kl": {"k": None},
    "sweep": {"values": None, "eps": None, "dt": None, "dt_sim": None, "tv_paths": None, "bins": None},
    "wrong_mean": {"offset": None},
    "rate": {"path": None, "value": None},
}

DEFAULTS = {
    "seed": 0,
    "out": "results",
    "T": 1.0,
    "K": 100,
    "estimator": {"space_method": "monte-carlo", "n": 100_000, "order": 20, "threads": 1},
    "moments": {"scheme": None, "ref_nodes": 1000},
    "simulate": {"n_paths": 1000, "law": "nonlinear", "dump_paths": False},
    "kl": {"k": None},
    "sweep": {"dt": 1e-3, "dt_sim": 1e-3, "tv_paths": 100_000, "bins": 200},
    "rate": {"path": "reference", "value": None},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(data, schema, prefix=""):
    if not isinstance(data, dict):
        raise UsageError(f"config section '{prefix.rstrip('.') or '<root>'}' must be a mapping")
    for k, v in data.items():
        if k not in schema:
            raise UsageError(f"unknown config key '{prefix}{k}'")
        if isinstance(schema[k], dict) and v is not None:
            _check_keys(v, schema[k], f"{prefix}{k}.")


def apply_override(data, assignment):
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {key}: '{p}' is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def _positive(value, name, integer=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value) and value > 0
    if ok and integer:
        ok = float(value).is_integer()
    if not ok:
        kind = "a positive integer" if integer else "a positive number"
        raise UsageError(f"config field '{name}' must be {kind}, got {value!r}")
    return int(value) if integer else float(value)


@dataclass
class RunConfig:
    command: str
    drift: object
    Sigma: np.ndarray
    eps: float
    T: float
    K: int
    initial: object
    seed: int
    out: str
    estimator: dict
    sections: dict = field(default_factory=dict)

    @property
    def grid(self):
        return TimeGrid(self.T, self.K)

    def spec(self, eps=None):
        return SdeSpec(self.drift, self.Sigma, self.eps if eps is None else eps, self.initial)


def load_config(path, overrides=(), command=None):
    """Read, override, validate. Raises :class:`UsageError` naming the bad field."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from None
    _check_keys(raw, SCHEMA)
    for assignment in overrides:
        apply_override(raw, assignment)
    _check_keys(raw, SCHEMA)
    data = _merge(DEFAULTS, raw)
    if command is not None:
        data["command"] = command
    cmd = data.get("command")
    if cmd not in COMMANDS:
        raise UsageError(f"config field 'command' must be one of {COMMANDS}, got {cmd!r}")

    if not isinstance(data.get("drift"), dict) or "name" not in data["drift"]:
        raise UsageError("config field 'drift.name' is required")
    drift = make_drift(data["drift"]["name"], **(data["drift"].get("params") or {}))
    D = drift.dim
    Sigma = np.eye(D) if data.get("Sigma") is None else np.atleast_2d(np.asarray(data["Sigma"], dtype=float))

    eps = data.get("eps")
    if cmd not in ("moments", "sweep-eps", "sweep-dt", "wrong-mean-tv", "rate") or eps is not None:
        if cmd == "simulate" and eps == 0:
            eps = 0.0
        else:
            eps = _positive(eps, "eps")
    T = _positive(data["T"], "T")
    K = _positive(data["K"], "K", integer=True)
    seed = data["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise UsageError(f"config field 'seed' must be a non-negative integer, got {seed!r}")

    init = data.get("initial") or {"type": "dirac", "v0": [0.0] * D}
    kind = init.get("type", "dirac")
    if kind == "dirac":
        initial = Dirac(init.get("v0", [0.0] * D))
    elif kind == "gaussian":
        initial = GaussianInit(init.get("m0", [0.0] * D), init.get("C0", np.eye(D).tolist()))
    else:
        raise UsageError(f"config field 'initial.type' must be 'dirac' or 'gaussian', got {kind!r}")

    est = data["estimator"]
    if est["space_method"] not in ("monte-carlo", "gauss-hermite"):
        raise UsageError(f"config field 'estimator.space_method' is invalid: {est['space_method']!r}")
    est["n"] = _positive(est["n"], "estimator.n", integer=True)
    est["order"] = _positive(est["order"], "estimator.order", integer=True)
    est["threads"] = _positive(est["threads"], "estimator.threads", integer=True)

    cfg = RunConfig(cmd, drift, Sigma, eps, T, K, initial, seed, str(data["out"]), est, data)
    # validates Sigma and the initial law
    SdeSpec(drift, Sigma, 1.0 if eps is None else eps, initial)
    if cmd in ("sweep-eps", "sweep-dt", "wrong-mean-tv"):
        _sweep_config(cfg)
    return cfg


def _sweep_config(cfg):
    sw = cfg.sections["sweep"]
    if "values" not in sw:
        raise UsageError("config field 'sweep.values' is required")
    variable = "dt" if cfg.command == "sweep-dt" else "epsilon"
    fixed_eps = sw.get("eps", cfg.eps)
    if variable == "dt":
        fixed_eps = _positive(fixed_eps, "sweep.eps")
    kw = dict(
        drift=cfg.sections["drift"]["name"],
        drift_params=cfg.sections["drift"].get("params") or {},
        values=tuple(_positive(v, "sweep.values") for v in sw["values"]),
        variable=variable,
        Sigma=cfg.Sigma,
        initial=cfg.initial,
        T=cfg.T,
        eps=fixed_eps,
        dt=_positive(sw["dt"], "sweep.dt"),
        dt_sim=_positive(sw["dt_sim"], "sweep.dt_sim"),
        space_method=cfg.estimator["space_method"],
        n=cfg.estimator["n"],
        order=cfg.estimator["order"],
        seed=cfg.seed,
        tv_paths=int(sw["tv_paths"]),
        bins=_positive(sw["bins"], "sweep.bins", integer=True),
        threads=cfg.estimator["threads"],
        ref_nodes=_positive(cfg.sections["moments"]["ref_nodes"], "moments.ref_nodes", integer=True),
    )
    return ex.SweepConfig(**kw)


def _clean(obj):
    if isinstance(obj, float):
        if obj == INF:
            return "inf"
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _write(out, name, writer):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w", newline="") as fh:
        writer(fh)


def _trajectory(cfg, scheme):
    m0, C0 = cfg.spec(1.0).matched_initial()
    if scheme == "reference":
        return solve_reference(cfg.drift, cfg.T, m0, C0, cfg.Sigma, n_out=cfg.sections["moments"]["ref_nodes"])
    return euler_trajectory(cfg.drift, cfg.grid, m0, C0, cfg.Sigma, scheme)


def _run_simulate(cfg):
    sim = cfg.sections["simulate"]
    n = _positive(sim["n_paths"], "simulate.n_paths", integer=True)
    spec, threads = cfg.spec(), cfg.estimator["threads"]
    if sim["law"] == "nonlinear":
        ens = simulate_nonlinear(spec, cfg.grid, n, seed=cfg.seed, threads=threads)
    elif sim["law"] == "linearized":
        ens = simulate_linearized(_trajectory(cfg, "section4"), spec, cfg.grid, n, seed=cfg.seed, threads=threads)
    else:
        raise UsageError(f"config field 'simulate.law' must be 'nonlinear' or 'linearized', got {sim['law']!r}")
    mean = ens.paths.mean(axis=0)
    var = ens.paths.var(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    rows = [
        {"t": t, **{f"mean_{d + 1}": mean[j, d] for d in range(spec.dim)}, **{f"var_{d + 1}": var[j, d] for d in range(spec.dim)}}
        for j, t in enumerate(ens.times)
    ]
    _write(cfg.out, "ensemble_moments.csv", lambda fh: ex.write_table_csv(rows, fh, list(rows[0])))
    if sim["dump_paths"]:
        _write(cfg.out, "ensemble_paths.csv", lambda fh: write_ensemble_csv(ens, fh))
    return {"law": ens.law, "n_paths": n, "final_mean": mean[-1].tolist(), "final_var": var[-1].tolist()}, True


def _run_moments(cfg):
    scheme = cfg.sections["moments"]["scheme"] or "section4"
    traj = _trajectory(cfg, scheme)
    _write(cfg.out, f"trajectory_{scheme}.csv", lambda fh: write_trajectory_csv(traj, fh))
    return {
        "scheme": scheme,
        "final_mean": traj.means[-1].tolist(),
        "final_cov": traj.covs[-1].tolist(),
        "min_eigenvalue": float(traj.min_eigs.min()),
        "bound": traj.bound,
    }, bool(traj.min_eigs.min() >= -1e-12) or scheme == "section3"


def _kl_summary(cfg, name, est):
    rec = est.to_record()
    _write(cfg.out, f"{name}.json", lambda fh: ex.write_summary_json(_clean(rec), fh))
    ok = est.residual_term >= -3.0 * est.stderr
    return {"kl_total": est.value, "kl_initial": est.initial_term, "kl_residual": est.residual_term,
            "stderr": est.stderr, "method": est.method, "n_samples": est.n_samples}, ok


def _run_kl_continuous(cfg):
    scheme = cfg.sections["moments"]["scheme"] or "reference"
    est = kl_continuous(_trajectory(cfg, scheme), cfg.spec(), **_est_kw(cfg))
    return _kl_summary(cfg, "kl_continuous", est)


def _run_kl_discrete(cfg):
    k = cfg.sections["kl"]["k"]
    est = kl_discrete(_trajectory(cfg, "section4"), cfg.spec(), k=k, **_est_kw(cfg))
    return _kl_summary(cfg, "kl_discrete", est)


def _est_kw(cfg):
    e = cfg.estimator
    return dict(space_method=e["space_method"], n=e["n"], order=e["order"], seed=cfg.seed, threads=e["threads"])


def _write_sweep(cfg, prefix, result):
    for name, rows in result.tables.items():
        _write(cfg.out, f"{prefix}_{name}.csv", lambda fh, rows=rows: ex.write_table_csv(rows, fh))
    summary = _clean(result.summary())
    _write(cfg.out, f"{prefix}_summary.json", lambda fh: ex.write_summary_json(summary, fh))
    return summary, result.passed


def _run_sweep_eps(cfg):
    return _write_sweep(cfg, "sweep_eps", ex.sweep_epsilon(_sweep_config(cfg)))


def _run_sweep_dt(cfg):
    return _write_sweep(cfg, "sweep_dt", ex.sweep_dt(_sweep_config(cfg)))


def _run_wrong_mean(cfg):
    offset = cfg.sections.get("wrong_mean", {}).get("offset", 0.5)
    return _write_sweep(cfg, "wrong_mean_tv", ex.wrong_mean_tv(_sweep_config(cfg), offset))


def _run_rate(cfg):
    r = cfg.sections["rate"]
    m0, _ = cfg.spec(1.0).matched_initial()
    kind = r["path"]
    if kind == "reference":
        traj = _trajectory(cfg, "reference")
        times, path = traj.times, traj.means
    elif kind == "euler":
        traj = _trajectory(cfg, "section4")
        times, path = traj.times, traj.means
    elif kind == "constant":
        value = m0 if r["value"] is None else np.atleast_1d(np.asarray(r["value"], dtype=float))
        times = cfg.grid.nodes
        path = np.tile(value, (times.size, 1))
    else:
        raise UsageError(f"config field 'rate.path' must be reference, euler or constant, got {kind!r}")
    value = rate_functional(cfg.drift, cfg.Sigma, times, path, m0)
    rows = [{"path": kind, "rate": value}]
    _write(cfg.out, "rate.csv", lambda fh: ex.write_table_csv(rows, fh, ["path", "rate"]))
    ok = value <= 1e-4 if kind == "reference" else True
    return {"path": kind, "rate": value}, ok


RUNNERS = {
    "simulate": _run_simulate,
    "moments": _run_moments,
    "kl-continuous": _run_kl_continuous,
    "kl-discrete": _run_kl_discrete,
    "sweep-eps": _run_sweep_eps,
    "sweep-dt": _run_sweep_dt,
    "wrong-mean-tv": _run_wrong_mean,
    "rate": _run_rate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="smallnoise", description=__doc__.strip().splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS, help="overrides the config's command")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry by dot path (repeatable)")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--check", action="store_true", help="exit 4 when an acceptance check fails")
    p.add_argument("--dry-run", action="store_true", help="validate the configuration only")
    p.add_argument("--threads", type=int, help="worker threads for Monte Carlo loops")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={json.dumps(args.out)}")
    if args.threads is not None:
        overrides.append(f"estimator.threads={args.threads}")
    try:
        cfg = load_config(args.config, overrides, args.command)
        if args.dry_run:
            summary, ok = {"dry_run": True, "valid": True}, True
        else:
            # non-finite states are detected and reported by the solvers
            with np.errstate(over="ignore", invalid="ignore"):
                summary, ok = RUNNERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"smallnoise: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ArithmeticError) as exc:
        print(f"smallnoise: numerical failure: {exc}", file=sys.stderr)
        return 3
    summary = {"command": cfg.command, "seed": cfg.seed, **summary}
    if args.check:
        summary["check_passed"] = bool(ok)
    print(json.dumps(_clean(summary), sort_keys=True))
    if args.check and not ok:
        print("smallnoise: acceptance check failed", file=sys.stderr)
        return 4
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
