"""
Scaling studies: KL against noise level and against ODE step size.

Each sweep returns a :class:`SweepResult` holding one table per estimator,
log-log slope fits and pass/fail flags for the acceptance bands below.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .drifts import make_drift
from .errors import UsageError
from .klmetrics import (
    INF,
    GaussianMeasure,
    initial_kl,
    kl_continuous,
    kl_discrete,
    pinsker_holds,
    tv_estimate_1d,
)
from .moments import TimeGrid, euler_trajectory, solve_reference
from .simulate import Dirac, GaussianInit, SdeSpec, simulate_nonlinear

EPS_SLOPE_BAND = (0.85, 1.15)
DT_SLOPE_BAND = (1.7, 2.3)
MIN_R2 = 0.98

COLUMNS = ["sweep_value", "kl_total", "kl_initial", "kl_residual", "stderr", "tv", "tv_err"]


@dataclass
class SweepConfig:
    """Everything needed to reproduce one sweep.

    ``values`` are the swept ε or Δt (positive, descending, at least four).
    ``eps`` is the fixed noise level of a Δt sweep, ``dt`` the Euler step of
    the discrete estimator in an ε sweep, and ``dt_sim`` the Euler-Maruyama
    step used to sample the diffusion for total-variation companions.
    ``tv_paths = 0`` skips the TV companions.
    """

    drift: str
    values: tuple
    variable: str = "epsilon"
    drift_params: dict = field(default_factory=dict)
    Sigma: object = None
    initial: object = None
    T: float = 1.0
    eps: Optional[float] = None
    dt: float = 1e-3
    dt_sim: float = 1e-3
    space_method: str = "monte-carlo"
    n: int = 100_000
    order: int = 20
    seed: int = 0
    tv_paths: int = 100_000
    bins: int = 200
    threads: int = 1
    ref_nodes: int = 1000
    out: Optional[str] = None

    def __post_init__(self):
        if self.variable not in ("epsilon", "dt"):
            raise UsageError(f"sweep variable must be 'epsilon' or 'dt', got {self.variable!r}")
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 4:
            raise UsageError("a sweep needs at least four values")
        if any(not (v > 0 and math.isfinite(v)) for v in vals):
            raise UsageError(f"sweep values must be positive, got {vals}")
        if any(a <= b for a, b in zip(vals, vals[1:])):
            raise UsageError(f"sweep values must be strictly descending, got {vals}")
        self.values = vals
        self.model = make_drift(self.drift, **self.drift_params)
        D = self.model.dim
        self.Sigma = np.eye(D) if self.Sigma is None else np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if self.initial is None:
            self.initial = Dirac(np.zeros(D))
        if self.variable == "dt" and not (self.eps and self.eps > 0):
            raise UsageError("a dt sweep needs a positive fixed eps")
        for name in ("T", "dt", "dt_sim"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        # validates Sigma and the initial law
        self.spec(1.0)

    def spec(self, eps):
        return SdeSpec(self.model, self.Sigma, eps, self.initial)

    def matched_moments(self):
        return self.spec(1.0).matched_initial()


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    residuals: tuple
    degenerate: bool = False

    @classmethod
    def exact_zero(cls, n):
        """All divergences are exactly zero: no slope to fit."""
        return cls(math.nan, -math.inf, math.nan, (0.0,) * n, True)

    def to_record(self):
        rec = asdict(self)
        for key in ("slope", "intercept", "r2"):
            if not math.isfinite(rec[key]):
                rec[key] = None
        rec["residuals"] = list(self.residuals)
        return rec


def fit_loglog(xs, ys):
    """Least-squares line through ``(log x, log y)``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise UsageError("fit_loglog needs two equal-length sequences of at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0) or not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UsageError("fit_loglog needs finite positive data")
    lx, ly = np.log(x), np.log(y)
    xm, ym = lx.mean(), ly.mean()
    sxx = np.sum((lx - xm) ** 2)
    if sxx == 0:
        raise UsageError("fit_loglog needs at least two distinct x values")
    slope = float(np.sum((lx - xm) * (ly - ym)) / sxx)
    intercept = float(ym - slope * xm)
    res = ly - (intercept + slope * lx)
    sst = np.sum((ly - ym) ** 2)
    r2 = 1.0 if sst == 0 else float(min(max(1.0 - np.sum(res**2) / sst, 0.0), 1.0))
    return SlopeFit(slope, intercept, r2, tuple(float(r) for r in res))


@dataclass
class SweepResult:
    variable: str
    tables: dict
    fits: dict
    checks: dict
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.checks.values())

    def summary(self):
        return {
            "variable": self.variable,
            "fits": {k: v.to_record() for k, v in self.fits.items()},
            "checks": dict(self.checks),
            "passed": self.passed,
            **self.extra,
        }


def _row(value, kl, tv):
    return {
        "sweep_value": value,
        "kl_total": kl.value,
        "kl_initial": kl.initial_term,
        "kl_residual": kl.residual_term,
        "stderr": kl.stderr,
        "tv": None if tv is None else tv.value,
        "tv_err": None if tv is None else tv.error,
    }


def _em_final(cfg, eps, dt):
    spec = cfg.spec(eps)
    grid = TimeGrid.from_step(cfg.T, dt)
    ens = simulate_nonlinear(spec, grid, cfg.tv_paths, seed=cfg.seed, threads=cfg.threads, keep="last")
    return ens.final()[:, 0]


def _companion_tv(cfg, samples, mean, cov_eps):
    if samples is None:
        return None
    return tv_estimate_1d(GaussianMeasure(mean, cov_eps), samples, bins=cfg.bins, seed=cfg.seed)


def _fit(values, kls):
    ys = [k.value - k.initial_term for k in kls]
    if all(y == 0 for y in ys):
        return SlopeFit.exact_zero(len(ys))
    return fit_loglog(values, ys)


def _band(fit, band, min_r2=None):
    if fit.degenerate:
        return True
    ok = band[0] <= fit.slope <= band[1]
    if min_r2 is not None:
        ok = ok and fit.r2 >= min_r2
    return ok


def _estimator_kwargs(cfg):
    return dict(space_method=cfg.space_method, n=cfg.n, order=cfg.order, seed=cfg.seed, threads=cfg.threads)


def sweep_epsilon(cfg):
    """KL against ε for the continuous (reference ODE) and discrete (factored Euler) approximations.

    The slope is fitted to the residual term, which equals the total when the
    initial laws match (required here).
    """
    if cfg.variable != "epsilon":
        raise UsageError("sweep_epsilon needs variable = 'epsilon'")
    m0, C0 = cfg.matched_moments()
    if initial_kl(cfg.spec(1.0), m0, C0) != 0.0:
        raise UsageError("sweep_epsilon needs a matched initialization (initial KL = 0)")
    ref = solve_reference(cfg.model, cfg.T, m0, C0, cfg.Sigma, n_out=cfg.ref_nodes)
    grid = TimeGrid.from_step(cfg.T, cfg.dt)
    s4 = euler_trajectory(cfg.model, grid, m0, C0, cfg.Sigma, "section4")
    kw = _estimator_kwargs(cfg)
    with_tv = cfg.tv_paths > 0 and cfg.model.dim == 1
    cont, disc, cont_kl, disc_kl = [], [], [], []
    for eps in cfg.values:
        spec = cfg.spec(eps)
        try:
            kc = kl_continuous(ref, spec, kl0=0.0, **kw)
            kd = kl_discrete(s4, spec, kl0=0.0, **kw)
        except (UsageError, ArithmeticError) as exc:
            raise type(exc)(f"eps={eps}: {exc}") from exc
        tv_c = tv_d = None
        if with_tv:
            x_sim = _em_final(cfg, eps, cfg.dt_sim)
            x_dt = x_sim if cfg.dt_sim == cfg.dt else _em_final(cfg, eps, cfg.dt)
            tv_c = _companion_tv(cfg, x_sim, ref.means[-1], eps * ref.covs[-1])
            tv_d = _companion_tv(cfg, x_dt, s4.means[-1], eps * s4.covs[-1])
        cont.append(_row(eps, kc, tv_c))
        disc.append(_row(eps, kd, tv_d))
        cont_kl.append((kc, tv_c))
        disc_kl.append((kd, tv_d))
    fits = {
        "continuous": _fit(cfg.values, [k for k, _ in cont_kl]),
        "discrete": _fit(cfg.values, [k for k, _ in disc_kl]),
    }
    checks = {
        "continuous_slope": _band(fits["continuous"], EPS_SLOPE_BAND, MIN_R2),
        "discrete_slope": _band(fits["discrete"], EPS_SLOPE_BAND, MIN_R2),
        "pinsker": all(pinsker_holds(k, t) for k, t in cont_kl + disc_kl if t is not None),
    }
    return SweepResult("epsilon", {"continuous": cont, "discrete": disc}, fits, checks)


def sweep_dt(cfg):
    """KL of the section3 interpolated approximation against the ODE step Δt at fixed ε.

    Reports the excess ``KL(Δt) - KL_ref`` over the reference-trajectory value
    and fits its slope against Δt.
    """
    if cfg.variable != "dt":
        raise UsageError("sweep_dt needs variable = 'dt'")
    grids = [TimeGrid.from_step(cfg.T, dt) for dt in cfg.values]
    m0, C0 = cfg.matched_moments()
    spec = cfg.spec(cfg.eps)
    kw = _estimator_kwargs(cfg)
    ref = solve_reference(cfg.model, cfg.T, m0, C0, cfg.Sigma, n_out=cfg.ref_nodes)
    k_ref = kl_continuous(ref, spec, **kw)
    x_sim = _em_final(cfg, cfg.eps, cfg.dt_sim) if cfg.tv_paths > 0 and cfg.model.dim == 1 else None
    rows, pairs, excess = [], [], []
    for dt, grid in zip(cfg.values, grids):
        traj = euler_trajectory(cfg.model, grid, m0, C0, cfg.Sigma, "section3")
        try:
            k = kl_continuous(traj, spec, **kw)
        except (UsageError, ArithmeticError) as exc:
            raise type(exc)(f"dt={dt}: {exc}") from exc
        tv = _companion_tv(cfg, x_sim, traj.means[-1], cfg.eps * traj.covs[-1])
        row = _row(dt, k, tv)
        row["kl_ref"] = k_ref.value
        row["kl_excess"] = k.value - k_ref.value
        rows.append(row)
        pairs.append((k, tv))
        excess.append(k.value - k_ref.value)
    if all(e == 0 for e in excess):
        fit = SlopeFit.exact_zero(len(excess))
    elif any(e <= 0 for e in excess):
        # excess below the reference value: Δt is too small to resolve at this ε
        fit = SlopeFit(math.nan, math.nan, math.nan, (), False)
    else:
        fit = fit_loglog(cfg.values, excess)
    checks = {
        "excess_slope": _band(fit, DT_SLOPE_BAND),
        "pinsker": all(pinsker_holds(k, t) for k, t in pairs if t is not None),
    }
    return SweepResult("dt", {"continuous": rows}, {"excess": fit}, checks, {"kl_ref": k_ref.to_record()})


def dt_eps_ratio(cfg, dt, eps_values):
    """``KL · ε / Δt²`` of the section3 approximation at one Δt for several ε.

    With Δt fixed the mean error never vanishes, so KL grows like Δt²/ε as
    ε → 0 and this ratio levels off.
    """
    m0, C0 = cfg.matched_moments()
    traj = euler_trajectory(cfg.model, TimeGrid.from_step(cfg.T, dt), m0, C0, cfg.Sigma, "section3")
    kw = _estimator_kwargs(cfg)
    return [(eps, kl_continuous(traj, cfg.spec(eps), **kw).value * eps / dt**2) for eps in eps_values]


def wrong_mean_tv(cfg, offset):
    """Marginal TV at time T between a mean-shifted Gaussian and the diffusion.

    For each ε compares ``N(m(T) + offset, ε C(T))`` with Euler-Maruyama
    samples of the diffusion at ``cfg.dt_sim``. With a nonzero offset the
    distance should rise toward 1 as ε decreases.
    """
    if cfg.model.dim != 1:
        raise UsageError("wrong_mean_tv is one-dimensional")
    offset = np.atleast_1d(np.asarray(offset, dtype=float))
    if cfg.tv_paths < 10_000:
        raise UsageError("wrong_mean_tv needs tv_paths >= 10^4")
    m0, C0 = cfg.matched_moments()
    ref = solve_reference(cfg.model, cfg.T, m0, C0, cfg.Sigma, n_out=cfg.ref_nodes)
    rows, tvs = [], []
    for eps in cfg.values:
        x = _em_final(cfg, eps, cfg.dt_sim)
        tv = tv_estimate_1d(
            GaussianMeasure(ref.means[-1] + offset, eps * ref.covs[-1]), x, bins=cfg.bins, seed=cfg.seed
        )
        rows.append({"sweep_value": eps, "tv": tv.value, "tv_err": tv.error})
        tvs.append(tv)
    if np.any(offset != 0):
        checks = {
            "monotone": all(b.value >= a.value - 3.0 * (a.error + b.error) for a, b in zip(tvs, tvs[1:])),
            "reaches_one": tvs[-1].value >= 0.99,
        }
    else:
        checks = {"control": tvs[-1].value <= 0.1}
    return SweepResult("epsilon", {"tv": rows}, {}, checks, {"offset": offset.tolist()})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "inf" if v == INF else repr(float(v))
    return str(v)


def write_table_csv(rows, fh, columns=None):
    """Rows of dicts to CSV with ``repr`` floats (byte-stable across runs)."""
    if columns is None:
        columns = [c for c in COLUMNS if c in rows[0]] + [c for c in rows[0] if c not in COLUMNS]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])


def write_summary_json(summary, fh):
    json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=False)
    fh.write("\n")
