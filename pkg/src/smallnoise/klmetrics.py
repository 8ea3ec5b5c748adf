"""
Divergences between the Gaussian approximation and the diffusion law.

Both path-space formulas reduce the divergence to an initial term plus the
expected squared linearization residual ``|f(u) - g(u)|_Σ^2`` under the
Gaussian marginals:

continuous time::

    KL = KL_0 + 1/(2ε) ∫_0^T E_{N(m(t), ε C(t))} |f - g_t|_Σ^2 dt

discrete time (Euler-Maruyama chains)::

    KL_{0:k} = KL_0 + Δt/(2ε) Σ_{j<k} E_{N(m_j, ε C_j)} |f - g_j|_Σ^2

Space expectations use Monte Carlo with one set of standard normals shared
by every time node (so the reported standard error accounts for the
correlation between nodes) or tensorized Gauss-Hermite quadrature for D <= 3.

Infinite divergences are reported as :data:`INF`. Estimators never return
``inf`` for any other reason: overflow raises :class:`NumericalError`.
"""
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from . import rng
from .errors import NumericalError, UsageError
from .moments import check_covariance
from .simulate import Dirac, gaussian_factor

INF = math.inf

SPACE_METHODS = ("monte-carlo", "gauss-hermite")


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", check_covariance(self.cov, m.size, "covariance"))

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True)
class KlEstimate:
    """A divergence split into initial and residual (integral or sum) terms."""

    value: float
    initial_term: float
    residual_term: float
    stderr: float
    n_samples: int
    method: str
    seed: Optional[int] = None

    def to_record(self):
        return asdict(self)


@dataclass(frozen=True)
class TvEstimate:
    value: float
    bins: int
    n_samples: int
    error: float
    tail_mass: float
    seed: Optional[int] = None

    def to_record(self):
        return {
            "value": self.value,
            "initial_term": None,
            "residual_term": None,
            "stderr": self.error,
            "method": "histogram",
            "n_samples": self.n_samples,
            "seed": self.seed,
            "bins": self.bins,
        }


# -- closed-form Gaussian divergence -------------------------------------------------


def _support(C, tol):
    lam, Q = np.linalg.eigh(C)
    keep = lam > tol * max(1.0, abs(lam[-1]) if lam.size else 1.0)
    return lam[keep], Q[:, keep]


def gaussian_kl(nu, mu):
    """``KL(N(m, C) || N(m̄, C̄))`` in nats.

    ``½ (tr(C̄⁻¹C) - r + log det C̄ - log det C + |m̄ - m|²_C̄)``, evaluated on the
    common support of dimension ``r``. Returns :data:`INF` when ``nu`` is not
    absolutely continuous with respect to ``mu`` (different supports), which
    covers Dirac measures at different atoms.
    """
    if nu.dim != mu.dim:
        raise UsageError(f"dimension mismatch: {nu.dim} vs {mu.dim}")
    if np.array_equal(nu.mean, mu.mean) and np.array_equal(nu.cov, mu.cov):
        return 0.0
    tol = 1e-12
    lam_mu, U = _support(mu.cov, tol)
    lam_nu, V = _support(nu.cov, tol)
    if lam_mu.size != lam_nu.size:
        return INF
    r = lam_mu.size
    dm = nu.mean - mu.mean
    # ν's support must coincide with μ's: same range and mean offset inside it
    if r:
        if np.linalg.norm(V - U @ (U.T @ V)) > 1e-8:
            return INF
    resid = dm - U @ (U.T @ dm)
    if np.linalg.norm(resid) > 1e-12 * (1.0 + np.linalg.norm(nu.mean) + np.linalg.norm(mu.mean)):
        return INF
    if r == 0:
        return 0.0
    Cn = U.T @ nu.cov @ U
    Cm = np.diag(lam_mu)
    d = U.T @ dm
    Ln = np.linalg.cholesky(0.5 * (Cn + Cn.T))
    trace = float(np.sum(np.diag(Cn) / lam_mu))
    maha = float(np.sum(d**2 / lam_mu))
    logdet_mu = float(np.sum(np.log(lam_mu)))
    logdet_nu = 2.0 * float(np.sum(np.log(np.diag(Ln))))
    kl = 0.5 * (trace - r + logdet_mu - logdet_nu + maha)
    if not math.isfinite(kl):
        raise NumericalError("non-finite Gaussian KL")
    return max(kl, 0.0)


def initial_kl(spec, m0, C0):
    """``KL(N(m0, ε C0) || μ0^ε)`` for the approximation started at ``(m0, C0)``.

    Dirac initial laws are Gaussians with zero covariance, so matching atoms
    give 0 and different atoms give :data:`INF`.
    """
    if isinstance(spec.initial, Dirac):
        mu = GaussianMeasure(spec.initial.v0, np.zeros((spec.dim, spec.dim)))
    else:
        mu = GaussianMeasure(spec.initial.m0, spec.eps * spec.initial.C0)
    return gaussian_kl(GaussianMeasure(m0, spec.eps * np.asarray(C0, dtype=float)), mu)


# -- linearization residual -----------------------------------------------------------


def _inv_chol(Sigma):
    L = np.linalg.cholesky(Sigma)
    return solve_triangular(L, np.eye(L.shape[0]), lower=True)


def _residual_sq(model, Linv, u, a, J, c):
    """``|f(u) - a - J (u - c)|_Σ²`` batched over leading axes of ``u``.

    ``u`` has shape ``(Q, n, D)``; ``a``, ``c`` are ``(Q, D)`` and ``J`` is
    ``(Q, D, D)``.
    """
    r = model.f(u) - a[:, None, :] - np.einsum("qij,qnj->qni", J, u - c[:, None, :])
    w = r @ Linv.T
    return np.einsum("qni,qni->qn", w, w)


def linearization_residual(model, Sigma, u, m):
    """``|f(u) - f(m) - Df(m)(u - m)|²_Σ`` for single vectors ``u`` and ``m``."""
    D = model.dim
    u = np.atleast_1d(np.asarray(u, dtype=float))
    m = np.atleast_1d(np.asarray(m, dtype=float))
    Sigma = check_covariance(Sigma, D, "Sigma", definite=True)
    r = model.f(u) - model.f(m) - model.jac(m) @ (u - m)
    return float(r @ np.linalg.solve(Sigma, r))


def hermite_rule(order, dim):
    """Tensorized Gauss-Hermite nodes/weights for ``E f(Z)``, ``Z ~ N(0, I_dim)``."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / math.sqrt(2.0 * math.pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


def _integrate(model, Sigma, mean, F, a, J, c, weights, method, n, order, seed, threads, node_chunk=64):
    """Weighted sum over points ``q`` of ``E|f - g_q|²_Σ`` under ``N(mean_q, F_q F_qᵀ)``.

    Returns ``(value, stderr, n_samples)``.
    """
    Linv = _inv_chol(Sigma)
    D = model.dim
    Q = mean.shape[0]

    def per_sample(z):
        total = np.zeros(z.shape[0])
        for lo in range(0, Q, node_chunk):
            hi = min(lo + node_chunk, Q)
            u = mean[lo:hi, None, :] + np.einsum("qij,nj->qni", F[lo:hi], z)
            r = _residual_sq(model, Linv, u, a[lo:hi], J[lo:hi], c[lo:hi])
            total += weights[lo:hi] @ r
        return total

    if method == "gauss-hermite":
        if D > 3:
            raise UsageError(f"Gauss-Hermite quadrature supports D <= 3, got D={D}")
        nodes, w = hermite_rule(order, D)
        value = float(w @ per_sample(nodes))
        stderr, used = 0.0, nodes.shape[0]
    elif method == "monte-carlo":
        if n < 2:
            raise UsageError("Monte Carlo needs at least 2 samples")
        parts = rng.block_map(
            lambda b, lo, hi: per_sample(rng.generator(seed, rng.SPACE, b).standard_normal((hi - lo, D))),
            n,
            threads,
        )
        vals = np.concatenate(parts)
        value = float(np.mean(vals))
        stderr, used = float(np.std(vals, ddof=1) / math.sqrt(n)), n
    else:
        raise UsageError(f"unknown space method {method!r}; choose from {SPACE_METHODS}")
    if not (math.isfinite(value) and math.isfinite(stderr)):
        raise NumericalError("non-finite residual expectation (samples escaped to overflow)")
    return value, stderr, used


def expected_residual(model, Sigma, m, C_eps, method="monte-carlo", n=100_000, order=20, seed=0, threads=1):
    """``E_{N(m, C_eps)} |f(u) - f(m) - Df(m)(u - m)|²_Σ`` as ``(value, stderr)``.

    Linear drifts short-circuit to ``(0.0, 0.0)``.
    """
    D = model.dim
    m = np.atleast_1d(np.asarray(m, dtype=float))
    Sigma = check_covariance(Sigma, D, "Sigma", definite=True)
    C_eps = check_covariance(C_eps, D, "C_eps")
    if method == "gauss-hermite" and D > 3:
        raise UsageError(f"Gauss-Hermite quadrature supports D <= 3, got D={D}")
    if model.is_linear:
        return 0.0, 0.0
    F = gaussian_factor(C_eps)[None]
    value, stderr, _ = _integrate(
        model, Sigma, m[None], F, model.f(m)[None], model.jac(m)[None], m[None],
        np.ones(1), method, n, order, seed, threads,
    )
    return value, stderr


# -- path-space divergences ----------------------------------------------------------


def _check_pair(traj, spec):
    if spec.eps <= 0:
        raise UsageError(f"eps must be positive for KL estimates, got {spec.eps}")
    if traj.model is not spec.drift:
        raise UsageError("trajectory and spec use different drift models")
    if traj.sigma.shape != spec.Sigma.shape or not np.allclose(traj.sigma, spec.Sigma, rtol=1e-12, atol=0):
        raise UsageError("trajectory and spec use different diffusion matrices")


def _finish(kl0, integral, stderr, used, method, seed, eps):
    scale = 0.5 / eps
    residual = scale * integral
    return KlEstimate(
        value=kl0 + residual,
        initial_term=kl0,
        residual_term=residual,
        stderr=scale * stderr,
        n_samples=used,
        method=method,
        seed=seed if method == "monte-carlo" else None,
    )


def _section3_points(traj, rule, substeps):
    """Quadrature points inside each interval of a section3 interpolant.

    The approximating drift jumps at grid nodes, so points are placed per
    interval, using the left-limit formula at the right endpoint.
    """
    model, grid = traj.model, traj.grid
    h = grid.dt
    if rule == "gauss-legendre":
        x, w = np.polynomial.legendre.leggauss(substeps)
        s = 0.5 * h * (x + 1.0)
        ws = 0.5 * h * w
    elif rule == "trapezoid":
        s = np.linspace(0.0, h, substeps + 1)
        ws = np.full(substeps + 1, h / substeps)
        ws[[0, -1]] *= 0.5
    else:
        raise UsageError(f"unknown time rule {rule!r}")
    mk, Ck = traj.means[:-1], traj.covs[:-1]
    fk, Jk = model.f(mk), model.jac(mk)
    X = Jk @ Ck
    dC = X + np.swapaxes(X, -1, -2) + traj.sigma
    mean = (mk[:, None, :] + s[None, :, None] * fk[:, None, :]).reshape(-1, traj.dim)
    cov = (Ck[:, None] + s[None, :, None, None] * dC[:, None]).reshape(-1, traj.dim, traj.dim)
    P = s.size
    a = np.repeat(fk, P, axis=0)
    J = np.repeat(Jk, P, axis=0)
    weights = np.tile(ws, grid.K)
    return mean, cov, a, J, mean, weights


def kl_continuous(
    traj, spec, kl0=None, time_rule="auto", space_method="monte-carlo",
    n=100_000, order=20, seed=0, threads=1, substeps=4,
):
    """Path-space KL of the Gaussian process approximation to the diffusion.

    ``traj`` is either a ``reference`` trajectory (drift linearized about the
    exact mean; composite trapezoid on its grid) or a ``section3`` Euler
    trajectory, whose approximating drift is
    ``g_t(u) = f(m_k) + Df(m_k)(u - m^Δt(t))`` on ``(t_k, t_{k+1})``.
    ``kl0`` defaults to the initial divergence implied by ``spec``.
    """
    _check_pair(traj, spec)
    eps = spec.eps
    if kl0 is None:
        kl0 = initial_kl(spec, traj.means[0], traj.covs[0])
    if traj.scheme == "reference":
        if time_rule not in ("auto", "trapezoid"):
            raise UsageError("reference trajectories use the trapezoid rule on their grid")
        mean, cov = traj.means, traj.covs
        a, J, c = traj.model.f(mean), traj.model.jac(mean), mean
        w = np.full(traj.grid.K + 1, traj.grid.dt)
        w[[0, -1]] *= 0.5
        if traj.model.is_linear:
            return _finish(kl0, 0.0, 0.0, 0, "exact-zero", None, eps)
    elif traj.scheme == "section3":
        rule = "gauss-legendre" if time_rule == "auto" else time_rule
        mean, cov, a, J, c, w = _section3_points(traj, rule, substeps)
    else:
        raise UsageError(f"kl_continuous needs a reference or section3 trajectory, got {traj.scheme!r}")
    F = gaussian_factor(eps * cov)
    integral, stderr, used = _integrate(
        traj.model, spec.Sigma, mean, F, a, J, c, w, space_method, n, order, seed, threads
    )
    return _finish(kl0, integral, stderr, used, space_method, seed, eps)


def kl_discrete(traj, spec, kl0=None, k=None, space_method="monte-carlo", n=100_000, order=20, seed=0, threads=1):
    """KL between the linearized and nonlinear Euler-Maruyama chains over nodes ``0..k``.

    ``traj`` must come from the factored (``section4``) recursion, whose
    covariances are the exact marginals of the linearized chain.
    """
    _check_pair(traj, spec)
    if traj.scheme != "section4":
        raise UsageError(f"kl_discrete needs a section4 trajectory, got {traj.scheme!r}")
    K = traj.grid.K
    k = K if k is None else int(k)
    if not 0 <= k <= K:
        raise UsageError(f"k must lie in [0, {K}], got {k}")
    eps = spec.eps
    if kl0 is None:
        kl0 = initial_kl(spec, traj.means[0], traj.covs[0])
    if traj.model.is_linear:
        return _finish(kl0, 0.0, 0.0, 0, "exact-zero", None, eps)
    if k == 0:
        return _finish(kl0, 0.0, 0.0, 0, space_method, seed, eps)
    mean, cov = traj.means[:k], traj.covs[:k]
    a, J = traj.model.f(mean), traj.model.jac(mean)
    F = gaussian_factor(eps * cov)
    w = np.full(k, traj.grid.dt)
    integral, stderr, used = _integrate(
        traj.model, spec.Sigma, mean, F, a, J, mean, w, space_method, n, order, seed, threads
    )
    return _finish(kl0, integral, stderr, used, space_method, seed, eps)


def kl_bruteforce_joint(spec, traj, k, N, seed=0, threads=1):
    """Monte Carlo ``E_ν log(dν_{0:k}/dμ_{0:k})`` from explicit joint densities.

    Samples the linearized chain and sums Gaussian transition log-densities of
    both chains (``N(x + g_j(x)Δt, εΣΔt)`` and ``N(x + f(x)Δt, εΣΔt)``) plus the
    initial log-density ratio. Independent of the residual machinery; meant
    for small problems (``k <= 25``, ``D <= 2``). Returns ``(value, stderr)``.
    """
    _check_pair(traj, spec)
    if traj.scheme != "section4":
        raise UsageError("the joint-density oracle needs a section4 trajectory")
    D = spec.dim
    if D > 2 or not 0 <= k <= min(25, traj.grid.K):
        raise UsageError(f"oracle limited to D <= 2 and k <= 25 (got D={D}, k={k})")
    eps, dt = spec.eps, traj.grid.dt
    m0, C0 = traj.means[0], traj.covs[0]
    nu0_singular = np.linalg.eigvalsh(C0)[0] <= 0
    if isinstance(spec.initial, Dirac):
        if not (nu0_singular and np.allclose(C0, 0) and np.array_equal(m0, spec.initial.v0)):
            return INF, 0.0
        init_logratio = None
    else:
        if nu0_singular:
            return INF, 0.0
        nu0 = stats.multivariate_normal(m0, eps * C0)
        mu0 = stats.multivariate_normal(spec.initial.m0, eps * spec.initial.C0)
        init_logratio = lambda x: nu0.logpdf(x) - mu0.logpdf(x)  # noqa: E731
    kernel = stats.multivariate_normal(np.zeros(D), eps * spec.Sigma * dt)
    L = np.linalg.cholesky(spec.Sigma)
    F0 = gaussian_factor(eps * C0)
    f = spec.drift.f
    g_const = f(traj.means)
    g_jac = spec.drift.jac(traj.means)

    def logpdf(x):
        return np.atleast_1d(kernel.logpdf(x)).reshape(x.shape[0])

    def block(b, lo, hi):
        n = hi - lo
        z0 = rng.generator(seed, rng.INITIAL, b).standard_normal((n, D))
        x = m0 + z0 @ F0.T
        out = np.zeros(n) if init_logratio is None else np.atleast_1d(init_logratio(x)).reshape(n)
        gen = rng.generator(seed, rng.NOISE, b)
        for j in range(k):
            mean_nu = x + (g_const[j] + (x - traj.means[j]) @ g_jac[j].T) * dt
            mean_mu = x + f(x) * dt
            x_next = mean_nu + math.sqrt(eps * dt) * (gen.standard_normal((n, D)) @ L.T)
            out += logpdf(x_next - mean_nu) - logpdf(x_next - mean_mu)
            x = x_next
        return out

    vals = np.concatenate(rng.block_map(block, N, threads))
    if not np.all(np.isfinite(vals)):
        raise NumericalError("non-finite log-likelihood ratio in joint-density oracle")
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(N)) if N > 1 else 0.0


# -- total variation ------------------------------------------------------------------


def _histogram_tv(samples, edges, q, q_left, q_right):
    n = samples.size
    counts, _ = np.histogram(samples, bins=edges)
    p = counts / n
    p_left = np.count_nonzero(samples < edges[0]) / n
    p_right = 1.0 - p.sum() - p_left
    return 0.5 * (np.abs(p - q).sum() + abs(p_left - q_left) + abs(p_right - q_right))


def tv_estimate_1d(gauss, samples, bins=200, width=8.0, seed=None):
    """Histogram total variation between a 1D Gaussian and empirical samples.

    Bins cover ``mean ± width·σ``; the two outer half-lines are extra cells.
    ``error`` is the discrepancy between the estimates from the two halves of
    the sample plus the Gaussian mass outside the binned range.
    """
    if gauss.dim != 1:
        raise UsageError("tv_estimate_1d handles one-dimensional measures only")
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size < 10_000:
        raise UsageError(f"need at least 10^4 samples, got {x.size}")
    var = float(gauss.cov[0, 0])
    if var <= 0:
        raise UsageError("Gaussian variance must be positive")
    m, sd = float(gauss.mean[0]), math.sqrt(var)
    edges = np.linspace(m - width * sd, m + width * sd, bins + 1)
    cdf = stats.norm.cdf(edges, loc=m, scale=sd)
    q = np.diff(cdf)
    q_left = float(stats.norm.cdf(edges[0], loc=m, scale=sd))
    q_right = float(stats.norm.sf(edges[-1], loc=m, scale=sd))
    value = _histogram_tv(x, edges, q, q_left, q_right)
    half = x.size // 2
    tv_a = _histogram_tv(x[:half], edges, q, q_left, q_right)
    tv_b = _histogram_tv(x[half:], edges, q, q_left, q_right)
    tail = q_left + q_right
    return TvEstimate(
        value=float(min(max(value, 0.0), 1.0)),
        bins=bins,
        n_samples=x.size,
        error=float(abs(tv_a - tv_b) + tail),
        tail_mass=float(tail),
        seed=seed,
    )


def pinsker_holds(kl, tv, k=3.0):
    """``TV <= sqrt(KL) + k·(combined error)``.

    The KL standard error is carried through the square root by the delta
    method, capped at ``sqrt(stderr)`` when KL is near zero.
    """
    if kl.value == INF:
        return True
    root = math.sqrt(max(kl.value, 0.0))
    kl_err = min(kl.stderr / (2.0 * root), math.sqrt(kl.stderr)) if root > 0 else math.sqrt(kl.stderr)
    return tv.value <= root + k * (tv.error + kl_err)


# -- large-deviation action -----------------------------------------------------------


def rate_functional(model, Sigma, times, path, v0):
    """``½ ∫ |φ'(t) - f(φ(t))|²_Σ dt`` for a piecewise-linear path.

    ``path[j]`` is φ at ``times[j]``. The integral uses the midpoint of each
    segment. Paths not starting at ``v0`` have infinite action.
    """
    D = model.dim
    t = np.asarray(times, dtype=float)
    phi = np.asarray(path, dtype=float).reshape(t.size, D)
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    Sigma = check_covariance(Sigma, D, "Sigma", definite=True)
    if t.size < 2 or np.any(np.diff(t) <= 0):
        raise UsageError("path times must be strictly increasing with at least two nodes")
    if not np.allclose(phi[0], v0, rtol=0, atol=1e-12):
        return INF
    h = np.diff(t)
    slope = np.diff(phi, axis=0) / h[:, None]
    mid = 0.5 * (phi[1:] + phi[:-1])
    r = slope - model.f(mid)
    Linv = _inv_chol(Sigma)
    w = r @ Linv.T
    value = 0.5 * float(np.sum(h * np.einsum("ki,ki->k", w, w)))
    if not math.isfinite(value):
        raise NumericalError("non-finite action")
    return value
