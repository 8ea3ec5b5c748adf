"""
Mean and covariance ODEs for the Gaussian approximation.

The mean follows ``dm/dt = f(m)`` and the unit-scale covariance follows
``dC/dt = Df(m) C + C Df(m)^T + Σ``; the approximation at noise level ε has
marginals ``N(m, ε C)``. Three discretizations are provided:

* ``section3``: forward Euler on both equations, with the piecewise-linear
  interpolants used to define a continuous-time approximating process.
* ``section4``: forward Euler on the mean and the factored covariance update
  ``(I + Df Δt) C (I + Df Δt)^T + Σ Δt``, which is the exact marginal
  covariance of the linearized Euler-Maruyama chain.
* ``reference``: classical RK4 on the coupled system with a tiny step, used
  as the Δt → 0 oracle.
"""
import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, UsageError

SCHEMES = ("section3", "section4", "reference")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k Δt``, ``k = 0..K``, with ``Δt = T / K``."""

    T: float
    K: int

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise UsageError(f"horizon T must be positive, got {self.T}")
        if int(self.K) != self.K or self.K < 1:
            raise UsageError(f"step count K must be a positive integer, got {self.K}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "K", int(self.K))

    @classmethod
    def from_step(cls, T, dt):
        """Grid with step ``dt``; ``T / dt`` must be an integer."""
        if dt <= 0:
            raise UsageError(f"step must be positive, got {dt}")
        K = round(T / dt)
        if K < 1 or not math.isclose(K * dt, T, rel_tol=1e-9):
            raise UsageError(f"T/dt = {T}/{dt} is not an integer")
        return cls(T, K)

    @property
    def dt(self):
        return self.T / self.K

    @property
    def nodes(self):
        return np.arange(self.K + 1) * self.dt


@dataclass(frozen=True, eq=False)
class MomentTrajectory:
    """Node values ``(m_k, C_k)`` of a Gaussian approximation on a grid.

    ``covs`` are unit-scale: the approximation at noise level ε uses ``ε C_k``.
    ``min_eigs`` holds the smallest covariance eigenvalue per node and
    ``bound`` the largest of ``|m_k|`` and ``|C_k|`` (spectral norm).
    """

    grid: TimeGrid
    means: np.ndarray
    covs: np.ndarray
    scheme: str
    model: object
    sigma: np.ndarray
    min_eigs: np.ndarray
    bound: float

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def times(self):
        return self.grid.nodes


def _sym_tol(C):
    return 1e-12 * (1.0 + np.max(np.abs(C)))


def check_covariance(C, dim, name, definite=False):
    """Validate a symmetric PSD (or PD, with ``definite``) matrix."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape != (dim, dim):
        raise UsageError(f"{name} must have shape ({dim}, {dim}), got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise UsageError(f"{name} has non-finite entries")
    if np.max(np.abs(C - C.T)) > _sym_tol(C):
        raise UsageError(f"{name} is not symmetric")
    lam = np.linalg.eigvalsh(C)
    if definite and lam[0] <= 0:
        raise UsageError(f"{name} must be positive definite (min eigenvalue {lam[0]:.3g})")
    if lam[0] < -1e-12 * (1.0 + abs(lam[-1])):
        raise UsageError(f"{name} is indefinite (min eigenvalue {lam[0]:.3g})")
    return 0.5 * (C + C.T)


def _check_state(m0, dim):
    m0 = np.atleast_1d(np.asarray(m0, dtype=float))
    if m0.shape != (dim,):
        raise UsageError(f"initial mean must have length {dim}, got shape {m0.shape}")
    if not np.all(np.isfinite(m0)):
        raise UsageError(f"initial mean is not finite: {m0}")
    return m0


def solve_mean_euler(model, grid, m0):
    """Forward Euler ``m_{k+1} = m_k + f(m_k) Δt``; returns shape ``(K+1, D)``."""
    m0 = _check_state(m0, model.dim)
    dt = grid.dt
    out = np.empty((grid.K + 1, model.dim))
    out[0] = m = m0
    for k in range(grid.K):
        m = m + model.f(m) * dt
        if not np.all(np.isfinite(m)):
            raise NumericalError(f"mean blew up at step {k + 1}", step=k + 1)
        out[k + 1] = m
    return out


def _check_means(means, grid, dim):
    means = np.asarray(means, dtype=float)
    if means.shape != (grid.K + 1, dim):
        raise UsageError(f"means must have shape ({grid.K + 1}, {dim}), got {means.shape}")
    return means


def _assert_symmetric(C, k):
    if np.max(np.abs(C - C.T)) > _sym_tol(C):
        raise NumericalError(f"covariance lost symmetry at step {k}", step=k)


def solve_cov_euler_s3(model, grid, means, C0, Sigma):
    """Forward Euler on the covariance ODE.

    ``C_{k+1} = C_k + Δt (Df(m_k) C_k + C_k Df(m_k)^T + Σ)``. This update can
    lose positive semi-definiteness for large Δt; that is reported through a
    warning and never corrected.
    """
    D = model.dim
    means = _check_means(means, grid, D)
    C = check_covariance(C0, D, "C0")
    Sigma = check_covariance(Sigma, D, "Sigma")
    dt = grid.dt
    out = np.empty((grid.K + 1, D, D))
    out[0] = C
    J = model.jac(means[:-1])
    for k in range(grid.K):
        X = J[k] @ C
        C = C + dt * (X + X.T + Sigma)
        if not np.all(np.isfinite(C)):
            raise NumericalError(f"covariance blew up at step {k + 1}", step=k + 1)
        _assert_symmetric(C, k + 1)
        out[k + 1] = C
    lam = np.linalg.eigvalsh(out)[:, 0]
    bad = np.nonzero(lam < -1e-12)[0]
    if bad.size:
        warnings.warn(
            f"section3 covariance is indefinite from step {bad[0]} (min eigenvalue {lam.min():.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def solve_cov_factored_s4(model, grid, means, C0, Sigma):
    """Factored update ``C_{k+1} = P_k C_k P_k^T + Σ Δt`` with ``P_k = I + Df(m_k) Δt``.

    A congruence plus a PSD increment, so every iterate is PSD; a negative
    eigenvalue below ``-1e-12`` raises :class:`NumericalError`.
    """
    D = model.dim
    means = _check_means(means, grid, D)
    C = check_covariance(C0, D, "C0")
    Sigma = check_covariance(Sigma, D, "Sigma")
    dt = grid.dt
    out = np.empty((grid.K + 1, D, D))
    out[0] = C
    P = np.eye(D) + model.jac(means[:-1]) * dt
    for k in range(grid.K):
        C = P[k] @ C @ P[k].T + Sigma * dt
        if not np.all(np.isfinite(C)):
            raise NumericalError(f"covariance blew up at step {k + 1}", step=k + 1)
        _assert_symmetric(C, k + 1)
        C = 0.5 * (C + C.T)
        out[k + 1] = C
    lam = np.linalg.eigvalsh(out)[:, 0]
    if np.any(lam < -1e-12):
        k = int(np.argmax(lam < -1e-12))
        raise NumericalError(f"factored covariance not PSD at step {k}", step=k)
    return out


def _bound(means, covs):
    return float(max(np.max(np.linalg.norm(means, axis=1)), np.max(np.linalg.norm(covs, ord=2, axis=(1, 2)))))


def euler_trajectory(model, grid, m0, C0, Sigma, scheme="section4"):
    """Mean and covariance sequences on ``grid`` for ``section3`` or ``section4``."""
    D = model.dim
    Sigma = check_covariance(Sigma, D, "Sigma")
    means = solve_mean_euler(model, grid, m0)
    if scheme == "section3":
        covs = solve_cov_euler_s3(model, grid, means, C0, Sigma)
    elif scheme == "section4":
        covs = solve_cov_factored_s4(model, grid, means, C0, Sigma)
    else:
        raise UsageError(f"unknown Euler scheme {scheme!r}")
    lam = np.linalg.eigvalsh(covs)[:, 0]
    return MomentTrajectory(grid, means, covs, scheme, model, Sigma, lam, _bound(means, covs))


def _moment_rhs(model, Sigma, m, C):
    J = model.jac(m)
    X = J @ C
    return model.f(m), X + X.T + Sigma


def solve_reference(model, T, m0, C0, Sigma, n_out=1000, max_step=None):
    """RK4 on the coupled mean/covariance system.

    Integrates with a step no larger than ``max_step`` (default ``1e-4 T``)
    and records ``n_out + 1`` equally spaced nodes.
    """
    D = model.dim
    grid = TimeGrid(T, n_out)
    m = _check_state(m0, D)
    C = check_covariance(C0, D, "C0")
    Sigma = check_covariance(Sigma, D, "Sigma")
    max_step = 1e-4 * grid.T if max_step is None else max_step
    sub = max(1, math.ceil(grid.dt / max_step - 1e-9))
    h = grid.dt / sub
    means = np.empty((n_out + 1, D))
    covs = np.empty((n_out + 1, D, D))
    means[0], covs[0] = m, C
    for k in range(n_out):
        for _ in range(sub):
            k1m, k1c = _moment_rhs(model, Sigma, m, C)
            k2m, k2c = _moment_rhs(model, Sigma, m + 0.5 * h * k1m, C + 0.5 * h * k1c)
            k3m, k3c = _moment_rhs(model, Sigma, m + 0.5 * h * k2m, C + 0.5 * h * k2c)
            k4m, k4c = _moment_rhs(model, Sigma, m + h * k3m, C + h * k3c)
            m = m + h / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
            C = C + h / 6.0 * (k1c + 2 * k2c + 2 * k3c + k4c)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(C))):
            raise NumericalError(f"reference solve blew up at output node {k + 1}", step=k + 1)
        C = 0.5 * (C + C.T)
        means[k + 1], covs[k + 1] = m, C
    lam = np.linalg.eigvalsh(covs)[:, 0]
    return MomentTrajectory(grid, means, covs, "reference", model, Sigma, lam, _bound(means, covs))


def _locate(grid, t):
    """Interval index ``k`` and offset ``t - t_k``; offset 0 exactly at nodes."""
    if not (-1e-12 * grid.T <= t <= grid.T * (1 + 1e-12)):
        raise UsageError(f"t={t} outside [0, {grid.T}]")
    x = t / grid.dt
    k = int(round(x))
    if abs(x - k) <= 1e-9:
        return min(max(k, 0), grid.K), 0.0
    k = min(int(math.floor(x)), grid.K - 1)
    return k, t - k * grid.dt


def interpolate_moments(traj, t):
    """Mean and unit-scale covariance at time ``t``.

    For ``section3`` trajectories this is the drift-based interpolant
    ``m_k + s f(m_k)``, ``C_k + s (Df C_k + C_k Df^T + Σ)`` with ``s = t - t_k``;
    other schemes interpolate linearly between nodes. Node times return the
    stored values.
    """
    k, s = _locate(traj.grid, float(t))
    if s == 0.0:
        return traj.means[k].copy(), traj.covs[k].copy()
    if traj.scheme == "section3":
        mk, Ck = traj.means[k], traj.covs[k]
        J = traj.model.jac(mk)
        X = J @ Ck
        return mk + s * traj.model.f(mk), Ck + s * (X + X.T + traj.sigma)
    w = s / traj.grid.dt
    return (
        (1 - w) * traj.means[k] + w * traj.means[k + 1],
        (1 - w) * traj.covs[k] + w * traj.covs[k + 1],
    )


def vech_labels(D):
    return [f"C_{i + 1}{j + 1}" for j in range(D) for i in range(j, D)]


def vech(C):
    """Lower triangle of ``C`` stacked column by column."""
    D = C.shape[-1]
    return np.array([C[..., i, j] for j in range(D) for i in range(j, D)]).T


def write_trajectory_csv(traj, fh):
    """Write ``t, m_1..m_D, vech(C)`` rows; the scheme goes in a header comment."""
    D = traj.dim
    fh.write(f"# scheme={traj.scheme} T={traj.grid.T!r} K={traj.grid.K} drift={traj.model.name}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t"] + [f"m_{d + 1}" for d in range(D)] + vech_labels(D))
    V = vech(traj.covs).reshape(traj.grid.K + 1, -1)
    for t, m, v in zip(traj.times, traj.means, V):
        w.writerow([repr(float(x)) for x in (t, *m, *v)])
