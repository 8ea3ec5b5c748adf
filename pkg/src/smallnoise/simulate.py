"""
Euler-Maruyama ensembles for the nonlinear SDE and its linearization.

Nonlinear chain::

    v_{k+1} = v_k + f(v_k) Δt + sqrt(ε Δt) L ξ_k

Linearized chain (drift linearized about the Euler mean ``m_k``)::

    l_{k+1} = l_k + (f(m_k) + Df(m_k)(l_k - m_k)) Δt + sqrt(ε Δt) L ξ_k

with ``Σ = L L^T``. Both chains draw ``ξ_k`` from the same block streams, so
for a linear drift they coincide path by path under a shared seed.
"""
import csv
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import rng
from .errors import NumericalError, UsageError
from .moments import MomentTrajectory, TimeGrid, check_covariance


@dataclass(frozen=True, eq=False)
class Dirac:
    """Deterministic initial condition ``v(0) = v0``."""

    v0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v0", np.atleast_1d(np.asarray(self.v0, dtype=float)))


@dataclass(frozen=True, eq=False)
class GaussianInit:
    """Initial law ``N(m0, ε C0)``; ``C0`` is unit-scale like the moment ODEs."""

    m0: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m0", np.atleast_1d(np.asarray(self.m0, dtype=float)))
        object.__setattr__(self, "C0", np.atleast_2d(np.asarray(self.C0, dtype=float)))


@dataclass(frozen=True, eq=False)
class SdeSpec:
    """``dv = f(v) dt + sqrt(ε Σ) dW`` with an initial law.

    ``eps = 0`` is accepted for deterministic runs; the KL estimators reject it.
    """

    drift: object
    Sigma: np.ndarray
    eps: float
    initial: Union[Dirac, GaussianInit]

    def __post_init__(self):
        D = self.drift.dim
        Sigma = check_covariance(self.Sigma, D, "Sigma", definite=True)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "chol", np.linalg.cholesky(Sigma))
        if not (math.isfinite(self.eps) and self.eps >= 0):
            raise UsageError(f"eps must be a non-negative number, got {self.eps}")
        object.__setattr__(self, "eps", float(self.eps))
        init = self.initial
        if isinstance(init, Dirac):
            if init.v0.shape != (D,):
                raise UsageError(f"v0 must have length {D}")
        elif isinstance(init, GaussianInit):
            if init.m0.shape != (D,):
                raise UsageError(f"m0 must have length {D}")
            object.__setattr__(init, "C0", check_covariance(init.C0, D, "C0"))
        else:
            raise UsageError(f"unsupported initial law {init!r}")

    @property
    def dim(self):
        return self.drift.dim

    def matched_initial(self):
        """``(m0, C0)`` starting the moment ODEs at the initial law itself."""
        if isinstance(self.initial, Dirac):
            return self.initial.v0.copy(), np.zeros((self.dim, self.dim))
        return self.initial.m0.copy(), self.initial.C0.copy()

    def with_eps(self, eps):
        return SdeSpec(self.drift, self.Sigma, eps, self.initial)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``paths[i, j]`` is path ``i`` at recorded time ``times[j]``."""

    grid: TimeGrid
    n: int
    paths: np.ndarray
    times: np.ndarray
    seed: int
    law: str

    def final(self):
        return self.paths[:, -1, :]


def gaussian_factor(C, tol=1e-10):
    """Symmetric-eigen factor ``F`` with ``F F^T = C``.

    Eigenvalues in ``[-tol, 0)`` are clipped to zero; anything more negative
    raises :class:`UsageError`. Works on stacks ``(..., D, D)``.
    """
    C = np.asarray(C, dtype=float)
    lam, Q = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
    if np.any(lam < -tol):
        raise UsageError(f"covariance is indefinite (min eigenvalue {lam.min():.3g})")
    return Q * np.sqrt(np.clip(lam, 0.0, None))[..., None, :]


def sample_gaussian(m, C_eps, N, seed=0, threads=1):
    """Exact draws from ``N(m, C_eps)``; singular directions stay at the mean."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    C_eps = np.atleast_2d(np.asarray(C_eps, dtype=float))
    if C_eps.shape != (m.size, m.size):
        raise UsageError(f"covariance shape {C_eps.shape} does not match mean of length {m.size}")
    if N < 1:
        raise UsageError("N must be at least 1")
    F = gaussian_factor(C_eps)
    z = rng.standard_normals(seed, rng.GAUSS, N, m.size, threads)
    return m + z @ F.T


def _initial_block(spec, seed, b, n):
    if isinstance(spec.initial, Dirac):
        return np.tile(spec.initial.v0, (n, 1))
    F = gaussian_factor(spec.eps * spec.initial.C0)
    z = rng.generator(seed, rng.INITIAL, b).standard_normal((n, spec.dim))
    return spec.initial.m0 + z @ F.T


def _run(spec, grid, N, seed, threads, keep, step):
    if N < 1:
        raise UsageError("N must be at least 1")
    if keep not in ("all", "last"):
        raise UsageError(f"keep must be 'all' or 'last', got {keep!r}")
    D, K = spec.dim, grid.K
    noise_scale = math.sqrt(spec.eps * grid.dt)
    LT = spec.chol.T

    def block(b, lo, hi):
        n = hi - lo
        gen = rng.generator(seed, rng.NOISE, b)
        x = _initial_block(spec, seed, b, n)
        out = np.empty((n, K + 1 if keep == "all" else 1, D))
        if keep == "all":
            out[:, 0] = x
        for k in range(K):
            xi = gen.standard_normal((n, D))
            x = step(x, k) + noise_scale * (xi @ LT)
            if not np.all(np.isfinite(x)):
                bad = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
                raise NumericalError(f"path {lo + bad} blew up at step {k + 1}", step=k + 1, path=lo + bad)
            if keep == "all":
                out[:, k + 1] = x
        if keep == "last":
            out[:, 0] = x
        return out

    paths = np.concatenate(rng.block_map(block, N, threads), axis=0)
    times = grid.nodes if keep == "all" else grid.nodes[-1:]
    return paths, times


def simulate_nonlinear(spec, grid, N, seed=0, threads=1, keep="all"):
    """Euler-Maruyama paths of the nonlinear SDE on ``grid``."""
    f, dt = spec.drift.f, grid.dt
    paths, times = _run(spec, grid, N, seed, threads, keep, lambda x, k: x + f(x) * dt)
    return PathEnsemble(grid, N, paths, times, seed, "nonlinear")


def simulate_linearized(traj: MomentTrajectory, spec, grid, N, seed=0, threads=1, keep="all"):
    """Paths of the chain whose drift is linearized about the trajectory means.

    Its marginal at node k is exactly ``N(m_k, ε C_k)`` when ``traj`` uses the
    factored (``section4``) covariance recursion.
    """
    if traj.grid != grid:
        raise UsageError(f"trajectory grid {traj.grid} does not match simulation grid {grid}")
    if traj.model is not spec.drift:
        raise UsageError("trajectory and spec use different drift models")
    model, dt = spec.drift, grid.dt
    means = traj.means
    J = model.jac(means[:-1])

    def step(x, k):
        mk = means[k]
        return x + (model.f(mk) + (x - mk) @ J[k].T) * dt

    paths, times = _run(spec, grid, N, seed, threads, keep, step)
    return PathEnsemble(grid, N, paths, times, seed, "linearized")


def write_ensemble_csv(ens, fh):
    """One row per (path, recorded node): ``path, t, x_1..x_D``."""
    D = ens.paths.shape[2]
    fh.write(f"# law={ens.law} seed={ens.seed} N={ens.n}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path", "t"] + [f"x_{d + 1}" for d in range(D)])
    for i in range(ens.n):
        for j, t in enumerate(ens.times):
            w.writerow([i, repr(float(t))] + [repr(float(x)) for x in ens.paths[i, j]])
