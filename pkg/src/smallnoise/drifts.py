"""
Drift functions with analytic Jacobians.

Every model maps states of shape ``(..., D)`` to drifts of shape ``(..., D)``
and Jacobians of shape ``(..., D, D)``, so a single call can evaluate a whole
ensemble or a stack of time nodes. The single-vector entry points
:func:`eval_drift` and :func:`eval_jacobian` add input validation on top.

Catalog
-------
``linear``       f(u) = A u + b                      (any D, s = 0)
``double-well``  f(u) = u - u^3                      (D = 1, s = 1)
``cubic``        f(u) = -u^3                         (D = 1, s = 1)
``lorenz63``     f(x, y, z) = (σ(y-x), x(ρ-z)-y, xy-βz)   (D = 3, s = 0)

All catalog drifts have a unique ODE solution on finite horizons for the
initial conditions used in this package: the one-dimensional cubics are
dissipative at infinity and Lorenz-63 has a bounded absorbing set. A linear
drift has a global solution for any A.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, UsageError


class DriftModel:
    """Base class for drifts.

    Subclasses implement :meth:`f` and :meth:`jac` for batched inputs and set
    ``dim``, ``growth`` (the exponent s bounding second derivatives by
    c(1 + |u|^s); documentation only) and ``name``.
    """

    dim: int
    growth: int
    name: str
    is_linear = False

    def f(self, u):
        raise NotImplementedError

    def jac(self, u):
        raise NotImplementedError

    def __call__(self, u):
        return self.f(u)


@dataclass(frozen=True, eq=False)
class Linear(DriftModel):
    """Affine drift ``f(u) = A u + b``; the Jacobian is the constant ``A``."""

    A: np.ndarray
    b: np.ndarray = None
    name: str = field(default="linear", init=False)
    growth: int = field(default=0, init=False)
    is_linear = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise UsageError(f"linear drift: A must be square, got shape {A.shape}")
        b = np.zeros(A.shape[0]) if self.b is None else np.atleast_1d(np.asarray(self.b, dtype=float))
        if b.shape != (A.shape[0],):
            raise UsageError(f"linear drift: b must have shape ({A.shape[0]},), got {b.shape}")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return self.A.shape[0]

    def f(self, u):
        u = np.asarray(u, dtype=float)
        return u @ self.A.T + self.b

    def jac(self, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self.A, u.shape[:-1] + self.A.shape).copy()


@dataclass(frozen=True, eq=False)
class DoubleWell1D(DriftModel):
    """``f(u) = u - u^3``: wells at ±1, unstable fixed point at 0."""

    name: str = field(default="double-well", init=False)
    dim: int = field(default=1, init=False)
    growth: int = field(default=1, init=False)

    def f(self, u):
        u = np.asarray(u, dtype=float)
        return u - u * u * u

    def jac(self, u):
        u = np.asarray(u, dtype=float)
        return (1.0 - 3.0 * u * u)[..., None]


@dataclass(frozen=True, eq=False)
class Cubic1D(DriftModel):
    """``f(u) = -u^3``; the origin is a degenerate stable equilibrium."""

    name: str = field(default="cubic", init=False)
    dim: int = field(default=1, init=False)
    growth: int = field(default=1, init=False)

    def f(self, u):
        u = np.asarray(u, dtype=float)
        return -(u * u * u)

    def jac(self, u):
        u = np.asarray(u, dtype=float)
        return (-3.0 * u * u)[..., None]


@dataclass(frozen=True, eq=False)
class Lorenz63(DriftModel):
    """The Lorenz-63 vector field (quadratic, so second derivatives are constant)."""

    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    name: str = field(default="lorenz63", init=False)
    dim: int = field(default=3, init=False)
    growth: int = field(default=0, init=False)

    def f(self, u):
        u = np.asarray(u, dtype=float)
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        return np.stack(
            [self.sigma * (y - x), x * (self.rho - z) - y, x * y - self.beta * z], axis=-1
        )

    def jac(self, u):
        u = np.asarray(u, dtype=float)
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        J = np.zeros(u.shape[:-1] + (3, 3))
        J[..., 0, 0] = -self.sigma
        J[..., 0, 1] = self.sigma
        J[..., 1, 0] = self.rho - z
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -x
        J[..., 2, 0] = y
        J[..., 2, 1] = x
        J[..., 2, 2] = -self.beta
        return J


CATALOG = {
    "linear": Linear,
    "double-well": DoubleWell1D,
    "cubic": Cubic1D,
    "lorenz63": Lorenz63,
}


def make_drift(name, **params):
    """Build a catalog drift from its name and keyword parameters."""
    try:
        cls = CATALOG[name]
    except KeyError:
        raise UsageError(f"unknown drift {name!r}; choose from {sorted(CATALOG)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise UsageError(f"drift {name!r}: {exc}") from None


def _as_state(model, u):
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u[None]
    if u.shape != (model.dim,):
        raise UsageError(f"{model.name}: expected a state of length {model.dim}, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise UsageError(f"{model.name}: non-finite state {u}")
    return u


def eval_drift(model, u):
    """Evaluate ``f(u)`` for a single state vector, with validation."""
    u = _as_state(model, u)
    out = model.f(u)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{model.name}: non-finite drift at u={u}", value=u)
    return out


def eval_jacobian(model, u):
    """Evaluate ``Df(u)`` for a single state vector, with validation."""
    u = _as_state(model, u)
    out = model.jac(u)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{model.name}: non-finite Jacobian at u={u}", value=u)
    return out


def fd_jacobian(model, u):
    """Central-difference Jacobian with step ``1e-6 * (1 + |u|)``."""
    u = _as_state(model, u)
    h = 1e-6 * (1.0 + np.linalg.norm(u))
    D = model.dim
    J = np.empty((D, D))
    for j in range(D):
        e = np.zeros(D)
        e[j] = h
        J[:, j] = (model.f(u + e) - model.f(u - e)) / (2.0 * h)
    return J


@dataclass(frozen=True)
class JacobianReport:
    points: np.ndarray
    discrepancies: np.ndarray
    tol: float

    @property
    def passed(self):
        return bool(np.all(self.discrepancies <= self.tol))

    @property
    def worst(self):
        return float(np.max(self.discrepancies))


def check_jacobian(model, points, tol=1e-5):
    """Compare analytic and finite-difference Jacobians at each point.

    The discrepancy at a point is ``max|J - J_fd| / (1 + max|J|)``.
    """
    points = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    if not points:
        raise UsageError("check_jacobian needs at least one point")
    disc = []
    for p in points:
        J = eval_jacobian(model, p)
        J_fd = fd_jacobian(model, p)
        disc.append(np.max(np.abs(J - J_fd)) / (1.0 + np.max(np.abs(J))))
    return JacobianReport(np.array(points), np.array(disc), tol)
