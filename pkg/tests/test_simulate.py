import io

import numpy as np
import pytest
from scipy import stats

from smallnoise import rng
from smallnoise.drifts import DoubleWell1D, Linear, Lorenz63
from smallnoise.errors import NumericalError, UsageError
from smallnoise.moments import TimeGrid, euler_trajectory, solve_mean_euler
from smallnoise.simulate import (
    Dirac,
    GaussianInit,
    SdeSpec,
    gaussian_factor,
    sample_gaussian,
    simulate_linearized,
    simulate_nonlinear,
    write_ensemble_csv,
)

from conftest import ou


def test_block_streams_independent_of_threads():
    a = rng.standard_normals(3, rng.GAUSS, 10_000, 2, threads=1)
    b = rng.standard_normals(3, rng.GAUSS, 10_000, 2, threads=8)
    np.testing.assert_array_equal(a, b)
    c = rng.standard_normals(4, rng.GAUSS, 10_000, 2)
    assert not np.array_equal(a, c)
    # a prefix does not depend on the total count
    np.testing.assert_array_equal(rng.standard_normals(3, rng.GAUSS, 5000, 2), a[:5000])


def test_zero_noise_gives_euler_mean():
    dw = DoubleWell1D()
    g = TimeGrid(1.0, 50)
    spec = SdeSpec(dw, [[1.0]], 0.0, Dirac([0.5]))
    ens = simulate_nonlinear(spec, g, 5)
    means = solve_mean_euler(dw, g, [0.5])
    for i in range(5):
        np.testing.assert_array_equal(ens.paths[i], means)
    tr = euler_trajectory(dw, g, [0.5], [[0.0]], [[1.0]])
    lin = simulate_linearized(tr, spec, g, 5)
    np.testing.assert_allclose(lin.paths, np.broadcast_to(means, lin.paths.shape), rtol=0, atol=1e-15)


def test_dirac_start():
    spec = SdeSpec(DoubleWell1D(), [[1.0]], 0.1, Dirac([0.5]))
    ens = simulate_nonlinear(spec, TimeGrid(1.0, 10), 100)
    assert np.all(ens.paths[:, 0, 0] == 0.5)


def test_linear_chain_moments():
    g = TimeGrid(1.0, 100)
    spec = SdeSpec(ou(), [[1.0]], 1.0, Dirac([0.0]))
    x = simulate_nonlinear(spec, g, 100_000, keep="last").final()[:, 0]
    C = euler_trajectory(ou(), g, [0.0], [[0.0]], [[1.0]]).covs[-1, 0, 0]
    se = np.sqrt(C / x.size)
    assert abs(x.mean()) < 4 * se
    assert abs(x.var(ddof=1) / C - 1) < 0.05


def test_linear_chains_coincide():
    A = Linear([[-1.0, 0.3], [0.2, -0.5]], [0.1, 0.2])
    g = TimeGrid(1.0, 20)
    spec = SdeSpec(A, [[1.0, 0.1], [0.1, 0.4]], 0.05, GaussianInit([1.0, 0.0], np.eye(2)))
    tr = euler_trajectory(A, g, [1.0, 0.0], np.eye(2), spec.Sigma)
    a = simulate_nonlinear(spec, g, 300, seed=7)
    b = simulate_linearized(tr, spec, g, 300, seed=7)
    np.testing.assert_allclose(a.paths, b.paths, rtol=0, atol=1e-13)


def test_linearized_variance_double_well():
    dw = DoubleWell1D()
    g = TimeGrid(1.0, 100)
    spec = SdeSpec(dw, [[1.0]], 0.01, Dirac([0.5]))
    tr = euler_trajectory(dw, g, [0.5], [[0.0]], [[1.0]])
    x = simulate_linearized(tr, spec, g, 100_000, keep="last").final()[:, 0]
    assert abs(x.var(ddof=1) / (0.01 * tr.covs[-1, 0, 0]) - 1) < 0.05


def test_linearized_marginals_chi_square():
    # every node of a 3-D linearized chain: Mahalanobis distance of the sample mean
    # and a Bartlett-type covariance statistic, Bonferroni across nodes
    lz = Lorenz63()
    g = TimeGrid(0.2, 20)
    eps = 0.1
    spec = SdeSpec(lz, np.eye(3), eps, Dirac([1.0, 1.0, 20.0]))
    tr = euler_trajectory(lz, g, [1.0, 1.0, 20.0], np.zeros((3, 3)), np.eye(3))
    ens = simulate_linearized(tr, spec, g, 100_000, seed=11)
    n, alpha = ens.n, 0.01 / g.K
    for k in range(1, g.K + 1):
        x = ens.paths[:, k]
        C = eps * tr.covs[k]
        d = x.mean(axis=0) - tr.means[k]
        mean_stat = n * d @ np.linalg.solve(C, d)
        assert stats.chi2.sf(mean_stat, 3) > alpha, k
        S = np.cov(x, rowvar=False)
        W = np.linalg.solve(C, S)
        # -n*(log det W - tr W + D) is asymptotically chi-square with D(D+1)/2 dof
        lr = (n - 1) * (np.trace(W) - np.log(np.linalg.det(W)) - 3)
        assert stats.chi2.sf(lr, 6) > alpha, k


def test_threads_bit_identical():
    dw = DoubleWell1D()
    g = TimeGrid(1.0, 20)
    spec = SdeSpec(dw, [[1.0]], 0.1, GaussianInit([0.5], [[1.0]]))
    a = simulate_nonlinear(spec, g, 9000, seed=5, threads=1)
    b = simulate_nonlinear(spec, g, 9000, seed=5, threads=8)
    np.testing.assert_array_equal(a.paths, b.paths)
    small = simulate_nonlinear(spec, g, 100, seed=5, threads=8)
    np.testing.assert_array_equal(small.paths, simulate_nonlinear(spec, g, 100, seed=5).paths)


def test_gaussian_initial_law():
    spec = SdeSpec(DoubleWell1D(), [[1.0]], 0.04, GaussianInit([0.5], [[1.0]]))
    x0 = simulate_nonlinear(spec, TimeGrid(1.0, 1), 100_000).paths[:, 0, 0]
    assert abs(x0.mean() - 0.5) < 4 * 0.2 / np.sqrt(x0.size)
    assert abs(x0.var() / 0.04 - 1) < 0.03


def test_sample_gaussian():
    np.testing.assert_array_equal(sample_gaussian([1.0, 2.0], np.zeros((2, 2)), 10), [[1.0, 2.0]] * 10)
    x = sample_gaussian([0.0], [[4.0]], 100_000)
    assert 3.8 <= x.var() <= 4.2
    y = sample_gaussian([0.0, 3.0], np.diag([1.0, 0.0]), 1000)
    assert np.all(y[:, 1] == 3.0)
    with pytest.raises(UsageError):
        sample_gaussian([0.0, 0.0], [[1.0, 0.0], [0.0, -1e-6]], 10)
    F = gaussian_factor(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(F @ F.T, [[2.0, 1.0], [1.0, 2.0]], rtol=1e-14)


def test_errors():
    dw = DoubleWell1D()
    g = TimeGrid(1.0, 10)
    with pytest.raises(UsageError):
        SdeSpec(dw, [[1.0]], -1.0, Dirac([0.0]))
    with pytest.raises(UsageError):
        SdeSpec(dw, [[0.0]], 1.0, Dirac([0.0]))
    with pytest.raises(UsageError):
        SdeSpec(dw, [[1.0]], 1.0, Dirac([0.0, 1.0]))
    spec = SdeSpec(dw, [[1.0]], 0.1, Dirac([0.5]))
    tr = euler_trajectory(dw, TimeGrid(1.0, 20), [0.5], [[0.0]], [[1.0]])
    with pytest.raises(UsageError):
        simulate_linearized(tr, spec, g, 10)
    with pytest.raises(UsageError):
        simulate_nonlinear(spec, g, 0)
    blow = SdeSpec(dw, [[1.0]], 0.1, Dirac([30.0]))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError) as info:
            simulate_nonlinear(blow, g, 10)
    assert info.value.step is not None and info.value.path is not None


def test_ensemble_csv():
    spec = SdeSpec(DoubleWell1D(), [[1.0]], 0.1, Dirac([0.5]))
    ens = simulate_nonlinear(spec, TimeGrid(1.0, 3), 2)
    fh = io.StringIO()
    write_ensemble_csv(ens, fh)
    lines = fh.getvalue().splitlines()
    assert lines[0] == "# law=nonlinear seed=0 N=2"
    assert lines[1] == "path,t,x_1"
    assert len(lines) == 2 + 2 * 4
