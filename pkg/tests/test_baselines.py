import numpy as np
import pytest
from hypothesis import given, strategies as st

from dfgmvi import baselines as bl
from dfgmvi.mixture import GaussianMixture, gm_logpdf
from dfgmvi.problems import AnalyticDerivatives, ForwardProblem, multi_2d
from dfgmvi.quadrature import precision_from_chol

from conftest import random_spd


def self_target(mix):
    """Phi = -log rho for the mixture itself, with exact derivatives."""
    def phi(x):
        return -gm_logpdf(mix, np.atleast_2d(x))

    def grad(x):
        return -bl.mixture_log_terms(mix, x, hessian=False)[1]

    def hess(x):
        return -bl.mixture_log_terms(mix, x)[2]

    return phi, AnalyticDerivatives(grad, hess)


def two_component():
    return GaussianMixture.from_covs([0.35, 0.65], [[-1.0, 0.5], [1.2, -0.3]],
                                     [np.array([[1.0, 0.3], [0.3, 0.5]]), 0.7 * np.eye(2)])


@pytest.mark.parametrize("quad", [bl.MEANPOINT, bl.UNSCENTED])
def test_consistent_quadrature_fixed_point(quad):
    mix = two_component()
    phi, d = self_target(mix)
    E = bl.ngf_expectations(mix, phi, d, quad, quad)
    assert np.allclose(E.grad, 0, atol=1e-12)
    assert np.allclose(E.hess, 0, atol=1e-12)
    assert np.allclose(E.value, 0, atol=1e-12)
    new, _ = bl.ngf_step(mix, phi, d, 0.5, quad, quad)
    assert np.allclose(new.means, mix.means, atol=1e-12)
    assert np.allclose(new.cov_chols, mix.cov_chols, atol=1e-12)
    assert np.allclose(new.weights, mix.weights, atol=1e-12)


def test_inconsistent_quadrature_is_not_fixed():
    mix = two_component()
    phi, d = self_target(mix)
    E = bl.ngf_expectations(mix, phi, d, bl.MEANPOINT, bl.montecarlo(20),
                            np.random.default_rng(0))
    assert np.abs(E.hess).max() > 1e-3


def test_unscented_exact_for_cubic():
    z, w = bl.UNSCENTED.nodes(3, 1, None)
    z = z[0]
    assert np.allclose(w @ z, 0)
    assert np.allclose((z * w[:, None]).T @ z, np.eye(3))
    assert np.allclose(w @ z**3, 0)


def test_exact_log_hessian_matches_fd():
    mix = two_component()
    x = np.array([[0.2, 0.1], [-1.0, 1.0]])
    _, g, H = bl.mixture_log_terms(mix, x)
    h = 1e-5
    for i, e in enumerate(np.eye(2)):
        fd = (bl.mixture_log_terms(mix, x + h * e, False)[1]
              - bl.mixture_log_terms(mix, x - h * e, False)[1]) / (2 * h)
        assert np.allclose(H[:, i], fd, atol=1e-6)


def test_ngf_k1_gaussian_exact_step():
    p = multi_2d("A")
    mix = GaussianMixture.from_covs([1.0], [[0.5, 0.5]], [np.eye(2)])
    new, _ = bl.ngf_step(mix, p.phi, p.derivatives, 0.3)
    A = np.array([[1.0, 1.0], [1.0, 2.0]])
    prec = np.eye(2) + 0.3 * (A.T @ A - np.eye(2))
    C = np.linalg.inv(prec)
    g = A.T @ (A @ mix.means[0] - [0.0, 1.0])
    assert np.allclose(new.covs[0], C, atol=1e-12)
    assert np.allclose(new.means[0], mix.means[0] - 0.3 * C @ g, atol=1e-12)


def test_spectral_norm():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 5))
    assert bl.spectral_norm(M, tol=1e-10) == pytest.approx(np.linalg.norm(M, 2), rel=1e-6)
    assert bl.spectral_norm(np.zeros((3, 3))) == 0.0


def test_adaptive_dt_examples():
    mix = GaussianMixture.from_covs([1.0], [[0.0, 0.0]], [np.eye(2)])
    assert bl.adaptive_dt(mix, np.zeros((1, 2, 2))) == 0.5
    E = np.diag([9.9, 1.0])[None]
    assert bl.adaptive_dt(mix, E, 0.5, 0.99) == pytest.approx(0.1, rel=1e-3)
    with pytest.raises(ValueError):
        bl.adaptive_dt(mix, E, 0.5, 1.0)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_adaptive_dt_keeps_precision_pd(seed, n):
    rng = np.random.default_rng(seed)
    K = 3
    mix = GaussianMixture.from_covs(np.full(K, 1 / K), rng.standard_normal((K, n)),
                                    [random_spd(rng, n, 100.0) for _ in range(K)])
    E = np.stack([rng.standard_normal((n, n)) * 10 for _ in range(K)])
    E = 0.5 * (E + np.swapaxes(E, 1, 2))
    dt = bl.adaptive_dt(mix, E)
    prec = precision_from_chol(mix.cov_chols) + dt * E
    for P in prec:
        np.linalg.cholesky(P)


def test_wgf_zero_expectation_keeps_covariance():
    mix = GaussianMixture.from_covs([1.0], [[0.2, -0.1]], [np.array([[1.0, 0.4], [0.4, 2.0]])])
    phi, d = self_target(mix)
    new, _ = bl.wgf_step(mix, phi, d, 0.1)
    assert np.allclose(new.covs, mix.covs, atol=1e-12)
    assert np.allclose(new.means, mix.means, atol=1e-12)


def test_wgf_k1_converges_case_a():
    p = multi_2d("A")
    tr = bl.run_wgf(p, 0.14, K=1, n_iters=800, snapshot_every=800)
    A = np.array([[1.0, 1.0], [1.0, 2.0]])
    assert tr.failure is None
    assert np.allclose(tr.final.means[0], [-1.0, 1.0], atol=1e-6)
    assert np.allclose(tr.final.covs[0], np.linalg.inv(A.T @ A), atol=1e-6)


def test_bbvi_deterministic_and_validates():
    p = multi_2d("B")
    a = bl.run_bbvi(p, K=5, n_iters=20, seed=4)
    b = bl.run_bbvi(p, K=5, n_iters=20, seed=4)
    assert np.array_equal(a.final.means, b.final.means)
    assert np.array_equal(a.final.cov_chols, b.final.cov_chols)
    with pytest.raises(ValueError):
        bl.bbvi_step(a.final, p.phi, J=1, rng=np.random.default_rng(0))


def test_bbvi_constant_phi_is_mean_zero():
    # with Phi = -log rho the integrand is constant, so the centered estimates vanish on average
    mix = GaussianMixture.from_covs([1.0], [[0.0, 0.0]], [np.eye(2)])
    phi, _ = self_target(mix)
    shifts = []
    for s in range(400):
        new, _ = bl.bbvi_step(mix, phi, J=5, rng=np.random.default_rng(s), dt=0.1)
        shifts.append(new.means[0] - mix.means[0])
    assert np.allclose(np.mean(shifts, axis=0), 0, atol=1e-10)


class _StubRng:
    def __init__(self, u):
        self.u = u

    def integers(self, n):
        return 0

    def random(self):
        return self.u.pop(0)


def test_stretch_unit_z_always_accepted():
    a = 2.0
    u_unit = (np.sqrt(a) - 1) / (a - 1)
    X = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
    rng = _StubRng([u_unit, 1e-300] * 3)
    Y, _, acc = bl.stretch_move(X, lambda x: np.sum(np.atleast_2d(x) ** 2, -1), a, rng)
    assert acc == 3
    assert np.allclose(Y, X)


def test_stretch_affine_invariance():
    rng0 = np.random.default_rng(0)
    T = np.array([[2.0, 0.0], [0.7, 0.5]])
    d = np.array([1.0, -3.0])
    Tinv = np.linalg.inv(T)

    def phi(x):
        x = np.atleast_2d(x)
        return 0.5 * np.sum(x**2, -1) + 0.1 * x[:, 0] ** 4

    def phi_t(y):
        return phi((np.atleast_2d(y) - d) @ Tinv.T)

    X = rng0.standard_normal((10, 2))
    A, _, _ = bl.stretch_move(X, phi, 2.0, np.random.default_rng(5))
    B, _, _ = bl.stretch_move(X @ T.T + d, phi_t, 2.0, np.random.default_rng(5))
    assert np.allclose(B, A @ T.T + d, atol=1e-10)


def test_stretch_long_run_frequencies():
    w = np.array([0.2, 0.3, 0.5])
    target = GaussianMixture(w, [[-2.0], [0.0], [2.0]], np.full((3, 1, 1), 0.8))
    p = ForwardProblem(name="toy", n_theta=1, n_x=None, F=None,
                       phi_fn=lambda x: -gm_logpdf(target, np.atleast_2d(x).reshape(-1, 1)),
                       init_mean=np.zeros(1), init_cov=np.eye(1) * 4)
    samples, _ = bl.run_stretch(p, J=60, n_iters=3000, seed=0, keep_last=2900)
    x = samples[:, 0]
    from scipy.stats import norm
    edges = [-np.inf, -1.0, 1.0, np.inf]
    exact = [sum(wk * (norm.cdf(b, m, 0.8) - norm.cdf(a, m, 0.8))
                 for wk, m in zip(w, [-2, 0, 2])) for a, b in zip(edges[:-1], edges[1:])]
    freq = [np.mean((x >= a) & (x < b)) for a, b in zip(edges[:-1], edges[1:])]
    assert np.allclose(freq, exact, atol=0.01)


def test_quadrature_validation():
    with pytest.raises(ValueError):
        bl.Quadrature("simpson")
    with pytest.raises(ValueError):
        bl.montecarlo(0)
