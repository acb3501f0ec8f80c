import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from dfgmvi.metrics import GridDensity, grid_density, kde, tv_distance, uniform_axes, mixture_tv
from dfgmvi.mixture import GaussianMixture


def normal_grid(mu, ax):
    return GridDensity((ax,), norm.pdf(ax, mu, 1.0))


def test_grid_density_normal_integrates():
    ax = np.linspace(-5, 5, 2001)
    g = grid_density(GaussianMixture([1.0], [[0.0]], [[[1.0]]]), (ax,))
    assert abs(g.integral() - 1) < 1e-4


def test_grid_density_duplicates():
    ax = uniform_axes(((-3, 3), (-3, 3)), 50)
    one = grid_density(GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)]), ax)
    two = grid_density(GaussianMixture([0.5, 0.5], [[0.0, 0.0]] * 2, [np.eye(2)] * 2), ax)
    assert np.allclose(one.values, two.values, rtol=1e-14)


def test_grid_density_dimension_error():
    with pytest.raises(ValueError):
        grid_density(GaussianMixture([1.0], [[0.0] * 3], [np.eye(3)]), uniform_axes([(0, 1)] * 3, 5))


def test_grid_density_matches_histogram():
    mix = GaussianMixture([0.4, 0.6], [[-1.0], [1.5]], [[[0.5]], [[0.8]]])
    x = mix.sample(10**6, np.random.default_rng(0))[:, 0]
    edges = np.linspace(-3, 4, 15)
    hist, _ = np.histogram(x, edges)
    fine = np.linspace(-3, 4, 14001)
    dens = grid_density(mix, (fine,)).values
    probs = [np.trapezoid(dens[(fine >= a) & (fine <= b)], fine[(fine >= a) & (fine <= b)])
             for a, b in zip(edges[:-1], edges[1:])]
    probs = np.array(probs)
    big = probs > 0.01
    assert np.all(np.abs(hist[big] / 1e6 - probs[big]) / probs[big] < 0.02)


def test_tv_basic():
    ax = np.linspace(-12, 15, 27001)
    p, q = normal_grid(0, ax), normal_grid(3, ax)
    assert tv_distance(p, p) == 0
    assert tv_distance(p, q) == pytest.approx(2 * (1 - 2 * norm.cdf(-1.5)), abs=1e-4)
    a = GridDensity((np.arange(4.0),), [1.0, 0, 0, 0])
    b = GridDensity((np.arange(4.0),), [0, 0, 0, 1.0])
    assert tv_distance(a, b) == 2.0


def test_tv_axis_mismatch():
    with pytest.raises(ValueError):
        tv_distance(normal_grid(0, np.linspace(0, 1, 5)), normal_grid(0, np.linspace(0, 1, 6)))


@given(st.integers(0, 10_000))
def test_tv_metric_properties(seed):
    rng = np.random.default_rng(seed)
    ax = (np.linspace(0, 1, 7), np.linspace(0, 2, 5))
    p, q, r = (GridDensity(ax, rng.random((7, 5))).normalized() for _ in range(3))
    d = tv_distance
    assert d(p, q) == pytest.approx(d(q, p))
    assert 0 <= d(p, q) <= 2 + 1e-12
    assert d(p, r) <= d(p, q) + d(q, r) + 1e-12
    assert d(p, p) == 0


def test_tv_grid_refinement():
    mix = GaussianMixture([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [np.eye(2), 0.5 * np.eye(2)])
    other = GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    vals = []
    for n in (201, 401):
        ax = uniform_axes(((-4, 4), (-4, 4)), n)
        vals.append(mixture_tv(mix, grid_density(other, ax).normalized()))
    assert abs(vals[0] - vals[1]) < 1e-3


def test_kde_single_sample_and_normalization():
    ax = (np.linspace(-5, 5, 1001),)
    g = kde(np.array([[1.0]]), ax, bandwidth=0.5)
    assert abs(g.integral() - 1) < 1e-3
    assert ax[0][np.argmax(g.values)] == pytest.approx(1.0, abs=0.011)
    assert np.allclose(g.values, norm.pdf(ax[0], 1.0, 0.5), atol=1e-3)


def test_kde_standard_normal_samples():
    ax = (np.linspace(-5, 5, 501),)
    x = np.random.default_rng(0).standard_normal((10**6, 1))
    g = kde(x, ax)
    assert tv_distance(g, normal_grid(0, ax[0]).normalized()) < 0.05


def test_kde_binned_matches_direct():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((500, 2))
    ax = uniform_axes(((-4, 4), (-4, 4)), 81)
    a = kde(x, ax, method="direct")
    b = kde(x, ax, method="binned")
    assert tv_distance(a, b) < 0.02


def test_kde_empty():
    with pytest.raises(ValueError):
        kde(np.zeros((0, 1)), (np.linspace(0, 1, 5),))
