import numpy as np
import pytest

from dfgmvi.exceptions import UnsupportedForm
from dfgmvi.mixture import GaussianMixture, marginal
from dfgmvi.metrics import mixture_tv
from dfgmvi.problems import (augmented_map, get_problem, gm3_target_mixture, guidelines_targets,
                             lift_100d, list_problems, multi_2d)

CATALOG = [p for p in list_problems() if p != "ns"]


def test_augmented_identity():
    p = augmented_map(lambda t: t, np.zeros(2), np.eye(2), np.zeros(2), np.eye(2))
    th = np.array([0.3, -0.7])
    assert np.allclose(p.forward(th), np.concatenate([-th, -th]))
    assert p.phi(th) == pytest.approx(np.sum(th**2))


def test_augmented_perfect_fit_and_errors():
    p = augmented_map(lambda t: 2 * t, [2.0], [[1.0]], [1.0], [[1.0]])
    assert p.phi(np.array([1.0])) == 0.0
    with pytest.raises(ValueError):
        augmented_map(lambda t: t, [0.0], [[-1.0]], [0.0], [[1.0]])


def test_bimodal_case_a_phi():
    p = get_problem("bimodal1d:A")
    assert p.phi(np.array([1.0])) == pytest.approx(0.5)


@pytest.mark.parametrize("pid", CATALOG)
def test_phi_matches_residual(pid):
    p = get_problem(pid)
    if p.F is None:
        with pytest.raises(UnsupportedForm):
            p.forward(np.zeros(p.n_theta))
        return
    th = np.random.default_rng(0).standard_normal((100, p.n_theta))
    r = p.forward(th)
    assert np.allclose(p.phi(th), 0.5 * np.sum(r * r, axis=-1), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("pid", ["bimodal1d:A", "bimodal1d:D", "multi2d:B", "multi2d:D",
                                 "multi2d:E", "guide:gm3", "guide:circle", "lift100d:C"])
def test_analytic_derivatives_match_fd(pid):
    p = get_problem(pid)
    d = p.derivatives
    rng = np.random.default_rng(1)
    th = rng.uniform(-1.5, 1.5, (5, p.n_theta))
    h = 1e-6
    eye = np.eye(p.n_theta)
    idx = range(min(p.n_theta, 4))
    for t in th:
        g = d.grad(t[None])[0]
        H = d.hess(t[None])[0]
        for i in idx:
            fd = (p.phi(t + h * eye[i]) - p.phi(t - h * eye[i])) / (2 * h)
            assert fd == pytest.approx(g[i], rel=1e-5, abs=1e-5)
            fdg = (d.grad((t + h * eye[i])[None])[0] - d.grad((t - h * eye[i])[None])[0]) / (2 * h)
            assert np.allclose(fdg, H[i], rtol=1e-4, atol=1e-4)


def test_bimodal_modes():
    p = get_problem("bimodal1d:A")
    ref = p.reference_density()
    x, v = ref.axes[0], ref.values
    left, right = v[x < 0], v[x > 0]
    assert abs(x[x < 0][np.argmax(left)] + 1) < 0.05
    assert abs(x[x > 0][np.argmax(right)] - 1) < 0.05
    assert right.max() > left.max()
    assert abs(ref.integral() - 1) < 1e-3


@pytest.mark.parametrize("case,n_peaks", [("A", 2), ("B", 2), ("C", 1), ("D", 1)])
def test_bimodal_peak_count(case, n_peaks):
    # with larger noise the left mode shrinks to a shoulder and the modes merge
    ref = get_problem(f"bimodal1d:{case}").reference_density()
    v = ref.values
    peaks = np.flatnonzero((v[1:-1] > v[:-2]) & (v[1:-1] >= v[2:]))
    assert len(peaks) == n_peaks
    left = v[ref.axes[0] < 0].sum() * ref.spacings[0]
    assert 0.1 < left < 0.5


def test_case_a_posterior():
    p = multi_2d("A")
    post = p.analytic_posterior
    A = np.array([[1.0, 1.0], [1.0, 2.0]])
    assert np.allclose(post.means[0], [-1, 1])
    assert np.allclose(post.covs[0], np.linalg.inv(A.T @ A))


def test_case_b_modes():
    ref = multi_2d("B").reference_density()
    x, y = ref.axes
    V = ref.values
    peaks = []
    for sx, sy in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
        X, Y = np.meshgrid(x, y, indexing="ij")
        mask = (sx * X > np.abs(Y)) if sx else (sy * Y > np.abs(X))
        i = np.argmax(np.where(mask, V, -1))
        peaks.append((X.ravel()[i], Y.ravel()[i]))
    r = np.linalg.norm(peaks, axis=1)
    assert np.all(np.abs(r - 2.06) < 0.35)


def test_case_c_zero_on_circle_and_symmetric():
    p = multi_2d("C")
    ang = np.linspace(0, 2 * np.pi, 17)
    assert np.allclose(p.phi(np.stack([np.cos(ang), np.sin(ang)], 1)), 0, atol=1e-12)
    ref = p.reference_density()
    assert np.allclose(ref.values, ref.values.T, rtol=1e-10)


@pytest.mark.parametrize("pid", ["multi2d:A", "multi2d:E", "bimodal1d:C"])
def test_reference_normalized(pid):
    ref = get_problem(pid).reference_density()
    assert np.all(ref.values >= 0)
    assert abs(ref.integral() - 1) < 1e-3


def test_lift_properties():
    base = multi_2d("B")
    assert lift_100d(base, 2) is base
    lifted = lift_100d(base, 10)
    th = np.random.default_rng(0).standard_normal((5, 2))
    full = np.concatenate([th, np.repeat(th.sum(1, keepdims=True), 8, axis=1)], axis=1)
    assert np.allclose(lifted.phi(full), base.phi(th))


def test_lift_case_a_marginal_exact():
    lifted = get_problem("lift100d:A")
    # lifted posterior is Gaussian with precision J^T J
    J = lifted.F_jac(np.zeros((1, 100)))[0]
    prec = J.T @ J
    mean = np.linalg.solve(prec, -J.T @ lifted.forward(np.zeros(100)))
    cov = np.linalg.inv(prec)
    base = multi_2d("A").analytic_posterior
    assert np.allclose(mean[:2], base.means[0], atol=1e-10)
    assert np.allclose(cov[:2, :2], base.covs[0], atol=1e-10)
    full = GaussianMixture.from_covs([1.0], [mean], [cov])
    ref = lifted.reference_density()
    assert mixture_tv(marginal(full, (0, 1)), ref) < 1e-6


def test_lift_case_a_monte_carlo_marginal():
    lifted = get_problem("lift100d:A")
    J = lifted.F_jac(np.zeros((1, 100)))[0]
    prec = J.T @ J
    mean = np.linalg.solve(prec, -J.T @ lifted.forward(np.zeros(100)))
    x = np.random.default_rng(0).multivariate_normal(mean, np.linalg.inv(prec), 10**6)[:, :2]
    from dfgmvi.metrics import kde, tv_distance
    ref = lifted.reference_density(200)
    assert tv_distance(kde(x, ref.axes, method="binned"), ref) < 0.05


def test_guideline_targets():
    gm3, circle = guidelines_targets()
    with pytest.raises(UnsupportedForm):
        gm3.forward(np.zeros(2))
    t = gm3_target_mixture()
    x = np.array([2.0, 1.0])
    dens = sum(w * np.exp(-0.5 * np.sum((x - m) ** 2) * 4) * 4 / (2 * np.pi)
               for w, m in zip(t.weights, t.means))
    assert gm3.phi(x[None])[0] == pytest.approx(-np.log(dens), rel=1e-12)
    assert circle.phi(np.array([[0.0, 1.0]]))[0] == pytest.approx(0.0, abs=1e-12)
    ax = np.linspace(-8, 9, 681)
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    assert np.exp(-gm3.phi(X)).sum() * (ax[1] - ax[0]) ** 2 == pytest.approx(1.0, abs=1e-3)


def test_unknown_problem():
    with pytest.raises(ValueError):
        get_problem("nope:A")
    with pytest.raises(ValueError):
        get_problem("multi2d:Z")
