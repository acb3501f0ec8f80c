import numpy as np
import pytest

from dfgmvi.exceptions import CFLViolation
from dfgmvi.navier_stokes import (KLBasis, NSConfig, kl_to_vorticity, make_setup,
                                  mirror_coefficients, mirror_field, ns_forward, ns_solve,
                                  relative_l2_error)

TWO_PI = 2 * np.pi


@pytest.fixture(scope="module")
def cfg():
    return NSConfig(grid_n=32, kl_modes=16, solver_dt=0.0192, obs_times=(0.1, 0.2))


@pytest.fixture(scope="module")
def basis():
    return KLBasis.build(32)


def grid(n):
    x = TWO_PI * np.arange(n) / n
    return np.meshgrid(x, x, indexing="ij")


def test_config_validation():
    with pytest.raises(ValueError):
        NSConfig(grid_n=48)
    with pytest.raises(CFLViolation):
        NSConfig(grid_n=64, solver_dt=0.1)
    with pytest.raises(ValueError):
        NSConfig(obs_times=(0.5, 0.25))
    assert NSConfig().n_obs == 70


def test_basis_orthonormal(basis):
    n = 64
    f = basis.functions(n).reshape(basis.n_modes, -1)
    G = f @ f.T * (TWO_PI / n) ** 2
    assert np.abs(G - np.eye(basis.n_modes)).max() < 1e-10


def test_basis_eigenvalues_sorted(basis):
    assert np.all(np.diff(basis.eigvals) <= 0)
    l2 = np.sum(basis.modes**2, axis=1)
    assert np.allclose(basis.eigvals, 1.0 / l2**2)


def test_kl_examples(basis):
    n = 32
    assert not kl_to_vorticity(np.zeros(5), basis, n).any()
    j = next(i for i, (m, s) in enumerate(zip(basis.modes, basis.is_sin))
             if tuple(m) == (1, 0) and s)
    th = np.zeros(basis.n_modes)
    th[j] = 1.0
    X1, _ = grid(n)
    assert np.allclose(kl_to_vorticity(th, basis, n), np.sin(X1) / (np.sqrt(2) * np.pi))
    rnd = np.random.default_rng(0).standard_normal(basis.n_modes)
    assert abs(kl_to_vorticity(rnd, basis, n).mean()) < 1e-12
    with pytest.raises(ValueError):
        kl_to_vorticity(np.zeros(basis.n_modes + 1), basis, n)


def test_mirror_coefficients_match_field(basis):
    th = np.random.default_rng(1).standard_normal(basis.n_modes)
    n = 32
    w = kl_to_vorticity(th, basis, n)
    assert np.allclose(kl_to_vorticity(mirror_coefficients(th, basis), basis, n),
                       mirror_field(w), atol=1e-13)
    assert np.allclose(mirror_coefficients(mirror_coefficients(th, basis), basis), th)


def test_relative_error(basis):
    th = np.random.default_rng(2).standard_normal(basis.n_modes)
    assert relative_l2_error(th, th, basis) == 0
    n = 64
    w, w2 = kl_to_vorticity(th, basis, n), kl_to_vorticity(0.9 * th, basis, n)
    direct = np.linalg.norm(w2 - w) / np.linalg.norm(w)
    assert relative_l2_error(0.9 * th, th, basis) == pytest.approx(direct, rel=1e-10)


def test_single_mode_pure_decay():
    cfg = NSConfig(grid_n=64, background_velocity=(0.0, 0.0), forcing_amplitude=0.0,
                   obs_times=(0.5,), solver_dt=0.0096)
    X1, X2 = grid(64)
    w0 = np.sin(2 * X1 + X2)
    out = ns_solve(w0, cfg)[0]
    assert np.allclose(out, w0 * np.exp(-cfg.viscosity * 5 * 0.5), atol=1e-6)


def test_forced_from_rest_is_one_dimensional():
    cfg = NSConfig(grid_n=32, obs_times=(0.3,), solver_dt=0.0192)
    out = ns_solve(np.zeros((32, 32)), cfg)[0]
    assert np.allclose(out, out[:, :1], atol=1e-12)
    # each mode obeys dw/dt = -nu q^2 w - A q sin(q x1), started at zero
    q, nu, t = 4, cfg.viscosity, 0.3
    amp = -q * (1 - np.exp(-nu * q**2 * t)) / (nu * q**2)
    X1, _ = grid(32)
    assert np.allclose(out, amp * np.sin(q * X1), atol=1e-10)


def test_mean_conserved_and_enstrophy_decays(basis):
    cfg = NSConfig(grid_n=32, background_velocity=(0.0, 0.0), forcing_amplitude=0.0,
                   obs_times=tuple(0.1 * np.arange(1, 6)), solver_dt=0.0192)
    w0 = kl_to_vorticity(np.random.default_rng(3).standard_normal(32) * 4, basis, 32)
    out = ns_solve(w0, cfg)
    assert np.all(np.abs(out.mean(axis=(-2, -1))) < 1e-12)
    ens = np.sum(out**2, axis=(-2, -1))
    assert np.all(np.diff(np.concatenate([[np.sum(w0**2)], ens])) <= 1e-10)


def test_forward_mirror_symmetry(cfg):
    b = KLBasis.build(cfg.kl_modes)
    th = np.random.default_rng(4).standard_normal(cfg.kl_modes) * np.sqrt(b.prior_var)
    y = ns_forward(th, cfg, b)
    assert y.shape == (cfg.n_obs,)
    assert np.allclose(ns_forward(mirror_coefficients(th, b), cfg, b), y, atol=1e-10)


def test_zero_state_observes_forcing(cfg):
    b = KLBasis.build(cfg.kl_modes)
    y = ns_forward(np.zeros(cfg.kl_modes), cfg, b)
    pts = cfg.obs_points
    from dfgmvi.navier_stokes import ns_solve, observe
    field = ns_solve(np.zeros((32, 32)), cfg)
    assert np.allclose(y, observe(field, cfg))
    # the forced response -c sin(4 x1) is odd about x1 = pi, so differences are twice the value
    assert np.abs(y).max() > 0
    assert pts.shape == (35, 2)


def test_batched_forward_matches_single(cfg):
    b = KLBasis.build(cfg.kl_modes)
    th = np.random.default_rng(5).standard_normal((3, cfg.kl_modes))
    batch = ns_forward(th, cfg, b)
    for i in range(3):
        assert np.allclose(batch[i], ns_forward(th[i], cfg, b), atol=1e-12)


def test_spatial_convergence():
    b = KLBasis.build(16)
    th = np.random.default_rng(6).standard_normal(16) * np.sqrt(b.prior_var)
    ys = [ns_forward(th, NSConfig(grid_n=n, kl_modes=16, solver_dt=0.0048, obs_times=(0.25,)), b)
          for n in (64, 128)]
    assert np.linalg.norm(ys[1] - ys[0]) / np.linalg.norm(ys[1]) < 0.01


def test_setup_deterministic():
    cfg = NSConfig(grid_n=32, kl_modes=8, solver_dt=0.0192, obs_times=(0.1,))
    a, b = make_setup(cfg, 3), make_setup(cfg, 3)
    assert np.array_equal(a.y, b.y)
    assert np.allclose(a.theta_mirror, mirror_coefficients(a.theta_true, a.basis))
