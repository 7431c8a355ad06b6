import numpy as np
import pytest

from diracflow.dirac_map import (dirac_along_map, gap_monitor, kernel_project_contour,
                                 kernel_project_eig, kernel_threshold, operator_drift,
                                 project_tangent, spectrum_near_zero, spinor_solve,
                                 transported_seed, twisted_inner, twisted_matrix, twisted_norm)
from diracflow.errors import (BeyondInjectivity, ContourTouchesSpectrum, EmptyKernel,
                              GridError, KernelCollapsed)
from diracflow.target import CliffordTorus, Sphere
from diracflow.torus_spin import make_grid, quaternion_act

from conftest import dft_dirac_matrix, perturbed_sphere_map, random_spinor, smooth_torus_map

QUATERNION_UNITS = [(1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)]


def tangent_spinor(target, u, rng):
    P = target.tangent_projector(target.project(u))
    return project_tangent(P, random_spinor(rng, u.shape))


def ambient_oracle(grid, target, u):
    """``P (Dflat x I_q) P`` assembled from the explicit DFT matrix."""
    n, q = grid.n, target.q
    Df = dft_dirac_matrix(n, grid.delta).reshape(n * n, 2, n * n, 2)
    big = np.einsum("xsyt,AB->xAsyBt", Df, np.eye(q)).reshape(n * n * q * 2, -1)
    P = target.tangent_projector(target.project(u)).reshape(n * n, q, q)
    Pm = np.zeros((n * n, q, 2, n * n, q, 2))
    for x in range(n * n):
        for s in range(2):
            Pm[x, :, s, x, :, s] = P[x]
    Pm = Pm.reshape(n * n * q * 2, -1)
    return Pm @ big @ Pm


def test_twisted_operator_matches_dense_oracle(grid8, sphere):
    u = perturbed_sphere_map(grid8, a=0.2)
    dim = 8 * 8 * 3 * 2
    basis = np.eye(dim, dtype=complex).reshape(8, 8, 3, 2, dim)
    cols = np.stack([dirac_along_map(grid8, sphere, u, basis[..., k]).reshape(-1)
                     for k in range(dim)], axis=1)
    assert np.abs(cols - ambient_oracle(grid8, sphere, u)).max() < 1e-10
    # frame-coordinate matrix is the same operator restricted to the tangent bundle
    M, B = twisted_matrix(grid8, sphere, u)
    lift = np.zeros((64, 3, 2, 64, 2, 2))
    Bf = B.reshape(64, 3, 2)
    for x in range(64):
        for s in range(2):
            lift[x, :, s, x, :, s] = Bf[x]
    lift = lift.reshape(dim, 64 * 2 * 2)
    assert np.abs(lift.T @ cols @ lift - M).max() < 1e-10


def test_twisted_operator_self_adjoint(grid8, sphere, rng):
    u = perturbed_sphere_map(grid8, a=0.3)
    worst = 0.0
    for _ in range(100):
        phi = random_spinor(rng, u.shape)
        psi = random_spinor(rng, u.shape)
        lhs = twisted_inner(phi, dirac_along_map(grid8, sphere, u, psi), grid8)
        rhs = twisted_inner(dirac_along_map(grid8, sphere, u, phi), psi, grid8)
        worst = max(worst, abs(lhs - rhs))
    assert worst <= 1e-9


def test_twisted_operator_shape_errors(grid8, sphere):
    u = perturbed_sphere_map(grid8)
    with pytest.raises(GridError):
        dirac_along_map(grid8, sphere, u, np.zeros((8, 8, 4, 2), complex))
    with pytest.raises(GridError):
        dirac_along_map(grid8, sphere, u, np.zeros((16, 16, 3, 2), complex))


def band_limited_tangent(grid, target, u, rng, kmax=2):
    """Tangent spinor whose ambient components only use modes |k_i| <= kmax."""
    n = grid.n
    hat = np.zeros((n, n, target.q, 2), complex)
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(-kmax, kmax + 1):
            hat[k1 % n, k2 % n] = random_spinor(rng, (target.q,))
    field = np.fft.ifft2(hat, axes=(0, 1)) * grid.twist[..., None, None]
    return project_tangent(target.tangent_projector(target.project(u)), field)


@pytest.mark.parametrize("delta", [(0, 0), (0.5, 0.5)])
def test_right_quaternion_action_commutes(delta, sphere, rng):
    # the signed Nyquist symbol is not j-equivariant; n = 32 keeps the
    # Nyquist content of P psi at round-off level
    g = make_grid(32, delta)
    u = perturbed_sphere_map(g, a=0.05)
    psi = band_limited_tangent(g, sphere, u, rng)
    Dpsi = dirac_along_map(g, sphere, u, psi)
    for h in QUATERNION_UNITS:
        lhs = dirac_along_map(g, sphere, u, quaternion_act(psi, h))
        assert np.abs(lhs - quaternion_act(Dpsi, h)).max() <= 1e-10


@pytest.mark.parametrize("target_name,delta", [("sphere", (0, 0)), ("sphere", (0, 0.5)),
                                               ("torus", (0, 0)), ("torus", (0.5, 0.5))])
def test_multiplicities_even(target_name, delta, sphere, torus):
    # at n = 8 the Nyquist modes split j-pairs by up to ~1e-7; n = 16 resolves them
    g = make_grid(16, delta)
    if target_name == "sphere":
        target, u = sphere, perturbed_sphere_map(g, a=0.1)
    else:
        target, u = torus, smooth_torus_map(g)
    sp = spectrum_near_zero(g, target, u, count=16, method="dense")
    vals = np.sort(sp.eigenvalues)
    # the window edge may cut a cluster
    vals = vals[np.abs(vals) < sp.window - 0.1]
    assert vals.size % 2 == 0
    assert np.abs(vals[1::2] - vals[::2]).max() < 1e-10
    assert sp.kernel_dim_complex % 2 == 0


def test_constant_map_kernel(grid8, sphere):
    u = np.broadcast_to([0.0, 0.0, 1.0], (8, 8, 3)).copy()
    sp = spectrum_near_zero(grid8, sphere, u)
    assert sp.kernel_dim_complex == 4
    assert sp.kernel_dim_quaternionic == 2
    assert sp.index_parity == 0
    assert np.isclose(sp.gap, 1.0)
    assert np.isclose(sp.threshold, kernel_threshold(1.0))
    G = np.einsum("isab,jsab->ij", sp.kernel_basis.reshape(4, 64, 3, 2).conj(),
                  sp.kernel_basis.reshape(4, 64, 3, 2)) * grid8.cell_measure
    assert np.allclose(G, np.eye(4), atol=1e-12)


def test_antiperiodic_constant_map_has_no_kernel(sphere):
    g = make_grid(8, (0.5, 0.5))
    u = np.broadcast_to([0.0, 0.0, 1.0], (8, 8, 3)).copy()
    sp = spectrum_near_zero(g, sphere, u)
    assert sp.kernel_dim_complex == 0
    assert np.isclose(sp.gap, np.sqrt(0.5))
    with pytest.raises(EmptyKernel):
        spinor_solve(g, sphere, u, np.zeros(u.shape + (2,), complex), u, sp)


def test_torus_constant_map_kernel(grid8, torus):
    u = np.broadcast_to([1.0, 0.0, 0.0, 1.0], (8, 8, 4)).copy()
    sp = spectrum_near_zero(grid8, torus, u)
    assert sp.kernel_dim_complex == 4 and np.isclose(sp.gap, 1.0)


def test_kernel_vectors_are_null(grid8, sphere):
    u = perturbed_sphere_map(grid8, a=0.1)
    sp = spectrum_near_zero(grid8, sphere, u)
    assert sp.kernel_dim_complex == 4
    small = np.abs(sp.eigenvalues) < sp.threshold
    for lam, psi in zip(sp.eigenvalues[small], sp.vectors[small]):
        assert abs(lam) < 1e-8
        resid = dirac_along_map(grid8, sphere, u, psi) - lam * psi
        assert twisted_norm(resid, grid8) < 1e-10


def test_dense_and_shift_invert_agree(grid16, sphere):
    u = perturbed_sphere_map(grid16, a=0.05)
    a = spectrum_near_zero(grid16, sphere, u, method="dense")
    b = spectrum_near_zero(grid16, sphere, u, method="shift_invert")
    assert a.kernel_dim_complex == b.kernel_dim_complex == 4
    assert abs(a.gap - b.gap) < 1e-10
    rng = np.random.default_rng(5)
    sigma = tangent_spinor(sphere, u, rng)
    pa = kernel_project_eig(grid16, a, sigma)
    pb = kernel_project_eig(grid16, b, sigma)
    assert twisted_norm(pa - pb, grid16) < 1e-9


def test_contour_projection_matches_eigenprojection(grid8, sphere, rng):
    u = perturbed_sphere_map(grid8, a=0.1)
    sp = spectrum_near_zero(grid8, sphere, u)
    sigma = tangent_spinor(sphere, u, rng)
    exact = kernel_project_eig(grid8, sp, sigma)
    errs = [twisted_norm(kernel_project_contour(grid8, sphere, u, sigma, sp.gap, n_quad=m,
                                                spectral=sp) - exact, grid8)
            for m in (8, 16, 32)]
    assert errs[2] <= 1e-6
    assert errs[0] > errs[1] > errs[2]
    # projector is idempotent
    again = kernel_project_contour(grid8, sphere, u, exact, sp.gap, spectral=sp)
    assert twisted_norm(again - exact, grid8) < 1e-6


def test_contour_touching_spectrum_is_rejected(grid8, sphere, rng):
    u = perturbed_sphere_map(grid8, a=0.1)
    sp = spectrum_near_zero(grid8, sphere, u)
    with pytest.raises(ContourTouchesSpectrum):
        kernel_project_contour(grid8, sphere, u, tangent_spinor(sphere, u, rng),
                               2 * sp.gap, spectral=sp)


def test_transported_seed_and_sigma1(grid8, sphere):
    u0 = perturbed_sphere_map(grid8, a=0.05)
    sp0 = spectrum_near_zero(grid8, sphere, u0)
    psi0 = sp0.kernel_basis[1]
    u1 = perturbed_sphere_map(grid8, a=0.08)
    sp1 = spectrum_near_zero(grid8, sphere, u1)
    sigma = transported_seed(grid8, sphere, u0, psi0, u1)
    assert np.isclose(twisted_norm(sigma, grid8), 1.0)
    psi, s1 = spinor_solve(grid8, sphere, u0, psi0, u1, sp1)
    assert np.sqrt(0.5) <= s1 <= 1 + 1e-10
    assert np.isclose(twisted_norm(psi, grid8), 1.0)
    assert twisted_norm(dirac_along_map(grid8, sphere, u1, psi), grid8) < 1e-9
    psi_c, s1_c = spinor_solve(grid8, sphere, u0, psi0, u1, sp1, method="contour")
    assert abs(s1 - s1_c) < 1e-7 and twisted_norm(psi - psi_c, grid8) < 1e-6


def test_transport_beyond_half_injectivity(grid8, sphere):
    north = np.broadcast_to([0.0, 0.0, 1.0], (8, 8, 3)).copy()
    equator = np.broadcast_to([1.0, 0.0, 0.0], (8, 8, 3)).copy()
    psi = np.zeros((8, 8, 3, 2), complex)
    with pytest.raises(BeyondInjectivity):
        transported_seed(grid8, sphere, north, psi, equator)


def test_kernel_collapse_detected(grid8, sphere):
    u = perturbed_sphere_map(grid8, a=0.05)
    sp = spectrum_near_zero(grid8, sphere, u)
    # a seed orthogonal to the kernel: a gap eigenvector
    gap_vec = sp.vectors[np.argmin(np.abs(np.abs(sp.eigenvalues) - sp.gap))]
    with pytest.raises(KernelCollapsed):
        spinor_solve(grid8, sphere, u, gap_vec, u, sp)


def test_operator_drift_vanishes_for_equal_maps(grid16, sphere):
    u = perturbed_sphere_map(grid16, a=0.1)
    psi = tangent_spinor(sphere, u, np.random.default_rng(2))
    sup, ratio = operator_drift(grid16, sphere, u, u, psi)
    assert sup < 1e-12 and ratio == 0.0


def test_operator_drift_linear_on_sphere(sphere):
    g = make_grid(32)
    X1, X2 = g.mesh
    v = sphere.project(np.stack([0.3 * np.cos(X1), 0.3 * np.sin(X2), np.ones_like(X1)], -1))
    w = np.einsum("xyab,xyb->xya", sphere.tangent_projector(v),
                  np.stack([np.sin(X2), np.cos(X1), 0.2 * np.cos(X1 + X2)], -1))
    w /= np.linalg.norm(w, axis=-1).max()
    psi = project_tangent(sphere.tangent_projector(v),
                          np.stack([np.stack([np.cos(X1), 1j * np.sin(X2)], -1)] * 3, -2))
    sups = [operator_drift(g, sphere, v + s * w, v, psi)[0] for s in (1e-2, 1e-3)]
    assert 8 < sups[0] / sups[1] < 12


def test_gap_monitor():
    from diracflow.dirac_map import SpectralData
    empty = np.zeros((0, 8, 8, 3, 2))

    def spect(dim, gap):
        return SpectralData(np.zeros(dim), dim, gap, 1e-3, empty)

    assert gap_monitor(spect(4, 1.0), spect(4, 0.9))
    assert not gap_monitor(spect(4, 1.0), spect(2, 0.9))
    assert not gap_monitor(spect(4, 1.0), spect(4, 0.4))
    assert not gap_monitor(spect(4, 0.6), spect(4, 0.45), initial_gap=1.0)
