from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diracflow.errors import GridError
from diracflow.torus_spin import (CLIFFORD, SpinTorusGrid, clifford_mul, flat_dirac,
                                  flat_dirac_matrix, format_snapshot, gradient,
                                  heat_propagate, l2_inner, l2_norm, laplacian, make_grid,
                                  plane_wave, quaternion_act, read_snapshot, real_inner,
                                  write_snapshot)

from conftest import dft_dirac_matrix, random_spinor

SPIN_STRUCTURES = [(0, 0), (0, 0.5), (0.5, 0), (0.5, 0.5)]


def test_grid_validation():
    with pytest.raises(GridError):
        make_grid(7)
    with pytest.raises(GridError):
        make_grid(6)
    with pytest.raises(GridError):
        make_grid(8, (0.25, 0))
    g = make_grid(8, (0.5, 0))
    assert g.spin_structure == (Fraction(1, 2), Fraction(0))
    assert np.isclose(g.cell_measure * 64, g.volume)


def test_band_includes_negative_nyquist():
    g = make_grid(8)
    assert sorted(g.band) == list(range(-4, 4))


@pytest.mark.parametrize("delta", SPIN_STRUCTURES)
def test_flat_matrix_matches_explicit_dft(delta):
    g = make_grid(8, delta)
    M = flat_dirac_matrix(g)
    assert np.abs(M - dft_dirac_matrix(8, delta)).max() < 1e-12
    assert np.abs(M - M.conj().T).max() < 1e-12


@pytest.mark.parametrize("delta", SPIN_STRUCTURES)
def test_plane_waves_are_eigenvectors(delta):
    g = make_grid(8, delta)
    k = (1, -2)
    xi = g.kappa * (np.array(k) + g.delta)
    w, V = np.linalg.eigh(-(xi[0] * CLIFFORD.pauli[0] + xi[1] * CLIFFORD.pauli[1]))
    for lam, v in zip(w, V.T):
        psi = plane_wave(g, k, v)
        assert np.abs(flat_dirac(psi, g) - lam * psi).max() < 1e-12
    assert np.allclose(sorted(w), [-np.hypot(*xi), np.hypot(*xi)])


def test_antiperiodic_samples_carry_the_twist():
    g = make_grid(8, (0.5, 0))
    psi = plane_wave(g, (0, 0), [1, 0])
    X1 = g.mesh[0]
    assert np.allclose(psi[..., 0], np.exp(0.5j * X1))


def test_clifford_relations():
    c1, c2 = CLIFFORD.c
    I = np.eye(2)
    assert np.allclose(c1 @ c1, -I) and np.allclose(c2 @ c2, -I)
    assert np.allclose(c1 @ c2 + c2 @ c1, 0)
    # skew-hermitian generators
    assert np.allclose(c1.conj().T, -c1)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
@settings(max_examples=50, deadline=None)
def test_j_is_quaternionic(v):
    psi = np.array([v[0] + 1j * v[1], v[2] + 1j * v[3]])
    j = CLIFFORD.j
    assert np.allclose(j(j(psi)), -psi, atol=1e-12)
    assert np.allclose(j(1j * psi), -1j * j(psi), atol=1e-12)
    for c in CLIFFORD.c:
        assert np.allclose(j(c @ psi), c @ j(psi), atol=1e-12)


def test_quaternion_action_is_right_action(rng):
    psi = random_spinor(rng, (3,))
    h = rng.standard_normal(4)
    g = rng.standard_normal(4)

    def qmul(p, q):
        # basis (1, i, j, k=ij)
        a1, b1, c1, d1 = p
        a2, b2, c2, d2 = q
        return np.array([a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
                         a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
                         a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
                         a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2])

    lhs = quaternion_act(quaternion_act(psi, h), g)
    rhs = quaternion_act(psi, qmul(h, g))
    assert np.allclose(lhs, rhs, atol=1e-12)
    # unit quaternions preserve the real pairing
    u = h / np.linalg.norm(h)
    phi = random_spinor(rng, (3,))
    assert np.isclose(np.vdot(quaternion_act(psi, u), quaternion_act(phi, u)).real,
                      np.vdot(psi, phi).real)


def test_clifford_mul_matches_symbol(grid8, rng):
    psi = random_spinor(rng, (8, 8))
    v = np.array([0.3, -1.2])
    direct = clifford_mul(v, psi)
    assert np.allclose(direct, 0.3 * clifford_mul(1, psi) - 1.2 * clifford_mul(2, psi))


def test_heat_propagation(grid8):
    X1, X2 = grid8.mesh
    f = np.cos(X1) + 2 * np.sin(2 * X2)
    out = heat_propagate(f, 0.1, grid8)
    assert np.isrealobj(out)
    assert np.allclose(out, np.exp(-0.1) * np.cos(X1) + 2 * np.exp(-0.4) * np.sin(2 * X2))
    assert np.array_equal(heat_propagate(f, 0.0, grid8), f)
    with pytest.raises(ValueError):
        heat_propagate(f, -1.0, grid8)


def test_heat_semigroup_on_spinors():
    g = make_grid(8, (0.5, 0.5))
    psi = random_spinor(np.random.default_rng(3), (8, 8))
    a = heat_propagate(heat_propagate(psi, 0.1, g, spinor=True), 0.2, g, spinor=True)
    b = heat_propagate(psi, 0.3, g, spinor=True)
    assert np.allclose(a, b, atol=1e-13)
    # contraction in L2
    assert l2_norm(b, g) < l2_norm(psi, g)


def test_gradient_and_laplacian(grid8):
    X1, X2 = grid8.mesh
    f = np.sin(X1) * np.cos(2 * X2)
    grad = gradient(f, grid8)
    assert np.allclose(grad[..., 0], np.cos(X1) * np.cos(2 * X2))
    assert np.allclose(grad[..., 1], -2 * np.sin(X1) * np.sin(2 * X2))
    assert np.allclose(laplacian(f, grid8), -5 * f)


def test_flat_dirac_squares_to_minus_laplacian(grid16):
    X1, X2 = grid16.mesh
    psi = np.stack([np.cos(X1) + 1j * np.sin(2 * X2), np.sin(X1 + X2) + 0j], axis=-1)
    lap = np.stack([laplacian(psi[..., s].real, grid16) + 1j * laplacian(psi[..., s].imag, grid16)
                    for s in range(2)], axis=-1)
    assert np.allclose(flat_dirac(flat_dirac(psi, grid16), grid16), -lap, atol=1e-12)


def test_inner_products(grid8, rng):
    a = random_spinor(rng, (8, 8))
    b = random_spinor(rng, (8, 8))
    assert np.isclose(l2_inner(a, b, grid8), grid8.cell_measure * np.vdot(a, b).real)
    assert real_inner(a, b).shape == (8, 8)
    assert np.isclose(l2_norm(a, grid8) ** 2, l2_inner(a, a, grid8))


def test_field_shape_mismatch(grid8):
    with pytest.raises(GridError):
        flat_dirac(np.zeros((16, 16, 2), complex), grid8)


@pytest.mark.parametrize("kind,shape", [("map", (8, 8, 3)), ("spinor", (8, 8, 4, 2))])
def test_snapshot_round_trip(tmp_path, rng, kind, shape):
    g = make_grid(8, (0.5, 0))
    field = rng.standard_normal(shape)
    if kind == "spinor":
        field = field + 1j * rng.standard_normal(shape)
    path = tmp_path / f"{kind}.csv"
    write_snapshot(path, field, g, kind)
    header = path.read_text().splitlines()[0]
    assert header == f"grid n=8 delta=1/2,0 kind={kind} q={shape[2]}"
    g2, kind2, back = read_snapshot(path)
    assert g2 == g and kind2 == kind
    assert np.array_equal(back, field)


def test_snapshot_rejects_bad_input(tmp_path, grid8):
    with pytest.raises(GridError):
        format_snapshot(np.zeros((8, 8, 3), complex), grid8, "map")
    bad = tmp_path / "bad.csv"
    bad.write_text("grid n=8 delta=0,0 kind=map q=3\n1,2,3\n")
    with pytest.raises(GridError):
        read_snapshot(bad)
