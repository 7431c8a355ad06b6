import numpy as np
import pytest

from diracflow.target import CliffordTorus, Sphere
from diracflow.torus_spin import CLIFFORD, make_grid


def perturbed_sphere_map(grid, a=0.05):
    """Small smooth perturbation of the north-pole constant map.

    This family keeps the kernel of the twisted operator at complex
    dimension 4 for small ``a``.
    """
    X1, X2 = grid.mesh
    k = grid.kappa
    w = np.stack([a * np.cos(k * X1),
                  a * np.sin(k * X2) + 0.5 * a * np.cos(k * (X1 + X2)),
                  np.ones_like(X1)], axis=-1)
    return Sphere().project(w)


def smooth_torus_map(grid, b=0.3):
    X1, X2 = grid.mesh
    th = X2 + b * np.sin(X1)
    return np.stack([np.cos(X1), np.sin(X1), np.cos(th), np.sin(th)], axis=-1)


def random_spinor(rng, shape):
    return rng.standard_normal(shape + (2,)) + 1j * rng.standard_normal(shape + (2,))


def dft_dirac_matrix(n, delta):
    """Flat Dirac matrix from an explicit sum over the mode band.

    Entry ``[(x, s), (y, t)] = (1/N) sum_k e^{i(k+d).(x-y)} (i (k+d).c)[s, t]``.
    """
    band = np.concatenate([np.arange(0, n // 2), np.arange(-n // 2, 0)])
    xs = 2 * np.pi * np.arange(n) / n
    pts = np.array([(a, b) for a in xs for b in xs])
    N = n * n
    out = np.zeros((N, 2, N, 2), dtype=complex)
    for k1 in band:
        for k2 in band:
            xi = np.array([k1 + delta[0], k2 + delta[1]])
            sym = 1j * (xi[0] * CLIFFORD.c1 + xi[1] * CLIFFORD.c2)
            e = np.exp(1j * pts @ xi)
            out += np.einsum("x,y,st->xsyt", e, np.conj(e), sym) / N
    return out.reshape(2 * N, 2 * N)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sphere():
    return Sphere()


@pytest.fixture(scope="session")
def torus():
    return CliffordTorus()


@pytest.fixture(scope="session")
def grid8():
    return make_grid(8)


@pytest.fixture(scope="session")
def grid16():
    return make_grid(16)
