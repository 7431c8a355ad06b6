"""Flat spin 2-torus: grids, spinor fields, Clifford data and Fourier multipliers.

Field layouts (grid axes always first, row-major ``x1, x2``):

* scalar field   ``(n, n)`` real
* map field      ``(n, n, q)`` real
* spinor field   ``(n, n, 2)`` complex
* twisted field  ``(n, n, q, 2)`` complex, one spinor per ambient index

Spinor fields store the actual section values at grid points.  For an
antiperiodic direction the stored samples carry the twist, i.e. a single
Fourier mode reads ``a * exp(i (k + delta) . x)``; Fourier multipliers
remove the twist phase, act on the integer band and put the phase back.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property, lru_cache

import numpy as np

from .errors import GridError

__all__ = [
    "SpinTorusGrid", "CliffordBasis", "CLIFFORD", "make_grid",
    "flat_dirac", "flat_dirac_matrix", "heat_propagate", "gradient", "laplacian",
    "clifford_mul", "quaternion_act", "real_inner", "l2_inner", "l2_norm",
    "mean", "plane_wave", "write_snapshot", "read_snapshot", "format_snapshot",
]

_ALLOWED_SHIFTS = (Fraction(0), Fraction(1, 2))


def _as_shift(value):
    frac = Fraction(value).limit_denominator(4)
    if frac not in _ALLOWED_SHIFTS or abs(float(frac) - float(value)) > 1e-12:
        raise GridError(f"spin structure entries must be 0 or 1/2, got {value!r}")
    return frac


@dataclass(frozen=True)
class SpinTorusGrid:
    """Uniform ``n x n`` collocation grid on a flat torus with a spin structure.

    ``spin_structure`` holds the mode shift per axis (0 periodic, 1/2
    antiperiodic).  The square torus has side ``side`` on both axes.
    """

    n: int
    spin_structure: tuple = (Fraction(0), Fraction(0))
    side: float = 2 * np.pi

    def __post_init__(self):
        if int(self.n) != self.n or self.n % 2 or self.n < 8:
            raise GridError(f"n must be an even integer >= 8, got {self.n!r}")
        if len(self.spin_structure) != 2:
            raise GridError("spin structure needs exactly two entries")
        if not self.side > 0:
            raise GridError("side length must be positive")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "spin_structure",
                           tuple(_as_shift(d) for d in self.spin_structure))
        object.__setattr__(self, "side", float(self.side))

    @property
    def delta(self):
        return np.array([float(d) for d in self.spin_structure])

    @property
    def spacing(self):
        return self.side / self.n

    @property
    def cell_measure(self):
        return self.spacing ** 2

    @property
    def volume(self):
        return self.side ** 2

    @property
    def kappa(self):
        """Fundamental wavenumber ``2 pi / side``."""
        return 2 * np.pi / self.side

    @cached_property
    def coords(self):
        return np.arange(self.n) * self.spacing

    @cached_property
    def mesh(self):
        """Pair ``(X1, X2)`` of ``(n, n)`` coordinate arrays (``indexing='ij'``)."""
        return np.meshgrid(self.coords, self.coords, indexing="ij")

    @cached_property
    def band(self):
        """Integer modes in FFT order; the band is ``[-n/2, n/2)``."""
        return np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(int)

    def wavenumbers(self, spinor=True):
        """Per-axis physical wavenumbers ``kappa (k + delta)`` in FFT order."""
        shift = self.delta if spinor else np.zeros(2)
        return tuple(self.kappa * (self.band + shift[a]) for a in range(2))

    def mode_grid(self, spinor=True):
        w1, w2 = self.wavenumbers(spinor)
        return np.meshgrid(w1, w2, indexing="ij")

    @cached_property
    def twist(self):
        """``exp(i delta . kappa x)`` sampled on the grid, shape ``(n, n)``."""
        X1, X2 = self.mesh
        d1, d2 = self.delta
        return np.exp(1j * self.kappa * (d1 * X1 + d2 * X2))

    def check_field(self, values, tail_ndim=None):
        values = np.asarray(values)
        if values.shape[:2] != (self.n, self.n):
            raise GridError(
                f"field shape {values.shape} does not match grid n={self.n}")
        if tail_ndim is not None and values.ndim != 2 + tail_ndim:
            raise GridError(f"expected {tail_ndim} trailing axes, got shape {values.shape}")
        return values


def make_grid(n, spin_structure=(0, 0), side=2 * np.pi):
    return SpinTorusGrid(n, tuple(spin_structure), side)


class CliffordBasis:
    """Clifford multiplication ``c_a = i * Pauli_a`` and quaternionic structure
    ``j(v) = Pauli_2 conj(v)`` on C^2."""

    pauli = (
        np.array([[0, 1], [1, 0]], dtype=complex),
        np.array([[0, -1j], [1j, 0]], dtype=complex),
        np.array([[1, 0], [0, -1]], dtype=complex),
    )

    def __init__(self):
        self.c = np.array([1j * self.pauli[0], 1j * self.pauli[1]])

    @property
    def c1(self):
        return self.c[0]

    @property
    def c2(self):
        return self.c[1]

    def j(self, v):
        """Antilinear quaternionic structure on the trailing spinor axis."""
        v = np.asarray(v)
        return np.einsum("st,...t->...s", self.pauli[1], np.conj(v))

    def symbol(self, xi1, xi2):
        """Symbol ``i (xi1 c1 + xi2 c2)`` of the flat Dirac operator, shape ``(..., 2, 2)``."""
        xi1 = np.asarray(xi1)[..., None, None]
        xi2 = np.asarray(xi2)[..., None, None]
        return 1j * (xi1 * self.c[0] + xi2 * self.c[1])


CLIFFORD = CliffordBasis()


def _apply_multiplier(values, grid, multiplier, spinor):
    """Apply a diagonal Fourier multiplier ``(n, n)`` or a matrix symbol
    ``(n, n, 2, 2)`` acting on the spinor axis."""
    values = np.asarray(values)
    if spinor:
        twist = grid.twist.reshape(grid.twist.shape + (1,) * (values.ndim - 2))
        hat = np.fft.fft2(values * np.conj(twist), axes=(0, 1))
    else:
        hat = np.fft.fft2(values, axes=(0, 1))
    if multiplier.ndim == 4:
        flat = hat.reshape(grid.n, grid.n, -1, 2)
        hat = np.einsum("xyst,xymt->xyms", multiplier, flat).reshape(hat.shape)
    else:
        hat = hat * multiplier.reshape(multiplier.shape + (1,) * (values.ndim - 2))
    out = np.fft.ifft2(hat, axes=(0, 1))
    if spinor:
        return out * twist
    return out


def flat_dirac(psi, grid):
    """Flat Dirac operator ``c1 d_1 + c2 d_2`` on shifted modes.

    Accepts any complex array with grid axes first and the spinor axis last,
    so twisted fields are differentiated component-wise.
    """
    psi = grid.check_field(psi)
    if psi.shape[-1] != 2:
        raise GridError("last axis must be the rank-2 spinor axis")
    XI1, XI2 = grid.mode_grid(spinor=True)
    return _apply_multiplier(psi, grid, CLIFFORD.symbol(XI1, XI2), spinor=True)


@lru_cache(maxsize=16)
def flat_dirac_matrix(grid):
    """Dense matrix of :func:`flat_dirac` on ``C^(n*n*2)`` (row-major flattening)."""
    dim = grid.n * grid.n * 2
    basis = np.eye(dim, dtype=complex).reshape(grid.n, grid.n, 2, dim)
    cols = flat_dirac(np.moveaxis(basis, 3, 2), grid)  # (n, n, dim, 2)
    mat = np.moveaxis(cols, 2, 3).reshape(dim, dim)
    mat.setflags(write=False)
    return mat


def heat_propagate(field, t, grid, spinor=False):
    """Multiply mode ``k`` by ``exp(-|k|^2 t)``.

    Map and scalar fields use integer modes and stay real; spinor (and
    twisted) fields use the shifted modes of the spin structure.
    """
    if t < 0:
        raise ValueError("heat propagation time must be nonnegative")
    field = grid.check_field(field)
    if t == 0:
        return field.copy()
    K1, K2 = grid.mode_grid(spinor=spinor)
    out = _apply_multiplier(field, grid, np.exp(-(K1 ** 2 + K2 ** 2) * t), spinor)
    if not spinor and np.isrealobj(field):
        return out.real
    return out


def gradient(field, grid):
    """Spectral gradient of a real periodic field, derivative axis appended last.

    The Nyquist mode gets zero derivative so real input stays real.
    """
    field = grid.check_field(field)
    w = grid.band.astype(float)
    w[grid.n // 2] = 0.0
    w = grid.kappa * w
    K1, K2 = np.meshgrid(w, w, indexing="ij")
    hat = np.fft.fft2(field, axes=(0, 1))
    shape = K1.shape + (1,) * (field.ndim - 2)
    d1 = np.fft.ifft2(1j * K1.reshape(shape) * hat, axes=(0, 1)).real
    d2 = np.fft.ifft2(1j * K2.reshape(shape) * hat, axes=(0, 1)).real
    return np.stack([d1, d2], axis=-1)


def laplacian(field, grid):
    field = grid.check_field(field)
    K1, K2 = grid.mode_grid(spinor=False)
    return _apply_multiplier(field, grid, -(K1 ** 2 + K2 ** 2), spinor=False).real


def clifford_mul(direction, psi):
    """Pointwise Clifford multiplication by ``v1 e_1 + v2 e_2``.

    ``direction`` is 1 or 2 (a unit frame vector), a constant 2-vector, or a
    field of 2-vectors broadcastable against ``psi`` without its spinor axis.
    """
    if isinstance(direction, (int, np.integer)):
        if direction not in (1, 2):
            raise ValueError("frame index must be 1 or 2")
        return np.einsum("st,...t->...s", CLIFFORD.c[direction - 1], psi)
    v = np.asarray(direction, dtype=float)
    mat = v[..., 0, None, None] * CLIFFORD.c[0] + v[..., 1, None, None] * CLIFFORD.c[1]
    return np.einsum("...st,...t->...s", mat, psi)


def _quaternion(h):
    h = np.asarray(h, dtype=float).reshape(-1)
    if h.shape != (4,):
        raise ValueError("quaternion must have four real components (1, i, j, ij)")
    return h


def quaternion_act(psi, h):
    """Right action ``psi * h`` of ``h = a + b i + c j + d ij`` on spinor values.

    Uses ``psi i = i psi`` and ``psi j = j(psi)``; for twisted fields only the
    spinor factor is touched.
    """
    a, b, c, d = _quaternion(h)
    psi = np.asarray(psi)
    return (a + 1j * b) * psi + (c - 1j * d) * CLIFFORD.j(psi)


def real_inner(psi1, psi2):
    """Pointwise real part of the hermitian pairing, summed over non-grid axes."""
    prod = np.real(np.conj(psi1) * psi2)
    return prod.reshape(prod.shape[0], prod.shape[1], -1).sum(axis=2)


def l2_inner(psi1, psi2, grid):
    return grid.cell_measure * float(real_inner(psi1, psi2).sum())


def l2_norm(psi, grid):
    return float(np.sqrt(grid.cell_measure * np.sum(np.abs(psi) ** 2)))


def mean(field, grid):
    """Volume average over the torus (per trailing component)."""
    return np.asarray(field).mean(axis=(0, 1))


def plane_wave(grid, k, spinor_value):
    """Spinor field ``v exp(i (k + delta) . kappa x)`` for an integer mode ``k``."""
    X1, X2 = grid.mesh
    d1, d2 = grid.delta
    phase = np.exp(1j * grid.kappa * ((k[0] + d1) * X1 + (k[1] + d2) * X2))
    return phase[..., None] * np.asarray(spinor_value, dtype=complex)


def format_snapshot(field, grid, kind):
    """Text form of a field: a ``grid ...`` header, then one CSV row per grid
    point (row-major).  ``kind='map'`` writes ``q`` real columns;
    ``kind='spinor'`` writes ``re,im`` column pairs for each of the ``2q``
    complex entries (ambient index major, spinor index minor)."""
    field = grid.check_field(field)
    if kind == "map":
        if field.ndim != 3 or np.iscomplexobj(field):
            raise GridError("map snapshots need a real (n, n, q) field")
        q = field.shape[2]
        rows = field.reshape(-1, q)
    elif kind == "spinor":
        if field.ndim != 4 or field.shape[3] != 2:
            raise GridError("spinor snapshots need a (n, n, q, 2) field")
        q = field.shape[2]
        flat = np.asarray(field, dtype=complex).reshape(-1, 2 * q)
        rows = np.stack([flat.real, flat.imag], axis=-1).reshape(flat.shape[0], -1)
    else:
        raise ValueError(f"kind must be 'map' or 'spinor', got {kind!r}")
    d1, d2 = (str(d) for d in grid.spin_structure)
    lines = [f"grid n={grid.n} delta={d1},{d2} kind={kind} q={q}"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_snapshot(path, field, grid, kind):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_snapshot(field, grid, kind))


def read_snapshot(path, side=2 * np.pi):
    """Inverse of :func:`write_snapshot`; returns ``(grid, kind, field)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != "grid":
            raise GridError(f"{path}: missing 'grid' header line")
        meta = dict(item.split("=", 1) for item in header[1:])
        try:
            n, q, kind = int(meta["n"]), int(meta["q"]), meta["kind"]
            delta = tuple(Fraction(d) for d in meta["delta"].split(","))
        except (KeyError, ValueError) as exc:
            raise GridError(f"{path}: malformed header: {exc}") from exc
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    grid = SpinTorusGrid(n, delta, side)
    if kind == "map":
        expect = q
    elif kind == "spinor":
        expect = 4 * q
    else:
        raise GridError(f"{path}: unknown kind {kind!r}")
    if data.shape != (n * n, expect):
        raise GridError(f"{path}: expected {n * n} rows of {expect} values, got {data.shape}")
    if kind == "map":
        return grid, kind, data.reshape(n, n, q)
    pairs = data.reshape(n * n, 2 * q, 2)
    return grid, kind, (pairs[..., 0] + 1j * pairs[..., 1]).reshape(n, n, q, 2)
