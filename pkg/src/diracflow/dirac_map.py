"""Dirac operator along a map, its near-zero spectrum and the kernel spinor.

A twisted spinor ``psi`` along a map ``u`` is stored ambiently as an
``(n, n, q, 2)`` array, one rank-2 spinor per coordinate of R^q, and is
tangent when ``P(pi(u)) psi = psi`` pointwise.  The discrete operator is
``D^u = P D_flat P`` with ``P`` the tangential projector at ``pi(u)``.  For
eigen- and resolvent solves it is restricted to the tangent subspace through
a pointwise orthonormal frame ``B`` of ``T_{pi(u)} N``; the coordinates of a
tangent field are the ``(n, n, dim N, 2)`` array ``B^T psi``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, ArpackNoConvergence, eigsh, gmres

from .errors import (BeyondInjectivity, ContourTouchesSpectrum, EmptyKernel,
                     GridError, KernelCollapsed, SolverNoConvergence)
from .torus_spin import flat_dirac, flat_dirac_matrix

__all__ = [
    "SpectralData", "tangent_projectors", "project_tangent", "dirac_along_map",
    "tangent_frame_field", "to_coords", "from_coords", "twisted_matrix",
    "kernel_threshold", "spectrum_near_zero", "kernel_project_eig",
    "kernel_project_contour", "transported_seed", "spinor_solve",
    "operator_drift", "gap_monitor", "twisted_inner", "twisted_norm",
    "COLLAPSE_THRESHOLD",
]

COLLAPSE_THRESHOLD = 0.1


@dataclass
class SpectralData:
    """Eigenvalues of ``D^u`` in a window around zero plus the near-zero cluster.

    ``kernel_basis`` has shape ``(k, n, n, q, 2)`` and is orthonormal for the
    L^2 hermitian product; ``vectors`` holds every computed eigenvector in the
    same layout, aligned with ``eigenvalues``.
    """

    eigenvalues: np.ndarray
    kernel_dim_complex: int
    gap: float
    threshold: float
    kernel_basis: np.ndarray
    vectors: np.ndarray = field(repr=False, default=None)
    window: float = None

    @property
    def kernel_dim_quaternionic(self):
        return self.kernel_dim_complex // 2

    @property
    def index_parity(self):
        return self.kernel_dim_quaternionic % 2


def twisted_inner(psi1, psi2, grid):
    """Complex L^2 product ``sum conj(psi1) psi2 dV``."""
    return grid.cell_measure * np.vdot(psi1, psi2)


def twisted_norm(psi, grid):
    return float(np.sqrt(grid.cell_measure) * np.linalg.norm(psi))


def tangent_projectors(target, u):
    """Projected map ``pi(u)`` and the tangential projectors there."""
    pu = target.project(u)
    return pu, target.tangent_projector(pu)


def project_tangent(P, psi):
    return np.einsum("xyab,xybs->xyas", P, psi)


def dirac_along_map(grid, target, u, psi, projectors=None):
    """``D^u psi = P D_flat (P psi)`` with ``P`` the tangent projector at ``pi(u)``."""
    u = grid.check_field(u, tail_ndim=1)
    psi = grid.check_field(psi, tail_ndim=2)
    if psi.shape[2] != u.shape[2] or u.shape[2] != target.q:
        raise GridError("ambient dimension mismatch between map, spinor and target")
    P = tangent_projectors(target, u)[1] if projectors is None else projectors
    return project_tangent(P, flat_dirac(project_tangent(P, psi), grid))


def tangent_frame_field(target, u):
    """Orthonormal tangent frame at ``pi(u)``, shape ``(n, n, q, dim)``."""
    return target.tangent_frame(target.project(u))


def to_coords(B, psi):
    return np.einsum("xyAa,xyAs->xyas", B, psi)


def from_coords(B, coords):
    return np.einsum("xyAa,xyas->xyAs", B, coords)


def twisted_matrix(grid, target, u, frame=None):
    """Dense Hermitian matrix of ``D^u`` on frame coordinates.

    Entry ``[(x,a,s), (y,b,t)] = Dflat[(x,s), (y,t)] * <B_a(x), B_b(y)>``.
    Returns ``(matrix, frame)``.
    """
    B = tangent_frame_field(target, u) if frame is None else frame
    n, d = grid.n, B.shape[-1]
    npts = n * n
    Df = flat_dirac_matrix(grid).reshape(npts, 2, npts, 2)
    Bf = B.reshape(npts, target.q, d)
    G = np.einsum("xAa,yAb->xayb", Bf, Bf)
    M = np.einsum("xsyt,xayb->xasybt", Df, G).reshape(npts * d * 2, npts * d * 2)
    return M, B


def kernel_threshold(gap_initial):
    """Eigenvalues below this magnitude count as kernel."""
    return max(1e-8, 1e-3 * gap_initial)


def _auto_threshold(abs_vals):
    # initial data: the gap opens at the largest relative jump of the sorted
    # |lambda| (values below 1e-8 count as 1e-8), so a slightly split kernel
    # cluster is still recognised
    a = np.sort(abs_vals)
    if a.size == 0 or a[-1] <= 1e-8:
        return 1e-8
    lower = np.maximum(np.concatenate([[0.0], a[:-1]]), 1e-8)
    i = int(np.argmax(a / lower))
    return kernel_threshold(float(a[i]))


def _eig_dense(M, window, count):
    dim = M.shape[0]
    w = window
    while True:
        vals, vecs = scipy.linalg.eigh(M, subset_by_value=(-w, w), driver="evr")
        if vals.size >= min(count, dim) and np.any(np.abs(vals) > 0) or w > 1e6:
            return vals, vecs, w
        w *= 2.0


def _eig_shift_invert(M, count, tol=1e-10):
    """Eigenpairs nearest to a small negative shift via ARPACK on an LU-factored
    shift.  Returns ``(vals, vecs, complete_radius)``: every eigenvalue with
    ``|lambda| < complete_radius`` is among ``vals``."""
    dim = M.shape[0]
    sigma = -1e-6 * max(1.0, float(np.abs(M).max()))
    lu = scipy.linalg.lu_factor(M - sigma * np.eye(dim), check_finite=False)
    op_inv = LinearOperator(M.shape, dtype=complex,
                            matvec=lambda x: scipy.linalg.lu_solve(lu, x, check_finite=False))
    k = min(count, dim - 2)
    # fixed start vector keeps repeated runs bit-identical
    rng = np.random.default_rng(dim)
    v0 = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    try:
        vals, vecs = eigsh(M, k=k, sigma=sigma, OPinv=op_inv, which="LM",
                           ncv=min(dim - 1, max(6 * k, 60)), tol=tol, v0=v0)
    except ArpackNoConvergence as exc:
        raise SolverNoConvergence(f"shift-invert eigensolve did not converge: {exc}") from exc
    # ARPACK vectors inside a degenerate cluster need not be orthogonal
    Q, _ = np.linalg.qr(vecs)
    vals, W = np.linalg.eigh(Q.conj().T @ M @ Q)
    vecs = Q @ W
    resid = float(np.linalg.norm(M @ vecs - vecs * vals, axis=0).max())
    if resid > 1e-6:
        raise SolverNoConvergence("eigenpair residual too large", residual=resid)
    return vals, vecs, float(np.abs(vals).max()) - 2 * abs(sigma)


def spectrum_near_zero(grid, target, u, count=8, window=None, threshold=None,
                       method="auto"):
    """Eigenvalues of ``D^u`` (restricted to tangent fields) near zero.

    ``window`` bounds ``|lambda|``; it is widened until at least ``count``
    eigenvalues, including a nonzero one, are found.  ``threshold`` separates
    the kernel cluster from the gap; by default it is derived from the
    smallest eigenvalue that is not numerically zero.  ``method`` is
    ``"dense"`` (subset Hermitian eigensolve), ``"shift_invert"`` (ARPACK
    around zero, returns only the window it resolves completely) or
    ``"auto"`` (dense up to dimension 600).
    """
    if count < 2:
        raise ValueError("count must be at least 2")
    M, B = twisted_matrix(grid, target, u)
    if window is None:
        window = 2.0 * grid.kappa
    if method == "auto":
        method = "dense" if M.shape[0] <= 600 else "shift_invert"
    if method == "dense":
        vals, vecs, window = _eig_dense(M, window, count)
        absv = np.abs(vals)
        if threshold is None:
            threshold = _auto_threshold(absv)
        gap_vals = absv[absv >= threshold]
    elif method == "shift_invert":
        k = max(count, 8)
        while True:
            vals, vecs, complete = _eig_shift_invert(M, k)
            absv = np.abs(vals)
            thr = _auto_threshold(absv) if threshold is None else threshold
            gap_vals = absv[absv >= thr]
            if gap_vals.size or k >= M.shape[0] - 2:
                break
            k *= 2
        threshold = thr
        # the nearest-to-zero nonkernel value is exact even if its cluster is cut
        keep = absv < complete
        vals, vecs = vals[keep], vecs[:, keep]
        window = complete
        absv = absv[keep]
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    in_kernel = absv < threshold
    gap = float(gap_vals.min()) if gap_vals.size else float("inf")
    d = B.shape[-1]
    n = grid.n
    fields = np.einsum("xyAa,mxyas->mxyAs", B, vecs.T.reshape(-1, n, n, d, 2))
    fields /= np.sqrt(grid.cell_measure)
    return SpectralData(
        eigenvalues=vals,
        kernel_dim_complex=int(in_kernel.sum()),
        gap=gap,
        threshold=float(threshold),
        kernel_basis=fields[in_kernel],
        vectors=fields,
        window=float(window),
    )


def kernel_project_eig(grid, spectral, sigma):
    """Orthogonal projection of ``sigma`` onto the span of the kernel basis."""
    basis = spectral.kernel_basis
    if basis.shape[0] == 0:
        return np.zeros_like(sigma, dtype=complex)
    flat = basis.reshape(basis.shape[0], -1)
    coeffs = grid.cell_measure * (flat.conj() @ np.asarray(sigma).reshape(-1))
    return (coeffs @ flat).reshape(sigma.shape)


def kernel_project_contour(grid, target, u, sigma, Lambda, n_quad=32, spectral=None,
                           rtol=1e-9, matrix=None):
    """Riesz projection ``(1/2 pi i) \\oint (mu - D^u)^{-1} sigma dmu`` on ``|mu| = Lambda/2``.

    Trapezoidal rule on ``n_quad`` equispaced nodes; every node needs one
    GMRES solve on the tangent coordinates.  Supplying ``spectral`` enables
    the check that no eigenvalue sits on the contour.
    """
    if n_quad < 8:
        raise ValueError("n_quad must be at least 8")
    radius = Lambda / 2.0
    if spectral is not None:
        dist = np.abs(np.abs(spectral.eigenvalues) - radius)
        if dist.size and dist.min() < 1e-8 * max(radius, 1.0):
            raise ContourTouchesSpectrum(
                f"eigenvalue within {dist.min():.3g} of the contour radius {radius:.4g}")
    if matrix is None:
        M, B = twisted_matrix(grid, target, u)
    else:
        M, B = matrix
    dim = M.shape[0]
    b = to_coords(B, sigma).reshape(-1)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(sigma, dtype=complex)
    restart = min(dim, 400)
    maxiter = max(1, int(np.ceil(10 * dim / restart)))
    acc = np.zeros(dim, dtype=complex)
    for k in range(n_quad):
        mu = radius * np.exp(2j * np.pi * k / n_quad)
        op = LinearOperator((dim, dim), matvec=lambda x, mu=mu: mu * x - M @ x, dtype=complex)
        x, info = gmres(op, b, rtol=rtol, atol=0.0, restart=restart, maxiter=maxiter)
        resid = np.linalg.norm(mu * x - M @ x - b) / bnorm
        if info != 0 or resid > 10 * rtol:
            raise SolverNoConvergence(f"resolvent solve at mu={mu:.4g} failed", residual=resid)
        acc += mu * x
    acc /= n_quad
    n, d = grid.n, B.shape[-1]
    return from_coords(B, acc.reshape(n, n, d, 2))


def transported_seed(grid, target, u0, psi0, u):
    """Parallel-transport ``psi0`` (along ``pi(u0)``) pointwise onto ``pi(u)``.

    Only the ambient index is moved; spinor components are untouched.
    """
    p = target.project(u0)
    r = target.project(u)
    dist = target.distance(p, r)
    limit = target.injectivity_radius / 2
    if not np.all(dist < limit):
        idx = np.unravel_index(int(np.argmax(dist)), dist.shape)
        raise BeyondInjectivity(
            f"transport distance {dist[idx]:.4g} >= inj/2 = {limit:.4g} at grid point {idx}")
    T = target.transport_matrix(p, r)
    return np.einsum("xyab,xybs->xyas", T, psi0)


def spinor_solve(grid, target, u0, psi0, u, spectral, method="eig", n_quad=32,
                 collapse_threshold=COLLAPSE_THRESHOLD):
    """Normalised kernel spinor along ``u`` seeded by transporting ``psi0``.

    Returns ``(psi, sigma1_norm)`` where ``sigma1_norm`` is the L^2 norm of
    the kernel component of the transported seed.
    """
    if spectral.kernel_dim_complex < 2:
        raise EmptyKernel("no near-zero cluster to project onto")
    sigma = transported_seed(grid, target, u0, psi0, u)
    if method == "eig":
        proj = kernel_project_eig(grid, spectral, sigma)
    elif method == "contour":
        proj = kernel_project_contour(grid, target, u, sigma, spectral.gap,
                                      n_quad=n_quad, spectral=spectral)
    else:
        raise ValueError(f"unknown projection method {method!r}")
    s1 = twisted_norm(proj, grid)
    if s1 < collapse_threshold:
        raise KernelCollapsed(f"kernel component of the seed has norm {s1:.3g}")
    return proj / s1, s1


def operator_drift(grid, target, u, v, psi):
    """Evaluate ``(T^-1 D^u T - D^v) psi`` with ``T`` the transport ``pi(v) -> pi(u)``.

    Returns ``(sup_norm, ratio)`` with ``ratio = sup_norm / (|u - v|_C0 sup|psi|)``.
    """
    pv = target.project(v)
    pu = target.project(u)
    dist = target.distance(pv, pu)
    if not np.all(dist < target.injectivity_radius / 2):
        raise BeyondInjectivity("maps too far apart for pointwise transport")
    T = target.transport_matrix(pv, pu)
    Tinv = target.transport_matrix(pu, pv)
    moved = np.einsum("xyab,xybs->xyas", T, psi)
    back = np.einsum("xyab,xybs->xyas", Tinv, dirac_along_map(grid, target, u, moved))
    diff = back - dirac_along_map(grid, target, v, psi)
    sup = float(np.sqrt((np.abs(diff) ** 2).sum(axis=(2, 3))).max())
    c0 = float(np.linalg.norm(u - v, axis=-1).max())
    psi_sup = float(np.sqrt((np.abs(psi) ** 2).sum(axis=(2, 3))).max())
    if c0 == 0 or psi_sup == 0:
        return sup, 0.0
    return sup, sup / (c0 * psi_sup)


def gap_monitor(spectral_prev, spectral_now, initial_gap=None):
    """True while the quaternionic kernel dimension is unchanged and the gap
    stays above half its initial value."""
    lam0 = spectral_prev.gap if initial_gap is None else initial_gap
    return (spectral_now.kernel_dim_quaternionic == spectral_prev.kernel_dim_quaternionic
            and spectral_now.gap > lam0 / 2)
