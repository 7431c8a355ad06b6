"""Coupled map/spinor evolution in ambient form.

The map obeys ``du/dt = Lap u + F1(u) + F2(u, psi)`` and the spinor is
re-solved in the kernel of ``D^{pi(u)}`` after every map update.  Map
updates use exponential Euler on the Duhamel form, exactly as the discrete
fixed-point operator in :func:`picard_solve` does.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dirac_map import (COLLAPSE_THRESHOLD, dirac_along_map, gap_monitor, spectrum_near_zero,
                        spinor_solve, tangent_frame_field, to_coords, transported_seed,
                        twisted_norm)
from .errors import (BeyondInjectivity, FlowAborted, GapClosed, KernelCollapsed,
                     NoContraction, OutOfTube, SolverNoConvergence, ContourTouchesSpectrum)
from .torus_spin import CLIFFORD, gradient, heat_propagate, l2_inner, laplacian

log = logging.getLogger(__name__)

__all__ = [
    "FlowConfig", "Monitors", "FlowState", "PicardResult", "f1", "f2", "tension",
    "curvature_coupling", "curvature_coupling_direct", "residual_norm", "energy",
    "constraint_violation", "compute_monitors", "mild_update", "phi1", "initial_state", "step",
    "step_once", "integrate", "picard_solve", "xt_norm",
]

#: failures that trigger dt halving
REJECTABLE = (KernelCollapsed, BeyondInjectivity, OutOfTube, GapClosed,
              SolverNoConvergence, ContourTouchesSpectrum)


@dataclass(frozen=True)
class FlowConfig:
    dt: float
    horizon: float
    coupling: bool = True
    respawn_spinor: bool = True
    reproject_map: bool = True
    picard_mode: bool = False
    projection: str = "eig"
    n_quad: int = 32
    eig_count: int = 8
    eig_method: str = "auto"
    max_halvings: int = 8
    collapse_threshold: float = COLLAPSE_THRESHOLD

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon >= self.dt:
            raise ValueError("horizon must be at least dt")


@dataclass(frozen=True)
class Monitors:
    dirichlet: float
    spinor_term: float
    residual: float
    constraint_violation: float
    sigma1: float = math.nan
    gap_flag: bool = True


@dataclass(frozen=True)
class FlowState:
    t: float
    u: np.ndarray
    psi: np.ndarray
    spectral: object
    monitors: Monitors
    initial_gap: float = math.inf
    dt: float = math.nan
    extras: dict = field(default_factory=dict)


# --- source terms ----------------------------------------------------------

def f1(grid, target, u):
    """``F1^A = -pi^A_BC(u) <grad u^B, grad u^C>``."""
    du = gradient(u, grid)
    return -np.einsum("xyABC,xyBk,xyCk->xyA", target.d2project(u), du, du)


def _clifford_pairing(psi):
    """``W[D, F, k] = Re <psi^D, c_k psi^F>`` pointwise."""
    cpsi = np.einsum("kst,xyFt->xyFks", CLIFFORD.c, psi)
    return np.einsum("xyDs,xyFks->xyDFk", np.conj(psi), cpsi).real


def f2(grid, target, u, psi):
    """``F2^A = -pi^A_B pi^C_BD pi^C_EF (psi^D, grad u^E . psi^F)``."""
    du = gradient(u, grid)
    pi1 = target.dproject(u)
    pi2 = target.d2project(u)
    W = _clifford_pairing(psi)
    Y = np.einsum("xyCEF,xyEk->xyCFk", pi2, du)
    Z = np.einsum("xyCFk,xyDFk->xyCD", Y, W)
    V = np.einsum("xyCBD,xyCD->xyB", pi2, Z)
    return -np.einsum("xyAB,xyB->xyA", pi1, V)


def tension(grid, target, u):
    return laplacian(u, grid) + f1(grid, target, u)


def curvature_coupling(grid, target, u, psi):
    """``R(u, psi) = -F2(u, psi)``."""
    return -f2(grid, target, u, psi)


def curvature_coupling_direct(grid, target, u, psi):
    """``1/2 (psi^a, e_k . psi^b) R(E_a, E_b) du(e_k)`` in a tangent frame ``E``.

    Uses ``target.curvature`` only; a second route to :func:`curvature_coupling`.
    """
    p = target.project(u)
    B = tangent_frame_field(target, u)
    P = target.tangent_projector(p)
    du = np.einsum("xyAB,xyBk->xyAk", P, gradient(u, grid))
    coords = to_coords(B, psi)  # (n, n, d, 2)
    d = B.shape[-1]
    out = np.zeros(u.shape)
    for k in range(2):
        ck = np.einsum("st,xyat->xyas", CLIFFORD.c[k], coords)
        pair = np.einsum("xyas,xybs->xyab", np.conj(coords), ck).real
        for a in range(d):
            for b in range(d):
                R = target.curvature(p, B[..., a], B[..., b], du[..., k])
                out += 0.5 * pair[..., a, b, None] * R
    return out


def residual_norm(grid, target, u, psi=None):
    """L^2 norm of ``tension - R(u, psi)`` (``psi=None`` means zero spinor)."""
    r = tension(grid, target, u)
    if psi is not None:
        r = r - curvature_coupling(grid, target, u, psi)
    return float(np.sqrt(grid.cell_measure * np.sum(r ** 2)))


def energy(grid, target, u, psi=None):
    """``(1/2 int |du|^2, 1/2 int (psi, D^u psi))``."""
    du = gradient(u, grid)
    dirichlet = 0.5 * grid.cell_measure * float(np.sum(du ** 2))
    if psi is None:
        return dirichlet, 0.0
    spin = 0.5 * l2_inner(psi, dirac_along_map(grid, target, u, psi), grid)
    return dirichlet, spin


def constraint_violation(target, u):
    """``max_x |u(x) - pi(u(x))|``."""
    return float(np.max(target.distance_to(u)))


# --- time stepping ---------------------------------------------------------

def phi1(z):
    """``(e^{-z} - 1) / (-z)`` with value 1 at ``z = 0``."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z != 0
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    return out


def _propagators(grid, dt):
    K1, K2 = grid.mode_grid(spinor=False)
    k2 = K1 ** 2 + K2 ** 2
    return np.exp(-k2 * dt)[..., None], (dt * phi1(k2 * dt))[..., None]


def mild_update(grid, u, source, dt):
    """One exponential-Euler step ``e^{dt Lap} u + dt phi1(dt Lap) source``."""
    E, W = _propagators(grid, dt)
    hat = E * np.fft.fft2(u, axes=(0, 1)) + W * np.fft.fft2(source, axes=(0, 1))
    return np.fft.ifft2(hat, axes=(0, 1)).real


def compute_monitors(grid, target, u, psi, violation, sigma1, gap_flag):
    dirichlet, spin = energy(grid, target, u, psi)
    return Monitors(dirichlet, spin, residual_norm(grid, target, u, psi),
                    violation, sigma1, gap_flag)


def initial_state(grid, target, u0, psi0=None, spectral=None, config=None):
    """Wrap initial data.  ``psi0=None`` runs the uncoupled flow."""
    if psi0 is not None and spectral is None:
        spectral = spectrum_near_zero(grid, target, u0,
                                      count=config.eig_count if config else 8)
    gap = spectral.gap if spectral is not None else math.inf
    sigma1 = 1.0 if psi0 is not None else math.nan
    mon = compute_monitors(grid, target, u0, psi0, constraint_violation(target, u0), sigma1, True)
    return FlowState(0.0, np.array(u0, dtype=float), psi0, spectral, mon, initial_gap=gap)


def step_once(grid, target, state, config, dt):
    """Single attempt at a step of size ``dt``; raises on geometric failure."""
    coupled = config.coupling and state.psi is not None
    source = f1(grid, target, state.u)
    if coupled:
        source = source + f2(grid, target, state.u, state.psi)
    u_new = mild_update(grid, state.u, source, dt)
    violation = constraint_violation(target, u_new)
    target.check_tube(u_new)
    if config.reproject_map:
        u_new = target.project(u_new)

    spectral, psi, sigma1, flag = state.spectral, None, math.nan, True
    if coupled:
        if config.respawn_spinor:
            spectral = spectrum_near_zero(grid, target, u_new, count=config.eig_count,
                                          threshold=state.spectral.threshold,
                                          method=config.eig_method)
            flag = gap_monitor(state.spectral, spectral, state.initial_gap)
            if not flag:
                raise GapClosed(
                    f"dim_H ker {state.spectral.kernel_dim_quaternionic} -> "
                    f"{spectral.kernel_dim_quaternionic}, gap {spectral.gap:.4g}")
            psi, sigma1 = spinor_solve(grid, target, state.u, state.psi, u_new, spectral,
                                       method="contour" if config.projection == "contour" else "eig",
                                       n_quad=config.n_quad,
                                       collapse_threshold=config.collapse_threshold)
        else:
            sigma = transported_seed(grid, target, state.u, state.psi, u_new)
            psi = sigma / twisted_norm(sigma, grid)
    mon = compute_monitors(grid, target, u_new, psi, violation, sigma1, flag)
    return FlowState(state.t + dt, u_new, psi, spectral, mon,
                     initial_gap=state.initial_gap, dt=dt)


def step(grid, target, state, config):
    """Advance by ``config.dt`` (clipped to the horizon), halving on rejection.

    After ``config.max_halvings`` halvings the step is abandoned with
    :class:`FlowAborted`.
    """
    dt = config.dt
    remaining = config.horizon - state.t
    # clip only a genuinely short final step, not round-off in accumulated t
    if 0 < remaining < dt * (1 - 1e-9):
        dt = remaining
    last = None
    for attempt in range(config.max_halvings + 1):
        try:
            return step_once(grid, target, state, config, dt)
        except REJECTABLE as exc:
            last = exc
            log.info("step at t=%.6g rejected (dt=%.3g): %s", state.t, dt, exc)
            dt /= 2
    raise FlowAborted(f"step at t={state.t:.6g} rejected {config.max_halvings + 1} times; "
                      f"last reason: {type(last).__name__}: {last}") from last


def integrate(grid, target, state, config, callback=None):
    """Step until the horizon; returns the list of accepted states (initial included)."""
    states = [state]
    eps = 1e-9 * config.dt
    while state.t < config.horizon - eps:
        state = step(grid, target, state, config)
        states.append(state)
        if callback is not None:
            callback(state)
    return states


# --- Picard iteration --------------------------------------------------------

def xt_norm(grid, traj):
    """``max_A sup_t (|u^A|_C0 + |grad u^A|_C0)`` for a trajectory ``(K, n, n, q)``."""
    traj = np.asarray(traj)
    c0 = np.abs(traj).max(axis=(1, 2))  # (K, q)
    grads = np.stack([gradient(u, grid) for u in traj])  # (K, n, n, q, 2)
    c1 = np.sqrt((grads ** 2).sum(axis=-1)).max(axis=(1, 2))
    return float((c0 + c1).max())


@dataclass
class PicardResult:
    times: np.ndarray
    trajectory: np.ndarray
    ratios: list
    distances: list
    converged: bool


def picard_solve(grid, target, u0, psi0, spectral0, config, max_iter=40, tol=1e-11):
    """Iterate the discrete fixed-point operator on whole trajectories.

    ``(L U)_k = e^{t_k Lap} u0 + sum_{j<k} e^{(k-1-j) dt Lap} dt phi1(dt Lap) S_j``
    with ``S_j = F1(U_j) + F2(U_j, psi(U_j))`` and ``psi(U_j)`` obtained by
    transporting ``psi0`` from ``u0`` and projecting onto the kernel along
    ``pi(U_j)``.  The first iterate is ``U_k = e^{t_k Lap} u0``.
    """
    K = int(round(config.horizon / config.dt))
    dt = config.dt
    times = dt * np.arange(K + 1)
    v0 = np.stack([heat_propagate(u0, t, grid) for t in times])
    E, W = _propagators(grid, dt)
    coupled = config.coupling and psi0 is not None
    U = v0.copy()
    ratios, dists = [], []
    bad = 0
    for it in range(max_iter):
        acc = np.zeros(u0.shape, dtype=complex)
        new = np.empty_like(U)
        new[0] = v0[0]
        for k in range(K):
            S = f1(grid, target, U[k])
            if coupled:
                spect = spectrum_near_zero(grid, target, U[k], count=config.eig_count,
                                          threshold=spectral0.threshold,
                                          method=config.eig_method)
                psi, _ = spinor_solve(grid, target, u0, psi0, U[k], spect,
                                      collapse_threshold=config.collapse_threshold)
                S = S + f2(grid, target, U[k], psi)
            acc = E * acc + W * np.fft.fft2(S, axes=(0, 1))
            new[k + 1] = v0[k + 1] + np.fft.ifft2(acc, axes=(0, 1)).real
        d = xt_norm(grid, new - U)
        if dists:
            ratio = d / dists[-1] if dists[-1] > 0 else 0.0
            ratios.append(ratio)
            bad = bad + 1 if ratio > 1 else 0
            if bad >= 3:
                raise NoContraction(f"iterate distances grew three times in a row: {ratios[-3:]}")
        dists.append(d)
        U = new
        log.info("picard iteration %d: distance %.3e", it, d)
        if d <= tol:
            return PicardResult(times, U, ratios, dists, True)
    return PicardResult(times, U, ratios, dists, False)
