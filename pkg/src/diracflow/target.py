"""Embedded targets N in R^q: nearest-point projection, geodesics, transport, curvature.

All geometric maps are vectorised over leading axes: points have shape
``(..., q)``, projector derivatives ``(..., q, q)`` and ``(..., q, q, q)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BeyondInjectivity, GeometryError, NonTangentInput, OutOfTube

__all__ = [
    "TargetManifold", "Sphere", "CliffordTorus", "ConstantsLedger", "get_target",
    "distance_compare", "holonomy_triangle", "TARGETS",
]

TANGENT_TOL = 1e-8


def _norm(v):
    return np.linalg.norm(v, axis=-1)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


class TargetManifold:
    """Base class for a closed submanifold of R^q with a tubular neighbourhood.

    Subclasses supply closed forms for ``distance_to``, ``project``,
    ``dproject``, ``d2project``, ``exp_map``, ``log_map`` and
    ``transport_matrix``.  Curvature and an ODE-based transport are derived
    here from the projector derivatives and serve as independent routes.
    """

    name = "target"
    q = None
    dim = None
    injectivity_radius = None
    weingarten_bound = None
    tube_radius = None

    # --- projection ---------------------------------------------------------
    def distance_to(self, z):
        raise NotImplementedError

    def check_tube(self, z):
        d = np.atleast_1d(self.distance_to(z))
        if not np.all(d < self.tube_radius):
            worst = float(np.nanmax(d))
            raise OutOfTube(
                f"{self.name}: point at distance {worst:.4g} from N, tube radius {self.tube_radius}")

    def project(self, z, check=True):
        raise NotImplementedError

    def dproject(self, z, check=True):
        raise NotImplementedError

    def d2project(self, z, check=True):
        raise NotImplementedError

    def tangent_projector(self, p):
        """Orthogonal projector onto ``T_p N`` for points on N."""
        return self.dproject(p, check=False)

    def tangent_frame(self, p):
        """Orthonormal basis of ``T_p N`` as columns, shape ``(..., q, dim)``."""
        _, vecs = np.linalg.eigh(self.tangent_projector(p))
        return vecs[..., :, self.q - self.dim:]

    def check_tangent(self, p, Z):
        P = self.tangent_projector(p)
        resid = _norm(Z - np.einsum("...ab,...b->...a", P, Z))
        if np.any(resid > TANGENT_TOL * np.maximum(1.0, _norm(Z))):
            raise NonTangentInput(f"{self.name}: vector is not tangent (normal part {np.max(resid):.3g})")

    def second_fundamental_form(self, p, X, Y):
        """``II(X, Y)^A = pi^A_BC X^B Y^C`` at points on N."""
        return np.einsum("...abc,...b,...c->...a", self.d2project(p, check=False), X, Y)

    # --- geodesics ----------------------------------------------------------
    def exp_map(self, p, v):
        raise NotImplementedError

    def geodesic(self, p, v, t):
        """Point and velocity of ``s -> exp_p(s v)`` at ``s = t``."""
        raise NotImplementedError

    def log_map(self, p, r):
        raise NotImplementedError

    def distance(self, p, r):
        return _norm(self.log_map(p, r))

    def _check_injectivity(self, dist, label="points"):
        dist = np.atleast_1d(dist)
        if np.any(~(dist < self.injectivity_radius)):
            idx = int(np.nanargmax(np.where(np.isnan(dist), np.inf, dist)))
            raise BeyondInjectivity(
                f"{self.name}: {label} at geodesic distance {dist.flat[idx]:.4g} "
                f">= injectivity radius {self.injectivity_radius:.4g} (flat index {idx})")

    # --- transport ----------------------------------------------------------
    def transport_matrix(self, p, r):
        """Matrix mapping ``T_p N`` isometrically onto ``T_r N`` (parallel transport
        along the shortest geodesic).  Its action on normal vectors is unspecified."""
        raise NotImplementedError

    def parallel_transport(self, p, r, Z):
        self.check_tangent(p, Z)
        return np.einsum("...ab,...b->...a", self.transport_matrix(p, r), Z)

    def transport_ode(self, p, r, Z, steps=64):
        """Transport ``Z`` along the geodesic from ``p`` to ``r`` by integrating
        ``Z' = (dP/dt) Z`` with classical RK4, projecting to the tangent space
        after each step.  Single points only."""
        p, r, Z = (np.asarray(a, dtype=float) for a in (p, r, Z))
        self.check_tangent(p, Z)
        v = self.log_map(p, r)

        def rhs(t, W):
            x, xdot = self.geodesic(p, v, t)
            dP = np.einsum("abc,c->ab", self.d2project(x, check=False), xdot)
            return dP @ W

        h = 1.0 / steps
        W = Z.copy()
        for k in range(steps):
            t = k * h
            k1 = rhs(t, W)
            k2 = rhs(t + h / 2, W + h / 2 * k1)
            k3 = rhs(t + h / 2, W + h / 2 * k2)
            k4 = rhs(t + h, W + h * k3)
            W = W + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            x, _ = self.geodesic(p, v, t + h)
            W = self.tangent_projector(x) @ W
        return W

    # --- curvature ----------------------------------------------------------
    def curvature(self, p, X, Y, Z):
        """Riemann tensor ``R(X, Y) Z`` with the convention that the unit sphere
        gives ``<Y, Z> X - <X, Z> Y``; evaluated through the Gauss equation."""
        for V in (X, Y, Z):
            self.check_tangent(p, V)
        return self._curvature_gauss(p, X, Y, Z)

    def _curvature_gauss(self, p, X, Y, Z):
        # <R(X,Y)Z, W> = <II(Y,Z), II(X,W)> - <II(X,Z), II(Y,W)>
        H = self.d2project(p, check=False)
        IIyz = np.einsum("...abc,...b,...c->...a", H, Y, Z)
        IIxz = np.einsum("...abc,...b,...c->...a", H, X, Z)
        HX = np.einsum("...abc,...b->...ac", H, X)  # II(X, .) as (normal, W)
        HY = np.einsum("...abc,...b->...ac", H, Y)
        out = np.einsum("...a,...aw->...w", IIyz, HX) - np.einsum("...a,...aw->...w", IIxz, HY)
        return np.einsum("...ab,...b->...a", self.tangent_projector(p), out)

    def random_point(self, rng, size=None):
        raise NotImplementedError

    def random_tangent(self, p, rng):
        P = self.tangent_projector(p)
        return np.einsum("...ab,...b->...a", P, rng.standard_normal(np.shape(p)))

    def __repr__(self):
        return f"{type(self).__name__}()"


class Sphere(TargetManifold):
    """Round sphere of radius ``radius`` in R^(dim+1)."""

    name = "sphere2"

    def __init__(self, radius=1.0, dim=2):
        self.radius = float(radius)
        self.dim = dim
        self.q = dim + 1
        self.injectivity_radius = np.pi * self.radius
        self.weingarten_bound = 1.0 / self.radius
        self.tube_radius = 0.9 * self.radius

    def distance_to(self, z):
        return np.abs(_norm(z) - self.radius)

    def project(self, z, check=True):
        z = np.asarray(z, dtype=float)
        if check:
            self.check_tube(z)
        return self.radius * z / _norm(z)[..., None]

    def dproject(self, z, check=True):
        z = np.asarray(z, dtype=float)
        if check:
            self.check_tube(z)
        r = _norm(z)[..., None, None]
        zh = z / r[..., 0]
        eye = np.eye(self.q)
        return self.radius * (eye - zh[..., :, None] * zh[..., None, :]) / r

    def d2project(self, z, check=True):
        z = np.asarray(z, dtype=float)
        if check:
            self.check_tube(z)
        r = _norm(z)[..., None, None, None]
        eye = np.eye(self.q)
        zA = z[..., :, None, None]
        zB = z[..., None, :, None]
        zC = z[..., None, None, :]
        t = -(eye[:, :, None] * zC + eye[:, None, :] * zB + zA * eye[None, :, :]) / r ** 3
        t = t + 3 * zA * zB * zC / r ** 5
        return self.radius * t

    def _angle(self, p, r):
        R2 = self.radius ** 2
        cos = _dot(p, r) / R2
        tang = r - (cos[..., None]) * p
        sin = _norm(tang) / self.radius
        return np.arctan2(sin, cos), tang, sin

    def log_map(self, p, r):
        p = np.asarray(p, dtype=float)
        r = np.asarray(r, dtype=float)
        theta, tang, sin = self._angle(p, r)
        dist = self.radius * theta
        self._check_injectivity(dist)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(sin > 1e-8, theta / np.where(sin > 1e-8, sin, 1.0),
                             1.0 + theta ** 2 / 6)
        return scale[..., None] * tang

    def exp_map(self, p, v):
        return self.geodesic(p, v, 1.0)[0]

    def geodesic(self, p, v, t):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = _norm(v)[..., None]
        a = speed * t / self.radius
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(speed > 0, v / np.where(speed > 0, speed, 1.0), 0.0)
        x = np.cos(a) * p + self.radius * np.sin(a) * u
        xdot = speed * (-np.sin(a) * p / self.radius + np.cos(a) * u)
        return x, xdot

    def transport_matrix(self, p, r):
        p = np.asarray(p, dtype=float) / self.radius
        r = np.asarray(r, dtype=float) / self.radius
        theta, _, _ = self._angle(p * self.radius, r * self.radius)
        self._check_injectivity(self.radius * theta)
        eye = np.eye(self.q)
        return eye - (p + r)[..., :, None] * r[..., None, :] / (1.0 + _dot(p, r))[..., None, None]

    def curvature(self, p, X, Y, Z):
        for V in (X, Y, Z):
            self.check_tangent(p, V)
        return (_dot(Y, Z)[..., None] * X - _dot(X, Z)[..., None] * Y) / self.radius ** 2

    def random_point(self, rng, size=None):
        shape = (() if size is None else tuple(np.atleast_1d(size))) + (self.q,)
        z = rng.standard_normal(shape)
        return self.radius * z / _norm(z)[..., None]

    def __repr__(self):
        return f"Sphere(radius={self.radius})"


def _rot90(x):
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


class CliffordTorus(TargetManifold):
    """Product of two circles with radii ``(r1, r2)`` in R^4 = R^2 x R^2."""

    name = "clifford_torus"
    q = 4
    dim = 2

    def __init__(self, radii=(1.0, 1.0)):
        self.radii = tuple(float(r) for r in radii)
        rmin = min(self.radii)
        self.injectivity_radius = np.pi * rmin
        self.weingarten_bound = 1.0 / rmin
        self.tube_radius = 0.9 * rmin

    def _blocks(self, z):
        z = np.asarray(z, dtype=float)
        return z[..., 0:2], z[..., 2:4]

    def distance_to(self, z):
        a, b = self._blocks(z)
        return np.hypot(_norm(a) - self.radii[0], _norm(b) - self.radii[1])

    def project(self, z, check=True):
        if check:
            self.check_tube(z)
        a, b = self._blocks(z)
        return np.concatenate([self.radii[0] * a / _norm(a)[..., None],
                               self.radii[1] * b / _norm(b)[..., None]], axis=-1)

    @staticmethod
    def _circle_d1(w, R):
        r = _norm(w)[..., None, None]
        wh = w / r[..., 0]
        return R * (np.eye(2) - wh[..., :, None] * wh[..., None, :]) / r

    @staticmethod
    def _circle_d2(w, R):
        r = _norm(w)[..., None, None, None]
        eye = np.eye(2)
        wA = w[..., :, None, None]
        wB = w[..., None, :, None]
        wC = w[..., None, None, :]
        t = -(eye[:, :, None] * wC + eye[:, None, :] * wB + wA * eye[None, :, :]) / r ** 3
        return R * (t + 3 * wA * wB * wC / r ** 5)

    def dproject(self, z, check=True):
        if check:
            self.check_tube(z)
        a, b = self._blocks(z)
        out = np.zeros(np.shape(z)[:-1] + (4, 4))
        out[..., 0:2, 0:2] = self._circle_d1(a, self.radii[0])
        out[..., 2:4, 2:4] = self._circle_d1(b, self.radii[1])
        return out

    def d2project(self, z, check=True):
        if check:
            self.check_tube(z)
        a, b = self._blocks(z)
        out = np.zeros(np.shape(z)[:-1] + (4, 4, 4))
        out[..., 0:2, 0:2, 0:2] = self._circle_d2(a, self.radii[0])
        out[..., 2:4, 2:4, 2:4] = self._circle_d2(b, self.radii[1])
        return out

    def _angles(self, p, r):
        out = []
        for (pa, ra) in zip(self._blocks(p), self._blocks(r)):
            cross = pa[..., 0] * ra[..., 1] - pa[..., 1] * ra[..., 0]
            out.append(np.arctan2(cross, _dot(pa, ra)))
        return out

    def log_map(self, p, r):
        th1, th2 = self._angles(p, r)
        dist = np.hypot(self.radii[0] * th1, self.radii[1] * th2)
        # arctan2 returns +-pi exactly on the cut locus of a circle
        cut = (np.abs(th1) >= np.pi) | (np.abs(th2) >= np.pi)
        self._check_injectivity(np.where(cut, np.inf, dist))
        pa, pb = self._blocks(p)
        return np.concatenate([th1[..., None] * _rot90(pa), th2[..., None] * _rot90(pb)], axis=-1)

    def exp_map(self, p, v):
        return self.geodesic(p, v, 1.0)[0]

    def geodesic(self, p, v, t):
        pts, vels = [], []
        for (pa, va, R) in zip(self._blocks(p), self._blocks(v), self.radii):
            omega = _dot(va, _rot90(pa)) / R ** 2
            c, s = np.cos(omega * t)[..., None], np.sin(omega * t)[..., None]
            x = c * pa + s * _rot90(pa)
            pts.append(x)
            vels.append(omega[..., None] * _rot90(x))
        return np.concatenate(pts, axis=-1), np.concatenate(vels, axis=-1)

    def transport_matrix(self, p, r):
        th1, th2 = self._angles(p, r)
        dist = np.hypot(self.radii[0] * th1, self.radii[1] * th2)
        self._check_injectivity(dist)
        out = np.zeros(np.shape(th1) + (4, 4))
        for k, th in enumerate((th1, th2)):
            c, s = np.cos(th), np.sin(th)
            sl = slice(2 * k, 2 * k + 2)
            out[..., sl, sl] = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        return out

    def curvature(self, p, X, Y, Z):
        for V in (X, Y, Z):
            self.check_tangent(p, V)
        return np.zeros(np.broadcast_shapes(np.shape(X), np.shape(Y), np.shape(Z)))

    def random_point(self, rng, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        t = rng.uniform(0, 2 * np.pi, shape + (2,))
        return np.stack([self.radii[0] * np.cos(t[..., 0]), self.radii[0] * np.sin(t[..., 0]),
                         self.radii[1] * np.cos(t[..., 1]), self.radii[1] * np.sin(t[..., 1])], -1)

    def __repr__(self):
        return f"CliffordTorus(radii={self.radii})"


TARGETS = {"sphere2": Sphere, "clifford_torus": CliffordTorus}


def get_target(name):
    try:
        return TARGETS[name]()
    except KeyError:
        raise ValueError(f"unknown target {name!r}; choose from {sorted(TARGETS)}") from None


@dataclass(frozen=True)
class ConstantsLedger:
    """Smallness constants tying the tube, geodesic and transport scales together.

    Construction enforces ``2 eps < inj(N)`` and
    ``delta < min(delta0 / 4, eps (1 - delta0 C) / 4)``.
    """

    epsilon: float
    delta: float
    delta0: float
    C: float
    inj: float
    Lambda: float = None

    def __post_init__(self):
        if not self.delta0 * self.C < 1:
            raise GeometryError("tube radius must satisfy delta0 < 1/C")
        if not 2 * self.epsilon < self.inj:
            raise GeometryError("need 2*epsilon < inj(N)")
        bound = min(self.delta0 / 4, self.epsilon * (1 - self.delta0 * self.C) / 4)
        if not 0 < self.delta < bound:
            raise GeometryError(f"delta must lie in (0, {bound:.4g})")

    @classmethod
    def for_target(cls, target, eps_factor=0.45, safety=0.99, Lambda=None):
        inj = target.injectivity_radius
        eps = eps_factor * inj
        d0, C = target.tube_radius, target.weingarten_bound
        delta = safety * min(d0 / 4, eps * (1 - d0 * C) / 4)
        return cls(eps, delta, d0, C, inj, Lambda)

    def with_gap(self, Lambda):
        return ConstantsLedger(self.epsilon, self.delta, self.delta0, self.C, self.inj, Lambda)


def distance_compare(target, p, r, delta):
    """Compare intrinsic and chordal distance of two nearby points.

    Returns ``(d_N, chord, bound_ok)`` where ``bound_ok`` records
    ``d_N <= chord / (1 - delta C)``.  Requires ``chord < delta <= delta0``.
    """
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    chord = _norm(p - r)
    if not delta <= target.tube_radius:
        raise GeometryError(f"delta={delta} exceeds delta0={target.tube_radius}")
    if np.any(~(chord < delta)) and not np.all(chord == 0):
        raise GeometryError("points must satisfy |p - r| < delta")
    dN = target.distance(p, r)
    bound = chord / (1 - delta * target.weingarten_bound)
    ok = dN <= bound * (1 + 1e-12) + 1e-15
    if np.ndim(ok) == 0:
        return float(dN), float(chord), bool(ok)
    return dN, chord, ok


def holonomy_triangle(target, p0, p1, p2, Z):
    """Transport ``Z`` around the geodesic triangle ``p0 -> p1 -> p2 -> p0``.

    Returns the transported vector and the deviation ``|Z' - Z|``.
    """
    p0, p1, p2, Z = (np.asarray(a, dtype=float) for a in (p0, p1, p2, Z))
    target.check_tangent(p0, Z)
    for a, b in ((p0, p1), (p1, p2), (p2, p0)):
        target._check_injectivity(target.distance(a, b), "triangle vertices")
    W = target.parallel_transport(p0, p1, Z)
    W = target.parallel_transport(p1, p2, W)
    W = target.parallel_transport(p2, p0, W)
    return W, float(np.linalg.norm(W - Z)) if W.ndim == 1 else _norm(W - Z)
