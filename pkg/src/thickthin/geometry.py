"""Constant-curvature polar geometry: annulus moduli, conformal radii, collars.

Everything here is exact or closed-form where a closed form exists; the
adaptive-quadrature fallbacks share tolerances with the rest of the package
(QUAD_ABS_TOL / QUAD_REL_TOL).  All lengths and angles are in the natural
units of the curvature-normalized metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import integrate

QUAD_ABS_TOL = 1e-12
QUAD_REL_TOL = 1e-10

ARCSINH1 = math.asinh(1.0)


class DomainError(ValueError):
    """Argument outside the geometric domain of a kernel function."""


class InfiniteModulusError(ValueError):
    """Annulus with a degenerate (zero-radius or puncture) end."""


# ---------------------------------------------------------------------------
# Metric coefficient and radial integrals
# ---------------------------------------------------------------------------

def h_theta(curvature: int, rho):
    """Polar metric coefficient sinh/id/sin of rho for K = -1/0/+1."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise DomainError("rho must be nonnegative")
    if curvature == -1:
        out = np.sinh(rho)
    elif curvature == 0:
        out = rho + 0.0
    elif curvature == 1:
        if np.any(rho > np.pi + 1e-15):
            raise DomainError("rho must be <= pi on the sphere")
        out = np.sin(rho)
    else:
        raise DomainError(f"curvature must be -1, 0, or +1, got {curvature}")
    return out if out.shape else float(out)


def radial_modulus(curvature: int, r_inner: float, r_outer: float) -> float:
    """Closed-form integral of 1/h_theta from r_inner to r_outer.

    This is the conformal modulus of the geodesic annulus with those radii.
    Uses log-of-tan/tanh antiderivatives, stable down to denormal radii.
    """
    if not (0 <= r_inner <= r_outer):
        raise DomainError("need 0 <= r_inner <= r_outer")
    if r_inner == r_outer:
        return 0.0
    if r_inner == 0.0:
        raise InfiniteModulusError("inner radius 0 gives infinite modulus")
    if curvature == 0:
        return math.log(r_outer / r_inner)
    if curvature == -1:
        # antiderivative log tanh(rho/2)
        return _log_tanh_half(r_outer) - _log_tanh_half(r_inner)
    if curvature == 1:
        if r_outer > math.pi - 1e-15:
            raise DomainError("outer radius must be < pi on the sphere")
        return _log_tan_half(r_outer) - _log_tan_half(r_inner)
    raise DomainError(f"bad curvature {curvature}")


def _log_tan_half(r: float) -> float:
    # log(tan(r/2)) without underflow for tiny r
    if r < 1e-4:
        # tan(x) = x + x^3/3 + ...
        x = r / 2
        return math.log(x) + (x * x) / 3.0
    return math.log(math.tan(r / 2))


def _log_tanh_half(r: float) -> float:
    if r < 1e-4:
        x = r / 2
        return math.log(x) - (x * x) / 3.0
    return math.log(math.tanh(r / 2))


def invert_radial_modulus(curvature: int, r_ref: float, delta: float) -> float:
    """Radius r with radial_modulus(r, r_ref) = delta (for r <= r_ref).

    Inverse of the conformal coordinate; delta >= 0 moves inward from r_ref.
    """
    if delta < 0:
        raise DomainError("delta must be >= 0")
    if curvature == 0:
        return r_ref * math.exp(-delta)
    if curvature == -1:
        t = _log_tanh_half(r_ref) - delta
        return 2.0 * math.atanh(math.exp(t)) if t < -1e-4 else 2.0 * math.atanh(min(math.exp(t), 1 - 1e-16))
    if curvature == 1:
        t = _log_tan_half(r_ref) - delta
        return 2.0 * math.atan(math.exp(t))
    raise DomainError(f"bad curvature {curvature}")


def radial_modulus_quad(curvature: int, r_inner: float, r_outer: float) -> float:
    """Adaptive-quadrature evaluation of the same integral (oracle path)."""
    if r_inner <= 0:
        raise InfiniteModulusError("inner radius 0 gives infinite modulus")
    val, _ = integrate.quad(lambda s: 1.0 / h_theta(curvature, s), r_inner, r_outer,
                            epsabs=QUAD_ABS_TOL, epsrel=QUAD_REL_TOL, limit=200)
    return val


# ---------------------------------------------------------------------------
# Conformal radius
# ---------------------------------------------------------------------------

def conformal_radius(r: float, curvature: int) -> float:
    """Conformal radius of the geodesic disk B_r seen from its center.

    exp of f(r) = log r + int_0^r (1/h_theta - 1/rho); closed forms are
    2 tan(r/2) (sphere), r (flat), 2 tanh(r/2) (hyperbolic).
    """
    if r <= 0:
        raise DomainError("radius must be positive")
    if curvature == 0:
        return r
    if curvature == 1:
        if r >= math.pi:
            raise DomainError("radius must be < pi on the sphere")
        return 2.0 * math.tan(r / 2)
    if curvature == -1:
        return 2.0 * math.tanh(r / 2)
    raise DomainError(f"bad curvature {curvature}")


def conformal_radius_quad(r: float, curvature: int) -> float:
    """Quadrature evaluation of exp(f(r)) straight from its definition."""
    def integrand(s):
        if s == 0.0:
            return 0.0
        return 1.0 / h_theta(curvature, s) - 1.0 / s
    corr, _ = integrate.quad(integrand, 0.0, r, epsabs=QUAD_ABS_TOL,
                             epsrel=QUAD_REL_TOL, limit=200)
    return math.exp(math.log(r) + corr)


def conformal_radius_lower_coef(kappa: float) -> float:
    """Constant c with r_conf >= c r for hyperbolic disks of radius < kappa.

    The paper leaves c unspecified; we compute it as the infimum of
    r_conf / r over (0, kappa], attained at r = kappa.
    """
    if kappa <= 0:
        raise DomainError("kappa must be positive")
    return conformal_radius(kappa, -1) / kappa


# ---------------------------------------------------------------------------
# Hyperbolic collars
# ---------------------------------------------------------------------------

def collar_width(length: float) -> float:
    """Half-width of the standard collar around a geodesic of given length."""
    if length <= 0:
        raise DomainError("geodesic length must be positive")
    return math.asinh(1.0 / math.sinh(length / 2))


def collar_modulus(length: float) -> float:
    """Conformal modulus of the full collar, (2 pi / l) * int sech over [-w, w]."""
    w = collar_width(length)
    # antiderivative of sech is the Gudermannian arctan(sinh)
    return (2 * math.pi / length) * 2.0 * math.atan(math.sinh(w))


def collar_h_theta(length: float, rho) -> np.ndarray:
    """Angular metric coefficient l cosh(rho) / 2 pi of the collar cylinder."""
    return length * np.cosh(np.asarray(rho, dtype=float)) / (2 * math.pi)


def collar_radial_modulus(length: float, rho0: float, rho1: float) -> float:
    """Modulus of the collar sub-cylinder with rho in [rho0, rho1]."""
    if rho0 > rho1:
        raise DomainError("need rho0 <= rho1")
    return (2 * math.pi / length) * (math.atan(math.sinh(rho1)) - math.atan(math.sinh(rho0)))


def injectivity_in_collar(length: float, d: float) -> float:
    """Injectivity radius at distance d from the collar boundary."""
    if d < 0:
        raise DomainError("d must be >= 0")
    return math.asinh(math.cosh(length / 2) * math.cosh(d) - math.sinh(d))


@dataclass(frozen=True)
class Collar:
    """Hyperbolic collar around a short geodesic, with its cylinder metric."""
    length: float
    width: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "width", collar_width(self.length))

    def h_theta(self, rho):
        return collar_h_theta(self.length, rho)

    def modulus(self) -> float:
        return collar_modulus(self.length)

    def sub_modulus(self, rho0: float, rho1: float) -> float:
        return collar_radial_modulus(self.length, rho0, rho1)


# ---------------------------------------------------------------------------
# Metric models and point charts
# ---------------------------------------------------------------------------

SPHERE = "unit-curvature-sphere"
FLAT_UNIT_AREA = "unit-area-flat"
HYPERBOLIC = "curvature-minus-one"


@dataclass(frozen=True)
class MetricModel:
    """Constant-curvature model: round sphere, unit-area flat torus, or collars.

    For flat genus-1 models tau is the lattice parameter (Im tau > 0); the
    lattice is rescaled so the torus has area exactly 1.
    """
    curvature: int
    tau: Optional[complex] = None

    def __post_init__(self):
        if self.curvature not in (-1, 0, 1):
            raise DomainError("curvature must be -1, 0, or +1")
        if self.curvature == 0:
            if self.tau is None or self.tau.imag <= 0:
                raise DomainError("flat model needs lattice parameter with Im tau > 0")

    @property
    def normalization(self) -> str:
        return {1: SPHERE, 0: FLAT_UNIT_AREA, -1: HYPERBOLIC}[self.curvature]

    def lattice_basis(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lattice vectors of the unit-area torus (flat models only)."""
        if self.curvature != 0:
            raise DomainError("lattice only defined for flat models")
        s = 1.0 / math.sqrt(self.tau.imag)
        v1 = np.array([s, 0.0])
        v2 = np.array([s * self.tau.real, s * self.tau.imag])
        return v1, v2

    def systole(self) -> float:
        """Length of the shortest closed geodesic (flat torus)."""
        v1, v2 = self.lattice_basis()
        best = math.inf
        for m in range(-3, 4):
            for n in range(-3, 4):
                if m == 0 and n == 0:
                    continue
                best = min(best, float(np.hypot(*(m * v1 + n * v2))))
        return best

    def area(self) -> float:
        if self.curvature == 1:
            return 4 * math.pi
        if self.curvature == 0:
            return 1.0
        raise DomainError("area of a bare hyperbolic model is not defined")


def sphere_model() -> MetricModel:
    return MetricModel(curvature=1)


def torus_model(tau: complex) -> MetricModel:
    return MetricModel(curvature=0, tau=tau)


# --- sphere points as unit 3-vectors, stereographic chart ------------------

def sphere_from_chart(z) -> np.ndarray:
    """Unit 3-vectors from stereographic coordinates (projection from south pole).

    chart 0 -> north pole (0,0,1); chart infinity -> south pole.
    """
    z = np.asarray(z, dtype=complex)
    t2 = (z.real ** 2 + z.imag ** 2)
    denom = 1.0 + t2
    out = np.stack([2 * z.real / denom, 2 * z.imag / denom, (1 - t2) / denom], axis=-1)
    return out


def sphere_to_chart(v: np.ndarray) -> np.ndarray:
    """Stereographic coordinates of unit vectors; south pole maps to inf."""
    v = np.asarray(v, dtype=float)
    denom = 1.0 + v[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (v[..., 0] + 1j * v[..., 1]) / denom
    return z


def sphere_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Great-circle distance, stable near both coincident and antipodal pairs."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    cross = np.cross(p, q)
    s = np.linalg.norm(cross, axis=-1)
    c = np.sum(p * q, axis=-1)
    return np.arctan2(s, c)


def sphere_exp(center: np.ndarray, rho, theta) -> np.ndarray:
    """Geodesic polar points around center; theta measured in a fixed frame."""
    center = np.asarray(center, dtype=float)
    e1, e2 = sphere_frame(center)
    rho = np.asarray(rho, dtype=float)[..., None]
    theta = np.asarray(theta, dtype=float)[..., None]
    return (np.cos(rho) * center + np.sin(rho) * (np.cos(theta) * e1 + np.sin(theta) * e2))


def sphere_frame(center: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangent frame at a sphere point."""
    c = np.asarray(center, dtype=float)
    ref = np.array([0.0, 0.0, 1.0]) if abs(c[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(c, ref)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(c, e1)
    return e1, e2


def sphere_antipode(p: np.ndarray) -> np.ndarray:
    return -np.asarray(p, dtype=float)


# --- torus points ----------------------------------------------------------

def torus_wrap(model: MetricModel, xy: np.ndarray) -> np.ndarray:
    """Reduce points into the fundamental parallelogram of the lattice."""
    v1, v2 = model.lattice_basis()
    B = np.stack([v1, v2], axis=1)
    coords = np.linalg.solve(B, np.asarray(xy, dtype=float).T).T
    coords -= np.floor(coords)
    return coords @ B.T


def torus_distance(model: MetricModel, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Flat distance minimized over lattice translates."""
    v1, v2 = model.lattice_basis()
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q - p
    best = None
    for m in range(-2, 3):
        for n in range(-2, 3):
            shift = m * v1 + n * v2
            cand = np.linalg.norm(d + shift, axis=-1)
            best = cand if best is None else np.minimum(best, cand)
    return best


def geodesic_distance(model: MetricModel, p, q):
    """Distance in the model metric; sphere points are unit 3-vectors,
    torus points are 2-vectors in the unit-area lattice plane."""
    if model.curvature == 1:
        return sphere_distance(p, q)
    if model.curvature == 0:
        return torus_distance(model, p, q)
    raise DomainError("hyperbolic distances are chart-specific; use Collar")


# ---------------------------------------------------------------------------
# Annulus specs and sub-cylinder windows
# ---------------------------------------------------------------------------

TRIVIAL = "trivial"
CYLINDER = "cylinder"


@dataclass
class AnnulusSpec:
    """A geodesic annulus: trivial (center + two radii) or a cylinder window.

    Trivial annuli follow the convention that rho increases toward the inner
    boundary, i.e. the conformal coordinate runs from the outer radius r to
    the inner radius r_inner.  Cylinders carry a rho-interval in their parent
    cylinder's coordinates (orientation fixed once per geodesic).
    """
    kind: str
    center: Optional[np.ndarray] = None          # trivial: sphere 3-vec or torus 2-vec
    r_outer: float = 0.0                         # trivial
    r_inner: float = 0.0                         # trivial
    geodesic: Optional[str] = None               # cylinder: parent id
    rho0: float = 0.0                            # cylinder
    rho1: float = 0.0                            # cylinder
    modulus: Optional[float] = None              # cached
    mass: Optional[float] = None                 # cached
    orientation: int = +1

    def validate(self, model: Optional[MetricModel] = None):
        if self.kind == TRIVIAL:
            if not (0 < self.r_inner < self.r_outer):
                raise DomainError("trivial annulus needs 0 < r_inner < r_outer")
            if model is not None and model.curvature == 1 and self.r_outer >= math.pi:
                raise DomainError("outer radius must be < pi on the sphere")
        elif self.kind == CYLINDER:
            if not (self.rho0 < self.rho1):
                raise DomainError("cylinder needs rho0 < rho1")
        else:
            raise DomainError(f"unknown annulus kind {self.kind!r}")

    def copy_with(self, **kw) -> "AnnulusSpec":
        out = AnnulusSpec(**{**self.__dict__, **kw})
        return out


def annulus_modulus(spec: AnnulusSpec, model: MetricModel,
                    cylinder_h_theta=None) -> float:
    """Conformal modulus of the spec in the model metric.

    Trivial annuli use the closed-form radial integrals.  Cylinder windows
    need the parent cylinder's h_theta; for a constant coefficient (flat
    torus, standard cylinder) pass the constant, otherwise a callable and
    the integral is done by adaptive quadrature.
    """
    spec.validate(model)
    if spec.kind == TRIVIAL:
        return radial_modulus(model.curvature, spec.r_inner, spec.r_outer)
    if cylinder_h_theta is None:
        raise DomainError("cylinder modulus needs the parent h_theta")
    if np.isscalar(cylinder_h_theta):
        return (spec.rho1 - spec.rho0) / float(cylinder_h_theta)
    val, _ = integrate.quad(lambda s: 1.0 / cylinder_h_theta(s), spec.rho0, spec.rho1,
                            epsabs=QUAD_ABS_TOL, epsrel=QUAD_REL_TOL, limit=200)
    return val


def trim_trivial(spec: AnnulusSpec, model: MetricModel, a: float, b: float) -> AnnulusSpec:
    """C(a, b; I) for a trivial annulus: remove modulus a from the outer end
    and b from the inner end."""
    spec.validate(model)
    mod = annulus_modulus(spec, model)
    if a < 0 or b < 0 or a + b >= mod:
        raise DomainError(f"trim windows a={a}, b={b} exceed modulus {mod}")
    new_outer = invert_radial_modulus(model.curvature, spec.r_outer, a)
    inner_target = mod - b
    new_inner = invert_radial_modulus(model.curvature, spec.r_outer, inner_target)
    out = AnnulusSpec(kind=TRIVIAL, center=spec.center, r_outer=new_outer,
                      r_inner=new_inner, orientation=spec.orientation)
    out.modulus = mod - a - b
    return out


def sub_window_modulus(parent_modulus: float, a: float, b: float) -> float:
    """Modulus of S(a, b; I): exactly b - a by definition."""
    if not (0 <= a <= b <= parent_modulus):
        raise DomainError("window outside [0, Mod]")
    return b - a
