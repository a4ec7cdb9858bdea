"""Thick-thin measure axioms: gradient and cylinder inequalities, stability.

The checks are empirical: they sweep sampled disks and annuli and record a
margin per sample.  Violations are data, not exceptions; a report passes
when every non-vacuous margin clears the relative tolerance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (ARCSINH1, AnnulusSpec, DomainError, TRIVIAL,
                       invert_radial_modulus, radial_modulus)
from .surface import MeasuredSurface, Region
from . import quadrature as quadlib

MARGIN_TOL = 0.02   # relative slack absorbing quadrature noise


@dataclass
class ConstantsBundle:
    """The constant tower c1, c2, c3, delta1, delta2 -> L0, L1, K1, K2, K3.

    c1_prime is the disk-form gradient constant; the normalization
    c1_prime * delta1 = 1 is enforced at construction (the measure scale is
    chosen that way).  c1 itself is metadata: the paper relates it to
    c1_prime only up to an unspecified linear factor.  The derived fields
    are filled by the decomposer's derive_constants; explicit overrides are
    honored there and recorded.
    """
    c2: float = 1.0
    c3: float = 0.5
    delta1: float = 1.0
    delta2: float = 0.4
    c1_prime: float = 1.0
    c1: Optional[float] = None
    k1: Optional[float] = None
    k2: Optional[float] = None
    k3: Optional[float] = None
    l0: Optional[float] = None
    l1: Optional[float] = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.c2, self.c3, self.delta1, self.delta2, self.c1_prime) <= 0:
            raise DomainError("constants must be positive")
        if self.c3 > 1:
            raise DomainError("c3 must satisfy c3 <= 1")
        if not self.delta2 < self.delta1 / 2:
            raise DomainError("need delta2 < delta1 / 2")
        if abs(self.c1_prime * self.delta1 - 1.0) > 1e-12:
            raise DomainError("normalization c1_prime * delta1 = 1 violated")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConstantsBundle":
        known = {k: d[k] for k in ("c2", "c3", "delta1", "delta2", "c1_prime",
                                   "c1", "overrides") if k in d}
        return cls(**known)


def r_d(d: float, constants: ConstantsBundle) -> float:
    """Scale below which a density value d forces mass delta1 nearby."""
    if d < 0:
        raise DomainError("density must be nonnegative")
    if d == 0:
        return math.inf
    return math.sqrt(constants.c1_prime * constants.delta1 / d)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class AxiomReport:
    check: str
    rows: List[dict]
    tolerance: float = MARGIN_TOL

    @property
    def violations(self) -> List[dict]:
        return [r for r in self.rows if not r["vacuous"] and r["margin"] < -self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.violations

    def tightest(self) -> Optional[dict]:
        live = [r for r in self.rows if not r["vacuous"]]
        if not live:
            return None
        return min(live, key=lambda r: r["margin"])

    def to_dict(self) -> dict:
        return {"check": self.check, "passed": self.passed,
                "samples": len(self.rows),
                "violations": len(self.violations),
                "tolerance": self.tolerance,
                "tightest": self.tightest(),
                "rows": self.rows}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    def write_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=sorted(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


# ---------------------------------------------------------------------------
# Sample plans
# ---------------------------------------------------------------------------

def stratified_points(surface: MeasuredSurface, n: int, rng) -> np.ndarray:
    """Roughly n points spread over the surface, jittered inside strata."""
    if surface.kind == "sphere":
        m = int(math.ceil(math.sqrt(n / 2)))
        pts = []
        for i in range(m):
            for j in range(2 * m):
                z = -1 + 2 * (i + rng.random()) / m
                phi = 2 * math.pi * (j + rng.random()) / (2 * m)
                s = math.sqrt(max(0.0, 1 - z * z))
                pts.append([s * math.cos(phi), s * math.sin(phi), z])
        return np.array(pts[:n])
    if surface.kind == "torus":
        v1, v2 = surface.model.lattice_basis()
        m = int(math.ceil(math.sqrt(n)))
        pts = []
        for i in range(m):
            for j in range(m):
                a = (i + rng.random()) / m
                b = (j + rng.random()) / m
                pts.append(a * v1 + b * v2)
        return np.array(pts[:n])
    raise DomainError(f"no stratified plan for {surface.kind!r}")


def ambient_injectivity(surface: MeasuredSurface, point) -> float:
    if surface.kind == "sphere":
        return math.pi
    if surface.kind == "torus":
        return surface.model.systole() / 2
    raise DomainError(f"no injectivity bound for {surface.kind!r}")


def gradient_sample_plan(surface: MeasuredSurface, constants: ConstantsBundle,
                         n: int, seed: int, radii_per_center: int = 4,
                         include_extrema: bool = True) -> List[Tuple[np.ndarray, float]]:
    """Stratified (center, radius) pairs; the gradient inequality binds at
    density maxima, so hint peaks are seeded explicitly with radii swept
    around their own r_d."""
    rng = np.random.default_rng(seed)
    centers = stratified_points(surface, max(1, n // radii_per_center), rng)
    plan = []
    for c in centers:
        r_hi = 0.999 * min(ARCSINH1, ambient_injectivity(surface, c))
        dens = float(np.asarray(surface.density_at(c)))
        r_lo = min(r_d(dens, constants) / 4, r_hi / 8) if dens > 0 else r_hi / 64
        r_lo = max(r_lo, 1e-14)
        for r in np.geomspace(r_lo, r_hi, radii_per_center):
            plan.append((c, float(r)))
    if include_extrema:
        for h in surface.hints():
            c = np.asarray(h.center, dtype=float)
            dens = float(np.asarray(surface.density_at(c)))
            if not np.isfinite(dens) or dens <= 0:
                continue
            rd = r_d(dens, constants)
            r_hi = 0.999 * min(ARCSINH1, ambient_injectivity(surface, c))
            for r in np.geomspace(max(rd / 30, 1e-250), min(30 * rd, r_hi), 8):
                plan.append((c, float(r)))
    return plan


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_gradient_inequality(surface: MeasuredSurface, constants: ConstantsBundle,
                              plan: Sequence[Tuple[np.ndarray, float]],
                              tolerance: float = MARGIN_TOL) -> AxiomReport:
    """density(z) <= c1' mu(B_r(z)) / r^2 whenever mu(B_r(z)) < delta1."""
    rows = []
    by_center: dict = {}
    for c, r in plan:
        by_center.setdefault(tuple(np.asarray(c, dtype=float)), []).append(float(r))
    for c_key, radii in by_center.items():
        c = np.array(c_key)
        radii = sorted(set(radii))
        masses = surface.disk_profile(c, radii)
        dens = float(np.asarray(surface.density_at(c)))
        for r, mu in zip(radii, masses):
            vacuous = mu >= constants.delta1
            bound = constants.c1_prime * mu / r ** 2
            margin = math.inf if vacuous or dens == 0 else (bound - dens) / bound
            rows.append({"center": list(map(float, c)), "radius": r,
                         "mass": float(mu), "density": dens,
                         "bound": float(bound), "vacuous": bool(vacuous),
                         "margin": float(margin if not vacuous else math.inf)})
    return AxiomReport(check="gradient", rows=rows, tolerance=tolerance)


def cylinder_sample_plan(surface: MeasuredSurface, constants: ConstantsBundle,
                         n: int, seed: int) -> List[AnnulusSpec]:
    """Clean trivial annuli with Mod > 2 c2: stratified centers plus
    hint-concentric ones where the mass actually sits."""
    rng = np.random.default_rng(seed)
    centers = list(stratified_points(surface, max(1, n // 3), rng))
    for h in surface.hints():
        centers.append(np.asarray(h.center, dtype=float))
        centers.append(-np.asarray(h.center, dtype=float) if surface.kind == "sphere"
                       else np.asarray(h.center, dtype=float))
    plan = []
    curvature = surface.model.curvature
    for c in centers:
        r_hi = min(ARCSINH1, ambient_injectivity(surface, c)) / 3.0
        for _ in range(3):
            r = float(r_hi * rng.uniform(0.3, 1.0))
            mod = float(rng.uniform(2 * constants.c2 + 0.5, 2 * constants.c2 + 6.0))
            try:
                r_in = invert_radial_modulus(curvature, r, mod)
            except DomainError:
                continue
            if r_in <= 0 or r_in >= r / 5:
                continue
            spec = AnnulusSpec(kind=TRIVIAL, center=np.asarray(c, dtype=float),
                               r_outer=r, r_inner=r_in)
            if surface.involution and not surface.is_clean_disk(c, r, tol=1e-9):
                continue
            plan.append(spec)
            if len(plan) >= n:
                return plan
    return plan


def check_cylinder_inequality(surface: MeasuredSurface, constants: ConstantsBundle,
                              annuli: Sequence[AnnulusSpec], n_trims: int = 6,
                              tolerance: float = MARGIN_TOL) -> AxiomReport:
    """mu(C(t,t;I)) <= exp(-c3 t) mu(I) for clean I with mu(I) < delta2,
    t in (c2, Mod/2)."""
    rows = []
    curvature = surface.model.curvature
    for spec in annuli:
        mod = spec.modulus
        if mod is None:
            mod = radial_modulus(curvature, spec.r_inner, spec.r_outer)
        if mod <= 2 * constants.c2:
            continue
        ts = np.linspace(constants.c2 * 1.02, mod / 2 * 0.98, n_trims)
        radii = [spec.r_inner, spec.r_outer]
        for t in ts:
            radii.append(invert_radial_modulus(curvature, spec.r_outer, float(t)))
            radii.append(invert_radial_modulus(curvature, spec.r_outer, mod - float(t)))
        radii = sorted(set(radii))
        prof = surface.disk_profile(spec.center, radii)
        lut = dict(zip(radii, prof))
        mu_total = lut[spec.r_outer] - lut[spec.r_inner]
        vac = mu_total >= constants.delta2
        for t in ts:
            r_t_out = invert_radial_modulus(curvature, spec.r_outer, float(t))
            r_t_in = invert_radial_modulus(curvature, spec.r_outer, mod - float(t))
            mu_trim = lut[r_t_out] - lut[r_t_in]
            bound = math.exp(-constants.c3 * float(t)) * mu_total
            margin = math.inf if vac or bound == 0 else (bound - mu_trim) / bound
            rows.append({"center": list(map(float, np.atleast_1d(spec.center))),
                         "r_outer": spec.r_outer, "r_inner": spec.r_inner,
                         "modulus": float(mod), "t": float(t),
                         "mass": float(mu_total), "trim_mass": float(mu_trim),
                         "bound": float(bound), "vacuous": bool(vac),
                         "margin": float(margin if not vac else math.inf)})
    return AxiomReport(check="cylinder", rows=rows, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Stability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComponentData:
    """What stability needs to know about one component."""
    mass: float
    genus: int
    boundaries: int


def component_stable(comp: ComponentData, constants: ConstantsBundle) -> bool:
    if comp.mass >= constants.delta1 / 2:
        return True
    if comp.boundaries >= 2 and comp.mass >= constants.delta2 / 6:
        return True
    return 2 * comp.genus + comp.boundaries >= 3


def is_stable(surface_or_components, region_or_none=None,
              constants: Optional[ConstantsBundle] = None) -> bool:
    """mu-stability: every component passes one of the three branches.

    Accepts either (surface, Region, constants) or a list of ComponentData
    plus constants (for analytically-known components).
    """
    if isinstance(surface_or_components, MeasuredSurface):
        surface, region = surface_or_components, region_or_none
        if not isinstance(region, Region):
            region = Region(surface, region)
        topo = region.topology()
        from .surface import label_components
        labels, n = label_components(surface, region.mask)
        comps = []
        for lbl in range(1, n + 1):
            sub = labels == lbl
            sub_topo = Region(surface, sub).topology()
            comps.append(ComponentData(mass=surface.measure_mask(sub),
                                       genus=sub_topo.genus_per_component[0],
                                       boundaries=sub_topo.boundaries))
    else:
        comps = list(surface_or_components)
        constants = constants if constants is not None else region_or_none
    if constants is None:
        raise DomainError("is_stable needs a ConstantsBundle")
    return all(component_stable(c, constants) for c in comps)


# ---------------------------------------------------------------------------
# Decay profiles on annuli
# ---------------------------------------------------------------------------

@dataclass
class DecayProfile:
    rho: np.ndarray          # cylinder coordinate in [-Mod/2, Mod/2]
    sup_density: np.ndarray  # sup over theta of the h_st density
    amplitude: float         # fitted: density <= amplitude * exp(-b (Mod/2 - |rho|))
    exponent: float
    residuals: np.ndarray
    modulus: float

    def bound_at(self, rho) -> np.ndarray:
        return self.amplitude * np.exp(-self.exponent *
                                       (self.modulus / 2 - np.abs(rho)))

    def csv_rows(self):
        return [{"rho": float(r), "sup_density": float(s),
                 "bound": float(self.bound_at(r))}
                for r, s in zip(self.rho, self.sup_density)]


def decay_profile(surface: MeasuredSurface, spec: AnnulusSpec,
                  constants: ConstantsBundle, n_rho: int = 161,
                  n_theta: int = 96) -> DecayProfile:
    """Per-slice sup density in standard-cylinder coordinates and its
    least-squares exponential fit over the window trimmed by c2 + pi.

    Convention: rho = +Mod/2 at the outer boundary of a trivial annulus.
    """
    curvature = surface.model.curvature
    if spec.kind != TRIVIAL:
        raise DomainError("decay_profile expects a trivial annulus spec")
    mod = spec.modulus
    if mod is None:
        mod = radial_modulus(curvature, spec.r_inner, spec.r_outer)
    trim = constants.c2 + math.pi
    if mod <= 2 * trim:
        raise DomainError(f"annulus modulus {mod:.3f} too short for the "
                          f"fit window 2 (c2 + pi) = {2 * trim:.3f}")
    rho = np.linspace(-mod / 2 + trim, mod / 2 - trim, n_rho)
    geom = surface._ring_geometry(np.asarray(spec.center, dtype=float))
    thetas = np.arange(n_theta) * (2 * math.pi / n_theta)
    sup = np.empty(n_rho)
    from .geometry import h_theta as h_theta_fn
    for i, rr in enumerate(rho):
        s = invert_radial_modulus(curvature, spec.r_outer, mod / 2 - rr)
        vals = quadlib.ring_values(geom, s, thetas)
        # density w.r.t. the standard cylinder metric: chart density times
        # the conformal factor h_theta(s)^2
        sup[i] = float(np.max(vals)) * float(h_theta_fn(curvature, s)) ** 2
    x = mod / 2 - np.abs(rho)
    good = sup > 0
    if np.count_nonzero(good) < max(8, n_rho // 4):
        return DecayProfile(rho=rho, sup_density=sup, amplitude=0.0,
                            exponent=0.0, residuals=np.zeros_like(sup),
                            modulus=mod)
    y = np.log(sup[good])
    slope, intercept = np.polyfit(x[good], y, 1)
    b = -slope
    resid = y - (intercept + slope * x[good])
    amplitude = math.exp(intercept + float(np.quantile(resid, 0.98)))
    return DecayProfile(rho=rho, sup_density=sup, amplitude=amplitude,
                        exponent=float(b), residuals=resid, modulus=mod)
