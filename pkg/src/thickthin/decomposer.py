"""Maximal bubble decompositions: constant tower, neck search, equivalence
classes, representative selection, trimming, and assembly audits.

The search works on analytic annulus specs (center + radii, or band
intervals), with masses from the hint-aware quadrature layer; no raster
resolution limits the detectable neck moduli.  Thick components are
assembled combinatorially from the nesting structure of the selected
annuli, so sub-cell components keep exact topology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from .axioms import (ComponentData, ConstantsBundle, component_stable,
                     is_stable, r_d)
from .densities import TorusBandDensity
from .geometry import (ARCSINH1, AnnulusSpec, CYLINDER, DomainError, TRIVIAL,
                       collar_h_theta, collar_width, geodesic_distance,
                       h_theta, invert_radial_modulus, radial_modulus,
                       sphere_distance, sphere_from_chart, sphere_to_chart)
from .spherenorm import (CASE_BOUNDED, SphereNormalization, normalize_sphere,
                         mobius_pullback_density)
from .surface import MeasuredSurface, sphere_surface
from .axioms import stratified_points

EPS_L = 0.01       # headroom factor on L0 over its lower bounds


class ConstructionError(RuntimeError):
    """Decomposition audit failure, with the offending data attached."""


# ---------------------------------------------------------------------------
# Constant tower
# ---------------------------------------------------------------------------

def _sup_scan(f, lo: float, hi: float, n: int = 2000) -> float:
    xs = np.linspace(lo, hi, n)[1:]
    return float(np.max([f(x) for x in xs]))

def esdisj_trivial_suprema() -> Tuple[float, float]:
    """Upper bounds on trimmed moduli from the two trivial-annulus cases of
    the essential-disjointness proof: Mod(A(r, 4r/15)) and Mod(A(4r', r'))
    over the admissible radius ranges, all three curvatures."""
    s1 = max(math.log(15 / 4),
             _sup_scan(lambda r: radial_modulus(1, 4 * r / 15, r), 0, math.pi / 3))
    s2 = max(math.log(4.0),
             _sup_scan(lambda rp: radial_modulus(1, rp, 4 * rp), 0, math.pi / 15))
    return s1, s2


def esdisj_collar_supremum() -> float:
    """Sup of the modulus of a collar sub-cylinder of height pi h_theta(rho0)
    over short hyperbolic collars; the flat (torus) branch contributes pi."""
    def sub_mod(length, rho0):
        w = collar_width(length)
        if rho0 >= w:
            return 0.0
        h0 = float(collar_h_theta(length, rho0))
        top = min(rho0 + math.pi * h0, w)
        if top <= rho0:
            return 0.0
        return (2 * math.pi / length) * (math.atan(math.sinh(top))
                                         - math.atan(math.sinh(rho0)))
    best = math.pi
    for length in np.geomspace(1e-8, 2 * ARCSINH1 * (1 - 1e-9), 400):
        w = collar_width(length)
        for r0 in np.linspace(-w, w, 200):
            best = max(best, sub_mod(length, r0))
    return best


def delta_max() -> float:
    """Sup over admissible inner radii of 2 r' / h_theta(3 r')."""
    flat = 2.0 / 3.0
    sph = _sup_scan(lambda rp: 2 * rp / math.sin(3 * rp), 0, math.pi / 15)
    return max(flat, sph)


def derive_constants(base: ConstantsBundle) -> ConstantsBundle:
    """Fill the derived tower K1, K2, K3, L0, L1 = 4 L0.

    Explicit entries in base.overrides win (K1, K2, K3, L0); they exist
    because the source material proves the K's exist without numbers.
    """
    k3 = (integrate.quad(lambda r: 1 / math.sin(r), math.pi / 6, math.pi / 3)[0]
          + integrate.quad(lambda r: 1 / math.sin(r), math.pi / 9, math.pi / 3)[0])
    s1, s2 = esdisj_trivial_suprema()
    s3 = esdisj_collar_supremum()
    k1 = max(base.c2 + math.pi, s1, s2, s3)
    ov = base.overrides or {}
    k1 = float(ov.get("K1", k1))
    k2 = float(ov.get("K2", k1 + delta_max() / 2))
    k3 = float(ov.get("K3", k3))
    l0 = (1 + EPS_L) * max(base.c2, math.log(3.0) / base.c3, k1, k2, k3)
    l0 = float(ov.get("L0", l0))
    out = ConstantsBundle(c2=base.c2, c3=base.c3, delta1=base.delta1,
                          delta2=base.delta2, c1_prime=base.c1_prime,
                          c1=base.c1, overrides=dict(ov))
    out.k1, out.k2, out.k3, out.l0, out.l1 = k1, k2, k3, l0, 4 * l0
    return out


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------

@dataclass
class NeckCandidate:
    spec: AnnulusSpec
    mass: float
    modulus: float
    clean: bool
    complement_stable: bool
    meta: dict = field(default_factory=dict)

    def is_long_neck(self, constants: ConstantsBundle) -> bool:
        return (self.clean and self.complement_stable
                and self.mass <= constants.delta2 / 6
                and self.modulus >= constants.l1)


@dataclass
class TorusMarking:
    """Short homology class data on a genus-1 surface: reference cylinder I0
    with mass delta2/6, center geodesic alpha0, opposite geodesic alpha1."""
    direction: int              # lattice axis index of the short class
    alpha0_offset: float        # transverse coordinate of alpha0
    alpha1_offset: float
    i0_interval: Tuple[float, float]
    i0_modulus: float
    i0_mass: float
    h_theta_const: float        # ell / 2 pi of the flat cylinder
    boundary_class: bool = False


@dataclass
class EquivalenceClass:
    members: List[int]
    representative: Optional[NeckCandidate] = None
    invariant: bool = False
    conjugate_of: Optional[int] = None
    incidents: int = 0


class SearchContext:
    """Everything the sweep needs: the prepared surface, punctures from the
    normalization, constants, and cached totals."""

    def __init__(self, surface: MeasuredSurface, constants: ConstantsBundle,
                 punctures: Sequence[np.ndarray] = (), rng=None):
        if constants.l1 is None:
            constants = derive_constants(constants)
        self.surface = surface
        self.constants = constants
        self.punctures = [np.asarray(p, dtype=float) for p in punctures]
        self.total = surface.total_mass()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._band_caches = None

    def boundary_band_mass(self, lo: float, hi: float) -> float:
        """Mass of the boundary band {lo < s < hi} through cached cap
        profiles (s is the signed latitude from the fixed circle)."""
        from .surface import EAST_POLE, WEST_POLE
        if self._band_caches is None:
            seed_radii = list(np.linspace(1e-3, math.pi * (1 - 1e-9), 9))
            self._band_caches = (self.surface.profile_cache(EAST_POLE, seed_radii),
                                 self.surface.profile_cache(WEST_POLE, seed_radii))
        east, west = self._band_caches
        above = east.mass(math.pi / 2 - hi) if hi < math.pi / 2 else 0.0
        below = west.mass(math.pi / 2 + lo) if lo > -math.pi / 2 else 0.0
        return self.total - above - below

    def injectivity_tilde(self, center) -> float:
        if self.surface.kind == "sphere":
            base = math.pi
        elif self.surface.kind == "torus":
            base = self.surface.model.systole() / 2
        else:
            raise DomainError(f"no injectivity for {self.surface.kind!r}")
        for p in self.punctures:
            base = min(base, float(geodesic_distance(self.surface.model, center, p)))
        return base

    def radius_cap(self, center) -> float:
        cap = self.injectivity_tilde(center) / 3.0
        if self.surface.involution:
            cbar = self.surface.involute_points(np.asarray(center, dtype=float))
            d = float(geodesic_distance(self.surface.model, center, cbar))
            if d > 1e-12:       # off-boundary centers must stay clean
                cap = min(cap, d / 2)
        return cap

    def outer_stable(self, mass_inside: float) -> bool:
        # complement of the outer disk: on the sphere a disk, on the torus a
        # genus-1 piece with one boundary (automatically stable)
        if self.surface.kind == "torus":
            return True
        return self.total - mass_inside >= self.constants.delta1 / 2

    def admissible_trivial(self, center, r: float, r_inner: float) -> bool:
        if not (0 < r_inner <= r / 5):
            return False
        if r > self.radius_cap(center) * (1 + 1e-12):
            return False
        c = np.asarray(center, dtype=float)
        for p in self.punctures:
            if float(geodesic_distance(self.surface.model, c, p)) < r:
                return False
        if self.surface.involution and not self.surface.is_clean_disk(c, r, tol=1e-12):
            return False
        return True


def sweep_trivial_center(ctx: SearchContext, center, n_keep: int = 24,
                         sweep_ratio: float = 1.05) -> List[NeckCandidate]:
    """All-feasible (r, r') scan at one center; returns the locally maximal
    neck plus a seeded sample of feasible candidates for class statistics."""
    surface, const = ctx.surface, ctx.constants
    center = np.asarray(center, dtype=float)
    cap = ctx.radius_cap(center)
    if cap <= 0:
        return []
    geom_hints = surface.hints()
    r_min = cap * 1e-14
    for h in geom_hints:
        d = float(geodesic_distance(surface.model, center, h.center)) \
            if surface.kind == "torus" else float(sphere_distance(center, h.center))
        if d < cap:
            r_min = min(r_min, max(h.scale * 1e-2, 1e-250))
    n_r = min(2400, max(60, int(math.log(cap / r_min) / math.log(sweep_ratio))))
    radii = np.geomspace(r_min, cap * (1 - 1e-12), n_r)
    prof = surface.disk_profile(center, radii)

    d1h = const.delta1 / 2
    d26 = const.delta2 / 6
    inner_ok = prof >= d1h
    if not np.any(inner_ok):
        return []
    curvature = surface.model.curvature
    out: List[NeckCandidate] = []
    best = None
    j_candidates = np.nonzero(inner_ok)[0]
    feasible_pairs = []
    for j in j_candidates:
        # widest admissible outer radius for this inner one
        hi = np.searchsorted(prof, prof[j] + d26, side="right") - 1
        if hi <= j:
            continue
        lo_i = np.searchsorted(radii, 5 * radii[j])
        for i in range(hi, lo_i - 1, -1):
            if not ctx.outer_stable(prof[i]):
                continue
            if not ctx.admissible_trivial(center, radii[i], radii[j]):
                continue
            mod = radial_modulus(curvature, radii[j], radii[i])
            feasible_pairs.append((j, i, mod))
            break
    if not feasible_pairs:
        return []
    feasible_pairs.sort(key=lambda t: -t[2])
    head = max(1, n_keep // 2)
    picks = feasible_pairs[:head]
    rest = feasible_pairs[head:]
    if rest:
        idx = ctx.rng.choice(len(rest), size=min(n_keep - head, len(rest)),
                             replace=False)
        picks += [rest[k] for k in sorted(idx)]
    for j, i, mod in picks:
        spec = AnnulusSpec(kind=TRIVIAL, center=center, r_outer=float(radii[i]),
                           r_inner=float(radii[j]), modulus=float(mod))
        mass = float(prof[i] - prof[j])
        spec.mass = mass
        out.append(NeckCandidate(spec=spec, mass=mass, modulus=float(mod),
                                 clean=True, complement_stable=True,
                                 meta={"inner_mass": float(prof[j]),
                                       "outer_mass": float(prof[i])}))
    return out


def enumerate_admissible(ctx: SearchContext, n_centers: int = 64,
                         marking: Optional[TorusMarking] = None,
                         n_keep: int = 24,
                         sweep_ratio: float = 1.05) -> List[NeckCandidate]:
    """Trivial candidates from hint-seeded plus stratified centers, and the
    genus-branch cylinder families."""
    surface = ctx.surface
    centers: List[np.ndarray] = []
    for h in surface.hints():
        c = np.asarray(h.center, dtype=float)
        keep = True
        for p in ctx.punctures:
            if float(geodesic_distance(surface.model, c, p)) < 1e-9:
                keep = False
        if keep:
            centers.append(c)
        if surface.kind == "sphere":
            centers.append(-c)
    centers.extend(stratified_points(surface, n_centers, ctx.rng))
    if surface.involution and surface.kind == "sphere":
        # seeded centers snapped to the fixed circle give invariant candidates
        for h in surface.hints():
            c = np.asarray(h.center, dtype=float).copy()
            c[1] = 0.0
            n = np.linalg.norm(c)
            if n > 1e-9:
                centers.append(c / n)
                centers.append(-c / n)

    out: List[NeckCandidate] = []
    for c in centers:
        out.extend(sweep_trivial_center(ctx, c, n_keep=n_keep,
                                        sweep_ratio=sweep_ratio))
    if marking is not None:
        out.extend(_torus_cylinder_candidates(ctx, marking, n_keep=n_keep))
    if surface.kind == "sphere" and surface.involution:
        out.extend(_boundary_cylinder_candidates(ctx, n_keep=n_keep))
    return out


def find_long_necks(ctx: SearchContext, candidates: Sequence[NeckCandidate],
                    marking: Optional[TorusMarking] = None,
                    cap: int = 160) -> List[NeckCandidate]:
    """Filter candidates by the long-neck predicate; in genus 1 restrict to
    the complement of I0 and append I0 itself when long enough."""
    const = ctx.constants
    ln = [c for c in candidates if c.is_long_neck(const)]
    if marking is not None:
        lo, hi = marking.i0_interval
        def outside_i0(c: NeckCandidate) -> bool:
            if c.spec.kind == CYLINDER:
                a, b = c.spec.rho0, c.spec.rho1
                return b <= lo or a >= hi
            ctr = np.asarray(c.spec.center, dtype=float)
            s = _transverse_coord(ctx.surface, ctr, marking)
            return not (lo - c.spec.r_outer < s < hi + c.spec.r_outer)
        ln = [c for c in ln if outside_i0(c)]
        if marking.i0_modulus >= const.l1:
            spec = AnnulusSpec(kind=CYLINDER, geodesic="alpha0",
                               rho0=lo, rho1=hi,
                               modulus=marking.i0_modulus,
                               mass=marking.i0_mass)
            ln.append(NeckCandidate(spec=spec, mass=marking.i0_mass,
                                    modulus=marking.i0_modulus, clean=True,
                                    complement_stable=True,
                                    meta={"reference_cylinder": True}))
    ln.sort(key=lambda c: (-c.modulus, c.mass))
    return ln[:cap]


# ---------------------------------------------------------------------------
# Torus marking and cylinder families
# ---------------------------------------------------------------------------

def _short_class(surface: MeasuredSurface) -> Optional[int]:
    """Lattice axis carrying a simple geodesic of length < 1, if any."""
    v1, v2 = surface.model.lattice_basis()
    l1, l2 = float(np.linalg.norm(v1)), float(np.linalg.norm(v2))
    if min(l1, l2) >= 1.0:
        return None
    return 0 if l1 <= l2 else 1


def _transverse_coord(surface: MeasuredSurface, point: np.ndarray,
                      marking: TorusMarking) -> float:
    v1, v2 = surface.model.lattice_basis()
    ridge = v1 if marking.direction == 0 else v2
    other = v2 if marking.direction == 0 else v1
    n = np.array([-ridge[1], ridge[0]]) / np.linalg.norm(ridge)
    period = abs(float(other @ n))
    return float(np.mod(point @ n, period))


def torus_marking(ctx: SearchContext) -> Optional[TorusMarking]:
    """The reference cylinder I0 (mass exactly delta2/6, maximal modulus)
    and the geodesics alpha0 (its core) and alpha1 (the farthest parallel)."""
    surface, const = ctx.surface, ctx.constants
    direction = _short_class(surface)
    if direction is None:
        return None
    v1, v2 = surface.model.lattice_basis()
    ridge = v1 if direction == 0 else v2
    other = v2 if direction == 0 else v1
    ell = float(np.linalg.norm(ridge))
    n = np.array([-ridge[1], ridge[0]]) / np.linalg.norm(ridge)
    period = abs(float(other @ n))
    h_const = ell / (2 * math.pi)

    if surface.involution and surface.boundary_circles == 2:
        # boundary circles represent the class: alpha0, alpha1 are the two
        # fixed circles; I0 is a conjugation-invariant cylinder around alpha0
        target = const.delta2 / 6

        def sym_mass(half):
            cuts = [0.0 - half, half]
            prof = surface.torus_band_profile(cuts)
            return float(prof[-1])
        half = optimize.brentq(lambda h: sym_mass(h) - target,
                               1e-9 * period, period / 2 * (1 - 1e-9))
        lo, hi = -half, half
        i0_mod = (hi - lo) / h_const
        return TorusMarking(direction=direction, alpha0_offset=0.0,
                            alpha1_offset=period / 2,
                            i0_interval=(lo, hi), i0_modulus=i0_mod,
                            i0_mass=target, h_theta_const=h_const,
                            boundary_class=True)

    # generic: slide a window of mass delta2/6, maximize its width
    target = const.delta2 / 6
    n_grid = 256
    xs = np.linspace(0.0, period, n_grid, endpoint=False)
    cuts = np.concatenate([xs, xs + period])
    prof = surface.torus_band_profile(list(cuts))
    total = prof[n_grid] - prof[0]

    def window_width(x0_idx: int) -> Tuple[float, float]:
        base = prof[x0_idx]
        hi_val = base + target
        j = np.searchsorted(prof, hi_val) - 1
        j = min(max(j, x0_idx), len(cuts) - 2)
        # refine endpoint by local linear interpolation
        seg = prof[j + 1] - prof[j]
        frac = 0.0 if seg <= 0 else (hi_val - prof[j]) / seg
        x1 = cuts[j] + frac * (cuts[j + 1] - cuts[j])
        return float(x1 - cuts[x0_idx]), float(x1)

    best_w, best_lo, best_hi = -1.0, 0.0, 0.0
    for i in range(n_grid):
        if prof[i] + target > prof[0] + total:
            continue
        w, x1 = window_width(i)
        if w > best_w and w < period:
            best_w, best_lo, best_hi = w, float(cuts[i]), x1
    if best_w <= 0:
        return None
    alpha0 = (best_lo + best_hi) / 2
    return TorusMarking(direction=direction,
                        alpha0_offset=float(np.mod(alpha0, period)),
                        alpha1_offset=float(np.mod(alpha0 + period / 2, period)),
                        i0_interval=(best_lo, best_hi),
                        i0_modulus=best_w / h_const, i0_mass=target,
                        h_theta_const=h_const)


def _torus_cylinder_candidates(ctx: SearchContext, marking: TorusMarking,
                               n_keep: int = 24) -> List[NeckCandidate]:
    """Sub-cylinders of C(alpha1): transverse bands avoiding alpha0."""
    surface, const = ctx.surface, ctx.constants
    v1, v2 = surface.model.lattice_basis()
    other = v2 if marking.direction == 0 else v1
    n = np.array([-v1[1], v1[0]]) / np.linalg.norm(v1) if marking.direction == 0 \
        else np.array([-v2[1], v2[0]]) / np.linalg.norm(v2)
    period = abs(float(other @ n))
    a0 = marking.alpha0_offset
    # band coordinates measured from alpha0; admissible bands avoid alpha0
    n_grid = 512
    xs = np.linspace(a0, a0 + period, n_grid + 1)
    prof = surface.torus_band_profile(list(xs))
    total = prof[-1] - prof[0]
    out = []
    d26 = const.delta2 / 6
    # two-pointer widest-window scan for bands of mass <= delta2/6
    j = 0
    best = None
    for i in range(n_grid):
        while j < n_grid and prof[j + 1] - prof[i] <= d26:
            j += 1
        if j <= i:
            continue
        lo, hi = float(xs[i]), float(xs[j])
        mass = float(prof[j] - prof[i])
        comp_mass = total - mass
        comp = ComponentData(mass=comp_mass, genus=0, boundaries=2)
        mod = (hi - lo) / marking.h_theta_const
        cand = NeckCandidate(spec=AnnulusSpec(kind=CYLINDER, geodesic="alpha1",
                                              rho0=lo, rho1=hi,
                                              modulus=mod, mass=mass),
                             mass=mass, modulus=mod, clean=True,
                             complement_stable=component_stable(comp, const))
        if best is None or cand.modulus > best.modulus:
            best = cand
        if len(out) < n_keep and i % max(1, n_grid // n_keep) == 0:
            out.append(cand)
    if best is not None:
        out.insert(0, best)
    return out


def _boundary_cylinder_candidates(ctx: SearchContext,
                                  n_keep: int = 24) -> List[NeckCandidate]:
    """Sub-cylinders of the cylinder around the boundary circle of a doubled
    disk: latitude bands, clean iff symmetric or one-sided."""
    surface, const = ctx.surface, ctx.constants
    out = []
    d26 = const.delta2 / 6
    total = ctx.total
    # symmetric bands [-x, x]
    for x in np.linspace(math.pi / 2 * 0.999 / 32, math.pi / 2 * 0.999, 32):
        lo, hi = -float(x), float(x)
        mass = ctx.boundary_band_mass(lo, hi)
        if mass > d26:
            break
        mod = radial_modulus(1, math.pi / 2 - hi, math.pi / 2 - lo)  # sec integral
        cap_mass = (total - mass) / 2
        comp = ComponentData(mass=cap_mass, genus=0, boundaries=1)
        out.append(NeckCandidate(
            spec=AnnulusSpec(kind=CYLINDER, geodesic="boundary",
                             rho0=lo, rho1=hi, modulus=mod, mass=mass),
            mass=mass, modulus=mod, clean=True,
            complement_stable=component_stable(comp, const),
            meta={"symmetric": True}))
    return out[:n_keep]


# ---------------------------------------------------------------------------
# Relatedness, envelopes, similarity
# ---------------------------------------------------------------------------

def topologically_related(ctx: SearchContext, c1: NeckCandidate,
                          c2: NeckCandidate) -> bool:
    s1, s2 = c1.spec, c2.spec
    if s1.kind == CYLINDER and s2.kind == CYLINDER:
        return s1.geodesic == s2.geodesic
    if s1.kind != s2.kind:
        return False
    d = float(geodesic_distance(ctx.surface.model, s1.center, s2.center))
    if d > s1.r_inner + s2.r_inner:
        return False
    return _union_clean(ctx, s1, s2)


def _union_clean(ctx: SearchContext, s1: AnnulusSpec, s2: AnnulusSpec) -> bool:
    surface = ctx.surface
    if not surface.involution:
        return True
    inv1 = not _off_boundary(surface, s1)
    inv2 = not _off_boundary(surface, s2)
    if inv1 and inv2:
        return True
    if inv1 != inv2:
        return False
    # both off-boundary: clean union iff they sit in the same half
    side1 = float(np.asarray(s1.center)[1])
    side2 = float(np.asarray(s2.center)[1])
    return side1 * side2 > 0


def _off_boundary(surface: MeasuredSurface, spec: AnnulusSpec) -> bool:
    c = np.asarray(spec.center, dtype=float)
    cbar = surface.involute_points(c)
    return float(geodesic_distance(surface.model, c, cbar)) > 1e-9


def envelope_mass_bounds(ctx: SearchContext, c1: NeckCandidate,
                         c2: NeckCandidate) -> Tuple[float, float]:
    """Sandwich for mu(M(I1, I2)) from single-center profiles.

    M = B1 u B2 minus (B1' n B2'); with center distance d,
    B1 u B2 is contained in the d-fattened larger disk and contains it
    d-shrunk, and similarly for the inner lens around the smaller center.
    """
    s1, s2 = c1.spec, c2.spec
    surface = ctx.surface
    if s1.kind == CYLINDER and s2.kind == CYLINDER:
        lo = min(s1.rho0, s2.rho0)
        hi = max(s1.rho1, s2.rho1)
        if s1.geodesic == "boundary":
            if lo <= 0 <= hi:
                m = max(abs(lo), abs(hi))
                lo, hi = -m, m
            v = ctx.boundary_band_mass(lo, hi)
            return v, v
        prof = surface.torus_band_profile([lo, hi])
        v = float(prof[1] - prof[0])
        return v, v
    p1 = np.asarray(s1.center, dtype=float)
    p2 = np.asarray(s2.center, dtype=float)
    d = float(geodesic_distance(surface.model, p1, p2))
    big, small = (s1, s2) if s1.r_outer >= s2.r_outer else (s2, s1)
    pb = np.asarray(big.center, dtype=float)
    ps = np.asarray(small.center, dtype=float)
    outer_hi = min(big.r_outer + d, math.pi * (1 - 1e-12))
    outer_lo = big.r_outer
    inner_small, inner_big = (s1, s2) if s1.r_inner <= s2.r_inner else (s2, s1)
    pi_s = np.asarray(inner_small.center, dtype=float)
    lens_hi = inner_small.r_inner                      # contains the lens
    lens_lo = max(inner_small.r_inner - d, 0.0)        # contained in it
    prof_b = surface.disk_profile(pb, [outer_lo, outer_hi])
    if lens_lo > 0:
        prof_s = surface.disk_profile(pi_s, [lens_lo, lens_hi])
        lens_min, lens_max = float(prof_s[0]), float(prof_s[1])
    else:
        lens_max = float(surface.disk_profile(pi_s, [lens_hi])[0])
        lens_min = 0.0
    upper = float(prof_b[1]) - lens_min
    lower = float(prof_b[0]) - lens_max
    return max(lower, 0.0), upper


def core_m(ctx: SearchContext, c1: NeckCandidate, c2: NeckCandidate) -> AnnulusSpec:
    """m(I1, I2): for trivial pairs A(d(p2, boundary of B1), r2', p2) with
    the r2 <= r1 convention; cylinders take the interval hull."""
    s1, s2 = c1.spec, c2.spec
    if s1.kind == CYLINDER and s2.kind == CYLINDER:
        return envelope_M(ctx, c1, c2)
    if s2.r_outer > s1.r_outer:
        s1, s2 = s2, s1
    d = float(geodesic_distance(ctx.surface.model, s1.center, s2.center))
    r = s1.r_outer - d
    if r <= s2.r_inner:
        raise DomainError("core annulus degenerate; inputs not related")
    return AnnulusSpec(kind=TRIVIAL, center=np.asarray(s2.center, dtype=float),
                       r_outer=r, r_inner=s2.r_inner,
                       modulus=radial_modulus(ctx.surface.model.curvature,
                                              s2.r_inner, r))


def envelope_M(ctx: SearchContext, c1: NeckCandidate,
               c2: NeckCandidate) -> AnnulusSpec:
    s1, s2 = c1.spec, c2.spec
    if s1.kind == CYLINDER and s2.kind == CYLINDER:
        lo = min(s1.rho0, s2.rho0)
        hi = max(s1.rho1, s2.rho1)
        if s1.geodesic == "boundary" and lo <= 0 <= hi:
            m = max(abs(lo), abs(hi))
            lo, hi = -m, m
        return AnnulusSpec(kind=CYLINDER, geodesic=s1.geodesic, rho0=lo, rho1=hi)
    raise DomainError("envelope_M as a spec is only closed-form for "
                      "cylinders; use envelope_mass_bounds for trivial pairs")


def similar(ctx: SearchContext, c1: NeckCandidate, c2: NeckCandidate,
            record: Optional[dict] = None) -> bool:
    """I1 ~ I2: topologically related with mu(M) <= delta2 / 2."""
    if not topologically_related(ctx, c1, c2):
        return False
    lo, hi = envelope_mass_bounds(ctx, c1, c2)
    thr = ctx.constants.delta2 / 2
    if record is not None:
        record["envelope_bounds"] = (lo, hi)
    if hi <= thr:
        return True
    if lo > thr:
        return False
    if record is not None:
        record["gray"] = True
    return hi <= thr * 1.02      # boundary case: lean on the upper bound


def equivalence_classes(ctx: SearchContext,
                        necks: Sequence[NeckCandidate]) -> List[EquivalenceClass]:
    """Connected components of the similarity graph, with a post-hoc
    transitivity audit resolved by weakest-edge splitting."""
    n = len(necks)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = {}
    for i in range(n):
        for j in range(i + 1, n):
            rec = {}
            if similar(ctx, necks[i], necks[j], rec):
                edges[(i, j)] = rec.get("envelope_bounds", (0, 0))[1]
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)

    groups: Dict[int, List[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    classes = []
    for mem in groups.values():
        incidents = 0
        mem_set = set(mem)
        # transitivity audit: every intra-class pair must be similar; if not,
        # split at the weakest (largest-envelope) edge and re-run
        for _ in range(4):
            bad = None
            for ii in range(len(mem)):
                for jj in range(ii + 1, len(mem)):
                    if not similar(ctx, necks[mem[ii]], necks[mem[jj]]):
                        bad = (mem[ii], mem[jj])
                        break
                if bad:
                    break
            if not bad:
                break
            incidents += 1
            intra = [(e, v) for e, v in edges.items()
                     if e[0] in mem_set and e[1] in mem_set]
            if not intra:
                break
            weakest = max(intra, key=lambda t: t[1])[0]
            del edges[weakest]
            sub_parent = {m: m for m in mem}

            def sfind(a):
                while sub_parent[a] != a:
                    sub_parent[a] = sub_parent[sub_parent[a]]
                    a = sub_parent[a]
                return a
            for (a, b) in [e for e in edges if e[0] in mem_set and e[1] in mem_set]:
                ra, rb = sfind(a), sfind(b)
                if ra != rb:
                    sub_parent[max(ra, rb)] = min(ra, rb)
            subgroups: Dict[int, List[int]] = {}
            for m in mem:
                subgroups.setdefault(sfind(m), []).append(m)
            if len(subgroups) > 1:
                items = sorted(subgroups.values(), key=len)
                for extra in items[:-1]:
                    classes.append(EquivalenceClass(members=extra,
                                                    incidents=incidents))
                mem = items[-1]
                mem_set = set(mem)
        classes.append(EquivalenceClass(members=mem, incidents=incidents))
    return classes


# ---------------------------------------------------------------------------
# Representative selection
# ---------------------------------------------------------------------------

def _feasible_outer(ctx: SearchContext, cache, center, r_inner: float,
                    mu_inner: float, r: float) -> bool:
    if not ctx.admissible_trivial(center, r, r_inner):
        return False
    mu = cache.mass(r)
    return (mu - mu_inner <= ctx.constants.delta2 / 6
            and ctx.outer_stable(mu))


def _feasible_inner(ctx: SearchContext, cache, center, r_outer: float,
                    mu_outer: float, rp: float) -> bool:
    if not (0 < rp <= r_outer / 5):
        return False
    mu = cache.mass(rp)
    return (mu >= ctx.constants.delta1 / 2
            and mu_outer - mu <= ctx.constants.delta2 / 6)


def select_maximal(ctx: SearchContext, cls: EquivalenceClass,
                   necks: Sequence[NeckCandidate], refine_budget: int = 40,
                   keep_invariant: bool = False) -> NeckCandidate:
    """Best member refined by coordinate ascent on (r, r') (or the band
    interval), maximizing the modulus within the long-neck constraints.
    The result must stay similar to the class members; otherwise the
    unrefined best is returned and flagged."""
    best = max((necks[i] for i in cls.members), key=lambda c: c.modulus)
    spec = best.spec
    if spec.kind == CYLINDER:
        refined = _refine_cylinder(ctx, best)
    else:
        refined = _refine_trivial(ctx, best, refine_budget,
                                  keep_invariant=keep_invariant)
    probe = [necks[i] for i in
             (cls.members if len(cls.members) <= 12
              else [cls.members[k] for k in
                    np.linspace(0, len(cls.members) - 1, 12).astype(int)])]
    if all(similar(ctx, refined, m) for m in probe) \
            and refined.modulus >= best.modulus - 1e-12:
        return refined
    best.meta["refinement_reverted"] = True
    return best


def _refine_trivial(ctx: SearchContext, cand: NeckCandidate, budget: int,
                    keep_invariant: bool = False) -> NeckCandidate:
    surface, const = ctx.surface, ctx.constants
    center = np.asarray(cand.spec.center, dtype=float)
    r, rp = cand.spec.r_outer, cand.spec.r_inner
    curvature = surface.model.curvature
    cap = ctx.radius_cap(center)
    cache = surface.profile_cache(center, [rp, r, cap * (1 - 1e-12)])
    for _ in range(3):
        mu_in = cache.mass(rp)
        # outer radius up by bisection
        hi = cap * (1 - 1e-12)
        if _feasible_outer(ctx, cache, center, rp, mu_in, hi):
            r = hi
        else:
            lo = r
            for _ in range(budget // 2):
                mid = math.sqrt(lo * hi)
                if _feasible_outer(ctx, cache, center, rp, mu_in, mid):
                    lo = mid
                else:
                    hi = mid
                if hi / lo < 1 + 1e-9:
                    break
            r = lo
        mu_out = cache.mass(r)
        # inner radius down by bisection
        lo = rp * 1e-12
        if _feasible_inner(ctx, cache, center, r, mu_out, lo):
            rp = lo
        else:
            hi_in = rp
            for _ in range(budget // 2):
                mid = math.sqrt(lo * hi_in)
                if _feasible_inner(ctx, cache, center, r, mu_out, mid):
                    hi_in = mid
                else:
                    lo = mid
                if hi_in / lo < 1 + 1e-9:
                    break
            rp = hi_in
    mod = radial_modulus(curvature, rp, r)
    mass = float(cache.mass(r) - cache.mass(rp))
    spec = AnnulusSpec(kind=TRIVIAL, center=center, r_outer=float(r),
                       r_inner=float(rp), modulus=float(mod), mass=mass)
    return NeckCandidate(spec=spec, mass=mass, modulus=float(mod), clean=True,
                         complement_stable=True,
                         meta=dict(cand.meta, refined=True))


def _refine_cylinder(ctx: SearchContext, cand: NeckCandidate) -> NeckCandidate:
    """Widen a band to the mass constraint by bisection on each end."""
    surface, const = ctx.surface, ctx.constants
    spec = cand.spec
    d26 = const.delta2 / 6
    if spec.geodesic == "boundary":
        def mass_of(lo, hi):
            return ctx.boundary_band_mass(lo, hi)
        lim = math.pi / 2 * 0.9999
        if cand.meta.get("symmetric", True):
            lo_x, hi_x = abs(spec.rho1), lim
            if mass_of(-hi_x, hi_x) <= d26:
                x = hi_x
            else:
                x0, x1 = lo_x, hi_x
                for _ in range(60):
                    mid = (x0 + x1) / 2
                    if mass_of(-mid, mid) <= d26:
                        x0 = mid
                    else:
                        x1 = mid
                x = x0
            # the band is the annulus of radii pi/2 -+ x around the pole of
            # the boundary circle
            mod = radial_modulus(1, math.pi / 2 - x, math.pi / 2 + x)
            mass = mass_of(-x, x)
            spec2 = AnnulusSpec(kind=CYLINDER, geodesic="boundary", rho0=-x,
                                rho1=x, modulus=mod, mass=mass)
            total = ctx.total
            comp = ComponentData(mass=(total - mass) / 2, genus=0, boundaries=1)
            return NeckCandidate(spec=spec2, mass=mass, modulus=mod, clean=True,
                                 complement_stable=component_stable(comp, const),
                                 meta=dict(cand.meta, refined=True))
        return cand
    if cand.meta.get("reference_cylinder"):
        return cand
    # torus band: widen both ends alternately
    lo, hi = spec.rho0, spec.rho1
    marking_h = spec.modulus / (hi - lo) if hi > lo else 1.0

    def mass_of(a, b):
        prof = surface.torus_band_profile([a, b])
        return float(prof[1] - prof[0])
    v1, v2 = surface.model.lattice_basis()
    period = max(float(np.linalg.norm(v1)), float(np.linalg.norm(v2)))
    for _ in range(2):
        a0, a1 = lo - period, lo
        for _ in range(50):
            mid = (a0 + a1) / 2
            if mass_of(mid, hi) <= d26:
                a1 = mid
            else:
                a0 = mid
        lo = a1
        b0, b1 = hi, hi + period
        for _ in range(50):
            mid = (b0 + b1) / 2
            if mass_of(lo, mid) <= d26:
                b0 = mid
            else:
                b1 = mid
        hi = b0
    mass = mass_of(lo, hi)
    mod = (hi - lo) * marking_h
    spec2 = AnnulusSpec(kind=CYLINDER, geodesic=spec.geodesic, rho0=lo, rho1=hi,
                        modulus=mod, mass=mass)
    return NeckCandidate(spec=spec2, mass=mass, modulus=mod, clean=True,
                         complement_stable=cand.complement_stable,
                         meta=dict(cand.meta, refined=True))


# ---------------------------------------------------------------------------
# Essential disjointness
# ---------------------------------------------------------------------------

def trim_spec(ctx: SearchContext, spec: AnnulusSpec, amount: float) -> AnnulusSpec:
    """C(amount, amount; I): remove `amount` of modulus from each end."""
    curvature = ctx.surface.model.curvature
    if spec.kind == TRIVIAL:
        mod = spec.modulus if spec.modulus is not None else \
            radial_modulus(curvature, spec.r_inner, spec.r_outer)
        if 2 * amount >= mod:
            raise DomainError("trim exceeds modulus")
        r_o = invert_radial_modulus(curvature, spec.r_outer, amount)
        r_i = invert_radial_modulus(curvature, spec.r_outer, mod - amount)
        return AnnulusSpec(kind=TRIVIAL, center=spec.center, r_outer=r_o,
                           r_inner=r_i, modulus=mod - 2 * amount)
    mod = spec.modulus
    if mod is None or 2 * amount >= mod:
        raise DomainError("trim exceeds modulus")
    if spec.geodesic == "boundary":
        # modulus coordinate F(s) = log tan(s/2 + pi/4) on latitude s
        def F(s):
            return math.log(math.tan(s / 2 + math.pi / 4))

        def Finv(v):
            return 2 * (math.atan(math.exp(v)) - math.pi / 4)
        lo = Finv(F(spec.rho0) + amount)
        hi = Finv(F(spec.rho1) - amount)
        return AnnulusSpec(kind=CYLINDER, geodesic="boundary", rho0=lo, rho1=hi,
                           modulus=mod - 2 * amount)
    h_const = (spec.rho1 - spec.rho0) / mod
    return AnnulusSpec(kind=CYLINDER, geodesic=spec.geodesic,
                       rho0=spec.rho0 + amount * h_const,
                       rho1=spec.rho1 - amount * h_const,
                       modulus=mod - 2 * amount)


def _shells_intersect_sphere(p1, a1, b1, p2, a2, b2) -> bool:
    """Whether two spherical distance shells {a_i <= d(p_i, x) <= b_i} meet."""
    D = float(sphere_distance(np.asarray(p1, float), np.asarray(p2, float)))

    def gap(d1):
        lo2 = abs(D - d1)
        hi2 = min(D + d1, 2 * math.pi - D - d1)
        return min(b2, hi2) - max(a2, lo2)
    probes = [a1, b1, D, math.pi - D, b2 - D, D - a2, 2 * math.pi - D - a2]
    probes = [p for p in probes if a1 <= p <= b1] + \
        list(np.linspace(a1, b1, 64))
    return max(gap(p) for p in probes) >= 0


def essentially_disjoint(ctx: SearchContext, c1: NeckCandidate,
                         c2: NeckCandidate) -> bool:
    """C(K1, K1; I1) and C(K1, K1; I2) have empty intersection."""
    k1 = ctx.constants.k1
    s1 = trim_spec(ctx, c1.spec, k1)
    s2 = trim_spec(ctx, c2.spec, k1)
    return not _specs_intersect(ctx, s1, s2)


def _band_interval_sphere(spec: AnnulusSpec) -> Tuple[float, float]:
    return spec.rho0, spec.rho1


def _specs_intersect(ctx: SearchContext, s1: AnnulusSpec,
                     s2: AnnulusSpec) -> bool:
    surface = ctx.surface
    if s1.kind == CYLINDER and s2.kind == CYLINDER:
        if s1.geodesic != s2.geodesic:
            return True     # conservative; only same-geodesic pairs arise
        return not (s1.rho1 <= s2.rho0 or s2.rho1 <= s1.rho0)
    if s1.kind == TRIVIAL and s2.kind == TRIVIAL:
        if surface.kind == "sphere":
            return _shells_intersect_sphere(s1.center, s1.r_inner, s1.r_outer,
                                            s2.center, s2.r_inner, s2.r_outer)
        D = float(geodesic_distance(surface.model, s1.center, s2.center))
        return not (D > s1.r_outer + s2.r_outer
                    or D + s1.r_outer < s2.r_inner
                    or D + s2.r_outer < s1.r_inner)
    triv, band = (s1, s2) if s1.kind == TRIVIAL else (s2, s1)
    if band.geodesic == "boundary" and surface.kind == "sphere":
        s0 = float(np.arcsin(np.clip(np.asarray(triv.center)[1], -1, 1)))
        lo, hi = s0 - triv.r_outer, s0 + triv.r_outer
        return not (hi <= band.rho0 or lo >= band.rho1)
    if surface.kind == "torus":
        dens = surface.density
        if isinstance(dens, TorusBandDensity):
            s0 = float(dens.transverse_coord(np.asarray(triv.center)))
        else:
            s0 = 0.0
        lo, hi = s0 - triv.r_outer, s0 + triv.r_outer
        return not (hi <= band.rho0 or lo >= band.rho1)
    return True


# ---------------------------------------------------------------------------
# Decomposition assembly
# ---------------------------------------------------------------------------

@dataclass
class ThinAnnulus:
    spec: AnnulusSpec            # trimmed, C(2 K1, 2 K1; representative)
    parent: AnnulusSpec          # the untrimmed representative
    class_id: int
    mass: float
    modulus: float
    invariant: bool = False
    conjugate_of: Optional[int] = None

    def to_dict(self) -> dict:
        return {"kind": self.spec.kind,
                "center": (None if self.spec.center is None
                           else list(map(float, self.spec.center))),
                "r_outer": self.spec.r_outer, "r_inner": self.spec.r_inner,
                "geodesic": self.spec.geodesic,
                "rho0": self.spec.rho0, "rho1": self.spec.rho1,
                "modulus": self.modulus, "mass": self.mass,
                "parent_modulus": self.parent.modulus,
                "parent_mass": self.parent.mass,
                "class_id": self.class_id,
                "invariant": self.invariant,
                "conjugate_of": self.conjugate_of}


@dataclass
class ThickFace:
    face_id: int
    mass: float
    genus: int
    boundaries: int
    diameter: float
    kind: str                    # disk | sphere-complement | band | torus-complement
    boundary_annuli: List[Tuple[int, str]]   # (thin index, "inner"/"outer")
    data: dict = field(default_factory=dict)

    def component(self) -> ComponentData:
        return ComponentData(mass=self.mass, genus=self.genus,
                             boundaries=self.boundaries)

    def to_dict(self) -> dict:
        return {"face_id": self.face_id, "mass": self.mass,
                "genus": self.genus, "boundaries": self.boundaries,
                "diameter": self.diameter, "kind": self.kind,
                "boundary_annuli": self.boundary_annuli,
                "data": {k: v for k, v in self.data.items()
                         if isinstance(v, (int, float, str, bool))}}


@dataclass
class BubbleDecomposition:
    case: str                     # generic | trivial-genus0 | trivial-genus1
    constants: ConstantsBundle
    thin: List[ThinAnnulus]
    thick: List[ThickFace]
    normalization: Optional[SphereNormalization] = None
    marking: Optional[TorusMarking] = None
    audits: dict = field(default_factory=dict)
    trivial_report: dict = field(default_factory=dict)
    classes: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"case": self.case,
                "constants": self.constants.to_dict(),
                "thin": [t.to_dict() for t in self.thin],
                "thick": [f.to_dict() for f in self.thick],
                "normalization": (None if self.normalization is None
                                  else self.normalization.to_dict()),
                "classes": self.classes,
                "audits": self.audits,
                "trivial_report": self.trivial_report}


def _to_sphere_circles(thin: ThinAnnulus) -> Tuple[np.ndarray, float, float]:
    """(center, r_inner, r_outer) of a thin annulus as a sphere annulus;
    boundary bands become annuli around the pole of the fixed circle."""
    spec = thin.spec
    if spec.kind == TRIVIAL:
        return np.asarray(spec.center, dtype=float), spec.r_inner, spec.r_outer
    if spec.geodesic == "boundary":
        from .surface import EAST_POLE
        return EAST_POLE.copy(), math.pi / 2 - spec.rho1, math.pi / 2 - spec.rho0
    raise DomainError("not a sphere annulus")


def assemble_faces_sphere(ctx: SearchContext,
                          thin: List[ThinAnnulus]) -> List[ThickFace]:
    """Complement components from the nesting forest of disjoint annuli."""
    surface = ctx.surface
    circles = [_to_sphere_circles(t) for t in thin]
    n = len(circles)
    # containment: outer disk of j inside inner disk of i
    parent = [-1] * n
    for j in range(n):
        pj, rij, roj = circles[j]
        best, best_r = -1, math.inf
        for i in range(n):
            if i == j:
                continue
            pi_, rii, roi = circles[i]
            d = float(sphere_distance(pi_, pj))
            if d + roj <= rii and rii < best_r:
                best, best_r = i, rii
        parent[j] = best
    children: Dict[int, List[int]] = {i: [] for i in range(-1, n)}
    for j, p in enumerate(parent):
        children[p].append(j)

    faces: List[ThickFace] = []
    # root face: complement of all top-level outer disks
    top = children[-1]
    top_mass = ctx.total
    for j in top:
        pj, _, roj = circles[j]
        top_mass -= surface.disk_mass(pj, roj)
    radii_top = [circles[j][2] for j in top]
    diam = math.pi if all(r <= math.pi / 2 for r in radii_top) \
        else 2 * (math.pi - max(radii_top))
    faces.append(ThickFace(face_id=0, mass=max(top_mass, 0.0), genus=0,
                           boundaries=len(top), diameter=diam,
                           kind="sphere-complement",
                           boundary_annuli=[(j, "outer") for j in top]))
    for i in range(n):
        pi_, rii, _ = circles[i]
        mass = surface.disk_mass(pi_, rii)
        bnd = [(i, "inner")]
        for j in children[i]:
            pj, _, roj = circles[j]
            mass -= surface.disk_mass(pj, roj)
            bnd.append((j, "outer"))
        diam = min(2 * rii, math.pi)
        faces.append(ThickFace(face_id=len(faces), mass=max(mass, 0.0),
                               genus=0, boundaries=1 + len(children[i]),
                               diameter=diam, kind="disk",
                               boundary_annuli=bnd,
                               data={"center": list(map(float, pi_)),
                                     "radius": float(rii)}))
    return faces


def assemble_faces_torus(ctx: SearchContext, thin: List[ThinAnnulus],
                         marking: TorusMarking) -> List[ThickFace]:
    """Complement of transverse bands: bands again, in cyclic order."""
    surface = ctx.surface
    bands = []
    for idx, t in enumerate(thin):
        if t.spec.kind != CYLINDER:
            raise DomainError("mixed torus decompositions are out of scope")
        bands.append((t.spec.rho0, t.spec.rho1, idx))
    bands.sort()
    v1, v2 = surface.model.lattice_basis()
    ridge = v1 if marking.direction == 0 else v2
    other = v2 if marking.direction == 0 else v1
    n_vec = np.array([-ridge[1], ridge[0]]) / np.linalg.norm(ridge)
    period = abs(float(other @ n_vec))
    ell = float(np.linalg.norm(ridge))
    faces = []
    for k, (lo, hi, idx) in enumerate(bands):
        nxt_lo, nxt_hi, nxt_idx = bands[(k + 1) % len(bands)]
        gap_lo, gap_hi = hi, nxt_lo + (period if k == len(bands) - 1 else 0.0)
        if gap_hi <= gap_lo:
            raise ConstructionError("thin bands overlap on the torus")
        prof = surface.torus_band_profile([gap_lo, gap_hi])
        mass = float(prof[1] - prof[0])
        width = gap_hi - gap_lo
        diam = math.hypot(width, ell / 2)
        faces.append(ThickFace(face_id=k, mass=mass, genus=0, boundaries=2,
                               diameter=diam, kind="band",
                               boundary_annuli=[(idx, "outer"),
                                                (nxt_idx, "inner")],
                               data={"interval": [float(gap_lo), float(gap_hi)],
                                     "width": float(width)}))
    return faces


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

def audit_decomposition(ctx: SearchContext, decomposition: BubbleDecomposition,
                        marking: Optional[TorusMarking] = None,
                        n_maximality: int = 200) -> dict:
    surface, const = ctx.surface, ctx.constants
    thin, thick = decomposition.thin, decomposition.thick
    audits: dict = {}

    # pairwise essential disjointness of the untrimmed representatives,
    # and exact disjointness of the trimmed annuli
    ok = True
    for i in range(len(thin)):
        for j in range(i + 1, len(thin)):
            if _specs_intersect(ctx, thin[i].spec, thin[j].spec):
                ok = False
    audits["thin_disjoint"] = ok

    # stability of every thick component
    stab = all(component_stable(f.component(), const) for f in thick)
    audits["thick_stable"] = stab
    audits["thick_components"] = [f.to_dict() for f in thick]

    # mass partition
    total = ctx.total
    part = sum(t.mass for t in thin) + sum(f.mass for f in thick)
    audits["mass_partition_error"] = float(abs(part - total) / max(total, 1e-300))

    # Euler bookkeeping: thin annuli have chi 0
    chi_target = 2 if surface.kind == "sphere" else 0
    chi = sum(2 - 2 * f.genus - f.boundaries for f in thick)
    audits["euler_ok"] = (chi == chi_target)
    audits["euler"] = {"thick_sum": chi, "target": chi_target}

    # conjugation invariance
    if surface.involution:
        inv_ok = True
        for t in thin:
            if t.invariant:
                continue
            if t.conjugate_of is None:
                inv_ok = False
        audits["conjugation_invariant"] = inv_ok

    # maximality: random admissible annuli inside thick faces find no
    # long neck
    hits = 0
    tried = 0
    for f in thick:
        centers = _face_interior_points(ctx, f, thin,
                                        max(8, n_maximality // max(len(thick), 1)))
        for c in centers:
            tried += 1
            cands = sweep_trivial_center(ctx, c, n_keep=1)
            for cand in cands:
                if cand.is_long_neck(const) and _inside_face(ctx, f, thin, cand):
                    hits += 1
    audits["maximality_samples"] = tried
    audits["maximality_violations"] = hits
    audits["passed"] = bool(ok and stab and hits == 0
                            and audits["mass_partition_error"] < 0.01
                            and audits["euler_ok"])
    return audits


def _face_interior_points(ctx: SearchContext, face: ThickFace,
                          thin: List[ThinAnnulus], n: int) -> List[np.ndarray]:
    rng = ctx.rng
    surface = ctx.surface
    pts = []
    if face.kind in ("disk",):
        c = np.asarray(face.data["center"], dtype=float)
        R = face.data["radius"]
        for _ in range(n * 3):
            rho = R * math.sqrt(rng.random()) * 0.98
            th = rng.random() * 2 * math.pi
            p = _exp_point(surface, c, rho, th)
            if _point_in_face(ctx, face, thin, p):
                pts.append(p)
            if len(pts) >= n:
                break
    elif face.kind == "sphere-complement":
        for _ in range(n * 5):
            p = stratified_points(surface, 1, rng)[0]
            if _point_in_face(ctx, face, thin, p):
                pts.append(p)
            if len(pts) >= n:
                break
    elif face.kind in ("band", "torus-complement"):
        lo, hi = face.data["interval"]
        v1, v2 = surface.model.lattice_basis()
        for _ in range(n * 3):
            s = lo + (hi - lo) * rng.uniform(0.05, 0.95)
            t = rng.random()
            base = (v1 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v2)
            other = (v2 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v1)
            n_vec = np.array([-base[1], base[0]]) / np.linalg.norm(base)
            p = t * base + s * n_vec
            pts.append(np.asarray(p, dtype=float))
            if len(pts) >= n:
                break
    return pts


def _exp_point(surface: MeasuredSurface, center, rho, theta) -> np.ndarray:
    if surface.kind == "sphere":
        from .geometry import sphere_exp
        return sphere_exp(center, np.array([rho]), np.array([theta]))[0]
    return np.asarray(center, dtype=float) + rho * np.array([math.cos(theta),
                                                             math.sin(theta)])


def _point_in_face(ctx: SearchContext, face: ThickFace,
                   thin: List[ThinAnnulus], p: np.ndarray) -> bool:
    surface = ctx.surface
    if surface.kind == "sphere":
        for t in thin:
            c, ri, ro = _to_sphere_circles(t)
            d = float(sphere_distance(c, p))
            if ri < d < ro:
                return False
        if face.kind == "disk":
            c = np.asarray(face.data["center"], dtype=float)
            if float(sphere_distance(c, p)) >= face.data["radius"]:
                return False
            for (j, side) in face.boundary_annuli:
                if side == "outer":
                    cj, _, roj = _to_sphere_circles(thin[j])
                    if float(sphere_distance(cj, p)) < roj:
                        return False
            return True
        for (j, side) in face.boundary_annuli:
            cj, _, roj = _to_sphere_circles(thin[j])
            if float(sphere_distance(cj, p)) < roj:
                return False
        return True
    if face.kind in ("band", "torus-complement"):
        lo, hi = face.data["interval"]
        dens = surface.density
        if isinstance(dens, TorusBandDensity):
            s = float(dens.transverse_coord(p))
        else:
            s = 0.0
        period = dens._period if isinstance(dens, TorusBandDensity) else 1.0
        for base in (s, s + period, s - period):
            if lo < base < hi:
                return True
        return False
    return True


def _inside_face(ctx: SearchContext, face: ThickFace, thin: List[ThinAnnulus],
                 cand: NeckCandidate) -> bool:
    """Whether the candidate annulus is contained in the face (its band of
    radii avoids all thin annuli)."""
    for t in thin:
        if _specs_intersect(ctx, cand.spec, t.spec):
            return False
    return True


# ---------------------------------------------------------------------------
# The main construction
# ---------------------------------------------------------------------------

def trivial_genus1_report(constants: ConstantsBundle) -> dict:
    """Modulus bound for the small-measure torus: the self-consistent L with
    a safety factor 2 on the density estimate."""
    a_exp = constants.c1_prime * math.exp(constants.c3 * math.pi) / math.pi ** 2
    x = 1.0
    L = constants.c2 + math.pi
    for _ in range(200):
        L = constants.c2 + math.pi + math.log(max(a_exp * (constants.c2 + math.pi + x),
                                                  1 + 1e-9)) / constants.c3
        x_new = 8 * math.pi * L - (constants.c2 + math.pi)
        if abs(x_new - x) < 1e-12 * max(1.0, abs(x)):
            x = x_new
            break
        x = x_new
    return {"modulus_bound": 2 * L, "L": L, "x": x, "a": a_exp}


def build_decomposition(surface: MeasuredSurface, constants: ConstantsBundle,
                        seed: int = 0, n_centers: int = 64,
                        refine_budget: int = 40, n_keep: int = 24,
                        sweep_ratio: float = 1.05, ln_cap: int = 160,
                        n_maximality: int = 200,
                        skip_normalization: bool = False) -> BubbleDecomposition:
    """Full construction: derive constants, prepare (normalize genus 0),
    detect the trivial cases, search long necks, pick class representatives
    with the conjugation rule, trim by 2 K1, assemble and audit."""
    constants = derive_constants(constants)
    rng = np.random.default_rng(seed)

    normalization = None
    marking = None
    work = surface
    if surface.genus == 0 and surface.kind == "sphere" and not skip_normalization:
        normalization = normalize_sphere(surface, constants)
        if normalization.case == CASE_BOUNDED:
            return BubbleDecomposition(case="trivial-genus0",
                                       constants=constants, thin=[], thick=[
                                           ThickFace(face_id=0,
                                                     mass=surface.total_mass(),
                                                     genus=0, boundaries=0,
                                                     diameter=math.pi,
                                                     kind="sphere-complement",
                                                     boundary_annuli=[])],
                                       normalization=normalization,
                                       audits={"passed": True})
        new_density = mobius_pullback_density(surface.density,
                                              normalization.mobius)
        work = sphere_surface(new_density, involution=surface.involution,
                              grid_shape=surface.grid_shape)
        punctures = normalization.punctures
    else:
        punctures = []

    ctx = SearchContext(work, constants, punctures=punctures, rng=rng)

    if surface.genus == 1:
        if ctx.total <= constants.delta2:
            return BubbleDecomposition(case="trivial-genus1",
                                       constants=constants, thin=[], thick=[],
                                       trivial_report=trivial_genus1_report(constants),
                                       audits={"passed": True})
        marking = torus_marking(ctx)

    candidates = enumerate_admissible(ctx, n_centers=n_centers, marking=marking,
                                      n_keep=n_keep, sweep_ratio=sweep_ratio)
    necks = find_long_necks(ctx, candidates, marking=marking, cap=ln_cap)

    if not necks:
        face = ThickFace(face_id=0, mass=ctx.total,
                         genus=surface.genus, boundaries=0,
                         diameter=math.pi if surface.kind == "sphere"
                         else math.hypot(*surface.model.lattice_basis()[0]) * 2,
                         kind="sphere-complement" if surface.kind == "sphere"
                         else "torus-complement",
                         boundary_annuli=[])
        dec = BubbleDecomposition(case="generic", constants=constants,
                                  thin=[], thick=[face],
                                  normalization=normalization, marking=marking)
        dec.audits = {"passed": True, "note": "no long necks at these constants",
                      "thin_disjoint": True, "thick_stable": True,
                      "mass_partition_error": 0.0, "euler_ok": True,
                      "maximality_samples": 0, "maximality_violations": 0}
        return dec

    classes = equivalence_classes(ctx, necks)
    # conjugation rule: invariant classes give invariant representatives;
    # off-boundary classes pair up with their mirrors
    reps: List[Tuple[NeckCandidate, EquivalenceClass]] = []
    for cls in classes:
        inv = all(not _off_boundary(ctx.surface, necks[i].spec)
                  or necks[i].spec.kind == CYLINDER
                  for i in cls.members) if ctx.surface.involution else False
        cls.invariant = inv
        rep = select_maximal(ctx, cls, necks, refine_budget=refine_budget,
                             keep_invariant=inv)
        reps.append((rep, cls))

    # exceptional genus-1 reference cylinder
    if marking is not None and marking.i0_modulus >= constants.l1 \
            and not any(r.meta.get("reference_cylinder") for r, _ in reps):
        lo, hi = marking.i0_interval
        spec = AnnulusSpec(kind=CYLINDER, geodesic="alpha0", rho0=lo, rho1=hi,
                           modulus=marking.i0_modulus, mass=marking.i0_mass)
        reps.append((NeckCandidate(spec=spec, mass=marking.i0_mass,
                                   modulus=marking.i0_modulus, clean=True,
                                   complement_stable=True,
                                   meta={"reference_cylinder": True}),
                     EquivalenceClass(members=[], invariant=True)))

    # enforce pairwise essential disjointness (drop smaller modulus on clash)
    reps.sort(key=lambda t: -t[0].modulus)
    kept: List[Tuple[NeckCandidate, EquivalenceClass]] = []
    dropped = 0
    for rep, cls in reps:
        if all(essentially_disjoint(ctx, rep, other) for other, _ in kept):
            kept.append((rep, cls))
        else:
            dropped += 1

    thin: List[ThinAnnulus] = []
    for class_id, (rep, cls) in enumerate(kept):
        trimmed = trim_spec(ctx, rep.spec, 2 * constants.k1)
        mass = _spec_mass(ctx, trimmed)
        invariant = (not _off_boundary(ctx.surface, rep.spec)
                     if (ctx.surface.involution and rep.spec.kind == TRIVIAL)
                     else ctx.surface.involution)
        rep.spec.mass = rep.mass
        thin.append(ThinAnnulus(spec=trimmed, parent=rep.spec,
                                class_id=class_id, mass=mass,
                                modulus=trimmed.modulus,
                                invariant=bool(invariant)))

    if surface.kind == "sphere":
        thick = assemble_faces_sphere(ctx, thin)
    else:
        thick = assemble_faces_torus(ctx, thin, marking)

    dec = BubbleDecomposition(case="generic", constants=constants, thin=thin,
                              thick=thick, normalization=normalization,
                              marking=marking,
                              classes=[{"members": len(c.members),
                                        "incidents": c.incidents,
                                        "invariant": c.invariant}
                                       for _, c in kept])
    dec.audits = audit_decomposition(ctx, dec, marking=marking,
                                     n_maximality=n_maximality)
    dec.audits["representatives_dropped"] = dropped
    dec.audits["long_necks_found"] = len(necks)
    if dropped:
        dec.audits["passed"] = False
    if not dec.audits["passed"]:
        raise ConstructionError(f"decomposition audits failed: {dec.audits}")
    return dec


def _spec_mass(ctx: SearchContext, spec: AnnulusSpec) -> float:
    surface = ctx.surface
    if spec.kind == TRIVIAL:
        return float(surface.annulus_mass(spec.center, spec.r_inner,
                                          spec.r_outer))
    if spec.geodesic == "boundary":
        return ctx.boundary_band_mass(spec.rho0, spec.rho1)
    prof = surface.torus_band_profile([spec.rho0, spec.rho1])
    return float(prof[1] - prof[0])
