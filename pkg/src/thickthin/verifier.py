"""Adaptedness audit of a bubble decomposition: dual graph, thin decay,
rescaled thick geometry, counting bounds, and empirical constants.

The source estimates are existence statements; this module fits the
constants empirically (least upper envelopes over the decomposition) and
reports margins.  A decomposition passes when thin decay holds pointwise
under the fitted envelope, every thick component is stable, and the count
bound holds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .axioms import ConstantsBundle, DecayProfile, component_stable, decay_profile
from .decomposer import (BubbleDecomposition, SearchContext, ThickFace,
                         ThinAnnulus, sweep_trivial_center, _specs_intersect)
from .geometry import (AnnulusSpec, CYLINDER, DomainError, TRIVIAL,
                       invert_radial_modulus, radial_modulus, sphere_distance,
                       h_theta as h_theta_fn)
from .surface import MeasuredSurface
from . import quadrature as quadlib


# ---------------------------------------------------------------------------
# Dual graph
# ---------------------------------------------------------------------------

@dataclass
class HalfEdge:
    vertex: int
    thin_index: int
    side: str                 # "inner" | "outer"
    external: bool = False


@dataclass
class DualGraph:
    vertices: List[int]                       # face ids
    half_edges: List[HalfEdge]
    pairs: List[Tuple[int, int]]              # half-edge index pairs per thin annulus
    filled_disks: Dict[int, float] = field(default_factory=dict)  # he idx -> mass

    def valence(self, v: int) -> int:
        return sum(1 for h in self.half_edges if h.vertex == v)

    def internal_count(self, v: int) -> int:
        return sum(1 for h in self.half_edges if h.vertex == v and not h.external)

    def loops(self) -> int:
        out = 0
        for i, j in self.pairs:
            if self.half_edges[i].vertex == self.half_edges[j].vertex:
                out += 1
        return out

    def to_dict(self) -> dict:
        return {"vertices": self.vertices,
                "half_edges": [{"vertex": h.vertex, "thin": h.thin_index,
                                "side": h.side, "external": h.external}
                               for h in self.half_edges],
                "pairs": self.pairs,
                "loops": self.loops()}


def _circle_diameter_sphere(radius: float) -> float:
    return 2 * min(radius, math.pi - radius)


def dual_graph(surface: MeasuredSurface, decomposition: BubbleDecomposition,
               tie_tol: Optional[float] = None) -> DualGraph:
    """Vertices are thick faces, one half-edge per boundary circle, paired
    through the thin annulus joining them.

    External boundary circles are the non-contractible ones (torus bands)
    and those realizing the face diameter within tie_tol (default: one grid
    cell); a face made by removing small disks from the sphere has none.
    """
    if tie_tol is None:
        tie_tol = math.pi / surface.grid_shape[0]
    half_edges: List[HalfEdge] = []
    pair_slots: Dict[int, List[int]] = {}
    for f in decomposition.thick:
        for (thin_idx, side) in f.boundary_annuli:
            he = HalfEdge(vertex=f.face_id, thin_index=thin_idx, side=side)
            t = decomposition.thin[thin_idx]
            if t.spec.kind == CYLINDER and t.spec.geodesic != "boundary":
                he.external = True
            else:
                if surface.kind == "sphere":
                    c, ri, ro = _thin_circles(t)
                    radius = ri if side == "inner" else ro
                    he.external = abs(_circle_diameter_sphere(radius)
                                      - f.diameter) <= tie_tol
            pair_slots.setdefault(thin_idx, []).append(len(half_edges))
            half_edges.append(he)
    pairs = []
    for thin_idx, slots in sorted(pair_slots.items()):
        if len(slots) != 2:
            raise DomainError(f"thin annulus {thin_idx} bounds {len(slots)} "
                              "half-edges; expected exactly 2")
        pairs.append((slots[0], slots[1]))

    graph = DualGraph(vertices=[f.face_id for f in decomposition.thick],
                      half_edges=half_edges, pairs=pairs)
    # filled disks for internal half-edges on the sphere
    if surface.kind == "sphere":
        for k, he in enumerate(half_edges):
            if he.external:
                continue
            t = decomposition.thin[he.thin_index]
            c, ri, ro = _thin_circles(t)
            radius = ri if he.side == "inner" else ro
            graph.filled_disks[k] = float(surface.disk_mass(c, radius))
    return graph


def _thin_circles(t: ThinAnnulus) -> Tuple[np.ndarray, float, float]:
    from .decomposer import _to_sphere_circles
    return _to_sphere_circles(t)


# ---------------------------------------------------------------------------
# Thin decay
# ---------------------------------------------------------------------------

@dataclass
class ThinDecayRow:
    thin_index: int
    parent_modulus: float
    fitted_exponent: float
    fitted_amplitude: float
    rebased_amplitude: float     # valid on the trimmed annulus
    violations: int
    samples: int
    profile: Optional[DecayProfile] = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("thin_index", "parent_modulus", "fitted_exponent",
                 "fitted_amplitude", "rebased_amplitude", "violations",
                 "samples")}


def cylinder_decay_profile(surface: MeasuredSurface, spec: AnnulusSpec,
                           constants: ConstantsBundle, n_rho: int = 161,
                           n_theta: int = 64) -> DecayProfile:
    """Decay profile for band necks (torus / boundary cylinders)."""
    mod = spec.modulus
    trim = constants.c2 + math.pi
    if mod is None or mod <= 2 * trim:
        raise DomainError("band too short for the fit window")
    rho = np.linspace(-mod / 2 + trim, mod / 2 - trim, n_rho)
    sup = np.empty(n_rho)
    if spec.geodesic == "boundary":
        # latitude s relates to the modulus coordinate via gd^-1
        def F(s):
            return math.log(math.tan(s / 2 + math.pi / 4))
        F0, F1 = F(spec.rho0), F(spec.rho1)
        mid = (F0 + F1) / 2
        thetas = np.arange(n_theta) * (2 * math.pi / n_theta)
        for i, rr in enumerate(rho):
            s = 2 * (math.atan(math.exp(mid + rr)) - math.pi / 4)
            pts_z = np.cos(thetas), np.sin(thetas)
            # circle at latitude s around the fixed circle
            lat = np.stack([np.cos(thetas) * math.cos(s),
                            np.full_like(thetas, math.sin(s)),
                            np.sin(thetas) * math.cos(s)], axis=-1)
            vals = surface.density_at(lat)
            sup[i] = float(np.max(vals)) * math.cos(s) ** 2
    else:
        h_const = (spec.rho1 - spec.rho0) / mod
        mid = (spec.rho0 + spec.rho1) / 2
        v1, v2 = surface.model.lattice_basis()
        ridge = v1 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v2
        n_vec = np.array([-ridge[1], ridge[0]]) / np.linalg.norm(ridge)
        u_vec = ridge / np.linalg.norm(ridge)
        ell = float(np.linalg.norm(ridge))
        thetas = np.linspace(0, ell, n_theta, endpoint=False)
        for i, rr in enumerate(rho):
            x = mid + rr * h_const
            pts = x * n_vec[None, :] + thetas[:, None] * u_vec[None, :]
            vals = surface.density_at(pts)
            sup[i] = float(np.max(vals)) * h_const ** 2
    x = mod / 2 - np.abs(rho)
    good = sup > 0
    if np.count_nonzero(good) < 8:
        return DecayProfile(rho=rho, sup_density=sup, amplitude=0.0,
                            exponent=0.0, residuals=np.zeros(0), modulus=mod)
    y = np.log(sup[good])
    slope, intercept = np.polyfit(x[good], y, 1)
    resid = y - (intercept + slope * x[good])
    amplitude = math.exp(intercept + float(np.quantile(resid, 0.98)))
    return DecayProfile(rho=rho, sup_density=sup, amplitude=amplitude,
                        exponent=float(-slope), residuals=resid, modulus=mod)


def verify_thin(surface: MeasuredSurface, decomposition: BubbleDecomposition,
                constants: ConstantsBundle,
                margin_tol: float = 0.02) -> List[ThinDecayRow]:
    """Fit the decay on each parent neck and assert the pointwise bound on
    the trimmed annulus with the rebased amplitude."""
    rows = []
    for idx, t in enumerate(decomposition.thin):
        parent = t.parent
        if parent.kind == TRIVIAL:
            prof = decay_profile(surface, parent, constants)
        else:
            prof = cylinder_decay_profile(surface, parent, constants)
        b = prof.exponent
        a_parent = prof.amplitude
        # the trimmed annulus sits 2 K1 of modulus inside each parent end
        trim = 2 * constants.k1
        a_rebased = a_parent * math.exp(-b * trim)
        # pointwise check on the trimmed window
        mod_thin = t.modulus
        half = mod_thin / 2
        sel = np.abs(prof.rho) <= half + 1e-12
        viol = 0
        count = 0
        for rr, sv in zip(prof.rho[sel], prof.sup_density[sel]):
            bound = a_rebased * math.exp(-b * (half - abs(rr)))
            count += 1
            if sv > bound * (1 + margin_tol):
                viol += 1
        rows.append(ThinDecayRow(thin_index=idx, parent_modulus=prof.modulus,
                                 fitted_exponent=b, fitted_amplitude=a_parent,
                                 rebased_amplitude=a_rebased,
                                 violations=viol, samples=count, profile=prof))
    return rows


# ---------------------------------------------------------------------------
# Thick geometry under rescaling
# ---------------------------------------------------------------------------

@dataclass
class ThickRow:
    face_id: int
    genus: int
    n_v: int
    mu_v: float
    diameter: float
    s_v: float
    sup_density_v: float      # w.r.t. the rescaled metric h_v
    min_injectivity_v: float
    min_boundary_length_v: float
    min_boundary_separation_v: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("face_id", "genus", "n_v", "mu_v", "diameter", "s_v",
                 "sup_density_v", "min_injectivity_v",
                 "min_boundary_length_v", "min_boundary_separation_v")}


def _face_sup_density(surface: MeasuredSurface, face: ThickFace,
                      decomposition: BubbleDecomposition,
                      n_rho: int = 24, n_theta: int = 48) -> float:
    from .spherenorm import _refine_chart_peak
    from .geometry import sphere_to_chart
    best = 0.0
    if surface.kind == "sphere":
        if face.kind == "disk":
            center = np.asarray(face.data["center"], dtype=float)
            radius = face.data["radius"]
        else:
            center = np.array([0.0, 0.0, 1.0])
            radius = math.pi * (1 - 1e-9)
        geom = surface._ring_geometry(center)
        thetas = np.arange(n_theta) * (2 * math.pi / n_theta)
        for rho in np.linspace(radius / n_rho, radius * (1 - 1e-9), n_rho):
            vals = quadlib.ring_values(geom, float(rho), thetas)
            best = max(best, float(np.max(vals)))
        for h in surface.hints():
            hc = np.asarray(h.center, dtype=float)
            if face.kind == "disk" and \
                    float(sphere_distance(center, hc)) > radius:
                continue
            inside = all(not _annulus_contains_point(t, hc)
                         for t in decomposition.thin)
            if not inside:
                continue
            z = complex(sphere_to_chart(hc))
            if np.isfinite(z):
                _, v = _refine_chart_peak(surface.density, z)
                best = max(best, v)
    else:
        v1, v2 = surface.model.lattice_basis()
        ridge = v1 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v2
        n_vec = np.array([-ridge[1], ridge[0]]) / np.linalg.norm(ridge)
        u_vec = ridge / np.linalg.norm(ridge)
        other = v2 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v1
        lo, hi = face.data.get("interval", (0.0, abs(float(other @ n_vec))))
        for s in np.linspace(lo + 1e-9, hi - 1e-9, n_rho):
            pts = s * n_vec[None, :] + \
                np.linspace(0, np.linalg.norm(ridge), n_theta,
                            endpoint=False)[:, None] * u_vec[None, :]
            best = max(best, float(np.max(surface.density_at(pts))))
    return best


def _annulus_contains_point(t: ThinAnnulus, p: np.ndarray) -> bool:
    if t.spec.kind == TRIVIAL:
        d = float(sphere_distance(np.asarray(t.spec.center, dtype=float), p))
        return t.spec.r_inner < d < t.spec.r_outer
    if t.spec.geodesic == "boundary":
        s = float(np.arcsin(np.clip(p[1], -1, 1)))
        return t.spec.rho0 < s < t.spec.rho1
    return False


def _face_boundary_geometry(surface: MeasuredSurface, face: ThickFace,
                            decomposition: BubbleDecomposition
                            ) -> Tuple[List[float], List[float], float]:
    """(circle lengths, injectivity floor, min pairwise separation), in the
    unrescaled metric."""
    lengths: List[float] = []
    circles: List[Tuple[np.ndarray, float]] = []
    if surface.kind == "sphere":
        for (idx, side) in face.boundary_annuli:
            t = decomposition.thin[idx]
            c, ri, ro = _thin_circles(t)
            r = ri if side == "inner" else ro
            lengths.append(2 * math.pi * math.sin(r))
            circles.append((c, r))
        inj = math.pi
        sep = math.inf
        for i in range(len(circles)):
            for j in range(i + 1, len(circles)):
                (c1, r1), (c2, r2) = circles[i], circles[j]
                d = float(sphere_distance(c1, c2))
                if d < 1e-12:
                    sep = min(sep, abs(r1 - r2))
                else:
                    sep = min(sep, max(d - r1 - r2, 0.0))
    else:
        v1, v2 = surface.model.lattice_basis()
        ridge = v1 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v2
        other = v2 if np.linalg.norm(v1) <= np.linalg.norm(v2) else v1
        ell = float(np.linalg.norm(ridge))
        lengths = [ell for _ in face.boundary_annuli]
        n_vec = np.array([-ridge[1], ridge[0]]) / ell
        lo, hi = face.data.get("interval", (0.0, abs(float(other @ n_vec))))
        inj = min(ell / 2, (hi - lo) / 2 + ell / 2)
        sep = hi - lo if len(face.boundary_annuli) >= 2 else math.inf
    return lengths, inj, sep


def verify_thick(surface: MeasuredSurface,
                 decomposition: BubbleDecomposition) -> List[ThickRow]:
    rows = []
    for f in decomposition.thick:
        n_v = sum(1 for _ in f.boundary_annuli)
        d_v = max(f.diameter, 1e-300)
        s_v = 2 * (f.genus + 1) / d_v
        sup_d = _face_sup_density(surface, f, decomposition)
        lengths, inj, sep = _face_boundary_geometry(surface, f, decomposition)
        rows.append(ThickRow(
            face_id=f.face_id, genus=f.genus, n_v=n_v, mu_v=f.mass,
            diameter=f.diameter, s_v=s_v,
            sup_density_v=sup_d / s_v ** 2,
            min_injectivity_v=inj * s_v,
            min_boundary_length_v=(min(lengths) * s_v if lengths else math.inf),
            min_boundary_separation_v=(sep * s_v if sep < math.inf else math.inf)))
    return rows


def fit_exponential_envelope(xs: Sequence[float], ys: Sequence[float],
                             upper: bool = True) -> Tuple[float, float]:
    """(a, b) with y <= a e^{b x} (upper) or y >= a e^{-b x} (lower) holding
    on every sample, least slope first."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    good = np.isfinite(ys) & (ys > 0)
    xs, ys = xs[good], ys[good]
    if len(xs) == 0:
        return (0.0, 0.0)
    if len(set(np.round(xs, 12))) == 1:
        return ((float(np.max(ys)), 0.0) if upper
                else (float(np.min(ys)), 0.0))
    slope, _ = np.polyfit(xs, np.log(ys), 1)
    if upper:
        b = max(slope, 0.0)
        a = float(np.max(ys * np.exp(-b * xs)))
    else:
        b = max(-slope, 0.0)
        a = float(np.min(ys * np.exp(b * xs)))
    return (a, float(b))


# ---------------------------------------------------------------------------
# Counting bound and f1
# ---------------------------------------------------------------------------

def verify_counts(surface: MeasuredSurface, decomposition: BubbleDecomposition,
                  delta: float) -> dict:
    """|pi0(Thick)| and |pi0(Thin)| against 2g + 2 mu(Sigma)/delta - 3.

    delta defaults to delta2/6 downstream: the weakest stability branch;
    this identification is a reported choice, not a derived one.
    """
    g = surface.genus
    total = surface.total_mass()
    bound = 2 * g + 2 * total / delta - 3
    n_thick = len(decomposition.thick)
    n_thin = len(decomposition.thin)
    ok = True
    if n_thin > 0 or bound >= 1:
        ok = (n_thick <= bound) and (n_thin <= bound)
    return {"bound": bound, "thick": n_thick, "thin": n_thin,
            "delta": delta, "delta_is_delta2_over_6": True, "passed": bool(ok)}


def fit_f1(ctx: SearchContext, decomposition: BubbleDecomposition,
           n_samples: int = 60, seed: int = 0) -> dict:
    """Least upper coefficient of Mod(I) <= f1 (mu(I n Sigma_v) + n(I) + 1)
    over sampled necks inside closures of thick components."""
    from .decomposer import _face_interior_points
    rng = np.random.default_rng(seed)
    ctx.rng = rng
    best = 0.0
    count = 0
    for f in decomposition.thick:
        pts = _face_interior_points(ctx, f, decomposition.thin,
                                    max(4, n_samples // max(len(decomposition.thick), 1)))
        for c in pts:
            for cand in sweep_trivial_center(ctx, c, n_keep=2):
                n_int = 0
                for k, t in enumerate(decomposition.thin):
                    if _specs_intersect(ctx, cand.spec, t.spec):
                        n_int += 1
                mu_in = cand.mass
                ratio = cand.modulus / (mu_in + n_int + 1)
                best = max(best, ratio)
                count += 1
    if count == 0:
        return {"f1": None, "samples": 0, "note": "no admissible sample necks"}
    return {"f1": float(best), "samples": count}


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class AdaptednessReport:
    thin_rows: List[ThinDecayRow]
    thick_rows: List[ThickRow]
    graph: DualGraph
    counts: dict
    f1: dict
    fitted: dict
    stability: List[bool]
    passed: bool

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "thin": [r.to_dict() for r in self.thin_rows],
                "thick": [r.to_dict() for r in self.thick_rows],
                "dual_graph": self.graph.to_dict(),
                "counts": self.counts,
                "f1": self.f1,
                "fitted_constants": self.fitted,
                "stability": self.stability}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    def write_decay_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["thin_index", "rho", "sup_density", "bound"])
            for r in self.thin_rows:
                if r.profile is None:
                    continue
                amp, b = r.fitted_amplitude, r.fitted_exponent
                for rr, sv in zip(r.profile.rho, r.profile.sup_density):
                    bound = amp * math.exp(-b * (r.profile.modulus / 2 - abs(rr)))
                    w.writerow([r.thin_index, float(rr), float(sv), bound])


def verify_decomposition(surface: MeasuredSurface,
                         decomposition: BubbleDecomposition,
                         constants: Optional[ConstantsBundle] = None,
                         seed: int = 0) -> AdaptednessReport:
    constants = constants or decomposition.constants
    graph = dual_graph(surface, decomposition)
    thin_rows = verify_thin(surface, decomposition, constants)
    thick_rows = verify_thick(surface, decomposition)
    counts = verify_counts(surface, decomposition, constants.delta2 / 6)
    ctx = SearchContext(surface, constants,
                        punctures=(decomposition.normalization.punctures
                                   if decomposition.normalization else ()),
                        rng=np.random.default_rng(seed))
    f1 = fit_f1(ctx, decomposition, seed=seed)

    xs = [r.mu_v + r.n_v for r in thick_rows]
    fitted = {
        "thin_decay": [(r.rebased_amplitude, r.fitted_exponent)
                       for r in thin_rows],
        "sup_density": fit_exponential_envelope(
            xs, [r.sup_density_v for r in thick_rows], upper=True),
        "injectivity": fit_exponential_envelope(
            xs, [r.min_injectivity_v for r in thick_rows], upper=False),
        "boundary_length": fit_exponential_envelope(
            xs, [r.min_boundary_length_v for r in thick_rows
                 if np.isfinite(r.min_boundary_length_v)], upper=False),
        "separation": fit_exponential_envelope(
            xs, [r.min_boundary_separation_v for r in thick_rows
                 if np.isfinite(r.min_boundary_separation_v)], upper=False),
    }
    stability = [component_stable(f.component(), constants)
                 for f in decomposition.thick]
    decay_ok = all(r.violations <= max(1, r.samples) * 0.02 for r in thin_rows)
    exponent_ok = all(r.fitted_exponent >= 0.8 * constants.c3
                      for r in thin_rows)
    passed = bool(decay_ok and exponent_ok and all(stability)
                  and counts["passed"])
    return AdaptednessReport(thin_rows=thin_rows, thick_rows=thick_rows,
                             graph=graph, counts=counts, f1=f1, fitted=fitted,
                             stability=stability, passed=passed)
