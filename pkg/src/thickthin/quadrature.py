"""Hint-aware quadrature of densities over geodesic disks, annuli and bands.

Masses are nested 1D integrals: radial panels graded toward r = 0 and
toward every concentration hint, with an angular rule per ring.  Rings far
from hints use the periodic trapezoid; rings crossing an off-center hint
are split at the analytic circle-circle intersection arcs with graded Gauss
nodes inside the arc.

Precision rule: every coordinate that competes with a hint scale is carried
*relative* to the hint (radial offsets, arc angles, chart displacements),
and densities are evaluated through shifted rational maps.  Absolute O(1)
coordinates carry ~1e-16 float noise, which would otherwise swamp bubbles
ten or more orders of magnitude smaller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .densities import Hint
from .geometry import MetricModel, sphere_distance, sphere_frame

# mass outside radius HINT_FAR * scale of a bubble is ~4pi/HINT_FAR^2, below
# every tolerance used in the package
HINT_FAR = 3.5e5
N_THETA = 128
GL8 = np.polynomial.legendre.leggauss(8)


@dataclass
class HintGeom:
    d: float                 # distance from the ring center
    bearing: float           # direction in the standard frame
    scale: float
    H: Optional[np.ndarray]
    far: bool = False        # evaluate in the chart at infinity
    p_chart: complex = 0j
    e1: Optional[np.ndarray] = None   # frame aligned toward the hint
    e2: Optional[np.ndarray] = None
    aligned: bool = False

    def band_radius(self, max_radius: float) -> float:
        return min(HINT_FAR * self.scale, 0.45 * max_radius)

    def spike_radius(self, max_radius: float) -> float:
        """Rings closer than this still see the hint's tail as a narrow
        angular spike (relative density above ~1e-12) and need arc nodes."""
        r = max(self.band_radius(max_radius), (self.scale ** 2 * 1e12) ** 0.25)
        return min(r, 0.45 * max_radius)

    @property
    def concentric(self) -> bool:
        return self.d <= 8 * self.scale


@dataclass
class RingGeometry:
    """Density evaluation along geodesic circles around a fixed center.

    eval_ring(rho, thetas): plain evaluation, O(1)-precision positions.
    eval_arc(hint, delta, offsets): evaluation at radial offset delta from
    hint.d and angular offsets from hint.bearing, all exact (sphere only).
    """
    center: np.ndarray
    eval_ring: Callable[[float, np.ndarray], np.ndarray]
    circumference: Callable[[float], float]
    hints: List[HintGeom]
    max_radius: float
    eval_arc: Optional[Callable] = None


def sphere_ring_geometry(density, center: np.ndarray, hints: Sequence[Hint]) -> RingGeometry:
    center = np.asarray(center, dtype=float)
    e1, e2 = sphere_frame(center)

    def eval_ring(rho: float, thetas: np.ndarray) -> np.ndarray:
        pts = (math.cos(rho) * center[None, :]
               + math.sin(rho) * (np.cos(thetas)[:, None] * e1[None, :]
                                  + np.sin(thetas)[:, None] * e2[None, :]))
        return density.value_at(pts)

    hgeoms: List[HintGeom] = []
    for h in hints:
        H = np.asarray(h.center, dtype=float)
        d = float(sphere_distance(center, H))
        v = H - math.cos(d) * center
        bearing = math.atan2(float(v @ e2), float(v @ e1)) if d > 1e-300 else 0.0
        far = H[2] < 0
        if far:
            p_chart = complex(H[0], -H[1]) / (1 - H[2])
        else:
            p_chart = complex(H[0], H[1]) / (1 + H[2])
        nv = float(np.linalg.norm(v))
        if d >= 1e-6 and nv > 1e-9:
            a1 = v / nv
            a2 = np.cross(center, a1)
            hg = HintGeom(d=d, bearing=bearing, scale=h.scale, H=H, far=far,
                          p_chart=p_chart, e1=a1, e2=a2, aligned=True)
        elif d >= 1e-6:
            # antipodal hint: bearing is arbitrary, any frame is consistent
            hg = HintGeom(d=d, bearing=0.0, scale=h.scale, H=H, far=far,
                          p_chart=p_chart, e1=e1, e2=e2, aligned=True)
        else:
            hg = HintGeom(d=d, bearing=bearing, scale=h.scale, H=H, far=far,
                          p_chart=p_chart, e1=e1, e2=e2, aligned=False)
        hgeoms.append(hg)

    can_shift = hasattr(density, "value_at_offset")

    def eval_arc(hg: HintGeom, delta: float, offsets: np.ndarray) -> np.ndarray:
        """Density at radial offset delta from hg.d, angular offsets from
        the hint bearing; the displacement from the hint is built from
        difference-of-sines forms so it stays exact at any scale."""
        if not can_shift:
            return eval_ring(hg.d + delta, offsets + hg.bearing)
        if hg.aligned:
            th = offsets
            sin_half = math.sin(delta / 2)
            coefC = -2.0 * math.sin(hg.d + delta / 2) * sin_half
            s_diff = 2.0 * math.cos(hg.d + delta / 2) * sin_half
            sin_rho = math.sin(hg.d + delta)
            coef1 = -2.0 * sin_rho * np.sin(th / 2) ** 2 + s_diff
            coef2 = sin_rho * np.sin(th)
            delta3 = (coefC * center[None, :] + coef1[:, None] * hg.e1[None, :]
                      + coef2[:, None] * hg.e2[None, :])
        else:
            rho = hg.d + delta
            thetas = offsets + hg.bearing
            pc = (-2.0 * math.sin(rho / 2) ** 2 * center[None, :]
                  + math.sin(rho) * (np.cos(thetas)[:, None] * e1[None, :]
                                     + np.sin(thetas)[:, None] * e2[None, :]))
            delta3 = pc + (center - hg.H)[None, :]
        Hx, Hy, Hz = hg.H
        dx, dy, dz = delta3[:, 0], delta3[:, 1], delta3[:, 2]
        if hg.far:
            num = (dx - 1j * dy) * (1 - Hz) + complex(Hx, -Hy) * dz
            den = (1 - (Hz + dz)) * (1 - Hz)
        else:
            num = (dx + 1j * dy) * (1 + Hz) - complex(Hx, Hy) * dz
            den = (1 + (Hz + dz)) * (1 + Hz)
        zeta = num / den
        return density.value_at_offset(hg.p_chart, zeta, far=hg.far)

    return RingGeometry(center=center, eval_ring=eval_ring,
                        circumference=lambda rho: math.sin(rho),
                        hints=hgeoms, max_radius=math.pi, eval_arc=eval_arc)


def torus_ring_geometry(density, model: MetricModel, center: np.ndarray,
                        hints: Sequence[Hint]) -> RingGeometry:
    center = np.asarray(center, dtype=float)

    def eval_ring(rho: float, thetas: np.ndarray) -> np.ndarray:
        pts = center[None, :] + rho * np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        return density.value_at(pts)

    hgeoms = []
    v1, v2 = model.lattice_basis()
    for h in hints:
        best, bvec = math.inf, None
        for m in range(-2, 3):
            for n in range(-2, 3):
                vec = np.asarray(h.center, dtype=float) + m * v1 + n * v2 - center
                dd = float(np.hypot(*vec))
                if dd < best:
                    best, bvec = dd, vec
        hgeoms.append(HintGeom(d=best, bearing=math.atan2(bvec[1], bvec[0]),
                               scale=h.scale, H=None))
    return RingGeometry(center=center, eval_ring=eval_ring,
                        circumference=lambda rho: rho,
                        hints=hgeoms, max_radius=model.systole() / 2)


def cylinder_ring_geometry(density, center: np.ndarray) -> RingGeometry:
    """Flat standard cylinder (rho, theta) with circumference 2 pi."""
    center = np.asarray(center, dtype=float)

    def eval_ring(rho: float, thetas: np.ndarray) -> np.ndarray:
        pts = center[None, :] + rho * np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        pts[:, 1] = np.mod(pts[:, 1], 2 * math.pi)
        return density.value_at(pts)

    return RingGeometry(center=center, eval_ring=eval_ring,
                        circumference=lambda rho: rho,
                        hints=[], max_radius=math.pi)


# ---------------------------------------------------------------------------
# Angular rules
# ---------------------------------------------------------------------------

def _arc_halfwidth(delta: float, d: float, R: float, spherical: bool) -> Optional[float]:
    """Angular half-width of the locus within distance R of a point at
    distance d from the ring center, on the circle of radius d + delta."""
    if abs(delta) >= R:
        return None
    if spherical:
        rho = d + delta
        sr, sd = math.sin(rho), math.sin(d)
        if sr < 1e-300 or sd < 1e-300:
            return math.pi
        s2 = (math.sin(R / 2) ** 2 - math.sin(delta / 2) ** 2) / (sr * sd)
        if s2 <= 0:
            return None
        if s2 >= 1:
            return math.pi
        return 2 * math.asin(math.sqrt(s2))
    rho = d + delta
    if rho + d <= R:
        return math.pi
    if d <= 0:
        return math.pi
    c = (rho * rho + d * d - R * R) / (2 * rho * d)
    if c <= -1:
        return math.pi
    if c >= 1:
        return None
    return math.acos(c)


def _graded_nodes(lo: float, hi: float, inner_scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss nodes on [lo, hi] on panels graded geometrically toward lo."""
    edges = [lo]
    step = max(inner_scale, (hi - lo) * 1e-15)
    x = lo
    while x + step < hi:
        x += step
        edges.append(x)
        step *= 1.7
    edges.append(hi)
    xs, ws = [], []
    gx, gw = GL8
    for a, b in zip(edges[:-1], edges[1:]):
        half = (b - a) / 2
        xs.append((a + b) / 2 + half * gx)
        ws.append(half * gw)
    return np.concatenate(xs), np.concatenate(ws)


def _ring_eval_assembly(geom: RingGeometry, spherical: bool, n_theta: int,
                        deltas_per_hint: List[Tuple[HintGeom, float]],
                        rho_abs: float) -> float:
    """Ring integral given exact radial offsets to each hint.

    Arcs around off-center hints are integrated through eval_arc with exact
    offsets; merged arcs get one graded node cluster per member hint.  The
    smooth remainder uses eval_ring, or eval_arc of a concentric hint when
    one is active (tiny rings around a bubble).
    """
    arcs = []      # (hg, delta, halfwidth, inner_angular_scale)
    conc = None
    for hg, delta in deltas_per_hint:
        if abs(delta) > hg.spike_radius(geom.max_radius):
            continue
        if hg.concentric:
            conc = (hg, delta)
            continue
        hw = _arc_halfwidth(delta, hg.d, hg.spike_radius(geom.max_radius), spherical)
        if hw is None:
            continue
        rho = hg.d + delta
        inner = max(hg.scale, abs(delta)) / max(rho, 1e-300)
        arcs.append((hg, delta, hw, inner))

    if conc is not None and geom.eval_arc is not None:
        hg0, delta0 = conc

        def base_eval(thetas):
            return geom.eval_arc(hg0, delta0, thetas - hg0.bearing)
    else:
        def base_eval(thetas):
            return geom.eval_ring(rho_abs, thetas)

    if not arcs:
        thetas = np.arange(n_theta) * (2 * math.pi / n_theta)
        return float(np.mean(base_eval(thetas))) * 2 * math.pi

    intervals = _merge_arc_groups(arcs)
    total = 0.0
    covered = 0.0
    segments = []
    for k, (lo, hi, members) in enumerate(intervals):
        covered += hi - lo
        # one graded cluster per member hint, split at bearing midpoints
        mid = (lo + hi) / 2
        ordered = sorted(members, key=lambda m: _wrap_near(arcs[m][0].bearing, mid))
        bearings = [_wrap_near(arcs[m][0].bearing, mid) for m in ordered]
        cuts = [lo] + [(bearings[j] + bearings[j + 1]) / 2
                       for j in range(len(ordered) - 1)] + [hi]
        for j, m in enumerate(ordered):
            hg, delta, _, inner = arcs[m]
            b = bearings[j]
            step = max(inner / 4, (hi - lo) * 1e-14)
            for sgn, extent in ((-1, b - cuts[j]), (1, cuts[j + 1] - b)):
                if extent <= 0:
                    continue
                xs_r, ws_r = _graded_nodes(0.0, extent, step)
                offsets = sgn * xs_r
                if geom.eval_arc is not None:
                    vals = geom.eval_arc(hg, delta, offsets)
                else:
                    vals = geom.eval_ring(rho_abs, offsets + hg.bearing)
                total += float(np.sum(vals * ws_r))
        nxt = intervals[(k + 1) % len(intervals)]
        seg_lo = hi
        seg_hi = nxt[0] + (2 * math.pi if k == len(intervals) - 1 else 0.0)
        if seg_hi > seg_lo:
            segments.append((seg_lo, seg_hi))
    if covered >= 2 * math.pi - 1e-12:
        return total
    gx, gw = GL8
    for lo, hi in segments:
        n_sub = max(2, int((hi - lo) / (2 * math.pi) * (n_theta // 8)))
        edges = np.linspace(lo, hi, n_sub + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            half = (b - a) / 2
            th = (a + b) / 2 + half * gx
            total += float(np.sum(base_eval(np.mod(th, 2 * math.pi)) * half * gw))
    return total


def _wrap_near(angle: float, anchor: float) -> float:
    """Representative of angle within pi of the anchor."""
    return angle - 2 * math.pi * round((angle - anchor) / (2 * math.pi))


def _merge_arc_groups(arcs) -> List[Tuple[float, float, List[int]]]:
    """Merge overlapping arc intervals, keeping member indices."""
    norm = []
    for i, (hg, delta, hw, inner) in enumerate(arcs):
        lo, hi = hg.bearing - hw, hg.bearing + hw
        if hi - lo >= 2 * math.pi - 1e-12:
            return [(0.0, 2 * math.pi, list(range(len(arcs))))]
        base = math.floor(lo / (2 * math.pi)) * 2 * math.pi
        norm.append([lo - base, hi - base, [i]])
    norm.sort(key=lambda t: t[0])
    merged = [norm[0]]
    for lo, hi, mem in norm[1:]:
        if lo <= merged[-1][1] + 1e-12:
            merged[-1][1] = max(merged[-1][1], hi)
            merged[-1][2].extend(mem)
        else:
            merged.append([lo, hi, mem])
    if len(merged) > 1 and merged[-1][1] >= merged[0][0] + 2 * math.pi - 1e-12:
        merged[0][0] = merged[-1][0] - 2 * math.pi
        merged[0][2].extend(merged[-1][2])
        merged.pop()
    return [tuple(m) for m in merged]


def ring_integral(geom: RingGeometry, rho: float, spherical: bool,
                  n_theta: int = N_THETA) -> float:
    """Ring integral at an absolute radius (offsets derived by subtraction)."""
    deltas = [(hg, rho - hg.d) for hg in geom.hints]
    return _ring_eval_assembly(geom, spherical, n_theta, deltas, rho)


def ring_values(geom: RingGeometry, rho: float, thetas: np.ndarray) -> np.ndarray:
    """Pointwise density along a ring, using hint-local evaluation when the
    ring is close to a concentration (sup-density probes, decay profiles)."""
    best, active = math.inf, None
    if geom.eval_arc is not None:
        for hg in geom.hints:
            off = abs(rho - hg.d)
            if off <= hg.spike_radius(geom.max_radius) and off < best:
                best, active = off, hg
    if active is None:
        return geom.eval_ring(rho, np.asarray(thetas, dtype=float))
    rel = np.asarray(thetas, dtype=float) - active.bearing
    return geom.eval_arc(active, rho - active.d, rel)


def _merge_arcs(arcs):
    """Merge overlapping angular intervals (wrapped into [0, 2 pi)),
    keeping the owner of the narrowest member."""
    norm = []
    for lo, hi, s, owner in arcs:
        if hi - lo >= 2 * math.pi - 1e-12:
            return [(0.0, 2 * math.pi, s, owner)]
        base = math.floor(lo / (2 * math.pi)) * 2 * math.pi
        norm.append([lo - base, hi - base, s, owner])
    norm.sort()
    merged = [norm[0]]
    for lo, hi, s, owner in norm[1:]:
        if lo <= merged[-1][1] + 1e-12:
            merged[-1][1] = max(merged[-1][1], hi)
            if s < merged[-1][2]:
                merged[-1][2] = s
                merged[-1][3] = owner
        else:
            merged.append([lo, hi, s, owner])
    if len(merged) > 1 and merged[-1][1] >= merged[0][0] + 2 * math.pi - 1e-12:
        merged[0][0] = merged[-1][0] - 2 * math.pi
        if merged[-1][2] < merged[0][2]:
            merged[0][2] = merged[-1][2]
            merged[0][3] = merged[-1][3]
        merged.pop()
    return [tuple(m) for m in merged]


# ---------------------------------------------------------------------------
# Radial decomposition and mass profiles
# ---------------------------------------------------------------------------

def _band_intervals(geom: RingGeometry, r_floor: float, r_max: float):
    """Disjoint radial bands around non-concentric hints, merged when they
    overlap; each band keeps a reference hint for exact delta coordinates."""
    raw = []
    for hg in geom.hints:
        if hg.concentric:
            continue
        R = hg.band_radius(geom.max_radius)
        lo, hi = max(hg.d - R, r_floor), min(hg.d + R, r_max)
        if lo < hi:
            raw.append([lo, hi, hg])
    raw.sort(key=lambda t: t[0])
    merged = []
    for lo, hi, hg in raw:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
            if hg.scale < merged[-1][2].scale:
                merged[-1][2] = hg
        else:
            merged.append([lo, hi, hg])
    return merged


def _graded_edges_around(center: float, lo: float, hi: float, step0: float) -> List[float]:
    out = []
    for sgn in (-1, 1):
        step = step0
        x = center
        while lo < x + sgn * step < hi:
            x += sgn * step
            out.append(x)
            step *= 1.7
    if lo < center < hi:
        out.append(center)
    return out


def disk_mass_profile(geom: RingGeometry, radii: Sequence[float], spherical: bool,
                      n_theta: int = N_THETA) -> np.ndarray:
    """Cumulative masses mu(B_r) at each requested radius (ascending).

    One panel decomposition serves every radius, so a whole radius sweep
    costs a single pass.  Mass inside the innermost panel edge is included
    via the smallest ring's average density.
    """
    radii = np.asarray(sorted(radii), dtype=float)
    if radii[0] <= 0:
        raise ValueError("radii must be positive")
    # the floor must undercut any hint whose structure lies below the
    # smallest requested radius, or its mass would land in the core term
    low = [hg.scale for hg in geom.hints
           if hg.d - hg.band_radius(geom.max_radius) < radii[0]]
    r_floor = min([radii[0] * 0.25] + [s * 1e-5 for s in low])
    r_floor = max(r_floor, 1e-280)
    r_max = float(radii[-1])
    bands = _band_intervals(geom, r_floor, r_max)

    # --- global edges (outside bands) -------------------------------------
    edges = {r_floor, r_max}
    edges.update(float(r) for r in radii)
    r = float(radii[0])
    while r > r_floor:
        r /= 3.0
        edges.add(max(r, r_floor))
    for hg in geom.hints:
        spike = hg.spike_radius(geom.max_radius)
        lo = max(hg.d - spike, r_floor)
        hi = min(hg.d + spike, r_max)
        if lo >= hi:
            continue
        edges.update(e for e in
                     _graded_edges_around(hg.d, lo, hi, max(hg.scale / 4, 1e-18))
                     if e > r_floor)
        edges.add(lo)
        edges.add(hi)
    for lo, hi, _ in bands:
        edges.add(lo)
        edges.add(hi)
    global_edges = np.array(sorted(e for e in edges if r_floor <= e <= r_max))

    gx, gw = GL8
    thetas_plain = np.arange(n_theta) * (2 * math.pi / n_theta)

    # panel list: (abs_lo, abs_hi, mass)
    panels: List[Tuple[float, float, float]] = []

    def in_band(a, b):
        return any(lo - 1e-300 <= a and b <= hi + 1e-300 for lo, hi, _ in bands)

    for a, b in zip(global_edges[:-1], global_edges[1:]):
        if in_band(a, b):
            continue
        half = (b - a) / 2
        rho_nodes = (a + b) / 2 + half * gx
        mid = (a + b) / 2
        needs_ring = any(abs(mid - hg.d) <= hg.spike_radius(geom.max_radius)
                         + (b - a) for hg in geom.hints)
        if needs_ring:
            acc = 0.0
            for rho, w in zip(rho_nodes, half * gw):
                acc += ring_integral(geom, rho, spherical, n_theta) \
                       * geom.circumference(rho) * w
            panels.append((a, b, acc))
        else:
            vals = np.stack([geom.eval_ring(rho, thetas_plain) for rho in rho_nodes])
            ring_avg = vals.mean(axis=1) * 2 * math.pi
            circ = np.array([geom.circumference(rho) for rho in rho_nodes])
            panels.append((a, b, float(np.sum(ring_avg * circ * half * gw))))

    # --- band panels in exact hint-relative coordinates --------------------
    for lo, hi, ref in bands:
        d_edges = {lo - ref.d, hi - ref.d}
        for r in radii:
            if lo < r < hi:
                d_edges.add(r - ref.d)
        for hg in geom.hints:
            if hg.concentric:
                continue
            off = hg.d - ref.d
            d_edges.update(_graded_edges_around(off, lo - ref.d, hi - ref.d,
                                                max(hg.scale / 4, 1e-18)))
        d_sorted = np.array(sorted(d_edges))
        for da, db in zip(d_sorted[:-1], d_sorted[1:]):
            half = (db - da) / 2
            dn = (da + db) / 2 + half * gx
            acc = 0.0
            for delta_ref, w in zip(dn, half * gw):
                rho_abs = ref.d + delta_ref
                deltas = [(hg, delta_ref if hg is ref
                           else delta_ref + (ref.d - hg.d))
                          for hg in geom.hints]
                val = _ring_eval_assembly(geom, spherical, n_theta, deltas, rho_abs)
                acc += val * geom.circumference(rho_abs) * w
            panels.append((ref.d + da, ref.d + db, acc))

    panels.sort(key=lambda t: t[0])
    edge_arr = np.array([panels[0][0]] + [p[1] for p in panels])
    cum = np.concatenate([[0.0], np.cumsum([p[2] for p in panels])])

    inner_ring = ring_integral(geom, r_floor, spherical, n_theta) / (2 * math.pi)
    if spherical:
        core = inner_ring * 4 * math.pi * math.sin(r_floor / 2) ** 2
    else:
        core = inner_ring * math.pi * r_floor ** 2
    cum = cum + core
    return np.interp(radii, edge_arr, cum)


def disk_mass(geom: RingGeometry, r: float, spherical: bool,
              n_theta: int = N_THETA) -> float:
    return float(disk_mass_profile(geom, [r], spherical, n_theta)[0])


class ProfileCache:
    """Incrementally extendable cumulative disk-mass profile.

    Bisection-style searches query many nearby radii; integrating only the
    gap between the nearest cached radius and the query keeps each call at
    a few ring evaluations instead of a full profile rebuild.
    """

    def __init__(self, geom: RingGeometry, spherical: bool,
                 radii: Sequence[float], n_theta: int = N_THETA):
        self.geom = geom
        self.spherical = spherical
        self.n_theta = n_theta
        radii = sorted(set(float(r) for r in radii))
        cum = disk_mass_profile(geom, radii, spherical, n_theta)
        self.radii = list(radii)
        self.cum = list(map(float, cum))

    def mass(self, r: float) -> float:
        import bisect
        r = float(r)
        k = bisect.bisect_left(self.radii, r)
        if k < len(self.radii) and abs(self.radii[k] - r) <= 1e-15 * max(r, 1e-300):
            return self.cum[k]
        if k == 0:
            val = self.cum[0] - self._between(r, self.radii[0])
        else:
            val = self.cum[k - 1] + self._between(self.radii[k - 1], r)
        self.radii.insert(k, r)
        self.cum.insert(k, val)
        return val

    def _between(self, a: float, b: float) -> float:
        """Integral of ring mass over radii in [a, b]."""
        if b <= a:
            return 0.0
        geom = self.geom
        edges = {a, b}
        for hg in geom.hints:
            spike = hg.spike_radius(geom.max_radius)
            lo, hi = max(hg.d - spike, a), min(hg.d + spike, b)
            if lo < hi:
                edges.update(e for e in
                             _graded_edges_around(hg.d, lo, hi,
                                                  max(hg.scale / 4, 1e-18))
                             if a < e < b)
                edges.update((lo, hi))
        # geometric fill for wide gaps
        spread = b / a if a > 0 else math.inf
        if spread > 1.3:
            k = min(40, int(math.log(spread) / math.log(1.3)) + 1)
            edges.update(np.geomspace(a, b, k + 1)[1:-1])
        edge_arr = np.array(sorted(edges))
        gx, gw = GL8
        acc = 0.0
        for lo, hi in zip(edge_arr[:-1], edge_arr[1:]):
            half = (hi - lo) / 2
            nodes = (lo + hi) / 2 + half * gx
            near = any(abs((lo + hi) / 2 - hg.d)
                       <= hg.spike_radius(geom.max_radius) + (hi - lo)
                       for hg in geom.hints)
            if near:
                for rho, w in zip(nodes, half * gw):
                    acc += ring_integral(geom, rho, self.spherical,
                                         self.n_theta) \
                        * geom.circumference(rho) * w
            else:
                thetas = np.arange(self.n_theta) * (2 * math.pi / self.n_theta)
                vals = np.stack([geom.eval_ring(rho, thetas) for rho in nodes])
                ring_avg = vals.mean(axis=1) * 2 * math.pi
                circ = np.array([geom.circumference(rho) for rho in nodes])
                acc += float(np.sum(ring_avg * circ * half * gw))
        return acc


# ---------------------------------------------------------------------------
# Band (sub-cylinder) masses
# ---------------------------------------------------------------------------

def band_mass_profile(eval_line: Callable[[float, np.ndarray], np.ndarray],
                      circumference: Callable[[float], float],
                      cuts: Sequence[float], n_theta: int = N_THETA,
                      hint_positions: Sequence[Tuple[float, float, float]] = ()) -> np.ndarray:
    """Cumulative band masses int_{cuts[0]}^{cuts[k]} over full angular fibers.

    eval_line(x, thetas) evaluates the density along the fiber at coordinate
    x; hint_positions are (x, theta, scale) of concentrations to refine near.
    """
    cuts = np.asarray(cuts, dtype=float)
    edges = set(map(float, cuts))
    for x, _, s in hint_positions:
        edges.update(_graded_edges_around(x, float(cuts[0]), float(cuts[-1]),
                                          max(s / 4, 1e-18)))
    edges = np.array(sorted(edges))
    gx, gw = GL8
    masses = np.zeros(len(edges) - 1)
    thetas = np.arange(n_theta) * (2 * math.pi / n_theta)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        half = (b - a) / 2
        nodes = (a + b) / 2 + half * gx
        acc = 0.0
        for x, w in zip(nodes, half * gw):
            near = [(th, s) for (hx, th, s) in hint_positions
                    if abs(x - hx) <= HINT_FAR * s]
            if near:
                acc += _fiber_with_spikes(eval_line, x, near, n_theta) \
                       * circumference(x) * w
            else:
                acc += float(np.mean(eval_line(x, thetas))) * 2 * math.pi \
                       * circumference(x) * w
        masses[i] = acc
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    return np.interp(cuts, edges, cum)


def _fiber_with_spikes(eval_line, x: float, spikes: List[Tuple[float, float]],
                       n_theta: int) -> float:
    arcs = [(theta0 - min(math.pi, HINT_FAR * s),
             theta0 + min(math.pi, HINT_FAR * s), s, i)
            for i, (theta0, s) in enumerate(spikes)]
    arcs = _merge_arcs(arcs)
    total = 0.0
    covered = 0.0
    gx, gw = GL8
    for i, (lo, hi, s, _) in enumerate(arcs):
        covered += hi - lo
        mid, half = (lo + hi) / 2, (hi - lo) / 2
        xs_r, ws_r = _graded_nodes(0.0, half, max(s, half * 1e-12))
        th = np.concatenate([mid + xs_r, mid - xs_r])
        w = np.concatenate([ws_r, ws_r])
        total += float(np.sum(eval_line(x, np.mod(th, 2 * math.pi)) * w))
        nxt = arcs[(i + 1) % len(arcs)]
        seg_lo = hi
        seg_hi = nxt[0] + (2 * math.pi if i == len(arcs) - 1 else 0.0)
        if seg_hi > seg_lo and covered < 2 * math.pi - 1e-12:
            edges = np.linspace(seg_lo, seg_hi, max(3, n_theta // 16))
            for a, b in zip(edges[:-1], edges[1:]):
                h2 = (b - a) / 2
                tt = (a + b) / 2 + h2 * gx
                total += float(np.sum(eval_line(x, np.mod(tt, 2 * math.pi)) * h2 * gw))
    return total
