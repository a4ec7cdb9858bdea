"""Measured surfaces: constant-curvature models carrying an energy density.

A surface provides two complementary views of its measure: a raster grid
(used for region topology, cleanness masks, and synthetic-region tests) and
analytic disk/band quadrature (used by the neck search, which must resolve
radii far below any grid cell).  Grid conventions: sphere rows are
colatitude bands (row-major lat x lon), torus rows follow the first lattice
coordinate, cylinders are (rho, theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from .densities import Density, Hint, UniformDensity, FSPullbackDensity, TorusBandDensity
from .geometry import (ARCSINH1, AnnulusSpec, DomainError, MetricModel,
                       geodesic_distance, sphere_distance, sphere_exp,
                       sphere_from_chart, sphere_model, sphere_to_chart,
                       torus_model, TRIVIAL)
from . import quadrature as quadlib

DEFAULT_GRIDS = {"sphere": (512, 1024), "torus": (512, 512), "cylinder": (1024, 256)}

EAST_POLE = np.array([0.0, 1.0, 0.0])    # farthest points from the boundary circle
WEST_POLE = np.array([0.0, -1.0, 0.0])


class RefinementRequired(ValueError):
    """Raised when a mask is too coarse to answer a topology question."""


@dataclass
class MeasuredSurface:
    """A constant-curvature model plus a nonnegative energy density.

    genus is the genus of the closed surface (the complex double for
    bordered inputs) and is declared, not inferred.  When involution is set
    the density must be symmetric under it; the fixed circle is the
    conjugation-invariant great circle (sphere: chart real axis) or the two
    horizontal circles (torus).
    """
    kind: str
    model: MetricModel
    density: Density
    genus: int
    involution: bool = False
    boundary_circles: int = 0
    grid_shape: Optional[Tuple[int, int]] = None
    cylinder_length: Optional[float] = None
    _grid_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.grid_shape is None:
            self.grid_shape = DEFAULT_GRIDS[self.kind]
        if self.involution and not getattr(self.density, "symmetric", False):
            raise DomainError("involution surfaces need a symmetric density")

    # -- pointwise ---------------------------------------------------------

    def density_at(self, points) -> np.ndarray:
        return self.density.value_at(points)

    def hints(self) -> List[Hint]:
        return self.density.hints()

    # -- grid --------------------------------------------------------------

    def grid_centers(self) -> np.ndarray:
        if "centers" not in self._grid_cache:
            n0, n1 = self.grid_shape
            if self.kind == "sphere":
                theta = (np.arange(n0) + 0.5) * math.pi / n0
                phi = (np.arange(n1) + 0.5) * 2 * math.pi / n1
                T, P = np.meshgrid(theta, phi, indexing="ij")
                pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P),
                                np.cos(T)], axis=-1)
            elif self.kind == "torus":
                v1, v2 = self.model.lattice_basis()
                a = (np.arange(n0) + 0.5) / n0
                b = (np.arange(n1) + 0.5) / n1
                A, B = np.meshgrid(a, b, indexing="ij")
                pts = A[..., None] * v1 + B[..., None] * v2
            elif self.kind == "cylinder":
                rho = (np.arange(n0) + 0.5) * self.cylinder_length / n0
                th = (np.arange(n1) + 0.5) * 2 * math.pi / n1
                R, T = np.meshgrid(rho, th, indexing="ij")
                pts = np.stack([R, T], axis=-1)
            else:
                raise DomainError(f"no grid for kind {self.kind!r}")
            self._grid_cache["centers"] = pts
        return self._grid_cache["centers"]

    def grid_areas(self) -> np.ndarray:
        if "areas" not in self._grid_cache:
            n0, n1 = self.grid_shape
            if self.kind == "sphere":
                theta_edges = np.arange(n0 + 1) * math.pi / n0
                band = np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])
                areas = np.repeat((band * 2 * math.pi / n1)[:, None], n1, axis=1)
            elif self.kind == "torus":
                areas = np.full(self.grid_shape, 1.0 / (n0 * n1))
            elif self.kind == "cylinder":
                areas = np.full(self.grid_shape,
                                self.cylinder_length * 2 * math.pi / (n0 * n1))
            else:
                raise DomainError(f"no grid for kind {self.kind!r}")
            self._grid_cache["areas"] = areas
        return self._grid_cache["areas"]

    def grid_density(self) -> np.ndarray:
        if "density" not in self._grid_cache:
            self._grid_cache["density"] = self.density_at(self.grid_centers())
        return self._grid_cache["density"]

    # -- measure -----------------------------------------------------------

    def measure_mask(self, mask: np.ndarray) -> float:
        """Midpoint-rule mass of the masked cells (order-2 quadrature)."""
        return float(np.sum(self.grid_density()[mask] * self.grid_areas()[mask]))

    def total_mass(self) -> float:
        if isinstance(self.density, FSPullbackDensity):
            return self.density.total_mass()
        if isinstance(self.density, TorusBandDensity):
            return self.density.total_mass()
        if isinstance(self.density, UniformDensity) and self.kind in ("sphere", "torus"):
            return self.density.value * self.model.area()
        base = getattr(self.density, "base", None)
        if base is not None and isinstance(base, FSPullbackDensity):
            return base.total_mass()     # Mobius transport preserves mass
        if self.kind == "sphere" and self.hints():
            geom = self._ring_geometry(np.array([0.0, 0.0, 1.0]))
            return quadlib.disk_mass(geom, math.pi * (1 - 1e-12), spherical=True)
        return self.measure_mask(np.ones(self.grid_shape, dtype=bool))

    def quadrature_hints(self) -> List[Hint]:
        # O(1)-scale concentrations are resolved by the plain angular rule;
        # only genuinely small scales need hint-local treatment
        return [h for h in self.hints() if h.scale < 0.02]

    def _ring_geometry(self, center) -> quadlib.RingGeometry:
        if self.kind == "sphere":
            return quadlib.sphere_ring_geometry(self.density, center,
                                                self.quadrature_hints())
        if self.kind == "torus":
            return quadlib.torus_ring_geometry(self.density, self.model, center,
                                               self.quadrature_hints())
        if self.kind == "cylinder":
            return quadlib.cylinder_ring_geometry(self.density, center)
        raise DomainError(f"no ring geometry for kind {self.kind!r}")

    def profile_cache(self, center, radii: Sequence[float]) -> "quadlib.ProfileCache":
        geom = self._ring_geometry(np.asarray(center, dtype=float))
        return quadlib.ProfileCache(geom, self.kind == "sphere", radii)

    def disk_profile(self, center, radii: Sequence[float]) -> np.ndarray:
        """Cumulative masses mu(B_r(center)) for ascending radii."""
        geom = self._ring_geometry(np.asarray(center, dtype=float))
        return quadlib.disk_mass_profile(geom, radii, spherical=(self.kind == "sphere"))

    def disk_mass(self, center, r: float) -> float:
        return float(self.disk_profile(center, [r])[0])

    def annulus_mass(self, center, r_inner: float, r_outer: float) -> float:
        prof = self.disk_profile(center, [r_inner, r_outer])
        return float(prof[1] - prof[0])

    def boundary_band_profile(self, cuts: Sequence[float]) -> np.ndarray:
        """Sphere only: cumulative mass of {rho(boundary circle) < cut}.

        The band {|rho| < c} around the fixed circle is the complement of
        two polar caps around the east/west poles.
        """
        if self.kind != "sphere":
            raise DomainError("boundary bands are a sphere feature")
        cuts = np.asarray(cuts, dtype=float)
        east = self.disk_profile(EAST_POLE, list(math.pi / 2 - cuts[::-1]))[::-1]
        west = self.disk_profile(WEST_POLE, list(math.pi / 2 - cuts[::-1]))[::-1]
        total = self.total_mass()
        return total - east - west

    def torus_band_profile(self, cuts: Sequence[float], normal_offset: float = 0.0
                           ) -> np.ndarray:
        """Cumulative mass of transverse bands {s in [cuts[0], cuts[k]]}."""
        if self.kind != "torus":
            raise DomainError("torus bands need a torus")
        dens = self.density
        if isinstance(dens, TorusBandDensity) and abs(dens.offset - normal_offset) >= 0:
            return np.array([dens.band_mass(cuts[0], c) for c in cuts])
        v1, v2 = self.model.lattice_basis()
        n = np.array([-v1[1], v1[0]]) / np.linalg.norm(v1)
        u = v1 / np.linalg.norm(v1)
        ridge_len = float(np.linalg.norm(v1))

        def eval_line(x, thetas):
            pts = (normal_offset + x) * n[None, :] \
                  + (thetas / (2 * math.pi) * ridge_len)[:, None] * u[None, :]
            return self.density_at(pts)

        circ = ridge_len / (2 * math.pi)
        return quadlib.band_mass_profile(eval_line, lambda x: circ, cuts)

    # -- involution ---------------------------------------------------------

    def involute_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if self.kind == "sphere":
            out = pts.copy()
            out[..., 1] = -out[..., 1]
            return out
        if self.kind == "torus":
            v1, v2 = self.model.lattice_basis()
            n = np.array([-v1[1], v1[0]]) / np.linalg.norm(v1)
            s = pts @ n
            return pts - 2 * s[..., None] * n
        raise DomainError(f"no involution for kind {self.kind!r}")

    def involute_mask(self, mask: np.ndarray) -> np.ndarray:
        # sphere: conjugation negates longitude; torus (rectangular tau):
        # it negates the second lattice coordinate.  Both are column flips.
        if self.kind in ("sphere", "torus"):
            return mask[:, ::-1]
        raise DomainError(f"no involution for kind {self.kind!r}")

    def distance_to_boundary(self, points) -> np.ndarray:
        """Distance to the involution fixed circle (sphere: |arcsin(y)|)."""
        pts = np.asarray(points, dtype=float)
        if self.kind == "sphere":
            return np.abs(np.arcsin(np.clip(pts[..., 1], -1, 1)))
        if self.kind == "torus":
            v1, v2 = self.model.lattice_basis()
            n = np.array([-v1[1], v1[0]]) / np.linalg.norm(v1)
            period = abs(float(v2 @ n))
            s = np.mod(pts @ n, period)
            return np.minimum.reduce([s, period - s, np.abs(s - period / 2)])
        raise DomainError(f"no boundary for kind {self.kind!r}")

    def is_clean_disk(self, center, r: float, tol: float = 0.0) -> bool:
        """Clean = invariant (center on the fixed circle) or disjoint from
        its conjugate."""
        if not self.involution:
            return True
        c = np.asarray(center, dtype=float)
        cbar = self.involute_points(c)
        d = float(geodesic_distance(self.model, c, cbar))
        return d <= tol or d > 2 * r - tol

    # -- rasterization -------------------------------------------------------

    def rasterize_disk(self, center, r: float) -> np.ndarray:
        c = np.asarray(center, dtype=float)
        pts = self.grid_centers()
        if self.kind == "sphere":
            d = sphere_distance(pts, c[None, None, :])
        elif self.kind == "torus":
            flat = pts.reshape(-1, 2)
            d = geodesic_distance(self.model, flat, c).reshape(pts.shape[:2])
        else:
            raise DomainError("rasterize_disk needs sphere or torus")
        return d < r

    def rasterize_annulus(self, spec: AnnulusSpec) -> np.ndarray:
        if spec.kind != TRIVIAL:
            raise DomainError("rasterize_annulus is for trivial annuli")
        return self.rasterize_disk(spec.center, spec.r_outer) \
            & ~self.rasterize_disk(spec.center, spec.r_inner)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def sphere_surface(density: Density, involution: bool = False,
                   grid_shape=None) -> MeasuredSurface:
    return MeasuredSurface(kind="sphere", model=sphere_model(), density=density,
                           genus=0, involution=involution,
                           boundary_circles=1 if involution else 0,
                           grid_shape=grid_shape)


def torus_surface(density: Density, tau: complex, involution: bool = False,
                  grid_shape=None) -> MeasuredSurface:
    return MeasuredSurface(kind="torus", model=torus_model(tau), density=density,
                           genus=1, involution=involution,
                           boundary_circles=2 if involution else 0,
                           grid_shape=grid_shape)


def cylinder_surface(density: Density, length: float, grid_shape=None) -> MeasuredSurface:
    return MeasuredSurface(kind="cylinder",
                           model=MetricModel(curvature=0, tau=1j), density=density,
                           genus=0, involution=False, grid_shape=grid_shape,
                           cylinder_length=length)


def double_genus(genus: int, boundaries: int) -> int:
    """Genus of the complex double of a bordered surface."""
    if boundaries < 1:
        raise DomainError("doubling needs a boundary")
    return 2 * genus + boundaries - 1


def double(genus: int, boundaries: int, density: Density,
           tau: complex = 1j, grid_shape=None) -> MeasuredSurface:
    """Closed symmetric surface doubling a bordered one.

    The density must already be reflection-symmetric (the measure extends by
    reflection).  Disk -> sphere, annulus -> torus; higher doubles are out of
    metric scope and raise.
    """
    g_c = double_genus(genus, boundaries)
    if g_c == 0:
        return sphere_surface(density, involution=True, grid_shape=grid_shape)
    if g_c == 1:
        return torus_surface(density, tau=tau, involution=True, grid_shape=grid_shape)
    raise DomainError(f"double has genus {g_c}; supply a collar-model bundle instead")


# ---------------------------------------------------------------------------
# Regions: masks with topology
# ---------------------------------------------------------------------------

@dataclass
class RegionTopology:
    components: int
    euler: int
    boundaries: int
    genus_per_component: List[int]
    b1: int


class Region:
    """A cell mask on a surface grid; topology is derived lazily."""

    def __init__(self, surface: MeasuredSurface, mask: np.ndarray):
        if mask.shape != tuple(surface.grid_shape):
            raise DomainError("mask shape must match the surface grid")
        self.surface = surface
        self.mask = mask.astype(bool)
        self._topology: Optional[RegionTopology] = None

    def measure(self) -> float:
        return self.surface.measure_mask(self.mask)

    def topology(self) -> RegionTopology:
        if self._topology is None:
            self._topology = region_topology(self.surface, self.mask)
        return self._topology


def measure_of(surface: MeasuredSurface, region) -> float:
    mask = region.mask if isinstance(region, Region) else np.asarray(region, dtype=bool)
    return surface.measure_mask(mask)


def density_at(surface: MeasuredSurface, p) -> float:
    return float(np.asarray(surface.density_at(np.asarray(p, dtype=float))))


def is_clean(surface: MeasuredSurface, region, tol_cells: float = 0.5) -> bool:
    """Mask cleanness: equal to its conjugate or disjoint from it, up to a
    half-cell tolerance measured in boundary-adjacent cells."""
    if not surface.involution:
        return True
    mask = region.mask if isinstance(region, Region) else np.asarray(region, dtype=bool)
    refl = surface.involute_mask(mask)
    inter = int(np.sum(mask & refl))
    sym_diff = int(np.sum(mask ^ refl))
    boundary_cells = int(np.sum(mask & ~ndimage.binary_erosion(mask)))
    tol = max(1, int(tol_cells * 2 * boundary_cells))
    if sym_diff <= tol:
        return True
    if inter <= tol:
        return True
    return False


def _wrap_axes(surface: MeasuredSurface) -> Tuple[bool, bool]:
    if surface.kind == "sphere":
        return False, True
    if surface.kind == "torus":
        return True, True
    if surface.kind == "cylinder":
        return False, True
    raise DomainError(f"no grid topology for {surface.kind!r}")


def label_components(surface: MeasuredSurface, mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """8-connected labeling with wraparound stitching (and pole stitching)."""
    structure = np.ones((3, 3), dtype=int)
    labels, n = ndimage.label(mask, structure=structure)
    wrap0, wrap1 = _wrap_axes(surface)
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    def stitch(row_a, row_b):
        la, lb = labels[row_a], labels[row_b]
        for j in range(labels.shape[1]):
            if la[j] and lb[j]:
                union(la[j], lb[j])
            # 8-connectivity across the seam
            jn = (j + 1) % labels.shape[1]
            if la[j] and lb[jn]:
                union(la[j], lb[jn])
            if la[jn] and lb[j]:
                union(la[jn], lb[j])

    if wrap1:
        ca, cb = labels[:, 0], labels[:, -1]
        for i in range(labels.shape[0]):
            if ca[i] and cb[i]:
                union(ca[i], cb[i])
            inn = (i + 1) % labels.shape[0] if wrap0 else min(i + 1, labels.shape[0] - 1)
            if ca[i] and cb[inn]:
                union(ca[i], cb[inn])
            if ca[inn] and cb[i]:
                union(ca[inn], cb[i])
    if wrap0:
        stitch(0, -1)
    if surface.kind == "sphere":
        # all top-row cells meet at the north pole, bottom at the south
        for row in (0, -1):
            present = labels[row][labels[row] > 0]
            for v in present[1:]:
                union(int(present[0]), int(v))

    out = np.zeros_like(labels)
    remap = {}
    for lbl in range(1, n + 1):
        root = find(lbl)
        remap.setdefault(root, len(remap) + 1)
    for lbl in range(1, n + 1):
        out[labels == lbl] = remap[find(lbl)]
    return out, len(remap)


def _euler_and_boundaries(surface: MeasuredSurface, mask: np.ndarray) -> Tuple[int, int]:
    """Exact V - E + F of the masked cell complex and its boundary-circle
    count.  Raises RefinementRequired at pinch vertices."""
    n0, n1 = mask.shape
    wrap0, wrap1 = _wrap_axes(surface)
    spherical = surface.kind == "sphere"

    def vkey(i, j):
        if spherical:
            if i == 0:
                return ("N",)
            if i == n0:
                return ("S",)
        ii = i % n0 if wrap0 else i
        return (ii, j % n1)

    cells = np.argwhere(mask)
    verts = set()
    edges = {}

    def add_edge(a, b, cell):
        if a == b:
            return
        key = (a, b) if a <= b else (b, a)
        edges.setdefault(key, 0)
        edges[key] += 1

    for i, j in cells:
        corners = [vkey(i, j), vkey(i, j + 1), vkey(i + 1, j + 1), vkey(i + 1, j)]
        verts.update(corners)
        for k in range(4):
            add_edge(corners[k], corners[(k + 1) % 4], (i, j))

    V = len(verts)
    E = len(edges)
    F = len(cells)
    chi = V - E + F

    boundary_edges = [e for e, cnt in edges.items() if cnt == 1]
    incidence = {}
    for a, b in boundary_edges:
        incidence.setdefault(a, []).append((a, b))
        incidence.setdefault(b, []).append((a, b))
    for v, inc in incidence.items():
        if len(inc) > 2:
            raise RefinementRequired(f"pinch at vertex {v}: mask too coarse")
    # count boundary cycles by walking the 2-regular boundary graph
    seen = set()
    cycles = 0
    for e in boundary_edges:
        if e in seen:
            continue
        cycles += 1
        cur = e
        prev_v = e[0]
        while True:
            seen.add(cur)
            nxt_v = cur[1] if cur[0] == prev_v else cur[0]
            options = [x for x in incidence[nxt_v] if x != cur]
            if not options:
                break
            cur = options[0]
            prev_v = nxt_v
            if cur in seen:
                break
    return chi, cycles


def region_topology(surface: MeasuredSurface, mask: np.ndarray) -> RegionTopology:
    """Components, Euler characteristic, boundary circles, genus list, b1."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = label_components(surface, mask)
    genus_list = []
    chi_total = 0
    boundaries_total = 0
    b1 = 0
    for lbl in range(1, n + 1):
        sub = labels == lbl
        chi, bnd = _euler_and_boundaries(surface, sub)
        chi_total += chi
        boundaries_total += bnd
        g2 = 2 - chi - bnd
        if g2 < 0 or g2 % 2:
            raise RefinementRequired(
                f"component {lbl}: chi={chi}, boundaries={bnd} is not a surface")
        g = g2 // 2
        genus_list.append(g)
        b1 += 2 * g + (bnd - 1 if bnd > 0 else 0)
    return RegionTopology(components=n, euler=chi_total,
                          boundaries=boundaries_total,
                          genus_per_component=genus_list, b1=b1)


def diameter(surface: MeasuredSurface, mask: np.ndarray, n_sources: int = 24) -> float:
    """Metric diameter of a connected masked region via grid shortest paths.

    Overestimates the true diameter by at most one cell-diagonal factor.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = label_components(surface, mask)
    if n != 1:
        raise DomainError(f"diameter needs a connected region, got {n} components")
    idx = np.argwhere(mask)
    n0, n1 = mask.shape
    wrap0, wrap1 = _wrap_axes(surface)
    cell_id = -np.ones(mask.shape, dtype=int)
    cell_id[mask] = np.arange(len(idx))
    centers = surface.grid_centers()[mask]

    rows, cols, vals = [], [], []
    offs = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for di, dj in offs:
        ii = idx[:, 0] + di
        jj = idx[:, 1] + dj
        ok = np.ones(len(idx), dtype=bool)
        if wrap0:
            ii = ii % n0
        else:
            ok &= (ii >= 0) & (ii < n0)
        if wrap1:
            jj = jj % n1
        else:
            ok &= (jj >= 0) & (jj < n1)
        src = cell_id[idx[ok, 0], idx[ok, 1]]
        dst = cell_id[ii[ok], jj[ok]]
        good = dst >= 0
        src, dst = src[good], dst[good]
        if surface.kind == "sphere":
            w = sphere_distance(centers[src], centers[dst])
        else:
            w = geodesic_distance(surface.model, centers[src], centers[dst])
        rows.append(src)
        cols.append(dst)
        vals.append(w)
    graph = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(idx), len(idx)))
    stride = max(1, len(idx) // n_sources)
    sources = np.arange(0, len(idx), stride)
    dmat = csgraph.dijkstra(graph, directed=False, indices=sources)
    finite = dmat[np.isfinite(dmat)]
    return float(finite.max())
