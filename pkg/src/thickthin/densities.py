"""Energy-density fields on model surfaces.

Closed-form densities (Fubini-Study pullbacks of rational maps, torus bands,
cylinder profiles) evaluate exactly at arbitrary points, which is what lets
the neck search resolve concentration scales far below any grid.  Each
density exposes `hints`: locations and scales where it concentrates, used by
the quadrature layer to place refinement.  Hints come from the density's own
analytic structure (pole residues), never from downstream knowledge.

Rational maps are stored as a clean partial-fraction core composed with one
Mobius chart map (u . m).  Flattening the composition would produce hugely
cancelling coefficients whenever m is a strong zoom; evaluating m as a ratio
keeps every regime well-conditioned, and pole-relative offsets evaluate
through exact Mobius difference formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import MetricModel, sphere_from_chart, sphere_to_chart


@dataclass(frozen=True)
class Hint:
    """A concentration of mass: center (model coords), scale, rough mass."""
    center: np.ndarray
    scale: float
    mass: float


class Density:
    """Base interface: pointwise evaluation plus concentration hints."""

    symmetric = False   # involution-symmetric by construction

    def value_at(self, points) -> np.ndarray:
        raise NotImplementedError

    def hints(self) -> List[Hint]:
        return []


# ---------------------------------------------------------------------------
# Mobius maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mobius:
    """z -> (a z + b)/(c z + d), ad - bc != 0."""
    a: complex
    b: complex
    c: complex
    d: complex

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return (self.a * z + self.b) / (self.c * z + self.d)

    def det(self) -> complex:
        return self.a * self.d - self.b * self.c

    def inverse(self) -> "Mobius":
        return Mobius(self.d, -self.b, -self.c, self.a)

    def deriv_abs(self, z):
        z = np.asarray(z, dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return abs(self.det()) / np.abs(self.c * z + self.d) ** 2

    @staticmethod
    def identity() -> "Mobius":
        return Mobius(1, 0, 0, 1)

    @staticmethod
    def scaling(s: complex) -> "Mobius":
        return Mobius(s, 0, 0, 1)

    @staticmethod
    def inversion() -> "Mobius":
        return Mobius(0, 1, 1, 0)

    def compose(self, other: "Mobius") -> "Mobius":
        """self after other: z -> self(other(z))."""
        return Mobius(self.a * other.a + self.b * other.c,
                      self.a * other.b + self.b * other.d,
                      self.c * other.a + self.d * other.c,
                      self.c * other.b + self.d * other.d)

    def is_real(self, tol=1e-12) -> bool:
        vals = [complex(self.a), complex(self.b), complex(self.c), complex(self.d)]
        return all(abs(v.imag) <= tol * (1 + abs(v)) for v in vals)


def mobius_rotation(z0: complex) -> Mobius:
    """Rotation of the round sphere taking chart point z0 to chart 0.

    SU(2) form (a z + b)/(-conj(b) z + conj(a)), an isometry of the round
    metric in the stereographic chart.
    """
    denom = math.sqrt(1 + abs(z0) ** 2)
    a = 1.0 / denom
    b = -z0 / denom
    return Mobius(a, b, -np.conj(b), np.conj(a))


# ---------------------------------------------------------------------------
# Rational maps (partial fractions) and charted composition
# ---------------------------------------------------------------------------

class RationalMap:
    """u(z) = poly(z) + sum_i sum_k res[i][k] / (z - pole_i)^(k+1).

    The partial-fraction representation keeps evaluation cancellation-free
    arbitrarily close to the poles.
    """

    def __init__(self, poly: Sequence[complex], poles: Sequence[complex] = (),
                 residues: Sequence[Sequence[complex]] = ()):
        self.poly = np.asarray(poly, dtype=complex)         # highest first
        self.poles = [complex(p) for p in poles]
        self.residues = [np.asarray(r, dtype=complex) for r in residues]
        if len(self.poles) != len(self.residues):
            raise ValueError("poles and residues must pair up")

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        out = np.polyval(self.poly, z) if self.poly.size else np.zeros_like(z)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for p, res in zip(self.poles, self.residues):
                w = z - p
                for k, amp in enumerate(res):
                    if amp != 0:
                        out = out + amp / w ** (k + 1)
        return out

    def deriv(self) -> "RationalMap":
        dpoly = np.polyder(self.poly) if self.poly.size > 1 else np.array([0.0 + 0j])
        dres = []
        for res in self.residues:
            r = np.zeros(len(res) + 1, dtype=complex)
            for k, amp in enumerate(res):
                r[k + 1] = -(k + 1) * amp
            dres.append(r)
        return RationalMap(dpoly, self.poles, dres)

    def degree(self) -> int:
        d_poly = len(self.poly) - 1 if self.poly.size else 0
        d_poles = sum(len(r) for r in self.residues)
        return max(d_poly, 0) + d_poles

    def poly_degree(self) -> int:
        nz = np.nonzero(np.abs(self.poly) > 0)[0]
        if nz.size == 0:
            return 0
        return len(self.poly) - 1 - nz[0]

    def is_real(self, tol=1e-12) -> bool:
        zs = np.array([0.3 + 0.7j, -1.1 + 0.2j, 0.05 - 2.0j])
        return bool(np.all(np.abs(self(np.conj(zs)) - np.conj(self(zs))) <=
                           tol * (1 + np.abs(self(zs)))))


class ChartedMap:
    """u . m with u in partial fractions and m a Mobius chart map.

    Evaluation routes every pole term through the exact Mobius difference
    m(x) - m(y) = (x - y) det / ((c x + d)(c y + d)), so precision survives
    both strong zooms (|m| coefficients huge) and offsets at the scale of
    the innermost pole.
    """

    def __init__(self, u: RationalMap, m: Mobius):
        self.u = u
        self.m = m
        self.du = u.deriv()
        c, d = complex(m.c), complex(m.d)
        self._det = complex(m.det())
        if abs(c) > 0:
            self.wstar: Optional[complex] = -d / c        # preimage of infinity
            self._eps_star = c * self.wstar + d           # rounding residue
        else:
            self.wstar = None
            self._eps_star = d
        # preimages of the partial-fraction poles
        minv = m.inverse()
        self.pole_pre: List[complex] = []
        for q in u.poles:
            self.pole_pre.append(complex(minv(np.array([q]))[0]))

    # -- helpers -------------------------------------------------------------

    def _num_den(self, x: np.ndarray, x_rel_wstar: Optional[np.ndarray] = None):
        """(a x + b, c x + d) with the wstar-relative forms used only where
        they are the stable choice (|x - wstar| well below |wstar|); far from
        wstar the relative forms cancel catastrophically and the direct ones
        are exact."""
        a, b = complex(self.m.a), complex(self.m.b)
        c, d = complex(self.m.c), complex(self.m.d)
        x = np.asarray(x, dtype=complex)
        num = a * x + b
        den = c * x + d
        if self.wstar is not None and x_rel_wstar is not None:
            rel = np.asarray(x_rel_wstar, dtype=complex)
            near = np.abs(rel) < 0.5 * abs(self.wstar)
            if np.any(near):
                num = np.where(near, -self._det / c + a * rel, num)
                den = np.where(near, c * rel + self._eps_star, den)
        return num, den

    def _denom(self, x: np.ndarray, x_rel_wstar: Optional[np.ndarray] = None):
        return self._num_den(x, x_rel_wstar)[1]

    def _m_of(self, x, x_rel_wstar=None):
        num, den = self._num_den(x, x_rel_wstar)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return num / den

    def compose_mobius(self, m2: Mobius) -> "ChartedMap":
        return ChartedMap(self.u, self.m.compose(m2))

    def degree(self) -> int:
        return self.u.degree()

    def is_real(self, tol=1e-12) -> bool:
        zs = np.array([0.3 + 0.7j, -1.1 + 0.2j, 0.05 - 2.0j])
        vals = self.eval_with_deriv(zs)[0]
        vals_c = self.eval_with_deriv(np.conj(zs))[0]
        return bool(np.all(np.abs(vals_c - np.conj(vals)) <=
                           tol * (1 + np.abs(vals))))

    # -- evaluation ------------------------------------------------------------

    def eval_with_deriv(self, x, rel_pole: Optional[int] = None,
                        rel_offsets: Optional[np.ndarray] = None,
                        base: complex = 0j):
        """(u(m(x)), d/dx u(m(x))).

        When rel_pole is given, x = base + rel_offsets with the offset from
        pole_pre[rel_pole] kept exact; the identity of nearby pole terms is
        preserved through Mobius differences.
        """
        if rel_offsets is not None:
            x = base + np.asarray(rel_offsets, dtype=complex)
        x = np.asarray(x, dtype=complex)
        c = complex(self.m.c)
        det = self._det

        # exact relative coordinate against wstar when we know the base
        x_rel_w = None
        if self.wstar is not None and rel_offsets is not None:
            x_rel_w = (base - self.wstar) + np.asarray(rel_offsets, dtype=complex)
        num_x, den_x = self._num_den(x, x_rel_w)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            z = num_x / den_x
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            m_prime = det / den_x ** 2

            u_val = (np.polyval(self.u.poly, z) if self.u.poly.size
                     else np.zeros_like(z))
            if self.u.poly.size > 1:
                du_val = np.polyval(np.polyder(self.u.poly), z) * m_prime
            else:
                du_val = np.zeros_like(z)

            for i, (q, res) in enumerate(zip(self.u.poles, self.u.residues)):
                p_i = self.pole_pre[i]
                if np.isfinite(p_i.real) and np.isfinite(p_i.imag):
                    if rel_offsets is not None:
                        diff_x = (base - p_i) + np.asarray(rel_offsets, dtype=complex)
                    else:
                        diff_x = x - p_i
                    den_p = complex(self._denom(np.array([p_i]))[0])
                    inv_mdiff = (den_x * den_p) / (diff_x * det)   # 1/(m(x) - q)
                else:
                    # pole lives at infinity of this chart; the term is
                    # smooth here and direct evaluation is fine
                    inv_mdiff = 1.0 / (z - q)
                for k, amp in enumerate(res):
                    if amp == 0:
                        continue
                    u_val = u_val + amp * inv_mdiff ** (k + 1)
                    du_val = du_val - (k + 1) * amp * inv_mdiff ** (k + 2) * m_prime
        return u_val, du_val

    # -- pole structure for hints ---------------------------------------------

    def pole_structure(self) -> List[Tuple[complex, int, float]]:
        """(chart position, order, chart scale) of every pole of u . m,
        including the polynomial pole at the preimage of infinity."""
        out = []
        for i, (q, res) in enumerate(zip(self.u.poles, self.u.residues)):
            order, top = 0, 0.0
            for k, amp in enumerate(res):
                if abs(amp) > 0:
                    order, top = k + 1, abs(amp)
            if order == 0:
                continue
            p_i = self.pole_pre[i]
            if not np.isfinite(p_i.real) or not np.isfinite(p_i.imag):
                continue
            den_p = complex(self._denom(np.array([p_i]))[0])
            mp = abs(self._det) / abs(den_p) ** 2 if abs(den_p) > 0 else math.inf
            if not np.isfinite(mp) or mp <= 0:
                continue
            scale = (top ** (1.0 / order)) / mp
            out.append((p_i, order, scale))
        d_poly = self.u.poly_degree()
        if d_poly >= 1 and self.wstar is not None:
            lead = abs(self.u.poly[np.nonzero(np.abs(self.u.poly) > 0)[0][0]])
            B = abs(self._det) / abs(complex(self.m.c)) ** 2
            scale = (lead ** (1.0 / d_poly)) * B
            out.append((self.wstar, d_poly, scale))
        return out


# ---------------------------------------------------------------------------
# Fubini-Study pullback density on the sphere
# ---------------------------------------------------------------------------

class FSPullbackDensity(Density):
    """Energy density of a rational self-map of the round sphere.

    In the stereographic chart, D(z) = |u'|^2 (1+|z|^2)^2 / (1+|u|^2)^2.
    For |z| > 1 evaluation swaps to the chart at infinity (the FS density
    formula is invariant under target isometries, so only the domain chart
    changes).
    """

    def __init__(self, u, chart: Optional[Mobius] = None):
        if isinstance(u, RationalMap):
            self.map = ChartedMap(u, chart or Mobius.identity())
        else:
            self.map = u
        self.map_far = self.map.compose_mobius(Mobius.inversion())
        self.symmetric = self.map.is_real() and \
            (chart is None or chart.is_real())
        self._shift_cache: dict = {}

    @property
    def u(self) -> ChartedMap:
        return self.map

    def degree(self) -> int:
        return self.map.degree()

    def total_mass(self) -> float:
        return 4 * math.pi * self.degree()

    def transported(self, psi: Mobius) -> "FSPullbackDensity":
        """Push-forward under a sphere Mobius map: the FS pullback of
        u . m . psi^{-1}; mass is preserved exactly."""
        return FSPullbackDensity(self.map.compose_mobius(psi.inverse()))

    # -- evaluation ----------------------------------------------------------

    def value_at_chart(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        scalar = z.shape == ()
        z = np.atleast_1d(z)
        out = np.empty(z.shape, dtype=float)
        near = np.abs(z) <= 1.0
        far = ~near
        if np.any(near):
            uv, duv = self.map.eval_with_deriv(z[near])
            out[near] = _fs_formula(z[near], uv, duv)
        if np.any(far):
            with np.errstate(divide="ignore", invalid="ignore"):
                w = 1.0 / z[far]
            uv, duv = self.map_far.eval_with_deriv(w)
            out[far] = _fs_formula(w, uv, duv)
        return float(out[0]) if scalar else out

    def value_at(self, points) -> np.ndarray:
        return self.value_at_chart(sphere_to_chart(points))

    def value_at_offset(self, p: complex, zeta, far: bool = False) -> np.ndarray:
        """Density at chart point p + zeta with zeta treated exactly.

        far=True works in the chart at infinity.  Offsets from the pole
        nearest p stay exact through the Mobius difference formulas.
        """
        mp = self.map_far if far else self.map
        p = complex(p)
        zeta = np.atleast_1d(np.asarray(zeta, dtype=complex))
        # nearest pole to p (if any) anchors the relative evaluation
        rel_pole = None
        best = math.inf
        for i, ppre in enumerate(mp.pole_pre):
            d = abs(p - ppre)
            if np.isfinite(d) and d < best:
                best, rel_pole = d, i
        # nudge nodes exactly on a pole
        for ppre in mp.pole_pre + ([mp.wstar] if mp.wstar is not None else []):
            if ppre is None:
                continue
            hit = np.abs((p - ppre) + zeta) < 1e-280
            if np.any(hit):
                zeta = np.where(hit, zeta + 1e-280, zeta)
        uv, duv = mp.eval_with_deriv(None, rel_pole=rel_pole,
                                     rel_offsets=zeta, base=p)
        return _fs_formula(p + zeta, uv, duv)

    # -- hints ----------------------------------------------------------------

    def hints(self) -> List[Hint]:
        """One hint per pole of the effective map.

        Each pole is owned by exactly one chart: the near chart for |p| <= 1
        and the far chart for |p| < 1 there (equivalently |z| > 1 here), so
        nothing is duplicated or lost.
        """
        out = []
        for chart_far, mp in ((False, self.map), (True, self.map_far)):
            for p, order, scale in mp.pole_structure():
                if (not chart_far and abs(p) > 1.0) or (chart_far and abs(p) >= 1.0):
                    continue
                if chart_far:
                    center = sphere_from_chart(np.conj(p)) * np.array([1.0, 1.0, -1.0])
                else:
                    center = sphere_from_chart(p)
                geo_scale = 2 * scale / (1 + abs(p) ** 2)
                out.append(Hint(center=np.asarray(center, dtype=float),
                                scale=float(geo_scale),
                                mass=4 * math.pi * order))
        return out


def _fs_formula(z, uv, duv) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t2 = z.real ** 2 + z.imag ** 2
        m2 = uv.real ** 2 + uv.imag ** 2
        big = ~(m2 <= 1e150)
        out = np.empty(z.shape, dtype=float)
        small = ~big
        if np.any(small):
            out[small] = (np.abs(duv[small]) ** 2 * (1 + t2[small]) ** 2
                          / (1 + m2[small]) ** 2)
        if np.any(big):
            out[big] = (np.abs(duv[big]) / m2[big]) ** 2 * (1 + t2[big]) ** 2
            bad = ~np.isfinite(out[big])
            if np.any(bad):
                out[np.nonzero(big)[0][bad]] = 0.0
    return out


class TransportedDensity(Density):
    """Numeric push-forward by a sphere Mobius map (for sampled densities).

    The new density at w is D(psi^-1(w)) / lambda(psi^-1(w))^2 with lambda
    the round-metric conformal factor of psi; mass is preserved.
    """

    def __init__(self, base: Density, psi: Mobius):
        self.base = base
        self.psi = psi
        self.psi_inv = psi.inverse()
        self.symmetric = getattr(base, "symmetric", False) and psi.is_real()

    def value_at_chart(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=complex)
        z = self.psi_inv(w)
        if hasattr(self.base, "value_at_chart"):
            base_val = self.base.value_at_chart(z)
        else:
            base_val = self.base.value_at(sphere_from_chart(z))
        num = 1 + (z.real ** 2 + z.imag ** 2)
        den = 1 + (w.real ** 2 + w.imag ** 2)
        lam = self.psi.deriv_abs(z) * num / den
        return base_val / lam ** 2

    def value_at(self, points) -> np.ndarray:
        return self.value_at_chart(sphere_to_chart(points))

    def hints(self) -> List[Hint]:
        out = []
        for h in self.base.hints():
            z = complex(sphere_to_chart(np.asarray(h.center, dtype=float)))
            w = complex(self.psi(np.array([z]))[0])
            num = 1 + abs(z) ** 2
            den = 1 + abs(w) ** 2
            lam = float(self.psi.deriv_abs(np.array([z]))[0]) * num / den
            out.append(Hint(center=sphere_from_chart(w), scale=h.scale * lam,
                            mass=h.mass))
        return out


# ---------------------------------------------------------------------------
# Simple densities
# ---------------------------------------------------------------------------

class UniformDensity(Density):
    symmetric = True

    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def value_at(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.full(pts.shape[:-1], self.value)

    def value_at_chart(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return np.full(z.shape, self.value)


class TorusBandDensity(Density):
    """Mass ridge along a closed geodesic of the flat torus.

    density(x, y) = height * sech(d(x, x0)/width) with d the distance to the
    ridge across the short direction; uniform along the ridge.
    """
    symmetric = True

    def __init__(self, model: MetricModel, height: float, width: float,
                 offset: float = 0.0):
        self.model = model
        self.height = float(height)
        self.width = float(width)
        self.offset = float(offset)
        v1, v2 = model.lattice_basis()
        n = np.array([-v1[1], v1[0]]) / np.linalg.norm(v1)
        self._normal = n
        self._period = abs(float(v2 @ n))

    def transverse_coord(self, xy) -> np.ndarray:
        """Signed distance to the ridge, wrapped into [-period/2, period/2)."""
        xy = np.asarray(xy, dtype=float)
        s = xy @ self._normal - self.offset
        return np.mod(s + self._period / 2, self._period) - self._period / 2

    def value_at(self, points) -> np.ndarray:
        s = self.transverse_coord(points)
        return self.height / np.cosh(s / self.width)

    def band_mass(self, s0: float, s1: float) -> float:
        """Closed-form mass of the band s in [s0, s1] (full theta range).

        The density is periodic across the lattice; ridge copies at +-period
        enter through the shifted antiderivatives (the sech tail makes two
        neighbors plenty).
        """
        v1, _ = self.model.lattice_basis()
        ridge_len = float(np.linalg.norm(v1))
        # antiderivative of sech(s/w) is 2 w arctan(tanh(s/2w))
        def F(s):
            return self.height * self.width * 2 * math.atan(math.tanh(s / (2 * self.width)))

        def G(s):
            return sum(F(s - k * self._period) for k in (-2, -1, 0, 1, 2))
        return ridge_len * (G(s1) - G(s0))

    def total_mass(self) -> float:
        return self.band_mass(-self._period / 2, self._period / 2)


class CylinderProfileDensity(Density):
    """Density on a standard flat cylinder [0, L] x S^1, constant in theta."""
    symmetric = True

    def __init__(self, length: float, profile):
        self.length = float(length)
        self.profile = profile

    def value_at(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.asarray(self.profile(pts[..., 0]), dtype=float)


class GridDensity(Density):
    """Sampled density with bilinear interpolation.

    Grids are row-major over (colatitude, longitude) for the sphere,
    (lattice coords) for the torus, and (rho, theta) for cylinders; the
    longitude/theta axis wraps.
    """

    def __init__(self, model: MetricModel, samples: np.ndarray, kind: str = "sphere"):
        self.model = model
        self.samples = np.asarray(samples, dtype=float)
        if np.any(self.samples < 0):
            raise ValueError("density samples must be nonnegative")
        self.kind = kind

    def value_at(self, points) -> np.ndarray:
        if self.kind == "sphere":
            pts = np.asarray(points, dtype=float)
            theta = np.arccos(np.clip(pts[..., 2], -1, 1))
            phi = np.mod(np.arctan2(pts[..., 1], pts[..., 0]), 2 * math.pi)
            n_t, n_p = self.samples.shape
            x = theta / math.pi * n_t - 0.5
            y = phi / (2 * math.pi) * n_p - 0.5
            return _bilinear(self.samples, x, y, wrap_x=False, wrap_y=True)
        if self.kind == "torus":
            v1, v2 = self.model.lattice_basis()
            B = np.stack([v1, v2], axis=1)
            xy = np.asarray(points, dtype=float)
            coords = np.linalg.solve(B, xy.reshape(-1, 2).T).T.reshape(xy.shape)
            coords = np.mod(coords, 1.0)
            n_x, n_y = self.samples.shape
            return _bilinear(self.samples, coords[..., 0] * n_x - 0.5,
                             coords[..., 1] * n_y - 0.5, wrap_x=True, wrap_y=True)
        raise ValueError(f"no interpolation for kind {self.kind!r}")

    def value_at_chart(self, z) -> np.ndarray:
        return self.value_at(sphere_from_chart(z))


def _bilinear(grid: np.ndarray, x, y, wrap_x: bool, wrap_y: bool) -> np.ndarray:
    n_x, n_y = grid.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0

    def ix(i):
        return np.mod(i, n_x) if wrap_x else np.clip(i, 0, n_x - 1)

    def iy(j):
        return np.mod(j, n_y) if wrap_y else np.clip(j, 0, n_y - 1)

    v00 = grid[ix(x0), iy(y0)]
    v01 = grid[ix(x0), iy(y0 + 1)]
    v10 = grid[ix(x0 + 1), iy(y0)]
    v11 = grid[ix(x0 + 1), iy(y0 + 1)]
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)
