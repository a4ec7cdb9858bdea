"""Synthetic measured surfaces for testing and calibration.

The bubble family pulls back the Fubini-Study form under z + a/z with
a = scale0 sqrt(eps): the concentration lives at geodesic scale ~a, and the
detected neck modulus grows by log sqrt(10) per decade of eps.  scale0
defaults small enough that the paper-strict constant tower (L1 ~ 23) still
admits the necks at desk epsilons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .collars import CollarBundle, CollarData
from .densities import FSPullbackDensity, RationalMap, TorusBandDensity, UniformDensity
from .geometry import DomainError
from .surface import MeasuredSurface, sphere_surface, torus_surface

BUBBLE_SCALE0 = 1e-12
BOUNDARY_BUBBLE_SCALE0 = 1e-13
BOUNDARY_BUBBLE_HEIGHT = 10.0
TORUS_NECK_MASS = 4.5

GENERATOR_IDS = ("uniform", "rational-pullback", "bubble", "two-bubble",
                 "torus-neck", "collar-model", "boundary-bubble")


@dataclass
class GeneratorSpec:
    id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in GENERATOR_IDS:
            raise DomainError(f"unknown generator {self.id!r}; "
                              f"choose from {GENERATOR_IDS}")

    def to_dict(self) -> dict:
        return {"id": self.id, "params": self.params}


def build(spec: GeneratorSpec, grid_shape=None):
    """Build the surface (or collar bundle) a generator spec describes."""
    p = spec.params
    if spec.id == "uniform":
        return sphere_surface(UniformDensity(p.get("value", 1.0)),
                              grid_shape=grid_shape)
    if spec.id == "rational-pullback":
        u = RationalMap(poly=p.get("poly", [1, 0]),
                        poles=[complex(x[0], x[1]) for x in p.get("poles", [])],
                        residues=[[complex(x[0], x[1])] for x in p.get("residues", [])])
        return sphere_surface(FSPullbackDensity(u), grid_shape=grid_shape,
                              involution=p.get("involution", False))
    if spec.id == "bubble":
        eps = float(p["eps"])
        a = p.get("scale0", BUBBLE_SCALE0) * math.sqrt(eps)
        u = RationalMap(poly=[1, 0], poles=[0.0], residues=[[a]])
        return sphere_surface(FSPullbackDensity(u), grid_shape=grid_shape)
    if spec.id == "two-bubble":
        eps = float(p["eps"])
        a = p.get("scale0", BUBBLE_SCALE0) * math.sqrt(eps)
        sep = float(p.get("separation", math.pi))
        t = math.tan(sep / 4)
        u = RationalMap(poly=[1, 0], poles=[t, -t], residues=[[a], [a]])
        return sphere_surface(FSPullbackDensity(u), grid_shape=grid_shape)
    if spec.id == "torus-neck":
        return torus_neck_surface(T=float(p.get("T", 24.0)),
                                  band_width=p.get("band_width"),
                                  mass=float(p.get("mass", TORUS_NECK_MASS)),
                                  grid_shape=grid_shape)
    if spec.id == "boundary-bubble":
        eps = float(p["eps"])
        a = p.get("scale0", BOUNDARY_BUBBLE_SCALE0) * math.sqrt(eps)
        h = float(p.get("height", BOUNDARY_BUBBLE_HEIGHT))
        u = RationalMap(poly=[1, 0], poles=[1j * h * a, -1j * h * a],
                        residues=[[a], [a]])
        return sphere_surface(FSPullbackDensity(u), involution=True,
                              grid_shape=grid_shape)
    if spec.id == "collar-model":
        collars = []
        for c in p["collars"]:
            length = float(c["length"])
            peak = float(c.get("peak", 1.0))
            width = float(c.get("width", 0.5))
            center = float(c.get("center", 0.0))
            collars.append(CollarData(
                length=length,
                profile=_sech_profile(peak, width, center)))
        return CollarBundle(genus=int(p.get("genus", 2)), collars=collars)
    raise DomainError(f"unhandled generator {spec.id!r}")


def _sech_profile(peak: float, width: float, center: float):
    def profile(rho):
        return peak / np.cosh((np.asarray(rho, dtype=float) - center) / width)
    return profile


def torus_neck_surface(T: float = 24.0, band_width: Optional[float] = None,
                       mass: float = TORUS_NECK_MASS,
                       grid_shape=None) -> MeasuredSurface:
    """Unit-area flat torus whose short class carries a mass ridge.

    T is the modulus of the cylinder around the short geodesic (so the
    geodesic has length sqrt(2 pi / T)); the ridge profile is a sech with
    decay rate 2 per unit of cylinder modulus unless band_width overrides.
    """
    if T <= 2 * math.pi:
        raise DomainError("need T > 2 pi so the short class exists")
    ell = math.sqrt(2 * math.pi / T)
    tau = 1j / ell ** 2
    model_width = band_width if band_width is not None else ell / (4 * math.pi)
    from .geometry import torus_model
    model = torus_model(tau)
    # the height follows from the closed-form band integral
    probe = TorusBandDensity(model, height=1.0, width=model_width)
    height = mass / probe.total_mass()
    density = TorusBandDensity(model, height=height, width=model_width)
    return torus_surface(density, tau=tau, grid_shape=grid_shape)


def expected_total_mass(spec: GeneratorSpec) -> Optional[float]:
    """Closed-form mass identity for the generator, when one exists."""
    if spec.id == "uniform":
        return 4 * math.pi * spec.params.get("value", 1.0)
    if spec.id in ("bubble",):
        return 8 * math.pi
    if spec.id in ("two-bubble", "boundary-bubble"):
        return 12 * math.pi
    if spec.id == "torus-neck":
        return float(spec.params.get("mass", TORUS_NECK_MASS))
    return None
