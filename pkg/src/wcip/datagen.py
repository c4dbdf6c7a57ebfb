"""Material phantoms and synthetic observation data.

Phantoms are layered-tissue models with an optional tumor inclusion;
the bundled presets use the weighted (divided-by-five) tissue values,
which collapse every healthy layer onto the vacuum background, plus the
unweighted table for visualization.  Observations are simulated on a
locally refined mesh so the inversion never sees data produced by its
own discretization, and noise is multiplicative uniform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .mesh import ConfigurationError, HybridDomain, refine_local, mesh_size
from .objective import ObservationSet
from .solver import (
    MaterialField,
    SourceSpec,
    TimeGrid,
    run_forward,
    stable_timegrid,
)

__all__ = [
    "InverseCrimeError",
    "LayerSpec",
    "TumorSpec",
    "PhantomSpec",
    "NoiseSpec",
    "phantom_preset",
    "build_phantom",
    "generate_observations",
    "add_noise",
]

# weighted test values: tumor eps by stage, shared sigma
_STAGE_EPS = {"stage1": 8.0, "stage2": 9.0}
_STAGE_SIGMA = 1.2


class InverseCrimeError(RuntimeError):
    """Synthetic data would be generated on the inversion's own mesh."""


@dataclass
class LayerSpec:
    """Horizontal tissue slab, measured as depth below the top surface."""

    thickness: float
    eps: float
    sigma: float


@dataclass
class TumorSpec:
    shape: str = "sphere"
    center: tuple = (0.0, 0.0, 0.0)
    radii: tuple = (1.0, 1.0, 1.0)
    eps: float = _STAGE_EPS["stage1"]
    sigma: float = _STAGE_SIGMA
    stage: str = "stage1"

    def __post_init__(self):
        if self.shape not in ("sphere", "ellipsoid"):
            raise ValueError(f"unknown tumor shape {self.shape!r}")
        if np.isscalar(self.radii):
            self.radii = (float(self.radii),) * 3


@dataclass
class PhantomSpec:
    background_eps: float = 1.0
    background_sigma: float = 0.0
    layers: List[LayerSpec] = field(default_factory=list)
    tumor: Optional[TumorSpec] = None
    eps_max: float = 10.0
    sigma_max: float = 2.0

    def __post_init__(self):
        vals_e = [self.background_eps] + [l.eps for l in self.layers]
        vals_s = [self.background_sigma] + [l.sigma for l in self.layers]
        if self.tumor is not None:
            vals_e.append(self.tumor.eps)
            vals_s.append(self.tumor.sigma)
        if min(vals_e) < 1.0 or max(vals_e) > self.eps_max:
            raise ConfigurationError("phantom eps outside its box")
        if min(vals_s) < 0.0 or max(vals_s) > self.sigma_max:
            raise ConfigurationError("phantom sigma outside its box")


@dataclass
class NoiseSpec:
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("noise level must be nonnegative")


def phantom_preset(name: str, domain: HybridDomain) -> PhantomSpec:
    """Named phantoms sized relative to the FE box.

    ``stage1``/``stage2``: weighted tumor values in vacuum background
    (the default reconstruction targets).  ``homogeneous``: background
    only.  ``skin_real``: the unweighted layered tissue table for
    forward studies and visualization.
    """
    lo, hi = domain.spec.fem_lo_v, domain.spec.fem_hi_v
    ext = float(min(hi - lo))
    cx, cy = (lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2
    r = 0.12 * ext
    cz = hi[2] - 0.30 * ext
    if name == "homogeneous":
        return PhantomSpec()
    if name in ("stage1", "stage2"):
        return PhantomSpec(tumor=TumorSpec(
            center=(cx, cy, cz), radii=(r, r, r),
            eps=_STAGE_EPS[name], sigma=_STAGE_SIGMA, stage=name))
    if name == "skin_real":
        layers = [
            LayerSpec(0.2 * ext / 1.2, 32.0, 4.0),   # immersion medium
            LayerSpec(0.1 * ext / 1.2, 35.0, 4.0),   # epidermis
            LayerSpec(0.35 * ext / 1.2, 40.0, 9.0),  # dermis
            LayerSpec(0.55 * ext / 1.2, 9.0, 1.0),   # fat
        ]
        return PhantomSpec(
            layers=layers,
            tumor=TumorSpec(center=(cx, cy, cz), radii=(r, r, r),
                            eps=45.0, sigma=6.0, stage="stage1"),
            eps_max=70.0, sigma_max=10.0)
    raise ValueError(f"unknown phantom preset {name!r}")


def _inside_tumor(spec: TumorSpec, pts: np.ndarray) -> np.ndarray:
    c = np.asarray(spec.center, dtype=float)
    r = np.asarray(spec.radii, dtype=float)
    q = (pts - c) / r
    return np.sum(q * q, axis=1) <= 1.0


def build_phantom(spec: PhantomSpec, domain: HybridDomain) -> MaterialField:
    """Nodal material from the phantom description.

    Point-in-region tests assign layer and tumor values; everything else
    is background.  The overlap shell keeps vacuum values (the material
    constraint), so phantom regions must stay inside the free part of
    the FE box.
    """
    mesh = domain.mesh
    lo, hi = domain.spec.fem_lo_v, domain.spec.fem_hi_v
    if spec.tumor is not None:
        c = np.asarray(spec.tumor.center, dtype=float)
        r = np.asarray(spec.tumor.radii, dtype=float)
        shell = 2.0 * domain.grid.spacing
        if np.any(c - r < lo + shell - 1e-12) or \
                np.any(c + r > hi - shell + 1e-12):
            raise ConfigurationError(
                "tumor extends outside the free interior of the FE box"
            )
    pts = mesh.vertices
    eps = np.full(mesh.n_vertices, spec.background_eps)
    sigma = np.full(mesh.n_vertices, spec.background_sigma)
    depth_from_top = hi[2] - pts[:, 2]
    acc = 0.0
    for layer in spec.layers:
        sel = (depth_from_top >= acc - 1e-12) & \
              (depth_from_top < acc + layer.thickness - 1e-12)
        eps[sel] = layer.eps
        sigma[sel] = layer.sigma
        acc += layer.thickness
    if spec.tumor is not None:
        sel = _inside_tumor(spec.tumor, pts)
        eps[sel] = spec.tumor.eps
        sigma[sel] = spec.tumor.sigma
    eps[domain.pinned_mask] = 1.0
    sigma[domain.pinned_mask] = 0.0
    return MaterialField(eps, sigma, spec.eps_max, spec.sigma_max)


def _mark_near_features(spec: PhantomSpec, domain: HybridDomain
                        ) -> np.ndarray:
    """Tets near phantom structure (tumor surface and layer interfaces),
    dilated by one element size."""
    mesh = domain.mesh
    cent = mesh.vertices[mesh.tets].mean(axis=1)
    h = mesh_size(mesh)
    marked = np.zeros(mesh.n_tets, dtype=bool)
    if spec.tumor is not None:
        c = np.asarray(spec.tumor.center, dtype=float)
        r = float(max(spec.tumor.radii))
        d = np.linalg.norm(cent - c, axis=1)
        marked |= d <= r + 1.5 * h
    lo, hi = domain.spec.fem_lo_v, domain.spec.fem_hi_v
    acc = 0.0
    for layer in spec.layers:
        acc += layer.thickness
        iface = hi[2] - acc
        marked |= np.abs(cent[:, 2] - iface) <= 1.5 * h
    ids = np.where(marked)[0]
    return np.intersect1d(ids, domain.refinable_tets())


def generate_observations(spec: PhantomSpec, domain: HybridDomain,
                          fine_level: int, timegrid: TimeGrid,
                          source: SourceSpec,
                          inversion_level: int = 0,
                          allow_inverse_crime: bool = False,
                          zeta: Optional[float] = None) -> ObservationSet:
    """Forward-solve the phantom on a locally refined mesh and record
    backscattered traces on the top boundary.

    ``fine_level`` counts local refinements relative to the inversion
    mesh; generating data at or below the inversion level is refused
    unless explicitly overridden (oracle tests do that).
    """
    if fine_level <= inversion_level and not allow_inverse_crime:
        raise InverseCrimeError(
            f"data mesh level {fine_level} does not exceed the inversion "
            f"level {inversion_level}; pass allow_inverse_crime to force"
        )
    dom = domain
    for _ in range(fine_level):
        marked = _mark_near_features(spec, dom)
        if marked.size == 0:
            break
        dom = dom.with_mesh(refine_local(dom.mesh, marked))
    material = build_phantom(spec, dom)
    tg_fine = stable_timegrid(dom, material.eps_max, timegrid.T)
    if tg_fine.n_steps < timegrid.n_steps:
        tg_fine = timegrid
    fwd = run_forward(dom, material, tg_fine, source)
    trace = fwd.trace.resample(timegrid)
    return ObservationSet(
        trace=trace,
        mask=trace.node_ids,
        zeta=zeta if zeta is not None else 0.1 * timegrid.T,
        noise_level=0.0,
    )


def add_noise(obs: ObservationSet, noise: NoiseSpec) -> ObservationSet:
    """Multiplicative uniform noise: each sample scales by
    (1 + delta * u) with u uniform on [-1, 1], independent per sample
    and reproducible by seed."""
    if noise.delta == 0.0:
        return ObservationSet(trace=obs.trace, mask=obs.mask,
                              zeta=obs.zeta, noise_level=0.0)
    rng = np.random.default_rng(noise.seed)
    u = rng.uniform(-1.0, 1.0, size=obs.trace.values.shape)
    noisy = obs.trace.values * (1.0 + noise.delta * u)
    from .solver import TraceRecord
    trace = TraceRecord(obs.trace.node_ids, obs.trace.coords, noisy,
                        obs.trace.dt, obs.trace.n_steps)
    return ObservationSet(trace=trace, mask=obs.mask, zeta=obs.zeta,
                          noise_level=noise.delta)
