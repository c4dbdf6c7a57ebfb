"""Data-misfit functional, temporal smoothing, and gradient assembly.

The objective is the regularized least-squares misfit of boundary
traces.  Gradients with respect to the nodal permittivity and
conductivity come from the continuous adjoint calculus: products of the
forward and adjoint field histories integrated over time, plus the
regularization terms.  A central-difference directional oracle is
provided to certify the adjoint gradients end to end.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mesh import HybridDomain
from .solver import (
    FemGeometry,
    MaterialField,
    SourceSpec,
    TimeGrid,
    TraceRecord,
    run_adjoint,
    run_forward,
)

__all__ = [
    "ObservationSet",
    "TikhonovParams",
    "GradientPair",
    "smoothing_z",
    "evaluate_misfit",
    "evaluate_tikhonov",
    "assemble_grad_eps",
    "assemble_grad_sigma",
    "compute_gradient",
    "directional_derivative_oracle",
    "surface_weights",
]


@dataclass
class ObservationSet:
    """Observed boundary trace plus the observation mask and smoothing.

    ``mask`` lists the node ids (a subset of ``trace.node_ids``) where
    the misfit indicator is one.  ``zeta`` is the width of the temporal
    taper that turns the misfit off towards the end time, keeping it
    compatible with the adjoint end conditions.
    """

    trace: TraceRecord
    mask: np.ndarray
    zeta: float
    noise_level: float = 0.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int64)
        ids = set(int(v) for v in self.trace.node_ids)
        if not set(int(v) for v in self.mask) <= ids:
            raise ValueError("mask contains nodes absent from the trace")
        if not (0 < self.zeta < self.trace.T):
            raise ValueError("smoothing width must lie in (0, T)")

    def mask_columns(self) -> np.ndarray:
        pos = {int(v): i for i, v in enumerate(self.trace.node_ids)}
        return np.array([pos[int(v)] for v in self.mask], dtype=np.int64)

    def resample(self, timegrid: TimeGrid) -> "ObservationSet":
        return ObservationSet(
            trace=self.trace.resample(timegrid),
            mask=self.mask,
            zeta=self.zeta,
            noise_level=self.noise_level,
        )


@dataclass
class TikhonovParams:
    """Regularization weights, their decay exponent, and priors."""

    gamma_eps: float = 1e-2
    gamma_sigma: float = 1e-2
    p: float = 0.5
    eps_prior: Optional[np.ndarray] = None
    sigma_prior: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gamma_eps < 0 or self.gamma_sigma < 0:
            raise ValueError("regularization weights must be nonnegative")
        if not (0.0 < self.p < 1.0):
            raise ValueError("decay exponent p must lie in (0, 1)")

    def priors_for(self, n_nodes: int):
        ep = (np.ones(n_nodes) if self.eps_prior is None
              else np.asarray(self.eps_prior, dtype=float))
        sp_ = (np.zeros(n_nodes) if self.sigma_prior is None
               else np.asarray(self.sigma_prior, dtype=float))
        return ep, sp_


@dataclass
class GradientPair:
    """Nodal gradients with respect to eps and sigma."""

    g_eps: np.ndarray
    g_sigma: np.ndarray


def surface_weights(domain: HybridDomain, node_ids: np.ndarray) -> np.ndarray:
    """Trapezoidal face-quadrature weights for observation nodes.

    Nodes interior to the face weigh h^2, edge nodes h^2/2, corners
    h^2/4.  These are exactly the weights under which the pointwise
    adjoint boundary flux is the discrete dual of the misfit readout,
    so the gradient check closes at the rim of the face.
    """
    g = domain.grid
    h = g.spacing
    i, j, _ = g.ijk(np.asarray(node_ids, dtype=np.int64))
    nx, ny, _ = g.dims
    halvings = ((i == 0) | (i == nx - 1)).astype(int) \
        + ((j == 0) | (j == ny - 1)).astype(int)
    return h * h * 0.5 ** halvings


def smoothing_z(t, T: float, zeta: float):
    """Temporal taper: 1 on [0, T - zeta], cubic C^1 ramp to 0 at T."""
    t = np.asarray(t, dtype=float)
    u = np.clip((t - (T - zeta)) / zeta, 0.0, 1.0)
    z = (1.0 - u) ** 2 * (1.0 + 2.0 * u)
    return z if z.ndim else float(z)


def _check_compatible(trace: TraceRecord, obs: ObservationSet):
    o = obs.trace
    if trace.n_steps != o.n_steps or abs(trace.dt - o.dt) > 1e-12:
        raise ValueError("trace and observations use different time grids")
    if len(trace.node_ids) != len(o.node_ids) or np.any(
            trace.node_ids != o.node_ids):
        raise ValueError("trace and observations use different node sets")


def evaluate_misfit(trace: TraceRecord, obs: ObservationSet,
                    node_weight=1.0) -> float:
    """(1/2) integral of |E - E_obs|^2 over masked nodes and time.

    ``node_weight`` is the surface quadrature weight per node (scalar or
    per-masked-node array); the time integral uses the step-sample
    rectangle rule with the taper applied.
    """
    _check_compatible(trace, obs)
    cols = obs.mask_columns()
    diff = trace.values[:, cols, :] - obs.trace.values[:, cols, :]
    z = smoothing_z(trace.sample_times(), trace.T, obs.zeta)
    per_node = np.einsum("snc,snc,s->n", diff, diff, z)
    return 0.5 * float(np.sum(per_node * node_weight)) * trace.dt


def evaluate_tikhonov(trace: TraceRecord, obs: ObservationSet,
                      material: MaterialField, params: TikhonovParams,
                      lumped_volume: np.ndarray,
                      node_weight=1.0) -> float:
    """Misfit plus quadratic penalties on coefficient deviation from the
    priors, in the lumped nodal quadrature."""
    ep, sp_ = params.priors_for(len(material.eps))
    j = evaluate_misfit(trace, obs, node_weight)
    de = material.eps - ep
    ds = material.sigma - sp_
    j += 0.5 * params.gamma_eps * float(np.sum(de * de * lumped_volume))
    j += 0.5 * params.gamma_sigma * float(np.sum(ds * ds * lumped_volume))
    return j


def _time_derivative(hist: np.ndarray, dt: float) -> np.ndarray:
    """Central differences over the level axis, one-sided at the ends."""
    d = np.empty_like(hist)
    d[1:-1] = (hist[2:] - hist[:-2]) / (2 * dt)
    d[0] = (hist[1] - hist[0]) / dt
    d[-1] = (hist[-1] - hist[-2]) / dt
    return d


def _trapezoid_weights(n_levels: int, dt: float) -> np.ndarray:
    w = np.full(n_levels, dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _nodal_div_product(e_hist, lam_hist, geometry: FemGeometry,
                       dt: float) -> np.ndarray:
    """Time integral of (div lam)(div E), element values volume-averaged
    to nodes.  Divergences are the elementwise-constant P1 values."""
    mesh = geometry.mesh
    n = mesh.n_vertices
    w = _trapezoid_weights(len(e_hist), dt)
    acc = np.zeros(mesh.n_tets)
    for s in range(len(e_hist)):
        div_e = geometry.Bdiv @ e_hist[s].T.ravel()
        div_l = geometry.Bdiv @ lam_hist[s].T.ravel()
        acc += w[s] * div_e * div_l
    nodal = np.zeros(n)
    np.add.at(nodal, mesh.tets.ravel(),
              np.repeat(acc * geometry.vols / 4.0, 4))
    return nodal / geometry.lumped_volume


def assemble_grad_eps(e_hist: np.ndarray, lam_hist: np.ndarray,
                      material: MaterialField, params: TikhonovParams,
                      geometry: FemGeometry, pinned_mask: np.ndarray,
                      dt: float, f1: Optional[np.ndarray] = None
                      ) -> np.ndarray:
    """Nodal permittivity gradient.

    Combines the regularization term, the initial-velocity coupling
    (zero for quiescent starts), the time integral of the velocity
    product, and the divergence product from the stabilization term.
    """
    if e_hist.shape != lam_hist.shape:
        raise ValueError("field histories have mismatching shapes")
    ep, _ = params.priors_for(len(material.eps))
    g = params.gamma_eps * (material.eps - ep)
    if f1 is not None:
        g = g - np.sum(lam_hist[0] * f1, axis=1)
    de = _time_derivative(e_hist, dt)
    dl = _time_derivative(lam_hist, dt)
    w = _trapezoid_weights(len(e_hist), dt)
    g = g - np.einsum("snc,snc,s->n", dl, de, w)
    g = g + _nodal_div_product(e_hist, lam_hist, geometry, dt)
    g[pinned_mask] = 0.0
    return g


def assemble_grad_sigma(e_hist: np.ndarray, lam_hist: np.ndarray,
                        material: MaterialField, params: TikhonovParams,
                        pinned_mask: np.ndarray, dt: float) -> np.ndarray:
    """Nodal conductivity gradient: regularization plus the time
    integral of lambda dotted with the field velocity."""
    if e_hist.shape != lam_hist.shape:
        raise ValueError("field histories have mismatching shapes")
    _, sp_ = params.priors_for(len(material.sigma))
    g = params.gamma_sigma * (material.sigma - sp_)
    de = _time_derivative(e_hist, dt)
    w = _trapezoid_weights(len(e_hist), dt)
    g = g + np.einsum("snc,snc,s->n", lam_hist, de, w)
    g[pinned_mask] = 0.0
    return g


def _masked_residual(trace: TraceRecord, obs: ObservationSet) -> TraceRecord:
    """Residual trace restricted to the observation mask."""
    _check_compatible(trace, obs)
    cols = obs.mask_columns()
    vals = trace.values[:, cols, :] - obs.trace.values[:, cols, :]
    return TraceRecord(
        node_ids=obs.mask,
        coords=trace.coords[cols],
        values=vals,
        dt=trace.dt,
        n_steps=trace.n_steps,
    )


def compute_gradient(domain: HybridDomain, material: MaterialField,
                     timegrid: TimeGrid, source: SourceSpec,
                     obs: ObservationSet, params: TikhonovParams,
                     geometry: Optional[FemGeometry] = None,
                     f1: Optional[np.ndarray] = None):
    """One forward + one adjoint solve; returns (J, GradientPair, trace).

    The misfit uses the trapezoidal face weights of
    :func:`surface_weights`, under which the pointwise adjoint flux is
    the exact discrete dual of the readout.
    """
    geometry = geometry or FemGeometry(domain.mesh)
    fwd = run_forward(domain, material, timegrid, source,
                      record_on=obs.trace.node_ids, store_volume=True,
                      geometry=geometry)
    w = surface_weights(domain, obs.mask)
    j = evaluate_tikhonov(fwd.trace, obs, material, params,
                          geometry.lumped_volume, node_weight=w)
    residual = _masked_residual(fwd.trace, obs)
    lam = run_adjoint(domain, material, timegrid, residual, obs.zeta,
                      source=source, geometry=geometry)
    g_eps = assemble_grad_eps(fwd.fem_history, lam, material, params,
                              geometry, domain.pinned_mask, timegrid.dt,
                              f1=f1)
    g_sigma = assemble_grad_sigma(fwd.fem_history, lam, material, params,
                                  domain.pinned_mask, timegrid.dt)
    return j, GradientPair(g_eps=g_eps, g_sigma=g_sigma), fwd.trace


def directional_derivative_oracle(domain: HybridDomain,
                                  material: MaterialField,
                                  obs: ObservationSet,
                                  params: TikhonovParams,
                                  source: SourceSpec,
                                  timegrid: TimeGrid,
                                  d_eps: np.ndarray,
                                  d_sigma: np.ndarray,
                                  taus: Sequence[float] = (1e-2, 1e-3, 1e-4),
                                  geometry: Optional[FemGeometry] = None):
    """Central finite differences of J along (d_eps, d_sigma) versus the
    adjoint-gradient inner product.

    All solves share one fixed time grid so the finite differences see a
    smooth J.  Perturbed coefficients must stay inside their boxes at
    every tau; violations are rejected.
    """
    d_eps = np.asarray(d_eps, dtype=float)
    d_sigma = np.asarray(d_sigma, dtype=float)
    if np.any(d_eps[domain.pinned_mask] != 0) or np.any(
            d_sigma[domain.pinned_mask] != 0):
        raise ValueError("perturbation must vanish on the pinned shell")
    tau_max = max(taus) if len(taus) else 0.0
    for s in (+tau_max, -tau_max):
        e = material.eps + s * d_eps
        sg = material.sigma + s * d_sigma
        if np.any(e < 1 - 1e-12) or np.any(e > material.eps_max + 1e-12):
            raise ValueError("perturbed eps leaves its box")
        if np.any(sg < -1e-12) or np.any(sg > material.sigma_max + 1e-12):
            raise ValueError("perturbed sigma leaves its box")

    geometry = geometry or FemGeometry(domain.mesh)
    j0, grad, _ = compute_gradient(domain, material, timegrid, source, obs,
                                   params, geometry=geometry)
    V = geometry.lumped_volume
    inner = float(np.sum(grad.g_eps * d_eps * V)
                  + np.sum(grad.g_sigma * d_sigma * V))

    w = surface_weights(domain, obs.mask)

    def j_at(s: float) -> float:
        mat = MaterialField(material.eps + s * d_eps,
                            material.sigma + s * d_sigma,
                            material.eps_max, material.sigma_max)
        fwd = run_forward(domain, mat, timegrid, source,
                          record_on=obs.trace.node_ids, geometry=geometry)
        return evaluate_tikhonov(fwd.trace, obs, mat, params, V,
                                 node_weight=w)

    fd = [(j_at(+tau) - j_at(-tau)) / (2 * tau) for tau in taus]
    return {
        "J": j0,
        "inner_product": inner,
        "taus": list(taus),
        "fd_estimates": fd,
        "gradient": grad,
    }
