"""Conjugate-gradient reconstruction and its adaptive outer loop.

The inner loop is Fletcher-Reeves CG on the regularized misfit: each
iteration runs one forward and one adjoint solve, assembles the nodal
gradients, updates both coefficients simultaneously, projects onto the
box constraints, and decays the regularization weights iteratively.
Step sizes follow the closed-form rule with a one-iteration lag: the
size applied at iteration m was computed from iteration m-1 (the
initial size matches the steepest-descent value 1/gamma0).

The outer loop refines the mesh where the element indicators
h_K * |coefficient| concentrate, interpolates coefficients and
resamples observations onto the new level, and warm-starts the next
inner loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .mesh import HybridDomain, TetraMesh, interpolate_nodal, mesh_size, refine_local
from .objective import (
    ObservationSet,
    TikhonovParams,
    compute_gradient,
    evaluate_misfit,
    surface_weights,
)
from .solver import FemGeometry, MaterialField, SourceSpec, TimeGrid, stable_timegrid

__all__ = [
    "StoppingCriteria",
    "RefinementConfig",
    "OptimizerState",
    "IterationRecord",
    "CgaResult",
    "LevelResult",
    "update_direction",
    "step_size",
    "regularization_update",
    "project_coefficients",
    "cga_run",
    "refinement_indicator",
    "select_elements",
    "acga_run",
]


@dataclass
class StoppingCriteria:
    """Inner (eta) and outer (theta) tolerances plus hard caps."""

    eta_eps_1: float = 1e-6
    eta_eps_2: float = 1e-6
    eta_sigma_1: float = 1e-6
    eta_sigma_2: float = 1e-6
    theta_eps_1: float = 1e-6
    theta_eps_2: float = 1e-6
    theta_sigma_1: float = 1e-6
    theta_sigma_2: float = 1e-6
    max_iters: int = 20
    max_refinements: int = 6

    def __post_init__(self):
        tols = [self.eta_eps_1, self.eta_eps_2, self.eta_sigma_1,
                self.eta_sigma_2, self.theta_eps_1, self.theta_eps_2,
                self.theta_sigma_1, self.theta_sigma_2]
        if any(t <= 0 for t in tols):
            raise ValueError("all stopping tolerances must be positive")


@dataclass
class RefinementConfig:
    """Marking thresholds (fractions of the indicator maximum)."""

    beta_tilde_eps: float = 0.7
    beta_tilde_sigma: float = 0.7
    max_tets: int = 2_000_000

    def __post_init__(self):
        for b in (self.beta_tilde_eps, self.beta_tilde_sigma):
            if not (0.0 < b < 1.0):
                raise ValueError("marking thresholds must lie in (0, 1)")


@dataclass
class OptimizerState:
    """CG iterate: coefficients, gradients, directions, scalars."""

    m: int
    eps: np.ndarray
    sigma: np.ndarray
    g_eps: Optional[np.ndarray] = None
    g_sigma: Optional[np.ndarray] = None
    d_eps: Optional[np.ndarray] = None
    d_sigma: Optional[np.ndarray] = None
    alpha_eps: float = 0.0
    alpha_sigma: float = 0.0
    gamma_eps: float = 0.0
    gamma_sigma: float = 0.0
    j_history: List[float] = field(default_factory=list)


@dataclass
class IterationRecord:
    m: int
    J: float
    misfit: float
    norm_g_eps: float
    norm_g_sigma: float
    alpha_eps: float
    alpha_sigma: float
    gamma_eps: float
    gamma_sigma: float


@dataclass
class CgaResult:
    material: MaterialField
    history: List[IterationRecord]
    state: OptimizerState
    converged: bool


@dataclass
class LevelResult:
    level: int
    domain: HybridDomain
    material: MaterialField
    history: List[IterationRecord]
    marked: np.ndarray
    indicator_eps: np.ndarray
    indicator_sigma: np.ndarray
    truncated: bool = False


def _norm(u: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(np.sum(u * u * w)))


def _inner(u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
    return float(np.sum(u * v * w))


def update_direction(g, g_prev, d_prev, weights):
    """Fletcher-Reeves direction.

    Returns ``(d, beta)``; for the first iteration (``g_prev is None``)
    the direction is steepest descent.  A vanished previous gradient
    makes beta undefined and signals convergence with ``(None, None)``.
    """
    if g_prev is None:
        return -g, 0.0
    denom = _inner(g_prev, g_prev, weights)
    if denom == 0.0:
        return None, None
    beta = _inner(g, g, weights) / denom
    return -g + beta * d_prev, beta


def step_size(g, d, gamma, weights) -> float:
    """Closed-form size: -(g, d) / (gamma * (d, d)) in the lumped inner
    product."""
    if gamma <= 0.0:
        raise ValueError("step-size formula requires gamma > 0")
    dd = _inner(d, d, weights)
    if dd == 0.0:
        return 0.0
    return -_inner(g, d, weights) / (gamma * dd)


def regularization_update(gamma0: float, m: int, p: float) -> float:
    """Iterative decay gamma0 / (m+1)^p."""
    if not (0.0 < p < 1.0):
        raise ValueError("decay exponent must lie in (0, 1)")
    return gamma0 / (m + 1) ** p


def project_coefficients(eps, sigma, eps_max, sigma_max, pinned_mask):
    """Clamp to the boxes and force vacuum on the pinned shell."""
    eps = np.clip(eps, 1.0, eps_max)
    sigma = np.clip(sigma, 0.0, sigma_max)
    eps[pinned_mask] = 1.0
    sigma[pinned_mask] = 0.0
    return eps, sigma


def cga_run(domain: HybridDomain, obs: ObservationSet,
            initial: MaterialField, params: TikhonovParams,
            stopping: StoppingCriteria, source: SourceSpec,
            timegrid: Optional[TimeGrid] = None,
            geometry: Optional[FemGeometry] = None,
            log_cb: Optional[Callable[[IterationRecord], None]] = None
            ) -> CgaResult:
    """Run the conjugate-gradient loop on a fixed mesh.

    The time grid defaults to the stability bound for the coefficient
    box ``eps_max`` so one grid serves every iterate.  Returns the final
    coefficients and the per-iteration history.
    """
    geometry = geometry or FemGeometry(domain.mesh)
    if timegrid is None:
        timegrid = stable_timegrid(domain, initial.eps_max, obs.trace.T)
    obs = obs.resample(timegrid)
    w = geometry.lumped_volume
    wsurf = surface_weights(domain, obs.mask)

    eps, sigma = project_coefficients(
        initial.eps.copy(), initial.sigma.copy(),
        initial.eps_max, initial.sigma_max, domain.pinned_mask)
    gamma_e, gamma_s = params.gamma_eps, params.gamma_sigma
    alpha_e = 1.0 / gamma_e if gamma_e > 0 else 0.0
    alpha_s = 1.0 / gamma_s if gamma_s > 0 else 0.0
    g_e_prev = g_s_prev = None
    d_e_prev = d_s_prev = None

    history: List[IterationRecord] = []
    state = OptimizerState(m=0, eps=eps, sigma=sigma,
                           gamma_eps=gamma_e, gamma_sigma=gamma_s,
                           alpha_eps=alpha_e, alpha_sigma=alpha_s)
    converged = False

    for m in range(stopping.max_iters + 1):
        mat = MaterialField(eps, sigma, initial.eps_max, initial.sigma_max)
        params_m = replace(params, gamma_eps=gamma_e, gamma_sigma=gamma_s)
        j, grad, trace = compute_gradient(domain, mat, timegrid, source,
                                          obs, params_m, geometry=geometry)
        if not np.isfinite(j):
            raise RuntimeError(f"non-finite objective at iteration {m}")
        misfit = evaluate_misfit(trace, obs, node_weight=wsurf)
        ng_e = _norm(grad.g_eps, w)
        ng_s = _norm(grad.g_sigma, w)
        rec = IterationRecord(m=m, J=j, misfit=misfit,
                              norm_g_eps=ng_e, norm_g_sigma=ng_s,
                              alpha_eps=alpha_e, alpha_sigma=alpha_s,
                              gamma_eps=gamma_e, gamma_sigma=gamma_s)
        history.append(rec)
        if log_cb:
            log_cb(rec)
        state.m = m
        state.eps, state.sigma = eps, sigma
        state.g_eps, state.g_sigma = grad.g_eps, grad.g_sigma
        state.gamma_eps, state.gamma_sigma = gamma_e, gamma_s
        state.alpha_eps, state.alpha_sigma = alpha_e, alpha_s
        state.j_history.append(j)
        if m == stopping.max_iters:
            break

        d_e, beta_e = update_direction(grad.g_eps, g_e_prev, d_e_prev, w)
        d_s, beta_s = update_direction(grad.g_sigma, g_s_prev, d_s_prev, w)
        if d_e is None or d_s is None:
            converged = True
            break

        eps_new, sigma_new = project_coefficients(
            eps + alpha_e * d_e, sigma + alpha_s * d_s,
            initial.eps_max, initial.sigma_max, domain.pinned_mask)
        delta_e = _norm(eps_new - eps, w)
        delta_s = _norm(sigma_new - sigma, w)

        alpha_e = step_size(grad.g_eps, d_e, gamma_e, w)
        alpha_s = step_size(grad.g_sigma, d_s, gamma_s, w)
        gamma_e = regularization_update(params.gamma_eps, m, params.p)
        gamma_s = regularization_update(params.gamma_sigma, m, params.p)

        eps, sigma = eps_new, sigma_new
        g_e_prev, g_s_prev = grad.g_eps, grad.g_sigma
        d_e_prev, d_s_prev = d_e, d_s
        state.d_eps, state.d_sigma = d_e, d_s

        small_step = (delta_e < stopping.eta_eps_1
                      or delta_s < stopping.eta_sigma_1)
        small_grad = (ng_e < stopping.eta_eps_2
                      or ng_s < stopping.eta_sigma_2)
        if small_step and small_grad:
            converged = True
            break

    final = MaterialField(eps, sigma, initial.eps_max, initial.sigma_max)
    return CgaResult(material=final, history=history, state=state,
                     converged=converged)


def refinement_indicator(mesh: TetraMesh, eps: np.ndarray,
                         sigma: np.ndarray):
    """Per-element indicators h_K * |vertex mean of the coefficient|."""
    h = mesh_size(mesh)
    eps_el = np.abs(eps[mesh.tets].mean(axis=1))
    sig_el = np.abs(sigma[mesh.tets].mean(axis=1))
    return h * eps_el, h * sig_el


def select_elements(indicator: np.ndarray, beta_tilde: float) -> np.ndarray:
    """Elements whose indicator reaches the fraction ``beta_tilde`` of
    the maximum."""
    if not (0.0 < beta_tilde < 1.0):
        raise ValueError("beta_tilde must lie in (0, 1)")
    if len(indicator) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.where(indicator >= beta_tilde * indicator.max())[0]


def acga_run(domain: HybridDomain, obs: ObservationSet,
             initial: MaterialField, params: TikhonovParams,
             refine_cfg: RefinementConfig, stopping: StoppingCriteria,
             source: SourceSpec,
             log_cb: Optional[Callable[[int, IterationRecord], None]] = None
             ) -> List[LevelResult]:
    """Adaptive outer loop: CG solve, mark, refine, interpolate, repeat.

    Observations are resampled in time per level (their nodes live on
    the lattice boundary, which never refines).  Coefficients warm-start
    each level through nodal interpolation from the previous mesh.
    """
    levels: List[LevelResult] = []
    mat = initial
    dom = domain
    prev_material = None
    prev_mesh = None

    for lvl in range(stopping.max_refinements + 1):
        geometry = FemGeometry(dom.mesh)
        timegrid = stable_timegrid(dom, mat.eps_max, obs.trace.T)
        obs_l = obs.resample(timegrid)
        cb = (lambda rec, _l=lvl: log_cb(_l, rec)) if log_cb else None
        cga = cga_run(dom, obs_l, mat, params, stopping, source,
                      timegrid=timegrid, geometry=geometry, log_cb=cb)
        ind_e, ind_s = refinement_indicator(
            dom.mesh, cga.material.eps, cga.material.sigma)
        marked = np.union1d(
            select_elements(ind_e, refine_cfg.beta_tilde_eps),
            select_elements(ind_s, refine_cfg.beta_tilde_sigma))
        marked = np.intersect1d(marked, dom.refinable_tets())
        levels.append(LevelResult(
            level=lvl, domain=dom, material=cga.material,
            history=cga.history, marked=marked,
            indicator_eps=ind_e, indicator_sigma=ind_s))

        # outer termination: consecutive-level coefficient change paired
        # with the last gradient norms
        if prev_material is not None:
            w = geometry.lumped_volume
            prev_e = interpolate_nodal(prev_material.eps, prev_mesh, dom.mesh)
            prev_s = interpolate_nodal(prev_material.sigma, prev_mesh,
                                       dom.mesh)
            de = _norm(cga.material.eps - prev_e, w)
            ds = _norm(cga.material.sigma - prev_s, w)
            last = cga.history[-1]
            small_change = (de < stopping.theta_eps_1
                            or ds < stopping.theta_sigma_1)
            small_grad = (last.norm_g_eps < stopping.theta_eps_2
                          or last.norm_g_sigma < stopping.theta_sigma_2)
            if small_change and small_grad:
                break
        if lvl == stopping.max_refinements or marked.size == 0:
            break

        new_mesh = refine_local(dom.mesh, marked)
        if new_mesh.n_tets > refine_cfg.max_tets:
            levels[-1].truncated = True
            break
        new_dom = dom.with_mesh(new_mesh)
        eps_w = interpolate_nodal(cga.material.eps, dom.mesh, new_mesh)
        sig_w = interpolate_nodal(cga.material.sigma, dom.mesh, new_mesh)
        eps_w, sig_w = project_coefficients(
            eps_w, sig_w, mat.eps_max, mat.sigma_max, new_dom.pinned_mask)
        prev_material, prev_mesh = cga.material, dom.mesh
        dom = new_dom
        mat = MaterialField(eps_w, sig_w, mat.eps_max, mat.sigma_max)

    return levels
