"""Explicit time stepping of the stabilized vector wave model and its
continuous adjoint on the hybrid lattice/tetrahedral domain.

The lattice region carries vacuum coefficients and is advanced with a
second-order leapfrog of the componentwise wave equation.  The
tetrahedral region advances the damped, grad-div-stabilized form

    eps * u_tt + sigma * u_t + K u + G u = 0

with lumped mass and the damping term centred over two time levels, so
the update stays fully explicit.  Both regions step synchronously and
exchange values in the overlap shell after every step.

The adjoint problem has end-time data and a sign-flipped damping term;
integrating it backward in time turns both signs around, so the very
same stepper advances it, driven by the time-reversed, smoothed data
residual injected as a boundary flux on the observation face.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import HybridDomain, TetraMesh

__all__ = [
    "SolverInstabilityError",
    "MemoryCapError",
    "MaterialField",
    "TimeGrid",
    "SourceSpec",
    "WaveState",
    "TraceRecord",
    "FemGeometry",
    "FemOperators",
    "assemble_fem_operators",
    "source_value",
    "stable_dt",
    "stable_timegrid",
    "HybridStepper",
    "run_forward",
    "run_adjoint",
]

DEFAULT_CFL = 0.3
DEFAULT_MEMORY_CAP = 4 * 2 ** 30  # bytes of stored field history
_CHECK_EVERY = 25


class SolverInstabilityError(RuntimeError):
    """Non-finite or runaway field values appeared during stepping."""

    def __init__(self, step: int):
        super().__init__(f"non-finite field values detected at step {step}")
        self.step = step


_DIVERGENCE_LIMIT = 1e50  # runaway amplitude counts as non-finite


def _fields_sane(*arrays) -> bool:
    for a in arrays:
        if not np.isfinite(a).all():
            return False
        if np.abs(a).max(initial=0.0) > _DIVERGENCE_LIMIT:
            return False
    return True


class MemoryCapError(RuntimeError):
    """A requested field history would exceed the configured cap."""


@dataclass
class MaterialField:
    """Nodal relative permittivity and conductivity on the FE mesh.

    The lattice region is vacuum by construction; FE nodes inside the
    overlap shell are pinned to vacuum as well.  Box bounds
    ``[1, eps_max]`` and ``[0, sigma_max]`` hold everywhere.
    """

    eps: np.ndarray
    sigma: np.ndarray
    eps_max: float = 10.0
    sigma_max: float = 2.0

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)

    @classmethod
    def vacuum(cls, n_nodes: int, eps_max: float = 10.0,
               sigma_max: float = 2.0) -> "MaterialField":
        return cls(np.ones(n_nodes), np.zeros(n_nodes), eps_max, sigma_max)

    def validate(self, domain: HybridDomain, tol: float = 1e-12):
        if len(self.eps) != domain.mesh.n_vertices:
            raise ValueError("material arrays do not match the mesh")
        if np.any(self.eps < 1 - tol) or np.any(self.eps > self.eps_max + tol):
            raise ValueError("eps violates its box constraint")
        if np.any(self.sigma < -tol) or np.any(
                self.sigma > self.sigma_max + tol):
            raise ValueError("sigma violates its box constraint")
        pin = domain.pinned_mask
        if np.any(np.abs(self.eps[pin] - 1) > tol) or np.any(
                np.abs(self.sigma[pin]) > tol):
            raise ValueError("material not vacuum on the overlap shell")


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 0:
            raise ValueError("time grid needs dt > 0 and n_steps >= 0")

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    def sample_times(self) -> np.ndarray:
        """Trace sample times: after each step, t = dt .. T."""
        return (np.arange(self.n_steps) + 1) * self.dt


def stable_dt(domain: HybridDomain, eps_max: float,
              cfl: float = DEFAULT_CFL) -> float:
    """CFL-style bound: cfl * h_min / sqrt(3 * eps_max).

    ``h_min`` is the smallest element size over both subdomains (the
    lattice spacing and the shortest tetrahedron edge), so locally
    refined meshes automatically tighten the step.
    """
    h_min = domain.min_element_size()
    return cfl * h_min / math.sqrt(3.0 * max(eps_max, 1.0))


def stable_timegrid(domain: HybridDomain, eps_max: float, T: float,
                    cfl: float = DEFAULT_CFL) -> TimeGrid:
    """Largest uniform grid with dt under the stability bound and
    dt * n_steps = T exactly."""
    bound = stable_dt(domain, eps_max, cfl)
    n = max(1, int(math.ceil(T / bound - 1e-12)))
    return TimeGrid(T / n, n)


@dataclass
class SourceSpec:
    """Plane-pulse boundary source on the top face.

    The pulse drives a single field component through a Neumann
    condition while the gate is open (t <= t1); afterwards the face
    switches to the absorbing condition.
    """

    omega: float = 30.0
    t1: Optional[float] = None
    amplitude: float = 1.0
    component: int = 1  # zero-based; default drives the second component
    nodes: Optional[np.ndarray] = None  # defaults to the whole top face

    def __post_init__(self):
        if self.t1 is None:
            self.t1 = 2 * math.pi / self.omega
        if self.t1 < 2 * math.pi / self.omega - 1e-12:
            raise ValueError("gate t1 must not cut off the pulse")
        if self.component not in (0, 1, 2):
            raise ValueError("component must be 0, 1 or 2")

    @property
    def pulse_end(self) -> float:
        return 2 * math.pi / self.omega


def source_value(t: float, spec: SourceSpec) -> float:
    """Pulse amplitude: sin(omega t) inside (0, 2*pi/omega), else 0."""
    if t <= 0.0 or t >= spec.pulse_end:
        return 0.0
    return spec.amplitude * math.sin(spec.omega * t)


@dataclass
class WaveState:
    """Two consecutive time levels of the hybrid field."""

    fd_prev: np.ndarray
    fd_curr: np.ndarray
    fem_prev: np.ndarray
    fem_curr: np.ndarray
    step: int = 0


@dataclass
class TraceRecord:
    """Per-step field samples on a fixed set of lattice nodes.

    ``values[s]`` holds the field right after step ``s+1``, i.e. at time
    ``(s+1) * dt``.
    """

    node_ids: np.ndarray
    coords: np.ndarray
    values: np.ndarray
    dt: float
    n_steps: int

    def __post_init__(self):
        expected = (self.n_steps, len(self.node_ids), 3)
        if tuple(self.values.shape) != expected:
            raise ValueError(
                f"trace shape {self.values.shape} != expected {expected}"
            )

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    def sample_times(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 1) * self.dt

    def resample(self, timegrid: TimeGrid) -> "TraceRecord":
        """Linear time interpolation onto another sampling grid.

        End times must agree; the field is taken as zero before the
        first stored sample (quiescent start).
        """
        if abs(self.T - timegrid.T) > 1e-9 * max(self.T, timegrid.T):
            raise ValueError("cannot resample onto a grid with different T")
        if (timegrid.n_steps == self.n_steps
                and abs(timegrid.dt - self.dt) < 1e-15):
            return self
        # anchor at the known quiescent start so early samples interpolate
        # between t = 0 and the first stored level
        told = np.concatenate([[0.0], self.sample_times()])
        tnew = timegrid.sample_times()
        flat = self.values.reshape(self.n_steps, -1)
        flat = np.vstack([np.zeros((1, flat.shape[1])), flat])
        out = np.empty((timegrid.n_steps, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.interp(tnew, told, flat[:, j])
        return TraceRecord(
            self.node_ids, self.coords,
            out.reshape(timegrid.n_steps, len(self.node_ids), 3),
            timegrid.dt, timegrid.n_steps,
        )


# ---------------------------------------------------------------------------
# P1 operators on the tetrahedral region
# ---------------------------------------------------------------------------

class FemGeometry:
    """Material-independent P1 quantities for one mesh.

    Holds element volumes, basis gradients, the scalar stiffness matrix,
    the element divergence operator on component-blocked vectors, lumped
    nodal volumes and the lumped boundary mass.
    """

    def __init__(self, mesh: TetraMesh):
        self.mesh = mesh
        n = mesh.n_vertices
        self.vols = mesh.volumes()
        tinv = mesh.barycentric_setup()
        grads = np.empty((mesh.n_tets, 4, 3))
        grads[:, 1:, :] = tinv
        grads[:, 0, :] = -tinv.sum(axis=1)
        self.grads = grads
        self.lumped_volume = mesh.vertex_volumes()

        ke = np.einsum("mic,mjc->mij", grads, grads) * self.vols[:, None, None]
        rows = np.broadcast_to(mesh.tets[:, :, None], ke.shape)
        cols = np.broadcast_to(mesh.tets[:, None, :], ke.shape)
        self.K = sp.coo_matrix(
            (ke.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)
        ).tocsr()

        # divergence of a component-blocked vector [ux.. | uy.. | uz..]
        m = mesh.n_tets
        rows = np.repeat(np.arange(m), 12)
        cols = (mesh.tets[:, :, None] + n * np.arange(3)[None, None, :])
        self.Bdiv = sp.coo_matrix(
            (grads.ravel(), (rows, cols.ravel())), shape=(m, 3 * n)
        ).tocsr()

        bmass = np.zeros(n)
        if len(mesh.boundary_facets):
            p = mesh.vertices[mesh.boundary_facets]
            areas = 0.5 * np.linalg.norm(
                np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1
            )
            np.add.at(bmass, mesh.boundary_facets.ravel(),
                      np.repeat(areas / 3.0, 3))
        self.boundary_mass = bmass

    def element_mean(self, nodal: np.ndarray) -> np.ndarray:
        return nodal[self.mesh.tets].mean(axis=1)

    def materialize(self, material: MaterialField) -> "FemOperators":
        eps_el = self.element_mean(material.eps)
        w = (eps_el - 1.0) * self.vols
        W = sp.diags(w)
        G = (self.Bdiv.T @ W @ self.Bdiv).tocsr()
        return FemOperators(
            M=material.eps * self.lumped_volume,
            D=material.sigma * self.lumped_volume,
            K=self.K,
            G=G,
            B=self.boundary_mass,
            geometry=self,
        )


@dataclass
class FemOperators:
    """Assembled operators: lumped mass M(eps), lumped damping D(sigma),
    stiffness K, grad-div stabilization G, lumped boundary mass B."""

    M: np.ndarray
    D: np.ndarray
    K: sp.csr_matrix
    G: sp.csr_matrix
    B: np.ndarray
    geometry: FemGeometry

    def stiffness_apply(self, u: np.ndarray) -> np.ndarray:
        """(K + G) applied to an (n, 3) nodal field."""
        out = self.K @ u
        if self.G.nnz:
            out = out + (self.G @ u.T.ravel()).reshape(3, -1).T
        return out


def assemble_fem_operators(mesh: TetraMesh,
                           material: MaterialField) -> FemOperators:
    """Build the P1 operator set for one mesh/material pair."""
    return FemGeometry(mesh).materialize(material)


# ---------------------------------------------------------------------------
# Hybrid stepping
# ---------------------------------------------------------------------------

class HybridStepper:
    """Synchronous lattice + FE leapfrog with overlap exchange.

    One instance is specific to a (domain, material, timegrid) triple.
    The same stepper advances the adjoint problem in reversed time; only
    the injected boundary flux differs.
    """

    def __init__(self, domain: HybridDomain, material: MaterialField,
                 timegrid: TimeGrid, geometry: Optional[FemGeometry] = None,
                 bc_variant: str = "model1"):
        if bc_variant not in ("model1", "absorbing"):
            raise ValueError(f"unknown bc_variant {bc_variant!r}")
        material.validate(domain)
        self.domain = domain
        self.material = material
        self.timegrid = timegrid
        self.bc_variant = bc_variant
        geometry = geometry or FemGeometry(domain.mesh)
        if geometry.mesh is not domain.mesh:
            raise ValueError("geometry was built for a different mesh")
        self.ops = geometry.materialize(material)

        g = domain.grid
        self.h = g.spacing
        dt = timegrid.dt
        self.dt = dt
        self.shape3 = tuple(g.dims) + (3,)

        # lattice masks / index arrays
        self._deep_block = (~domain.fd_update_mask).reshape(
            tuple(g.dims)).copy()
        nx, ny, nz = g.dims
        # exclude the outer hull: it is handled by ghosts / overwrites
        self._deep_block[0, :, :] = self._deep_block[-1, :, :] = False
        self._deep_block[:, 0, :] = self._deep_block[:, -1, :] = False
        self._deep_block[:, :, 0] = self._deep_block[:, :, -1] = False
        self._pad = np.zeros((nx + 2, ny + 2, nz + 2, 3))
        p = domain.partition
        self.top = p.top_nodes
        self.bottom = p.bottom_nodes
        self.lateral = p.lateral_nodes
        self.top_in = domain.top_inward
        self.bottom_in = domain.bottom_inward
        self.lateral_in = domain.lateral_inward

        # FE update factors
        M, D = self.ops.M, self.ops.D
        self._denom = (M + 0.5 * dt * D)[:, None]
        self._c_curr = (2.0 * M)[:, None]
        self._c_prev = (M - 0.5 * dt * D)[:, None]

    def zero_state(self) -> WaveState:
        N = self.domain.grid.n_nodes
        n = self.domain.mesh.n_vertices
        return WaveState(
            fd_prev=np.zeros((N, 3)), fd_curr=np.zeros((N, 3)),
            fem_prev=np.zeros((n, 3)), fem_curr=np.zeros((n, 3)),
            step=0,
        )

    def forward_step(self, state: WaveState, top_mode: str,
                     top_flux: Optional[np.ndarray] = None) -> WaveState:
        """Advance one step.

        ``top_mode`` selects the top-face condition: ``"neumann"``
        (inhomogeneous flux through a mirror ghost, the open source
        gate) or ``"absorbing"`` (first-order upwind absorbing, plus
        optional flux for the adjoint).  ``top_flux`` is an
        (n_top, 3) array of Neumann data.

        Neumann faces enter through second-order ghost values so the
        injected pulse converges at the interior order; absorbing faces
        use the one-sided first-order update.
        """
        dom, h, dt = self.domain, self.h, self.dt
        r2 = (dt / h) ** 2
        c = dt / h

        E = state.fd_curr.reshape(self.shape3)
        Ep = state.fd_prev.reshape(self.shape3)
        buf = self._pad
        buf[1:-1, 1:-1, 1:-1] = E
        # mirror ghosts realize homogeneous Neumann on every face; the
        # inhomogeneous source face adds its flux term below
        buf[0, 1:-1, 1:-1] = E[1]
        buf[-1, 1:-1, 1:-1] = E[-2]
        buf[1:-1, 0, 1:-1] = E[:, 1]
        buf[1:-1, -1, 1:-1] = E[:, -2]
        buf[1:-1, 1:-1, 0] = E[:, :, 1]
        buf[1:-1, 1:-1, -1] = E[:, :, -2]
        if top_mode == "neumann" and top_flux is not None:
            flux3 = top_flux.reshape(E.shape[0], E.shape[1], 3)
            buf[1:-1, 1:-1, -1] += 2.0 * h * flux3

        core = buf[1:-1, 1:-1, 1:-1]
        lap = (
            buf[2:, 1:-1, 1:-1] + buf[:-2, 1:-1, 1:-1]
            + buf[1:-1, 2:, 1:-1] + buf[1:-1, :-2, 1:-1]
            + buf[1:-1, 1:-1, 2:] + buf[1:-1, 1:-1, :-2]
            - 6.0 * core
        )
        nxt = 2.0 * core - Ep + r2 * lap
        nxt[self._deep_block] = 0.0
        fd_next = nxt.reshape(-1, 3)
        fd_prev = state.fd_prev

        # Absorbing faces: the first-order condition d_n u = -d_t u + s is
        # realized at second order by replacing the mirror ghost with the
        # flux ghost and a time-centred derivative, which reduces to a
        # closed-form correction of the already computed mirror value:
        #    u_next = (u_mirror + c*u_prev + (2*dt^2/h)*s) / (1 + c)
        def absorb(face_ids, s=None):
            val = fd_next[face_ids] + c * fd_prev[face_ids]
            if s is not None:
                val += (2.0 * dt * dt / h) * s
            fd_next[face_ids] = val / (1.0 + c)

        if self.bc_variant != "model1":
            absorb(self.lateral)
        absorb(self.bottom)
        if top_mode == "absorbing":
            absorb(self.top, top_flux)
        elif top_mode != "neumann":
            raise ValueError(f"unknown top_mode {top_mode!r}")

        # FE leapfrog with centred damping
        ku = self.ops.stiffness_apply(state.fem_curr)
        fem_next = (
            self._c_curr * state.fem_curr
            - self._c_prev * state.fem_prev
            - dt * dt * ku
        ) / self._denom
        self._last_stiffness_product = ku

        # overlap exchange: lattice -> FE on the outer two layers,
        # FE -> lattice on the third
        fem_next[dom.fd2fe_fe] = fd_next[dom.fd2fe_fd]
        fd_next[dom.fe2fd_fd] = fem_next[dom.fe2fd_fe]

        return WaveState(
            fd_prev=state.fd_curr, fd_curr=fd_next,
            fem_prev=state.fem_curr, fem_curr=fem_next,
            step=state.step + 1,
        )

    def fem_energy(self, state_prev_fem, state_fem, stiffness_product=None):
        """Leapfrog energy of the FE block: kinetic + cross-level
        elastic term (exactly conserved by the undamped free scheme)."""
        v = (state_fem - state_prev_fem) / self.dt
        kin = 0.5 * float(np.sum(self.ops.M[:, None] * v * v))
        ku = (stiffness_product if stiffness_product is not None
              else self.ops.stiffness_apply(state_prev_fem))
        pot = 0.5 * float(np.sum(state_fem * ku))
        return kin + pot


@dataclass
class ForwardResult:
    trace: TraceRecord
    fem_history: Optional[np.ndarray]
    fem_energy: Optional[np.ndarray]


def _estimate_history_bytes(n_nodes: int, n_steps: int) -> int:
    return (n_steps + 1) * n_nodes * 3 * 8


def run_forward(domain: HybridDomain, material: MaterialField,
                timegrid: TimeGrid, source: SourceSpec,
                record_on: Optional[np.ndarray] = None,
                store_volume: bool = False,
                geometry: Optional[FemGeometry] = None,
                bc_variant: str = "model1",
                compute_energy: bool = False,
                snapshot_every: Optional[int] = None,
                snapshot_dir: Optional[str] = None,
                memory_cap: int = DEFAULT_MEMORY_CAP) -> ForwardResult:
    """Drive the forward problem from quiescent initial data.

    Records boundary traces on ``record_on`` (defaults to the whole top
    face) after every step and, optionally, the full FE-node field
    history needed by gradient assembly.
    """
    if record_on is None:
        record_on = domain.partition.top_nodes
    record_on = np.asarray(record_on, dtype=np.int64)
    n_fem = domain.mesh.n_vertices
    if store_volume:
        need = _estimate_history_bytes(n_fem, timegrid.n_steps)
        if need > memory_cap:
            raise MemoryCapError(
                f"field history needs {need} bytes "
                f"(cap {memory_cap}); coarsen the run or raise the cap"
            )

    stepper = HybridStepper(domain, material, timegrid, geometry, bc_variant)
    state = stepper.zero_state()
    nrec = len(record_on)
    values = np.zeros((timegrid.n_steps, nrec, 3))
    history = None
    if store_volume:
        history = np.zeros((timegrid.n_steps + 1, n_fem, 3))
    energies = np.zeros(timegrid.n_steps) if compute_energy else None

    top_set = domain.partition.top_nodes
    src_cols = np.zeros((len(top_set), 3))
    for s in range(timegrid.n_steps):
        t_next = (s + 1) * timegrid.dt
        if bc_variant == "model1" and t_next <= source.t1 + 1e-12:
            src_cols[:] = 0.0
            src_cols[:, source.component] = source_value(t_next, source)
            state = stepper.forward_step(state, "neumann", src_cols)
        else:
            state = stepper.forward_step(state, "absorbing", None)
        values[s] = state.fd_curr[record_on]
        if history is not None:
            history[s + 1] = state.fem_curr
        if energies is not None:
            # the step already produced (K+G) @ u_n for u_n = fem_prev
            energies[s] = stepper.fem_energy(
                state.fem_prev, state.fem_curr,
                stepper._last_stiffness_product,
            )
        if (s + 1) % _CHECK_EVERY == 0 or s + 1 == timegrid.n_steps:
            if not _fields_sane(state.fem_curr, state.fd_curr):
                raise SolverInstabilityError(s + 1)
        if snapshot_every and (s + 1) % snapshot_every == 0:
            from . import vtk_io
            import os
            mag = np.linalg.norm(state.fem_curr, axis=1)
            path = os.path.join(snapshot_dir or ".",
                                f"field_{s + 1:06d}.vtk")
            vtk_io.write_unstructured_grid(
                path, domain.mesh.vertices, domain.mesh.tets,
                point_data={"E": state.fem_curr, "E_mag": mag},
            )

    trace = TraceRecord(
        node_ids=record_on,
        coords=domain.grid.coords()[record_on].copy(),
        values=values,
        dt=timegrid.dt,
        n_steps=timegrid.n_steps,
    )
    return ForwardResult(trace=trace, fem_history=history,
                         fem_energy=energies)


def run_adjoint(domain: HybridDomain, material: MaterialField,
                timegrid: TimeGrid, residual: TraceRecord,
                zeta: float,
                source: Optional[SourceSpec] = None,
                geometry: Optional[FemGeometry] = None,
                bc_variant: str = "model1",
                memory_cap: int = DEFAULT_MEMORY_CAP) -> np.ndarray:
    """Solve the adjoint problem; returns the FE-node history of the
    multiplier at forward time levels (shape (n_steps+1, n_fem, 3)).

    ``residual`` holds (simulated - observed) values on the observation
    nodes, already masked; the smoothing taper of width ``zeta`` is
    applied here.  Integration runs in reversed time, where the
    end-time conditions become a quiescent start and the sign-flipped
    damping becomes ordinary damping, so the forward stepper advances
    it unchanged.  The forcing enters through the observation-face flux
    with a negative sign.
    """
    from .objective import smoothing_z

    if residual.n_steps != timegrid.n_steps or \
            abs(residual.dt - timegrid.dt) > 1e-12:
        raise ValueError("residual trace grid does not match the time grid")
    n_fem = domain.mesh.n_vertices
    need = _estimate_history_bytes(n_fem, timegrid.n_steps)
    if need > memory_cap:
        raise MemoryCapError(
            f"adjoint history needs {need} bytes (cap {memory_cap})"
        )
    top = domain.partition.top_nodes
    pos = {int(v): i for i, v in enumerate(top)}
    try:
        cols = np.array([pos[int(v)] for v in residual.node_ids])
    except KeyError:
        raise ValueError("residual nodes must lie on the top face")

    # gate end in reversed time: forward times t <= t1 see a pure
    # Neumann top face, matching the forward model's source gate
    t1 = source.t1 if source is not None else -1.0

    stepper = HybridStepper(domain, material, timegrid, geometry, bc_variant)
    state = stepper.zero_state()
    N = timegrid.n_steps
    mu_hist = np.zeros((N + 1, n_fem, 3))
    flux = np.zeros((len(top), 3))
    T = timegrid.T
    for sprime in range(N):
        fwd_sample = N - 1 - sprime           # forward time (fwd_sample+1)*dt
        t_fwd = (fwd_sample + 1) * timegrid.dt
        flux[:] = 0.0
        flux[cols] = -residual.values[fwd_sample] * smoothing_z(t_fwd, T, zeta)
        if bc_variant == "model1" and t_fwd <= t1 + 1e-12:
            state = stepper.forward_step(state, "neumann", flux)
        else:
            state = stepper.forward_step(state, "absorbing", flux)
        mu_hist[sprime + 1] = state.fem_curr
        if (sprime + 1) % _CHECK_EVERY == 0 or sprime + 1 == N:
            if not _fields_sane(state.fem_curr, state.fd_curr):
                raise SolverInstabilityError(sprime + 1)

    # mu(t') = lambda(T - t'): flip back to forward time levels
    return mu_hist[::-1].copy()
