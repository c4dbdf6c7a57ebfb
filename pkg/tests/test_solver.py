import math

import numpy as np
import pytest

from wcip.mesh import DomainSpec, build_hybrid_domain
from wcip.solver import (
    FemGeometry,
    MaterialField,
    MemoryCapError,
    SolverInstabilityError,
    SourceSpec,
    TimeGrid,
    TraceRecord,
    assemble_fem_operators,
    run_forward,
    source_value,
    stable_timegrid,
)


def small_domain(h=0.5, lo=-1.0, hi=4.0, flo=0.5, fhi=2.5):
    spec = DomainSpec(
        omega_lo=(lo,) * 3, omega_hi=(hi,) * 3,
        fem_lo=(flo,) * 3, fem_hi=(fhi,) * 3, h_fdm=h,
    )
    return build_hybrid_domain(spec)


def pulse_profile(t, omega):
    """Integral of the boundary pulse: the traveling waveform."""
    t = np.asarray(t, dtype=float)
    out = (1.0 - np.cos(omega * np.clip(t, 0.0, 2 * np.pi / omega))) / omega
    return np.where(t <= 0.0, 0.0, np.where(t >= 2 * np.pi / omega, 0.0, out))


class TestSource:
    def test_zero_at_zero(self):
        assert source_value(0.0, SourceSpec(omega=1.0)) == 0.0

    def test_peak(self):
        assert source_value(np.pi / 2, SourceSpec(omega=1.0)) == pytest.approx(1.0)

    def test_after_gate_zero(self):
        # one full period ends at 2*pi; t = 7 is past it
        assert source_value(7.0, SourceSpec(omega=1.0)) == 0.0

    def test_t1_shorter_than_pulse_rejected(self):
        with pytest.raises(ValueError):
            SourceSpec(omega=1.0, t1=1.0)


class TestOperators:
    def test_grad_div_zero_in_vacuum(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        ops = assemble_fem_operators(dom.mesh, mat)
        assert ops.G.nnz == 0 or np.abs(ops.G.data).max() == 0.0

    def test_lumped_mass_positive_diagonal(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        ops = assemble_fem_operators(dom.mesh, mat)
        assert np.all(ops.M > 0)
        assert np.allclose(ops.M.sum(), dom.mesh.volumes().sum())

    def test_stiffness_constant_nullspace(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        ops = assemble_fem_operators(dom.mesh, mat)
        ones = np.ones(dom.mesh.n_vertices)
        assert np.abs(ops.K @ ones).max() < 1e-12

    def test_single_tet_stiffness_analytic(self):
        # hand-computed P1 stiffness on one tet via explicit gradients
        from wcip.mesh import TetraMesh

        verts = np.array([
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.3, 1.1, 0.0],
            [0.2, 0.4, 0.9],
        ])
        mesh = TetraMesh(verts, np.array([[0, 1, 2, 3]]))
        mat = MaterialField(np.full(4, 2.0), np.zeros(4))
        ops = assemble_fem_operators(mesh, mat)

        # oracle: gradients of barycentric coordinates from the explicit
        # 4x4 linear system a_i + b_i.x = phi_i
        A = np.hstack([np.ones((4, 1)), mesh.vertices[mesh.tets[0]]])
        C = np.linalg.inv(A)  # rows: coefficients of each basis function
        grads = C[1:, :].T    # (4, 3) gradient of each phi
        vol = abs(np.linalg.det(A[1:, 1:] - A[0, 1:])) / 6.0
        K_ref = vol * grads @ grads.T
        assert np.allclose(ops.K.toarray(), K_ref, atol=1e-12)

    def test_operators_symmetric(self):
        dom = small_domain()
        rng = np.random.default_rng(1)
        eps = np.ones(dom.mesh.n_vertices)
        free = ~dom.pinned_mask
        eps[free] += rng.uniform(0, 3, free.sum())
        mat = MaterialField(eps, np.zeros(dom.mesh.n_vertices))
        ops = assemble_fem_operators(dom.mesh, mat)
        assert (ops.K - ops.K.T).nnz == 0 or \
            np.abs((ops.K - ops.K.T).data).max() < 1e-12
        assert (ops.G - ops.G.T).nnz == 0 or \
            np.abs((ops.G - ops.G.T).data).max() < 1e-12


class TestForward:
    def test_zero_source_stays_zero(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        tg = TimeGrid(0.05, 10)
        src = SourceSpec(omega=5.0, amplitude=0.0)
        res = run_forward(dom, mat, tg, src)
        assert np.abs(res.trace.values).max() == 0.0

    def test_zero_steps_empty_trace(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        res = run_forward(dom, mat, TimeGrid(0.05, 0), SourceSpec(omega=5.0))
        assert res.trace.values.shape[0] == 0

    def test_traveling_wave_matches_oracle(self):
        # homogeneous medium: the pulse entering from the top face is a
        # 1-D wave along the vertical axis; compare against d'Alembert
        dom = small_domain(h=0.25, lo=0.0, hi=6.0, flo=1.0, fhi=5.0)
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        omega = np.pi  # pulse length 2.0: 8 lattice points per wavelength
        src = SourceSpec(omega=omega)
        tg = stable_timegrid(dom, 1.0, T=5.0)
        # probe: lattice node on the axis, 3 units below the top face
        g = dom.grid
        nx, ny, nz = g.dims
        probe = g.linear_id(nx // 2, ny // 2, nz - 1 - int(3.0 / g.spacing))
        res = run_forward(dom, mat, tg, src, record_on=np.array([probe]))
        got = res.trace.values[:, 0, 1]
        t = res.trace.sample_times()
        want = pulse_profile(t - 3.0, omega)
        err = np.abs(got - want).max()
        assert err < 0.15 * np.abs(want).max()
        # cross-correlation arrival time within 2 dt of the oracle
        lag = np.argmax(np.correlate(got, want, mode="full")) - (len(t) - 1)
        assert abs(lag) * tg.dt <= 2 * tg.dt + 1e-12

    def test_second_order_convergence(self):
        # the pulse is C1 only, so the pointwise error converges below
        # second order at its curvature jumps; the L2-in-time error
        # reflects the scheme order and must drop ~4x per halving
        omega = np.pi
        errs = []
        for h in (0.5, 0.25):
            dom = small_domain(h=h, lo=0.0, hi=6.0, flo=1.0, fhi=5.0)
            mat = MaterialField.vacuum(dom.mesh.n_vertices)
            tg = stable_timegrid(dom, 1.0, T=5.0)
            g = dom.grid
            nx, ny, nz = g.dims
            probe = g.linear_id(nx // 2, ny // 2,
                                nz - 1 - int(round(3.0 / h)))
            res = run_forward(dom, mat, tg, SourceSpec(omega=omega, t1=5.0),
                              record_on=np.array([probe]))
            t = res.trace.sample_times()
            want = pulse_profile(t - 3.0, omega)
            diff = res.trace.values[:, 0, 1] - want
            errs.append(np.sqrt(np.sum(diff ** 2) * tg.dt))
        ratio = errs[0] / errs[1]
        assert 3.0 <= ratio <= 5.0

    def test_conductive_slab_damps_pulse(self):
        dom = small_domain(h=0.25, lo=0.0, hi=5.0, flo=1.0, fhi=4.0)
        n = dom.mesh.n_vertices
        omega = 2 * np.pi
        src = SourceSpec(omega=omega)
        tg = stable_timegrid(dom, 1.0, T=6.0)
        g = dom.grid
        nx, ny, nz = g.dims
        probe = np.array([g.linear_id(nx // 2, ny // 2, 2)])

        base = run_forward(dom, MaterialField.vacuum(n), tg, src,
                           record_on=probe)
        sigma = np.zeros(n)
        z = dom.mesh.vertices[:, 2]
        slab = (~dom.pinned_mask) & (z > 2.0) & (z < 3.0)
        sigma[slab] = 1.5
        damped = run_forward(dom, MaterialField(np.ones(n), sigma), tg, src,
                             record_on=probe)
        a0 = np.abs(base.trace.values[:, 0, 1]).max()
        a1 = np.abs(damped.trace.values[:, 0, 1]).max()
        assert a1 < a0

    def test_overlap_agrees_bitwise(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        tg = stable_timegrid(dom, 1.0, T=2.0)
        src = SourceSpec(omega=2 * np.pi)
        fwd = run_forward(dom, mat, tg, src, store_volume=True)
        # re-run one step chain manually via the stepper to inspect state
        from wcip.solver import HybridStepper
        stepper = HybridStepper(dom, mat, tg)
        state = stepper.zero_state()
        for s in range(5):
            t_next = (s + 1) * tg.dt
            cols = np.zeros((len(dom.partition.top_nodes), 3))
            cols[:, 1] = source_value(t_next, src)
            state = stepper.forward_step(state, "neumann", cols)
            assert np.array_equal(state.fem_curr[dom.fd2fe_fe],
                                  state.fd_curr[dom.fd2fe_fd])
            assert np.array_equal(state.fd_curr[dom.fe2fd_fd],
                                  state.fem_curr[dom.fe2fd_fe])

    def test_energy_decays_after_pulse_exits(self):
        # the first-order absorbing faces reflect a few percent of the
        # outgoing pulse, and those reflections re-enter the FE region;
        # decay is therefore monotone up to sub-percent blips, and the
        # reverberation drains to below 1% of the peak
        dom = small_domain(h=0.25, lo=0.0, hi=4.0, flo=1.0, fhi=3.0)
        n = dom.mesh.n_vertices
        tg = stable_timegrid(dom, 1.0, T=20.0)
        src = SourceSpec(omega=np.pi)
        res = run_forward(dom, MaterialField.vacuum(n), tg, src,
                          compute_energy=True)
        e = res.fem_energy
        peak = e.max()
        assert e[-1] <= 0.01 * peak
        after_peak = np.diff(e[np.argmax(e):])
        increases = after_peak[after_peak > 0]
        assert increases.max(initial=0.0) <= 1e-2 * peak
        assert increases.sum() <= 5e-2 * peak

    def test_instability_detected(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        # grossly violate the CFL bound; slow pulse so samples hit it
        tg = TimeGrid(1.0, 60)
        with pytest.raises(SolverInstabilityError):
            run_forward(dom, mat, tg, SourceSpec(omega=0.5))

    def test_memory_cap_refusal(self):
        dom = small_domain()
        mat = MaterialField.vacuum(dom.mesh.n_vertices)
        tg = TimeGrid(0.01, 1000)
        with pytest.raises(MemoryCapError, match="bytes"):
            run_forward(dom, mat, tg, SourceSpec(omega=2 * np.pi),
                        store_volume=True, memory_cap=1000)


class TestTraceRecord:
    def test_resample_linear(self):
        ids = np.array([0, 1])
        coords = np.zeros((2, 3))
        tg_a = TimeGrid(0.1, 10)
        vals = np.zeros((10, 2, 3))
        vals[:, 0, 1] = np.linspace(0.1, 1.0, 10)
        tr = TraceRecord(ids, coords, vals, tg_a.dt, tg_a.n_steps)
        tg_b = TimeGrid(0.05, 20)
        out = tr.resample(tg_b)
        # linear signal reproduced exactly by linear interpolation
        assert np.allclose(out.values[:, 0, 1],
                           np.linspace(0.05, 1.0, 20), atol=1e-12)

    def test_resample_needs_matching_T(self):
        ids = np.array([0])
        tr = TraceRecord(ids, np.zeros((1, 3)), np.zeros((5, 1, 3)), 0.1, 5)
        with pytest.raises(ValueError):
            tr.resample(TimeGrid(0.1, 7))
