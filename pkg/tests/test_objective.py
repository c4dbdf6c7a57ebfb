import numpy as np
import pytest

from wcip.mesh import DomainSpec, build_hybrid_domain
from wcip.objective import (
    ObservationSet,
    TikhonovParams,
    assemble_grad_eps,
    assemble_grad_sigma,
    directional_derivative_oracle,
    evaluate_misfit,
    evaluate_tikhonov,
    smoothing_z,
    surface_weights,
)
from wcip.solver import (
    FemGeometry,
    MaterialField,
    SourceSpec,
    TimeGrid,
    TraceRecord,
    run_forward,
    stable_timegrid,
)


def make_domain(h=0.25):
    spec = DomainSpec(
        omega_lo=(0,) * 3, omega_hi=(4,) * 3,
        fem_lo=(1,) * 3, fem_hi=(3,) * 3, h_fdm=h,
    )
    return build_hybrid_domain(spec)


def make_obs(values, dt=0.1):
    n_steps, k, _ = values.shape
    ids = np.arange(k)
    tr = TraceRecord(ids, np.zeros((k, 3)), values, dt, n_steps)
    return ObservationSet(trace=tr, mask=ids, zeta=0.2 * tr.T)


class TestSmoothing:
    def test_endpoints(self):
        assert smoothing_z(0.0, 10.0, 1.0) == 1.0
        assert smoothing_z(10.0, 10.0, 1.0) == 0.0

    def test_ramp_midpoint(self):
        assert smoothing_z(9.5, 10.0, 1.0) == pytest.approx(0.5)

    def test_monotone_on_ramp(self):
        t = np.linspace(9.0, 10.0, 200)
        z = smoothing_z(t, 10.0, 1.0)
        assert np.all(np.diff(z) <= 0)
        assert np.all((z >= 0) & (z <= 1))

    def test_flat_before_ramp(self):
        t = np.linspace(0, 9.0, 50)
        assert np.all(smoothing_z(t, 10.0, 1.0) == 1.0)


class TestMisfit:
    def test_zero_for_matching_trace(self):
        vals = np.random.default_rng(0).normal(size=(8, 4, 3))
        obs = make_obs(vals.copy())
        tr = TraceRecord(obs.trace.node_ids, obs.trace.coords,
                         vals.copy(), obs.trace.dt, obs.trace.n_steps)
        assert evaluate_misfit(tr, obs) == 0.0

    def test_unit_patch_value(self):
        # constant residual c over a patch of weight one and unit time
        # with z = 1 gives c^2 / 2
        c = 0.7
        n_steps, dt = 10, 0.1
        vals = np.zeros((n_steps, 2, 3))
        obs = make_obs(vals.copy(), dt)
        trv = vals.copy()
        trv[:, 0, 1] = c
        tr = TraceRecord(obs.trace.node_ids, obs.trace.coords, trv,
                         dt, n_steps)
        # neutralize the end taper by a wide z? instead integrate it:
        z = smoothing_z(tr.sample_times(), tr.T, obs.zeta)
        expect = 0.5 * c * c * np.sum(z) * dt
        assert evaluate_misfit(tr, obs, node_weight=np.array([1.0, 0.0])) \
            == pytest.approx(expect)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(6, 3, 3))
        obs = make_obs(np.zeros_like(vals))
        tr1 = TraceRecord(obs.trace.node_ids, obs.trace.coords, vals,
                          obs.trace.dt, 6)
        tr2 = TraceRecord(obs.trace.node_ids, obs.trace.coords, 2 * vals,
                          obs.trace.dt, 6)
        assert evaluate_misfit(tr2, obs) == pytest.approx(
            4 * evaluate_misfit(tr1, obs))

    def test_shape_mismatch_rejected(self):
        vals = np.zeros((5, 2, 3))
        obs = make_obs(vals)
        bad = TraceRecord(np.array([5, 6]), np.zeros((2, 3)),
                          np.zeros((5, 2, 3)), obs.trace.dt, 5)
        with pytest.raises(ValueError):
            evaluate_misfit(bad, obs)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        vals = rng.normal(size=(7, 3, 3))
        obs = make_obs(rng.normal(size=(7, 3, 3)))
        tr = TraceRecord(obs.trace.node_ids, obs.trace.coords, vals,
                         obs.trace.dt, 7)
        assert evaluate_misfit(tr, obs) >= 0


class TestTikhonov:
    def test_reduces_to_misfit_at_prior(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=(5, 2, 3))
        obs = make_obs(np.zeros_like(vals))
        tr = TraceRecord(obs.trace.node_ids, obs.trace.coords, vals,
                         obs.trace.dt, 5)
        mat = MaterialField.vacuum(10)
        params = TikhonovParams(gamma_eps=0.3, gamma_sigma=0.4)
        V = np.ones(10)
        j = evaluate_tikhonov(tr, obs, mat, params, V)
        assert j == pytest.approx(evaluate_misfit(tr, obs))

    def test_unit_volume_deviation(self):
        vals = np.zeros((5, 2, 3))
        obs = make_obs(vals)
        tr = TraceRecord(obs.trace.node_ids, obs.trace.coords, vals,
                         obs.trace.dt, 5)
        n = 8
        mat = MaterialField(np.full(n, 2.0), np.zeros(n))
        params = TikhonovParams(gamma_eps=2.0, gamma_sigma=1.0)
        V = np.full(n, 1.0 / n)  # total volume one
        # (gamma/2) * |eps - 1|^2 * vol = (2/2)*1*1 = 1
        assert evaluate_tikhonov(tr, obs, mat, params, V) == pytest.approx(1.0)

    def test_zero_gammas_equal_misfit(self):
        rng = np.random.default_rng(4)
        vals = rng.normal(size=(5, 2, 3))
        obs = make_obs(np.zeros_like(vals))
        tr = TraceRecord(obs.trace.node_ids, obs.trace.coords, vals,
                         obs.trace.dt, 5)
        mat = MaterialField(np.full(6, 3.0), np.full(6, 0.5))
        params = TikhonovParams(gamma_eps=0.0, gamma_sigma=0.0)
        assert evaluate_tikhonov(tr, obs, mat, params, np.ones(6)) == \
            pytest.approx(evaluate_misfit(tr, obs))


class TestSurfaceWeights:
    def test_trapezoid_pattern(self):
        dom = make_domain(h=0.5)
        top = dom.partition.top_nodes
        w = surface_weights(dom, top)
        h2 = 0.25
        nx, ny, _ = dom.grid.dims
        # total equals the true face area
        assert np.isclose(w.sum(), (dom.grid.spacing * (nx - 1)) ** 2)
        assert np.isclose(w.max(), h2)
        assert np.isclose(w.min(), h2 / 4)


class TestGradientAssembly:
    def setup_histories(self):
        dom = make_domain(h=0.5)
        n = dom.mesh.n_vertices
        geom = FemGeometry(dom.mesh)
        rng = np.random.default_rng(5)
        e_hist = rng.normal(size=(9, n, 3))
        lam = rng.normal(size=(9, n, 3))
        return dom, geom, e_hist, lam

    def test_zero_adjoint_gives_regularization(self):
        dom, geom, e_hist, _ = self.setup_histories()
        n = dom.mesh.n_vertices
        mat = MaterialField(np.full(n, 2.0), np.full(n, 0.1))
        mat.eps[dom.pinned_mask] = 1.0
        mat.sigma[dom.pinned_mask] = 0.0
        params = TikhonovParams(gamma_eps=0.7, gamma_sigma=0.3)
        lam0 = np.zeros_like(e_hist)
        g = assemble_grad_eps(e_hist, lam0, mat, params, geom,
                              dom.pinned_mask, 0.1)
        expect = 0.7 * (mat.eps - 1.0)
        expect[dom.pinned_mask] = 0.0
        assert np.allclose(g, expect)
        gs = assemble_grad_sigma(e_hist, lam0, mat, params,
                                 dom.pinned_mask, 0.1)
        expect = 0.3 * mat.sigma
        expect[dom.pinned_mask] = 0.0
        assert np.allclose(gs, expect)

    def test_time_constant_field_sigma(self):
        dom, geom, _, lam = self.setup_histories()
        n = dom.mesh.n_vertices
        mat = MaterialField(np.ones(n), np.zeros(n))
        params = TikhonovParams(gamma_eps=0.0, gamma_sigma=0.0)
        e_const = np.broadcast_to(lam[0], lam.shape).copy()
        e_const[:] = e_const[0]
        gs = assemble_grad_sigma(e_const, lam, mat, params,
                                 dom.pinned_mask, 0.1)
        assert np.abs(gs).max() < 1e-12

    def test_history_shape_mismatch(self):
        dom, geom, e_hist, lam = self.setup_histories()
        n = dom.mesh.n_vertices
        mat = MaterialField.vacuum(n)
        params = TikhonovParams()
        with pytest.raises(ValueError):
            assemble_grad_eps(e_hist, lam[:-1], mat, params, geom,
                              dom.pinned_mask, 0.1)

    def test_gradient_support(self):
        dom, geom, e_hist, lam = self.setup_histories()
        n = dom.mesh.n_vertices
        mat = MaterialField.vacuum(n)
        params = TikhonovParams()
        g = assemble_grad_eps(e_hist, lam, mat, params, geom,
                              dom.pinned_mask, 0.1)
        assert np.all(g[dom.pinned_mask] == 0.0)

    def test_sigma_gradient_affine_in_sigma(self):
        dom, geom, e_hist, lam = self.setup_histories()
        n = dom.mesh.n_vertices
        params = TikhonovParams(gamma_eps=0.1, gamma_sigma=0.9)
        free = ~dom.pinned_mask
        s1 = np.zeros(n)
        s2 = np.zeros(n)
        s2[free] = 0.5
        m1 = MaterialField(np.ones(n), s1)
        m2 = MaterialField(np.ones(n), s2)
        g1 = assemble_grad_sigma(e_hist, lam, m1, params,
                                 dom.pinned_mask, 0.1)
        g2 = assemble_grad_sigma(e_hist, lam, m2, params,
                                 dom.pinned_mask, 0.1)
        assert np.allclose((g2 - g1)[free], 0.9 * 0.5)


class TestGradientOracle:
    def make_setup(self):
        dom = make_domain(h=0.25)
        n = dom.mesh.n_vertices
        src = SourceSpec(omega=np.pi)
        tg = stable_timegrid(dom, 4.0, T=8.0)
        v = dom.mesh.vertices
        free = ~dom.pinned_mask
        eps_t = np.ones(n)
        sig_t = np.zeros(n)
        ball = (np.linalg.norm(v - np.array([2, 2, 2.4]), axis=1) < 0.45) \
            & free
        eps_t[ball] = 3.0
        sig_t[ball] = 0.5
        fwd = run_forward(dom, MaterialField(eps_t, sig_t, 4.0, 2.0), tg, src)
        obs = ObservationSet(trace=fwd.trace, mask=fwd.trace.node_ids,
                             zeta=0.1 * tg.T)

        def bump(center, w):
            r2 = np.sum((v - np.asarray(center)) ** 2, axis=1)
            b = np.exp(-r2 / w ** 2)
            b[~free] = 0.0
            return b

        eps0 = 1.0 + 0.8 * bump([2, 2, 2.2], 0.6)
        sig0 = 0.1 * free + 0.3 * bump([2, 2, 2.0], 0.7)
        sig0[~free] = 0.0
        mat0 = MaterialField(eps0, sig0, 4.0, 2.0)
        return dom, n, src, tg, mat0, obs, bump

    def test_adjoint_matches_fd(self):
        dom, n, src, tg, mat0, obs, bump = self.make_setup()
        params = TikhonovParams(1e-2, 1e-2)
        d = bump([2.1, 2.0, 2.25], 0.5)
        out = directional_derivative_oracle(
            dom, mat0, obs, params, src, tg, d, np.zeros(n), taus=[1e-3])
        rel = abs(out["fd_estimates"][0] - out["inner_product"]) / abs(
            out["fd_estimates"][0])
        assert rel < 0.05
        out = directional_derivative_oracle(
            dom, mat0, obs, params, src, tg, np.zeros(n), d, taus=[1e-3])
        rel = abs(out["fd_estimates"][0] - out["inner_product"]) / abs(
            out["fd_estimates"][0])
        assert rel < 0.05

    def test_zero_direction(self):
        dom, n, src, tg, mat0, obs, bump = self.make_setup()
        params = TikhonovParams(1e-2, 1e-2)
        out = directional_derivative_oracle(
            dom, mat0, obs, params, src, tg, np.zeros(n), np.zeros(n),
            taus=[1e-2])
        assert out["inner_product"] == 0.0
        assert out["fd_estimates"][0] == 0.0

    def test_bound_violation_rejected(self):
        dom, n, src, tg, mat0, obs, bump = self.make_setup()
        params = TikhonovParams(1e-2, 1e-2)
        d = np.zeros(n)
        free = np.where(~dom.pinned_mask)[0]
        d[free[0]] = 1.0
        # sigma - tau * d would dip below zero where sigma0 is small
        mat_low = MaterialField(mat0.eps, np.zeros(n), 4.0, 2.0)
        with pytest.raises(ValueError):
            directional_derivative_oracle(
                dom, mat_low, obs, params, src, tg, np.zeros(n), d,
                taus=[1e-2])

    def test_pinned_support_rejected(self):
        dom, n, src, tg, mat0, obs, bump = self.make_setup()
        params = TikhonovParams(1e-2, 1e-2)
        d = np.ones(n)  # nonzero on the shell
        with pytest.raises(ValueError):
            directional_derivative_oracle(
                dom, mat0, obs, params, src, tg, d, np.zeros(n))
