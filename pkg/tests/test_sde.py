"""Engine layer: grids, reproducible noise, integrators, coupled runs."""

import io
import math

import numpy as np
import pytest

from chainlab.model import NormalFormParams, default_potential, deterministic_solve
from chainlab.sde import (
    CoupledSpec,
    GridMismatchError,
    NoiseStream,
    Path,
    StepSizeError,
    TimeGrid,
    dt_max,
    dump_paths,
    integrate_chain,
    integrate_coupled,
    integrate_ou_pair,
    integrate_overdamped,
    integrate_underdamped,
    load_paths,
    sandwich_bias,
)


def params(eps=0.05, sigma=1e-3, **kw):
    kw.setdefault("T", 1.0)
    kw.setdefault("t2", 0.5)
    return NormalFormParams(epsilon=eps, sigma=sigma, **kw)


# ---------------------------------------------------------------------------
# grid and path containers
# ---------------------------------------------------------------------------

class TestTimeGrid:
    def test_exact_span(self):
        g = TimeGrid(-1.0, 0.5, 0.25)
        assert g.n_steps == 6
        assert g.t_end == 0.5
        np.testing.assert_allclose(g.times, [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5])

    def test_snaps_up(self):
        g = TimeGrid(0.0, 1.0, 0.3)
        assert g.n_steps == 4
        assert g.t_end == pytest.approx(1.2)

    def test_index_of(self):
        g = TimeGrid(-1.0, 1.0, 0.1)
        assert g.index_of(-1.0) == 0
        assert g.index_of(0.3) == 13
        assert g.index_of(1.0) == g.n_steps
        with pytest.raises(ValueError):
            g.index_of(1.2)

    @pytest.mark.parametrize("kw", [
        dict(t_start=0.0, t_end=1.0, dt=0.0),
        dict(t_start=0.0, t_end=1.0, dt=-0.1),
        dict(t_start=1.0, t_end=1.0, dt=0.1),
        dict(t_start=2.0, t_end=1.0, dt=0.1),
        dict(t_start=float("nan"), t_end=1.0, dt=0.1),
        dict(t_start=0.0, t_end=float("inf"), dt=0.1),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TimeGrid(**kw)


class TestPath:
    def test_length_checked(self):
        g = TimeGrid(0.0, 1.0, 0.5)
        with pytest.raises(ValueError):
            Path(grid=g, q=np.zeros(5))

    def test_finite_checked(self):
        g = TimeGrid(0.0, 1.0, 0.5)
        with pytest.raises(ValueError):
            Path(grid=g, q=np.array([0.0, np.nan, 0.0]))
        with pytest.raises(ValueError):
            Path(grid=g, q=np.zeros(3), p=np.array([0.0, np.inf, 0.0]))

    def test_momentum_length(self):
        g = TimeGrid(0.0, 1.0, 0.5)
        with pytest.raises(ValueError):
            Path(grid=g, q=np.zeros(3), p=np.zeros(4))


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

class TestNoiseStream:
    def setup_method(self):
        self.grid = TimeGrid(-1.0, 0.0, 1.0 / 1024)

    def test_reproducible(self):
        a = NoiseStream(seed=42, grid=self.grid).increments()
        b = NoiseStream(seed=42, grid=self.grid).increments()
        np.testing.assert_array_equal(a, b)

    def test_paths_independent(self):
        a = NoiseStream(seed=42, grid=self.grid, path_index=0).increments()
        b = NoiseStream(seed=42, grid=self.grid, path_index=1).increments()
        assert not np.array_equal(a, b)
        assert abs(float(np.corrcoef(a, b)[0, 1])) < 0.1

    def test_moments(self):
        g = TimeGrid(0.0, 32.0, 1.0 / 1024)
        dw = NoiseStream(seed=3, grid=g).increments()
        assert abs(dw.mean()) < 5.0 * math.sqrt(g.dt / dw.size)
        assert abs(dw.var() / g.dt - 1.0) < 0.05

    def test_bridge_consistency(self):
        ns = NoiseStream(seed=11, grid=self.grid)
        coarse = ns.increments()
        fine = ns.refined().increments()
        assert fine.size == 2 * coarse.size
        np.testing.assert_allclose(fine[0::2] + fine[1::2], coarse,
                                   rtol=0.0, atol=1e-14)
        finest = ns.refined().refined().increments()
        np.testing.assert_allclose(finest.reshape(-1, 4).sum(axis=1), coarse,
                                   rtol=0.0, atol=1e-13)

    def test_refined_variance(self):
        g = TimeGrid(0.0, 16.0, 1.0 / 64)
        fine = NoiseStream(seed=5, grid=g).refined().increments()
        assert abs(fine.var() / (g.dt / 2) - 1.0) < 0.1

    def test_depth_cap(self):
        deep = TimeGrid(0.0, 1.0, 2.0 ** -22)
        at_cap = NoiseStream(seed=1, grid=deep, levels=21)
        with pytest.raises(ValueError):
            NoiseStream(seed=1, grid=deep, levels=22)
        with pytest.raises(ValueError):
            at_cap.refined()

    def test_indivisible_grid(self):
        g = TimeGrid(0.0, 3.0, 1.0)     # 3 steps, not divisible by 2
        with pytest.raises(ValueError):
            NoiseStream(seed=1, grid=g, levels=1)

    def test_aux_and_ic_deterministic(self):
        a = NoiseStream(seed=9, grid=self.grid)
        b = NoiseStream(seed=9, grid=self.grid)
        np.testing.assert_array_equal(a.aux_normals(64), b.aux_normals(64))
        assert a.initial_uniform(-1, 1) == b.initial_uniform(-1, 1)
        assert -1.0 <= a.initial_uniform(-1, 1) <= 1.0

    def test_for_path(self):
        ns = NoiseStream(seed=4, grid=self.grid)
        np.testing.assert_array_equal(
            ns.for_path(7).increments(),
            NoiseStream(seed=4, grid=self.grid, path_index=7).increments())


# ---------------------------------------------------------------------------
# overdamped integrator
# ---------------------------------------------------------------------------

class TestOverdamped:
    def test_zero_noise_convergence_order(self):
        p = params()
        errs = []
        for k in range(4):
            g = TimeGrid(-1.0, 0.5, 1e-3 / 2 ** k)
            path = integrate_overdamped(p, 0.5, g, None)
            ref = deterministic_solve(p, 0.5, g)
            errs.append(abs(path.q[-1] - ref.q[-1]))
        orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
        assert all(o >= 0.9 for o in orders), orders

    def test_bit_for_bit(self):
        p = params()
        g = TimeGrid(-1.0, 0.5, 1e-3)
        ns = NoiseStream(seed=100, grid=g)
        a = integrate_overdamped(p, 0.0, g, ns)
        b = integrate_overdamped(p, 0.0, g, ns)
        np.testing.assert_array_equal(a.q, b.q)

    def test_step_size_guard(self):
        p = params()
        g = TimeGrid(-1.0, 0.5, 0.01)   # dt_max = 0.05*0.02 = 1e-3
        with pytest.raises(StepSizeError):
            integrate_overdamped(p, 0.0, g, None)
        assert dt_max(p) == pytest.approx(1e-3)

    def test_truncation_flagged_not_nan(self):
        p = params()
        g = TimeGrid(-1.0, -0.5, 5e-3)
        path = integrate_overdamped(p, 9.9, g, None, h_rel=0.1)
        assert path.truncated
        assert np.all(np.isfinite(path.q))
        assert np.max(np.abs(path.q)) <= 10.0

    def test_strong_refinement_order(self):
        p = params()
        g0 = TimeGrid(-1.0, 0.5, 1e-3)
        diffs = [[], [], []]
        for k in range(64):
            ns = NoiseStream(seed=777, grid=g0, path_index=k)
            ends = []
            for level in range(4):
                ends.append(integrate_overdamped(p, 0.0, ns.grid, ns).q[-1])
                if level < 3:
                    ns = ns.refined()
            for j in range(3):
                diffs[j].append(abs(ends[j] - ends[j + 1]))
        means = [float(np.mean(d)) for d in diffs]
        orders = [math.log2(a / b) for a, b in zip(means, means[1:])]
        assert all(o >= 0.45 for o in orders), (means, orders)

    def test_pre_transition_moment_bound(self):
        # ensemble second moment at t = -1 from a broad start at -4
        p = NormalFormParams(epsilon=0.05, sigma=1e-3, T=4.0, t2=1.5)
        g = TimeGrid(-4.0, -1.0, 1e-3)
        sq = 0.0
        n = 5000
        for k in range(n):
            ns = NoiseStream(seed=2024, grid=g, path_index=k)
            x0 = ns.initial_uniform(-1.0, 1.0)
            sq += integrate_overdamped(p, x0, g, ns).q[-1] ** 2
        assert sq / n <= 1.2 * (p.epsilon ** 2 + p.sigma ** 2)

    def test_noise_validation(self):
        p = params()
        g = TimeGrid(-1.0, 0.5, 1e-3)
        other = TimeGrid(-1.0, 0.5, 5e-4)
        with pytest.raises(GridMismatchError):
            integrate_overdamped(p, 0.0, g, NoiseStream(seed=1, grid=other))
        with pytest.raises(TypeError):
            integrate_overdamped(p, 0.0, g, np.zeros(g.n_steps))


# ---------------------------------------------------------------------------
# underdamped integrator
# ---------------------------------------------------------------------------

class TestUnderdamped:
    def test_beta_guard(self):
        p = params(beta=1.5)
        g = TimeGrid(-1.0, 0.5, 1e-3)
        with pytest.raises(ValueError):
            integrate_underdamped(p, 0.0, 0.0, g, None)

    def test_massless_limit(self):
        # sigma = 0: distance to the overdamped deterministic path shrinks
        # as the mass exponent grows
        g = TimeGrid(-1.0, 0.5, 1e-3)
        ref = deterministic_solve(params(), 0.5, g)
        window = g.times >= -0.9
        sups = []
        for beta in (2.5, 3.0, 4.0):
            p = params(beta=beta)
            path = integrate_underdamped(p, 0.5, 0.0, g, None)
            sups.append(float(np.max(np.abs(path.q[window] - ref.q[window]))))
        assert sups[0] > sups[1] > sups[2]

    def test_bit_for_bit(self):
        p = params(beta=3.0)
        g = TimeGrid(-1.0, 0.5, 1e-3)
        ns = NoiseStream(seed=8, grid=g)
        a = integrate_underdamped(p, 0.0, 0.0, g, ns)
        b = integrate_underdamped(p, 0.0, 0.0, g, ns)
        np.testing.assert_array_equal(a.q, b.q)
        np.testing.assert_array_equal(a.p, b.p)

    def test_funnel_confinement(self):
        # started at (0, 0) at -2T, paths concentrate by -T
        p = params(beta=3.0)
        g = TimeGrid(-2.0, -1.0, 1e-3)
        n = 2000
        ok_q = ok_p = 0
        for k in range(n):
            path = integrate_underdamped(p, 0.0, 0.0, g,
                                         NoiseStream(seed=55, grid=g, path_index=k))
            ok_q += abs(path.q[-1]) <= 1.0
            ok_p += abs(path.p[-1]) <= p.epsilon ** (-p.beta)
        assert ok_q / n >= 0.99
        assert ok_p / n >= 0.99


# ---------------------------------------------------------------------------
# (Q, P) pair
# ---------------------------------------------------------------------------

class TestOuPair:
    def test_identity(self):
        p = params(beta=3.0, T=4.0, t2=1.5)
        g = TimeGrid(-4.0, 1.5, 1e-3)
        ns = NoiseStream(seed=21, grid=g)
        path = integrate_ou_pair(p, g, ns)
        c = p.sigma / math.sqrt(p.epsilon)
        w = np.concatenate([[0.0], np.cumsum(ns.increments())])
        defect = np.abs(path.q - (c * w - p.epsilon ** p.beta * path.p))
        assert defect.max() <= 1e-10

    def test_zero_noise(self):
        p = params(beta=3.0)
        g = TimeGrid(-1.0, 0.5, 1e-3)
        path = integrate_ou_pair(p, g, None)
        assert np.all(path.q == 0.0) and np.all(path.p == 0.0)

    def test_momentum_stationary_variance(self):
        # the P marginal is the pure momentum OU (the underdamped momentum
        # with the force coupling off); time-average its variance
        p = params(beta=3.0)
        g = TimeGrid(-2.0, 0.0, 1e-3)
        target = p.sigma ** 2 / (2.0 * p.epsilon ** (1.0 + p.beta))
        burn = g.index_of(-1.8)
        acc = []
        for k in range(8):
            path = integrate_ou_pair(p, g, NoiseStream(seed=202, grid=g, path_index=k))
            acc.append(path.p[burn:])
        var = float(np.var(np.concatenate(acc)))
        assert abs(var / target - 1.0) <= 0.02

    def test_sup_q_event_rare(self):
        # fraction of paths with sup|Q| over the threshold, against the
        # one-sided reflection-principle envelope at these parameters
        p = NormalFormParams(epsilon=1e-2, sigma=1e-3, beta=3.0, delta=0.4,
                             T=4.0, t2=1.5)
        g = TimeGrid(-4.0, 1.5, 2e-4)
        thresh = p.sigma * p.epsilon ** (-0.5 - p.delta)
        n = 600
        hits = 0
        for k in range(n):
            path = integrate_ou_pair(p, g, NoiseStream(seed=606, grid=g, path_index=k))
            hits += float(np.max(np.abs(path.q))) > thresh
        envelope = p.t2 * (math.exp(-p.epsilon ** (-2 * p.delta) / (2 * (p.t2 + p.T)))
                           + math.exp(-p.epsilon ** (-2 * p.delta) / 2))
        assert hits / n <= envelope


# ---------------------------------------------------------------------------
# coupled runs
# ---------------------------------------------------------------------------

class TestCoupled:
    def test_identical_specs_identical_paths(self):
        p = params()
        g = TimeGrid(-1.0, 0.5, 1e-3)
        ns = NoiseStream(seed=31, grid=g)
        a, b = integrate_coupled(
            p, [CoupledSpec("overdamped", x0=0.3), CoupledSpec("overdamped", x0=0.3)],
            g, ns)
        np.testing.assert_array_equal(a.q, b.q)

    def test_biased_dominates_unbiased(self):
        p = params(T=1.0, t2=0.5)
        g = TimeGrid(-1.0, 0.5, 1e-3)
        worst = 0.0
        for k in range(20):
            ns = NoiseStream(seed=990, grid=g, path_index=k)
            tilde, q = integrate_coupled(
                p, [CoupledSpec("overdamped", x0=0.0, bias_scale=0.0),
                    CoupledSpec("overdamped", x0=0.5, bias_scale=1.0)], g, ns)
            worst = max(worst, float(np.max(tilde.q - q.q)))
        assert worst <= 1e-8

    def test_start_index_freezes(self):
        p = params()
        g = TimeGrid(-1.0, 0.5, 1e-3)
        ns = NoiseStream(seed=17, grid=g)
        (late,) = integrate_coupled(
            p, [CoupledSpec("overdamped", x0=2.0, start_index=300)], g, ns)
        assert np.all(late.q[:301] == 2.0)
        assert late.q[301] != 2.0

    def test_validation(self):
        p = params(beta=3.0)
        g = TimeGrid(-1.0, 0.5, 1e-3)
        with pytest.raises(ValueError):
            CoupledSpec("nonsense")
        with pytest.raises(ValueError):
            CoupledSpec("ou_pair", start_index=5)
        with pytest.raises(GridMismatchError):
            integrate_coupled(p, [CoupledSpec("overdamped", start_index=10 ** 9)],
                              g, NoiseStream(seed=1, grid=g))

    def test_sandwich_bias_formula(self):
        p = params(eps=1e-2, beta=3.0, delta=0.4)
        r = sandwich_bias(p, big_c=2.0)
        expected = 2.0 * max(1e-2 ** 0.6, 1e-3 * 1e-2 ** (-1.5 + 1.5 - 0.8))
        assert r == pytest.approx(expected, rel=1e-12)
        with pytest.raises(ValueError):
            sandwich_bias(params())


# ---------------------------------------------------------------------------
# chain integrator
# ---------------------------------------------------------------------------

class TestChain:
    def test_deterministic_chain_breaks_right(self):
        # zero noise: the middle particle lags the moving midpoint, so the
        # right-hand gap is the one that opens past the cutoff
        pot = default_potential()
        p = params(eps=0.01, beta=3.0)
        g = TimeGrid(0.0, 1.2, 0.01 * 0.02)
        path = integrate_chain(p, pot, pot.a * 1.0, pot.a, g, None)
        span_end = 2.0 * pot.a * (1.0 + g.t_end)
        assert span_end - path.q[-1] > pot.b      # right bond broken
        assert path.q[-1] < pot.b                 # left bond intact

    def test_reproducible(self):
        pot = default_potential()
        p = params(eps=0.05, beta=3.0)
        g = TimeGrid(0.0, 1.2, 1e-3)
        ns = NoiseStream(seed=404, grid=g)
        a = integrate_chain(p, pot, pot.a, pot.a, g, ns)
        b = integrate_chain(p, pot, pot.a, pot.a, g, ns)
        np.testing.assert_array_equal(a.q, b.q)

    def test_beta_guard(self):
        pot = default_potential()
        with pytest.raises(ValueError):
            integrate_chain(params(beta=2.0), pot, 1.0, 1.0,
                            TimeGrid(0.0, 1.0, 1e-3), None)


# ---------------------------------------------------------------------------
# binary dump
# ---------------------------------------------------------------------------

class TestDump:
    def test_round_trip(self):
        p = params(beta=3.0)
        g = TimeGrid(-1.0, 0.5, 1e-2)
        ns = NoiseStream(seed=5, grid=g)
        paths = [integrate_overdamped(p, 0.0, g, ns, h_rel=0.25),
                 integrate_underdamped(p, 0.1, 0.0, g, ns, h_rel=0.25)]
        buf = io.BytesIO()
        dump_paths(paths, buf)
        buf.seek(0)
        back = load_paths(buf)
        assert len(back) == 2
        for orig, copy in zip(paths, back):
            assert copy.grid == orig.grid
            np.testing.assert_array_equal(copy.q, orig.q)
            assert copy.truncated == orig.truncated
            if orig.p is None:
                assert copy.p is None
            else:
                np.testing.assert_array_equal(copy.p, orig.p)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            load_paths(io.BytesIO(b"XXXX" + b"\x00" * 16))
