"""Cluster simulator: background draws, offspring generation, full cascades."""

import math

import numpy as np
import pytest

from seppx.baseline import BaselineDesign, BaselineParams
from seppx.core import BACKGROUND
from seppx.gp_trigger import (
    InducingGrid,
    SeparableTimeSpaceMark,
    TriggerParams,
    decompose,
    feature_map,
    sample_omega_prior,
)
from seppx.marks import ExtremeTail, MarkMixture, ZeroInflatedBody
from seppx.simulate import (
    SimConfig,
    simulate_background,
    simulate_hawkes,
    simulate_offspring,
)


def _basis(resolution=4, rank=12):
    kernel = SeparableTimeSpaceMark(0.3, 1.0, 1.0, "rq")
    return kernel, decompose(kernel, InducingGrid(resolution), rank=rank)


def _mixture():
    return MarkMixture(
        body_weight=0.9,
        threshold=2,
        body=ZeroInflatedBody("zip", alpha=0.2, beta=1.0),
        tail=ExtremeTail("gzd", xi=0.3, sigma=1.0),
    )


class TestSimConfig:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            SimConfig(offspring_mode="tree")
        with pytest.raises(ValueError):
            SimConfig(mark_mode="lognormal")

    def test_mixture_mode_needs_mixture_and_ceiling(self):
        with pytest.raises(ValueError):
            SimConfig(mark_mode="mixture")
        with pytest.raises(ValueError):
            SimConfig(mark_mode="mixture", mark_mixture=_mixture())
        cfg = SimConfig(mark_mode="mixture", mark_mixture=_mixture(),
                        mark_ceiling=200.0)
        assert cfg.effective_ceiling == 200.0

    def test_uniform_mode_unit_ceiling(self):
        assert SimConfig().effective_ceiling == 1.0


class TestBackground:
    def test_points_inside_unit_window(self):
        design = BaselineDesign.intercept_only()
        params = BaselineParams([math.log(80.0)])
        pts = simulate_background(design, params, SimConfig(),
                                  np.random.default_rng(0))
        assert pts.shape[1] == 3
        assert np.all((pts >= 0.0) & (pts < 1.0))

    def test_count_matches_rate(self):
        # constant rate lambda: total count over R replicates is
        # Poisson(R lambda); check within 4.5 sigma
        design = BaselineDesign.intercept_only()
        lam = 60.0
        params = BaselineParams([math.log(lam)])
        rng = np.random.default_rng(1)
        reps = 200
        total = sum(
            simulate_background(design, params, SimConfig(), rng).shape[0]
            for _ in range(reps)
        )
        mean = reps * lam
        assert abs(total - mean) < 4.5 * math.sqrt(mean)

    def test_zero_rate_gives_empty(self):
        design = BaselineDesign.intercept_only()
        params = BaselineParams([-30.0])
        pts = simulate_background(design, params, SimConfig(),
                                  np.random.default_rng(2))
        assert pts.shape == (0, 3)

    def test_thinning_tracks_spatial_trend(self):
        # mu proportional to exp(2x): E[x] = (e^2+1)/(2(e^2-1)) under the
        # normalized density
        design = BaselineDesign()
        params = BaselineParams([math.log(40.0), 2.0, 0.0, 0.0, 0.0, 0.0])
        rng = np.random.default_rng(3)
        xs = np.concatenate([
            simulate_background(design, params, SimConfig(), rng)[:, 1]
            for _ in range(60)
        ])
        want = (math.e**2 + 1.0) / (2.0 * (math.e**2 - 1.0))
        se = xs.std(ddof=1) / math.sqrt(xs.size)
        assert abs(xs.mean() - want) < 4.5 * se


class TestOffspring:
    def test_zero_weights_spawn_nothing(self):
        kernel, basis = _basis()
        trig = TriggerParams(np.zeros(basis.rank), amplitude=1.0, gamma=0.1)
        kids = simulate_offspring(0.2, (0.5, 0.5), 0.4, trig, kernel, basis,
                                  SimConfig(n_particles=100),
                                  np.random.default_rng(4))
        assert kids.shape == (0, 3)

    def test_offspring_after_parent_and_inside_window(self):
        kernel, basis = _basis()
        rng = np.random.default_rng(5)
        omega = sample_omega_prior(basis, 1.0, 0.05, rng) * 2.0
        trig = TriggerParams(omega, amplitude=1.0, gamma=0.05)
        got_any = False
        for seed in range(6, 12):
            kids = simulate_offspring(0.3, (0.4, 0.6), 0.5, trig, kernel,
                                      basis, SimConfig(n_particles=200),
                                      np.random.default_rng(seed))
            if kids.size:
                got_any = True
                assert np.all(kids[:, 0] > 0.3)
                assert np.all(kids[:, 0] < 1.0)
                assert np.all((kids[:, 1:] >= 0.0) & (kids[:, 1:] <= 1.0))
        assert got_any

    def test_mean_count_matches_quadrature(self):
        # average offspring count should equal a * omega' I omega with I
        # the exact feature outer-product integral (Gauss-Legendre oracle)
        kernel, basis = _basis(resolution=3, rank=6)
        rng = np.random.default_rng(7)
        omega = sample_omega_prior(basis, 1.0, 0.1, rng)
        trig = TriggerParams(omega, amplitude=1.5, gamma=0.1)
        t_root, s_root, m_root = 0.25, (0.4, 0.55), 0.5

        nodes, weights = np.polynomial.legendre.leggauss(24)
        x01, w01 = 0.5 * (nodes + 1.0), 0.5 * weights
        V, SX, SY = np.meshgrid(x01, x01, x01, indexing="ij")
        W = (w01[:, None, None] * w01[None, :, None] * w01[None, None, :]).ravel()
        dt = V.ravel() * (1.0 - t_root)
        ds = np.hypot(SX.ravel() - s_root[0], SY.ravel() - s_root[1])
        F = feature_map(np.column_stack([dt, ds, np.full(dt.size, m_root)]),
                        kernel, basis)
        oracle = (1.0 - t_root) * (F.T * W[None, :]) @ F
        want = trig.amplitude * float(omega @ oracle @ omega)

        counts = [
            simulate_offspring(t_root, s_root, m_root, trig, kernel, basis,
                               SimConfig(n_particles=300),
                               np.random.default_rng(100 + i)).shape[0]
            for i in range(500)
        ]
        counts = np.asarray(counts, dtype=float)
        se = counts.std(ddof=1) / math.sqrt(counts.size)
        assert abs(counts.mean() - want) < 5.0 * se

    def test_runaway_cluster_raises(self):
        kernel, basis = _basis(resolution=3, rank=4)
        trig = TriggerParams(np.full(basis.rank, 50.0), amplitude=100.0,
                             gamma=0.1)
        with pytest.raises(RuntimeError):
            simulate_offspring(0.0, (0.5, 0.5), 0.5, trig, kernel, basis,
                               SimConfig(n_particles=100),
                               np.random.default_rng(8))


class TestHawkes:
    def setup_method(self):
        self.design = BaselineDesign.intercept_only()
        self.params = BaselineParams([math.log(50.0)])
        self.kernel, self.basis = _basis()
        rng = np.random.default_rng(9)
        omega = sample_omega_prior(self.basis, 1.0, 0.1, rng)
        self.trig = TriggerParams(omega, amplitude=1.0, gamma=0.1)

    def test_pattern_sorted_and_structure_valid(self):
        pattern, branching = simulate_hawkes(
            self.design, self.params, self.trig, self.kernel, self.basis,
            SimConfig(n_particles=200, seed=10))
        assert len(pattern) > 0
        assert np.all(np.diff(pattern.times) > 0)
        # BranchingStructure validates parent < child on construction;
        # spot check the invariants anyway
        parents = branching.parents
        assert parents.size == len(pattern)
        trigd = parents != BACKGROUND
        assert np.all(parents[trigd] < np.nonzero(trigd)[0])

    def test_root_mode_single_generation(self):
        pattern, branching = simulate_hawkes(
            self.design, self.params, self.trig, self.kernel, self.basis,
            SimConfig(n_particles=200, seed=11, offspring_mode="root"))
        parents = branching.parents
        for i, p in enumerate(parents):
            if p != BACKGROUND:
                assert parents[p] == BACKGROUND  # parents are always roots

    def test_chain_mode_produces_valid_structure(self):
        pattern, branching = simulate_hawkes(
            self.design, self.params, self.trig, self.kernel, self.basis,
            SimConfig(n_particles=200, seed=12, offspring_mode="chain"))
        assert len(pattern) == branching.parents.size
        assert np.all(np.diff(pattern.times) > 0)

    def test_uniform_marks(self):
        pattern, _ = simulate_hawkes(
            self.design, self.params, self.trig, self.kernel, self.basis,
            SimConfig(n_particles=200, seed=13))
        assert np.all((pattern.marks > 0.0) & (pattern.marks < 1.0))
        assert pattern.domain.mark_ceiling == 1.0

    def test_mixture_marks_are_counts(self):
        cfg = SimConfig(n_particles=200, seed=14, mark_mode="mixture",
                        mark_mixture=_mixture(), mark_ceiling=200.0)
        pattern, _ = simulate_hawkes(
            self.design, self.params, self.trig, self.kernel, self.basis, cfg)
        assert pattern.domain.mark_ceiling == 200.0
        assert np.all(pattern.marks == np.floor(pattern.marks))
        assert np.all(pattern.marks >= 0)

    def test_seed_reproducibility(self):
        a, ba = simulate_hawkes(self.design, self.params, self.trig,
                                self.kernel, self.basis,
                                SimConfig(n_particles=150, seed=15))
        b, bb = simulate_hawkes(self.design, self.params, self.trig,
                                self.kernel, self.basis,
                                SimConfig(n_particles=150, seed=15))
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.marks, b.marks)
        np.testing.assert_array_equal(ba.parents, bb.parents)

    def test_triggered_fraction_grows_with_amplitude(self):
        quiet = TriggerParams(self.trig.omega, amplitude=0.2, gamma=0.1)
        loud = TriggerParams(self.trig.omega * 3.0, amplitude=3.0, gamma=0.1)
        _, b_quiet = simulate_hawkes(self.design, self.params, quiet,
                                     self.kernel, self.basis,
                                     SimConfig(n_particles=200, seed=16))
        _, b_loud = simulate_hawkes(self.design, self.params, loud,
                                    self.kernel, self.basis,
                                    SimConfig(n_particles=200, seed=16))
        frac_q = np.mean(b_quiet.parents != BACKGROUND)
        frac_l = np.mean(b_loud.parents != BACKGROUND)
        assert frac_l > frac_q
