import numpy as np
import pytest

from flowcal.assignment import AssignmentConfig, solve_user_equilibrium
from flowcal.calibration import (
    CalibrationConfig,
    DemandSimulator,
    calibration_objective,
    latin_hypercube_design,
    run_calibration,
    _merge_close_points,
)
from flowcal.errors import ConfigError
from flowcal.network import ODMatrix
from flowcal.neural import AutoencoderRegressor

from conftest import parallel_link_net


@pytest.fixture
def small_scenario():
    """Two parallel links 1->2 plus a return link, one unknown demand pair."""
    net = parallel_link_net(fft=(1.0, 2.0), capacity=(1.0, 1.0))
    od = ODMatrix({(1, 2): 4.0, (2, 1): 2.0}, 2)
    return net, od


class TestLatinHypercube:
    def test_two_point_one_dim_stratification(self):
        pts = latin_hypercube_design([0.0], [10.0], 2, seed=3)
        lo, hi = sorted(pts.ravel())
        assert 0 <= lo < 5 <= hi < 10

    def test_every_stratum_hit_once(self):
        for seed in range(5):
            pts = latin_hypercube_design(np.zeros(4), np.ones(4), 9, seed=seed)
            for j in range(4):
                strata = np.floor(np.sort(pts[:, j]) * 9).astype(int)
                assert list(strata) == list(range(9))

    def test_seed_sensitivity(self):
        a = latin_hypercube_design(np.zeros(20), np.full(20, 7000.0), 40, seed=0)
        b = latin_hypercube_design(np.zeros(20), np.full(20, 7000.0), 40, seed=1)
        assert not np.array_equal(a, b)

    def test_within_bounds(self):
        pts = latin_hypercube_design(np.full(3, -2.0), np.full(3, 5.0), 11, seed=9)
        assert np.all(pts >= -2.0) and np.all(pts <= 5.0)

    def test_requires_two_points(self):
        with pytest.raises(ValueError):
            latin_hypercube_design([0.0], [1.0], 1, seed=0)


class TestObjective:
    def test_true_candidate_no_noise_is_zero(self, small_scenario):
        net, od = small_scenario
        sim = DemandSimulator(net, od, od.pairs()[:1], AssignmentConfig(), 0.0)
        true_times = solve_user_equilibrium(net, od, AssignmentConfig()).link_times
        true_theta = np.array([od[od.pairs()[0]]])
        assert calibration_objective(sim, true_theta, true_times, seed=0) == 0.0

    def test_zero_candidate_positive(self, small_scenario):
        net, od = small_scenario
        sim = DemandSimulator(net, od, od.pairs()[:1], AssignmentConfig(), 0.0)
        true_times = solve_user_equilibrium(net, od, AssignmentConfig()).link_times
        assert calibration_objective(sim, np.zeros(1), true_times, seed=0) > 0.0

    def test_noisy_true_candidate_matches_half_normal_oracle(self, small_scenario):
        # E |sim - true| / true = E|eps| = sigma * sqrt(2/pi) when no clamping
        net, od = small_scenario
        sigma = 0.05
        sim = DemandSimulator(net, od, od.pairs()[:1], AssignmentConfig(), sigma)
        true_times = solve_user_equilibrium(net, od, AssignmentConfig()).link_times
        true_theta = np.array([od[od.pairs()[0]]])
        values = [
            calibration_objective(sim, true_theta, true_times, seed=s)
            for s in range(200)
        ]
        expect = sigma * np.sqrt(2 / np.pi)
        abs_eps_sd = sigma * np.sqrt(1 - 2 / np.pi)
        se = abs_eps_sd / np.sqrt(200 * len(true_times))
        assert abs(np.mean(values) - expect) <= 3 * se

    def test_merged_od_replaces_unknown_pairs_only(self, small_scenario):
        net, od = small_scenario
        sim = DemandSimulator(net, od, od.pairs()[:1], AssignmentConfig(), 0.0)
        merged = sim.merged_od(np.array([9.5]))
        assert merged[(1, 2)] == 9.5
        assert merged[(2, 1)] == od[(2, 1)]


def small_cfg(**overrides):
    kwargs = dict(
        unknown_pair_count=1,
        lower_bound=0.0,
        upper_bound=8.0,
        initial_design_size=4,
        batch_size=2,
        iteration_budget=8,
        retrain_interval=1,
        noise_sigma=0.02,
        seed=0,
        latent_dim=1,
        metamodel_epochs=40,
    )
    kwargs.update(overrides)
    return CalibrationConfig(**kwargs)


class TestRunCalibration:
    def test_budget_equal_design_is_pure_space_filling(self, small_scenario):
        net, od = small_scenario
        cfg = small_cfg(iteration_budget=4)
        state = run_calibration(cfg, net, od, mode="full-space")
        assert len(state.evaluated) == 4
        assert len(state.trace) == 1
        assert state.best_objective == min(state.objectives())

    def test_budget_below_design_rejected(self, small_scenario):
        with pytest.raises(ConfigError):
            small_cfg(iteration_budget=3)

    def test_best_trace_non_increasing_both_modes(self, small_scenario):
        net, od = small_scenario
        for mode in ("latent", "full-space"):
            state = run_calibration(small_cfg(), net, od, mode=mode)
            best = [b for _, _, b in state.trace]
            assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
            running = np.minimum.accumulate(state.objectives())
            assert state.best_objective == running[-1]

    def test_all_candidates_within_bounds(self, small_scenario):
        net, od = small_scenario
        for mode in ("latent", "full-space"):
            state = run_calibration(small_cfg(), net, od, mode=mode)
            thetas = state.thetas()
            assert np.all(thetas >= 0.0) and np.all(thetas <= 8.0)

    def test_concurrent_equals_sequential(self, small_scenario):
        net, od = small_scenario
        sequential = run_calibration(small_cfg(n_jobs=1), net, od, mode="full-space")
        concurrent = run_calibration(small_cfg(n_jobs=3), net, od, mode="full-space")
        np.testing.assert_array_equal(sequential.thetas(), concurrent.thetas())
        np.testing.assert_array_equal(sequential.objectives(), concurrent.objectives())
        assert sequential.trace == concurrent.trace

    def test_deterministic_per_seed(self, small_scenario):
        net, od = small_scenario
        a = run_calibration(small_cfg(), net, od, mode="latent")
        b = run_calibration(small_cfg(), net, od, mode="latent")
        np.testing.assert_array_equal(a.thetas(), b.thetas())
        assert a.trace == b.trace

    def test_unknown_mode_rejected(self, small_scenario):
        net, od = small_scenario
        with pytest.raises(ConfigError):
            run_calibration(small_cfg(), net, od, mode="active-subspace")

    def test_shared_initial_design_across_modes(self, small_scenario):
        net, od = small_scenario
        latent = run_calibration(small_cfg(), net, od, mode="latent")
        full = run_calibration(small_cfg(), net, od, mode="full-space")
        np.testing.assert_array_equal(latent.thetas()[:4], full.thetas()[:4])
        np.testing.assert_array_equal(latent.objectives()[:4], full.objectives()[:4])


class TestMergeClosePoints:
    def test_distinct_points_untouched(self):
        Z = np.array([[0.0, 0.0], [1.0, 1.0]])
        v = np.array([1.0, 2.0])
        Zm, vm = _merge_close_points(Z, v)
        np.testing.assert_array_equal(Zm, Z)
        np.testing.assert_array_equal(vm, v)

    def test_near_duplicates_averaged(self):
        Z = np.array([[0.0, 0.0], [0.0, 1e-12], [1.0, 1.0]])
        v = np.array([1.0, 3.0, 5.0])
        Zm, vm = _merge_close_points(Z, v)
        assert len(Zm) == 2
        np.testing.assert_allclose(vm, [2.0, 5.0])


@pytest.fixture(scope="module")
def sioux_training_set():
    from flowcal.datasets import load_sioux_falls

    net, od = load_sioux_falls()
    sim = DemandSimulator(net, od, od.pairs()[:20], AssignmentConfig(), 0.0)
    thetas = latin_hypercube_design(np.zeros(20), np.full(20, 7000.0), 8, seed=5)
    times = np.array([sim.arc_times(t, s) for s, t in enumerate(thetas)])
    return thetas, times


class TestMetamodelOnSimulatorData:
    def test_loss_trace_finite_and_decreasing(self, sioux_training_set):
        thetas, times = sioux_training_set
        est = AutoencoderRegressor(latent_dim=5, epochs=120, seed=0,
                                   bounds=(0.0, 7000.0))
        est.fit(thetas, times)
        trace = est.loss_trace_
        assert np.all(np.isfinite(trace))
        assert trace[-1] <= trace[0]

    def test_latent_dim_two_gives_full_rank_covariance(self, sioux_training_set):
        thetas, times = sioux_training_set
        est = AutoencoderRegressor(latent_dim=2, epochs=120, seed=0,
                                   bounds=(0.0, 7000.0))
        est.fit(thetas, times)
        Z = est.transform(thetas)
        singular = np.linalg.svd(np.cov(Z.T), compute_uv=False)
        assert np.sum(singular > 1e-10) == 2
