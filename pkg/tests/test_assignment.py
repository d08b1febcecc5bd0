import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq

from flowcal.assignment import (
    AssignmentConfig,
    all_or_nothing,
    beckmann_objective,
    link_travel_time,
    noisy_arc_times,
    path_links,
    shortest_path_tree,
    solve_user_equilibrium,
)
from flowcal.errors import DataError
from flowcal.network import Link, Network, ODMatrix

from conftest import od_single, parallel_link_net


def mklink(i, a, b, cap=1.0, fft=1.0, alpha=0.15, beta=4.0):
    return Link(id=i, from_node=a, to_node=b, capacity=cap, free_flow_time=fft,
                vdf_alpha=alpha, vdf_beta=beta)


class TestLinkTravelTime:
    def test_zero_flow_is_free_flow(self):
        link = mklink(1, 1, 2, cap=100.0, fft=7.5)
        assert link_travel_time(link, 0.0) == 7.5

    def test_at_capacity(self):
        link = mklink(1, 1, 2, cap=100.0, fft=10.0)
        assert link_travel_time(link, 100.0) == pytest.approx(11.5)

    def test_twice_capacity(self):
        link = mklink(1, 1, 2, cap=100.0, fft=10.0)
        assert link_travel_time(link, 200.0) == pytest.approx(34.0)

    def test_negative_flow_rejected(self):
        with pytest.raises(ValueError):
            link_travel_time(mklink(1, 1, 2), -1.0)

    def test_monotone_in_flow(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            link = mklink(1, 1, 2, cap=rng.uniform(1, 1e4), fft=rng.uniform(0.5, 20),
                          alpha=rng.uniform(0, 1), beta=rng.uniform(1, 8))
            flows = np.sort(rng.uniform(0, 3 * link.capacity, size=10))
            ts = [link_travel_time(link, f) for f in flows]
            assert np.all(np.diff(ts) >= 0)


def floyd_warshall_oracle(net, times):
    """Brute-force all-pairs shortest distances (independent of the solver)."""
    n = net.num_nodes
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for link, t in zip(net.links, times):
        a, b = link.from_node - 1, link.to_node - 1
        dist[a, b] = min(dist[a, b], t)
    for k in range(n):
        dist = np.minimum(dist, dist[:, k : k + 1] + dist[k : k + 1, :])
    return dist


class TestShortestPaths:
    def test_two_node_single_link(self):
        net = parse_two_node()
        dist, _, _ = shortest_path_tree(net, np.array([3.0, 3.0]), 1)
        assert dist[1] == 3.0

    def test_parallel_links_first_wins_tie(self):
        net = parallel_link_net(fft=(3.0, 5.0), capacity=(1.0, 1.0))
        dist, _, pred_link = shortest_path_tree(net, np.array([3.0, 5.0, 1.0]), 1)
        assert dist[1] == 3.0
        assert pred_link[1] == 0  # first of the two parallel links

    def test_sioux_falls_free_flow_matches_floyd_warshall(self, sioux_falls_net):
        times = np.array([l.free_flow_time for l in sioux_falls_net.links])
        oracle = floyd_warshall_oracle(sioux_falls_net, times)
        dist, _, _ = shortest_path_tree(sioux_falls_net, times, 1)
        np.testing.assert_allclose(dist, oracle[0], atol=1e-9)

    def test_unreachable_zone_names_pair(self):
        net = Network(nodes=(1, 2), zones=2, links=(mklink(1, 1, 2),))
        with pytest.raises(DataError, match="zone 2 to zone 1"):
            shortest_path_tree(net, np.array([1.0]), 2)


def parse_two_node():
    links = (mklink(1, 1, 2, cap=2.0, fft=1.0), mklink(2, 2, 1, cap=2.0, fft=1.0))
    return Network(nodes=(1, 2), zones=2, links=links)


class TestAllOrNothing:
    def test_unique_path_conservation(self):
        links = (mklink(1, 1, 2), mklink(2, 2, 3), mklink(3, 3, 1))
        net = Network(nodes=(1, 2, 3), zones=3, links=links)
        flows = all_or_nothing(net, np.ones(3), ODMatrix({(1, 3): 100.0}, 3))
        np.testing.assert_allclose(flows, [100.0, 100.0, 0.0])

    def test_zero_demand(self, sioux_falls_net):
        times = np.array([l.free_flow_time for l in sioux_falls_net.links])
        flows = all_or_nothing(sioux_falls_net, times, ODMatrix({}, 24))
        assert np.all(flows == 0)

    def test_shared_link_adds_demands(self):
        links = (mklink(1, 1, 2), mklink(2, 2, 3), mklink(3, 3, 1), mklink(4, 2, 1))
        net = Network(nodes=(1, 2, 3), zones=3, links=links)
        od = ODMatrix({(1, 2): 30.0, (1, 3): 70.0}, 3)
        flows = all_or_nothing(net, np.array([1.0, 1.0, 1.0, 1.0]), od)
        assert flows[0] == 100.0  # both pairs traverse link 1->2


class TestBeckmann:
    def test_zero_flows(self, sioux_falls_net):
        assert beckmann_objective(sioux_falls_net, np.zeros(76)) == 0.0

    def test_closed_form_single_link(self):
        net = Network(nodes=(1, 2), zones=2,
                      links=(mklink(1, 1, 2, cap=1.0, fft=10.0),))
        assert beckmann_objective(net, np.array([1.0])) == pytest.approx(10.3)

    def test_matches_quadrature_oracle(self, sioux_falls_net):
        rng = np.random.default_rng(11)
        flows = rng.uniform(0, 2e4, size=76)
        expected = 0.0
        for link, x in zip(sioux_falls_net.links, flows):
            val, _ = quad(lambda s, l=link: link_travel_time(l, s), 0, x, limit=200)
            expected += val
        got = beckmann_objective(sioux_falls_net, flows)
        assert got == pytest.approx(expected, rel=1e-8)


class TestUserEquilibrium:
    def test_identical_parallel_links_split_evenly(self):
        net = parallel_link_net(fft=(1.0, 1.0), capacity=(1.0, 1.0))
        sol = solve_user_equilibrium(net, od_single(2.0),
                                     AssignmentConfig(gap_tolerance=1e-10))
        np.testing.assert_allclose(sol.link_flows[:2], [1.0, 1.0], atol=1e-4)

    def test_two_link_equilibrium_matches_root_find_oracle(self, two_link_net):
        # oracle: bisection on t1(x) = t2(d - x)
        d = 2.0
        l1, l2 = two_link_net.links[0], two_link_net.links[1]
        x_star = brentq(
            lambda x: link_travel_time(l1, x) - link_travel_time(l2, d - x), 0, d
        )
        cfg = AssignmentConfig(max_iterations=2000, gap_tolerance=1e-10)
        sol = solve_user_equilibrium(two_link_net, od_single(d), cfg)
        assert sol.link_flows[0] == pytest.approx(x_star, abs=1e-4)
        assert sol.link_flows[1] == pytest.approx(d - x_star, abs=1e-4)

    def test_sioux_falls_converges_with_monotone_beckmann(self, sioux_falls_solution):
        sol, trace = sioux_falls_solution
        assert sol.relative_gap <= 1e-4
        assert sol.iterations <= 1500
        b = np.array(trace.beckmann)
        assert np.all(np.diff(b) <= 1e-10 * np.maximum(1.0, np.abs(b[:-1])))

    def test_solution_internal_consistency(self, sioux_falls_net, sioux_falls_solution):
        sol, _ = sioux_falls_solution
        net_times = [
            link_travel_time(l, f)
            for l, f in zip(sioux_falls_net.links, sol.link_flows)
        ]
        np.testing.assert_allclose(sol.link_times, net_times, rtol=1e-12)
        assert sol.total_system_travel_time == pytest.approx(
            float(np.dot(sol.link_flows, sol.link_times))
        )
        assert sol.relative_gap >= 0

    def test_tstt_equals_path_cost_accumulation_small_net(self, two_link_net):
        # conservation: flow-weighted link cost == demand-weighted O-D cost
        sol = solve_user_equilibrium(
            two_link_net, od_single(2.0),
            AssignmentConfig(max_iterations=2000, gap_tolerance=1e-10),
        )
        od_cost = 2.0 * link_travel_time(two_link_net.links[0], sol.link_flows[0])
        assert sol.total_system_travel_time == pytest.approx(od_cost, rel=1e-3)

    def test_disconnected_pair_raises(self):
        net = Network(nodes=(1, 2, 3), zones=3,
                      links=(mklink(1, 1, 2), mklink(2, 2, 1)))
        with pytest.raises(DataError, match="zone"):
            solve_user_equilibrium(net, ODMatrix({(1, 3): 5.0}, 3))


class TestWardrop:
    def test_used_paths_within_one_percent(self, sioux_falls, sioux_falls_solution):
        net, od = sioux_falls
        sol, trace = sioux_falls_solution
        assert sol.relative_gap <= 1e-4
        rng = np.random.default_rng(42)
        pairs = [od.pairs()[i] for i in rng.choice(len(od), size=20, replace=False)]
        weights = decomposition_weights([lam for lam, _ in trace.recent_aon])
        origin_row = {o: i for i, o in enumerate(trace.origins)}
        for o, d in pairs:
            sp_dist, _, _ = shortest_path_tree(net, sol.link_times, o)
            shortest = sp_dist[d - 1]
            total, weight_sum = 0.0, 0.0
            for w, (_, preds) in zip(weights, trace.recent_aon):
                cost = tree_path_cost(net, preds[origin_row[o]], sol.link_times, o, d)
                total += w * cost
                weight_sum += w
            avg_used = total / weight_sum
            assert avg_used <= 1.01 * shortest


def decomposition_weights(lams):
    """Flow share retained by each recent all-or-nothing assignment."""
    weights = []
    for j, lam in enumerate(lams):
        w = lam
        for later in lams[j + 1 :]:
            w *= 1.0 - later
        weights.append(w)
    return weights


def tree_path_cost(net, pred_nodes, times, origin, dest):
    # predecessor-node chain -> cheapest link per hop at the final times
    cost = 0.0
    v = dest - 1
    while v != origin - 1:
        u = pred_nodes[v]
        assert u >= 0, f"no tree path {origin}->{dest}"
        hop = min(
            (times[i] for i, l in enumerate(net.links)
             if l.from_node - 1 == u and l.to_node - 1 == v),
        )
        cost += hop
        v = u
    return cost


class TestNoisyArcTimes:
    def test_sigma_zero_is_deterministic_equilibrium(self, two_link_net):
        cfg = AssignmentConfig()
        base = solve_user_equilibrium(two_link_net, od_single(2.0), cfg).link_times
        noisy = noisy_arc_times(two_link_net, od_single(2.0), cfg, 0.0, seed=1)
        np.testing.assert_array_equal(noisy, base)

    def test_same_seed_same_output(self, two_link_net):
        cfg = AssignmentConfig()
        a = noisy_arc_times(two_link_net, od_single(2.0), cfg, 0.05, seed=9)
        b = noisy_arc_times(two_link_net, od_single(2.0), cfg, 0.05, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_noise_factor_mean_within_three_standard_errors(self, two_link_net):
        # congested link (time well above free flow), so the clamp never binds
        cfg = AssignmentConfig()
        od = od_single(4.0)
        base = solve_user_equilibrium(two_link_net, od, cfg).link_times
        sigma = 0.05
        n_seeds = 1000
        factors = np.empty(n_seeds)
        for s in range(n_seeds):
            noisy = noisy_arc_times(two_link_net, od, cfg, sigma, seed=s)
            factors[s] = noisy[0] / base[0]
        se = sigma / np.sqrt(n_seeds)
        assert abs(factors.mean() - 1.0) <= 3 * se

    def test_times_never_below_free_flow(self, two_link_net):
        cfg = AssignmentConfig()
        noisy = noisy_arc_times(two_link_net, od_single(0.1), cfg, 0.5, seed=3)
        ffts = np.array([l.free_flow_time for l in two_link_net.links])
        assert np.all(noisy >= ffts)


class TestVolumeDelayMonotonicityProperty:
    def test_vectorized_times_monotone(self, sioux_falls_net):
        from flowcal.assignment import _graph

        g = _graph(sioux_falls_net)
        rng = np.random.default_rng(5)
        x1 = rng.uniform(0, 2e4, size=76)
        x2 = x1 + rng.uniform(0, 1e4, size=76)
        assert np.all(g.times_at(x2) >= g.times_at(x1))
