import numpy as np
import pytest

from flowcal.assignment import AssignmentConfig, solve_user_equilibrium
from flowcal.datasets import load_sioux_falls
from flowcal.network import Link, Network, ODMatrix


@pytest.fixture(scope="session")
def sioux_falls():
    return load_sioux_falls()


@pytest.fixture(scope="session")
def sioux_falls_net(sioux_falls):
    return sioux_falls[0]


@pytest.fixture(scope="session")
def sioux_falls_od(sioux_falls):
    return sioux_falls[1]


@pytest.fixture(scope="session")
def sioux_falls_solution(sioux_falls):
    """Converged equilibrium (needs more than the default iteration cap)."""
    net, od = sioux_falls
    cfg = AssignmentConfig(max_iterations=1500, gap_tolerance=1e-4)
    return solve_user_equilibrium(net, od, cfg, full_output=True)


def parallel_link_net(fft=(1.0, 2.0), capacity=(1.0, 1.0), alpha=0.15, beta=4.0):
    """Two parallel links from zone 1 to zone 2."""
    links = tuple(
        Link(
            id=i + 1,
            from_node=1,
            to_node=2,
            capacity=capacity[i],
            free_flow_time=fft[i],
            vdf_alpha=alpha,
            vdf_beta=beta,
        )
        for i in range(len(fft))
    )
    back = Link(
        id=len(links) + 1,
        from_node=2,
        to_node=1,
        capacity=max(capacity),
        free_flow_time=min(fft),
        vdf_alpha=alpha,
        vdf_beta=beta,
    )
    return Network(nodes=(1, 2), zones=2, links=links + (back,))


@pytest.fixture
def two_link_net():
    return parallel_link_net()


def od_single(demand=2.0, zones=2):
    return ODMatrix({(1, 2): demand}, zones)
