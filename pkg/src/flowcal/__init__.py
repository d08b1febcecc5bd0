"""Traffic equilibrium simulation, O-D demand calibration, and demand scheduling.

Subpackages and modules:

- ``network``: TNTP parsing, road network / demand matrix types, validation.
- ``assignment``: Frank-Wolfe user-equilibrium solver (the "simulator").
- ``neural``: from-scratch MLPs, the shared-encoder autoencoder+regressor.
- ``gp``: Gaussian-process surrogate, expected improvement, batch proposals.
- ``calibration``: latent-space Bayesian optimization of O-D demand.
- ``dqn``: demand-scheduling environment and deep Q-learning agent.
- ``datasets``: bundled Sioux-Falls fixture.
- ``cli``: the ``flowcal`` command-line entry point.
"""

__version__ = "0.1.0"

from .assignment import (
    AssignmentConfig,
    FlowSolution,
    all_or_nothing,
    beckmann_objective,
    link_travel_time,
    noisy_arc_times,
    shortest_path_tree,
    solve_user_equilibrium,
)
from .network import (
    Link,
    Network,
    ODMatrix,
    parse_tntp_network,
    parse_tntp_trips,
    validate_network,
)

__all__ = [
    "AssignmentConfig",
    "FlowSolution",
    "Link",
    "Network",
    "ODMatrix",
    "all_or_nothing",
    "beckmann_objective",
    "link_travel_time",
    "noisy_arc_times",
    "parse_tntp_network",
    "parse_tntp_trips",
    "shortest_path_tree",
    "solve_user_equilibrium",
    "validate_network",
    "__version__",
]
