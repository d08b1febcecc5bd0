"""Bundled test networks.

The Sioux-Falls network (24 zones, 24 intersections, 76 directional roads)
ships with the package in TNTP format so the solver, calibration, and CLI can
run out of the box.  ``demand_scale`` rescales the trips table; the bundled
values are the dataset's published hourly-demand figures.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..network import Network, ODMatrix, parse_tntp_network, parse_tntp_trips

_NET_FILE = "siouxfalls_net.tntp"
_TRIPS_FILE = "siouxfalls_trips.tntp"


def sioux_falls_paths() -> tuple[Path, Path]:
    """Filesystem paths of the vendored net and trips files."""
    base = resources.files("flowcal.datasets")
    return Path(str(base / _NET_FILE)), Path(str(base / _TRIPS_FILE))


def load_sioux_falls(demand_scale: float = 1.0) -> tuple[Network, ODMatrix]:
    net_path, trips_path = sioux_falls_paths()
    net = parse_tntp_network(net_path.read_text())
    trips = parse_tntp_trips(trips_path.read_text())
    if demand_scale != 1.0:
        trips = trips.scaled(demand_scale)
    return net, trips
