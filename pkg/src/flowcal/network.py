"""Road networks and demand matrices in the TNTP text format.

The TNTP conventions implemented here follow the public TransportationNetworks
repository: metadata lines like ``<NUMBER OF NODES> 24``, comment lines
starting with ``~``, and data rows terminated by ``;``.  Net-file data columns
are (init node, term node, capacity, length, free flow time, B, power, speed,
toll, type); B and power are the volume-delay parameters.  Node ids are
1-based in the files; internal link arrays are 0-indexed.

Parsed structures are immutable after construction and safe to share across
concurrent workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

_NET_COLUMNS = 10  # init, term, capacity, length, fft, B, power, speed, toll, type


@dataclass(frozen=True)
class Link:
    """One directed road segment with BPR volume-delay parameters."""

    id: int
    from_node: int
    to_node: int
    capacity: float
    free_flow_time: float
    vdf_alpha: float
    vdf_beta: float
    length: float = 0.0
    speed: float = 0.0
    toll: float = 0.0
    link_type: int = 1


@dataclass(frozen=True)
class Network:
    """Directed road graph over 1-based node ids.

    ``zones`` counts the traffic analysis zones, which by TNTP convention are
    nodes ``1..zones``.  ``adjacency`` maps each node to the indices of its
    outgoing links (in file order).
    """

    nodes: tuple[int, ...]
    zones: int
    links: tuple[Link, ...]
    first_thru_node: int = 1
    adjacency: dict[int, tuple[int, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.adjacency:
            adj: dict[int, list[int]] = {n: [] for n in self.nodes}
            for i, link in enumerate(self.links):
                adj.setdefault(link.from_node, []).append(i)
            object.__setattr__(
                self, "adjacency", {n: tuple(ix) for n, ix in adj.items()}
            )

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def zone_nodes(self) -> tuple[int, ...]:
        return tuple(range(1, self.zones + 1))


class ODMatrix:
    """Origin-destination demand in vehicles/hour.

    Only strictly positive off-diagonal entries are stored.  The calibration
    vector ordering is the deterministic lexicographic (origin, destination)
    sequence of the stored pairs, exposed through :meth:`pairs`,
    :meth:`to_vector` and :meth:`from_vector`.
    """

    def __init__(self, demand: dict[tuple[int, int], float], zones: int):
        cleaned: dict[tuple[int, int], float] = {}
        for (o, d), v in demand.items():
            if o == d or v == 0.0:
                continue
            if v < 0:
                raise ValidationError(f"negative demand {v} for pair ({o}, {d})")
            cleaned[(o, d)] = float(v)
        self._demand = cleaned
        self._pairs = tuple(sorted(cleaned))
        self.zones = zones

    @property
    def demand(self) -> dict[tuple[int, int], float]:
        return dict(self._demand)

    def pairs(self) -> tuple[tuple[int, int], ...]:
        return self._pairs

    def __len__(self) -> int:
        return len(self._pairs)

    def __getitem__(self, pair: tuple[int, int]) -> float:
        return self._demand.get(pair, 0.0)

    def __eq__(self, other) -> bool:
        return isinstance(other, ODMatrix) and (
            self._demand == other._demand and self.zones == other.zones
        )

    def total(self) -> float:
        return float(sum(self._demand.values()))

    def by_origin(self) -> dict[int, list[tuple[int, float]]]:
        out: dict[int, list[tuple[int, float]]] = {}
        for (o, d), v in sorted(self._demand.items()):
            out.setdefault(o, []).append((d, v))
        return out

    def to_vector(self) -> np.ndarray:
        return np.array([self._demand[p] for p in self._pairs], dtype=float)

    def from_vector(self, values: np.ndarray) -> "ODMatrix":
        """Rebuild a matrix with this matrix's pair ordering and new values."""
        if len(values) != len(self._pairs):
            raise ValidationError(
                f"expected {len(self._pairs)} values, got {len(values)}"
            )
        return ODMatrix(dict(zip(self._pairs, map(float, values))), self.zones)

    def with_updates(self, updates: dict[tuple[int, int], float]) -> "ODMatrix":
        """Copy with some pair values replaced (zeros drop the pair)."""
        merged = dict(self._demand)
        for pair, v in updates.items():
            if v == 0.0:
                merged.pop(pair, None)
            else:
                merged[pair] = float(v)
        return ODMatrix(merged, self.zones)

    def scaled(self, factor: float) -> "ODMatrix":
        return ODMatrix({p: v * factor for p, v in self._demand.items()}, self.zones)


def _data_lines(text: str):
    """Yield (1-based line number, content) with comments and blanks removed."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        yield lineno, line


def _split_metadata(text: str):
    """Separate TNTP metadata from data rows.

    Returns (metadata dict, list of (lineno, line) data rows).  Everything
    after ``<END OF METADATA>`` is data; metadata tags elsewhere are also
    accepted because some published files omit the end marker.
    """
    meta: dict[str, str] = {}
    rows: list[tuple[int, str]] = []
    in_data = False
    for lineno, line in _data_lines(text):
        if not in_data and line.startswith("<"):
            end = line.find(">")
            if end < 0:
                raise ParseError("unterminated metadata tag", lineno)
            tag = line[1:end].strip().upper()
            value = line[end + 1 :].strip()
            if tag == "END OF METADATA":
                in_data = True
            else:
                meta[tag] = value
            continue
        in_data = True
        rows.append((lineno, line))
    return meta, rows


def _require_int(meta: dict[str, str], tag: str) -> int:
    if tag not in meta:
        raise ParseError(f"missing metadata header <{tag}>")
    try:
        return int(float(meta[tag]))
    except ValueError as exc:
        raise ParseError(f"non-numeric metadata <{tag}>: {meta[tag]!r}") from exc


def parse_tntp_network(text: str) -> Network:
    """Parse a TNTP net file into a :class:`Network`."""
    meta, rows = _split_metadata(text)
    n_nodes = _require_int(meta, "NUMBER OF NODES")
    n_links = _require_int(meta, "NUMBER OF LINKS")
    zones = _require_int(meta, "NUMBER OF ZONES")
    first_thru = int(meta.get("FIRST THRU NODE", "1") or "1")

    links: list[Link] = []
    for lineno, line in rows:
        body = line.rstrip(";").strip()
        if not body:
            continue
        fields = body.split()
        if fields[0].lower() in ("init_node", "init"):  # optional column header
            continue
        if len(fields) != _NET_COLUMNS:
            raise ParseError(
                f"expected {_NET_COLUMNS} columns, got {len(fields)}", lineno
            )
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"non-numeric field in row: {body!r}", lineno) from exc
        links.append(
            Link(
                id=len(links) + 1,
                from_node=int(values[0]),
                to_node=int(values[1]),
                capacity=values[2],
                length=values[3],
                free_flow_time=values[4],
                vdf_alpha=values[5],
                vdf_beta=values[6],
                speed=values[7],
                toll=values[8],
                link_type=int(values[9]),
            )
        )
    if len(links) != n_links:
        raise ParseError(
            f"<NUMBER OF LINKS> says {n_links} but file has {len(links)} rows"
        )
    return Network(
        nodes=tuple(range(1, n_nodes + 1)),
        zones=zones,
        links=tuple(links),
        first_thru_node=first_thru,
    )


def parse_tntp_trips(text: str) -> ODMatrix:
    """Parse a TNTP trips file into an :class:`ODMatrix`.

    Zero and diagonal entries are dropped.  Destinations outside the declared
    zone range and negative demands raise :class:`ValidationError`.
    """
    meta, rows = _split_metadata(text)
    zones = _require_int(meta, "NUMBER OF ZONES")

    demand: dict[tuple[int, int], float] = {}
    origin: int | None = None
    for lineno, line in rows:
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) < 2:
                raise ParseError("origin line without a zone id", lineno)
            try:
                origin = int(parts[1])
            except ValueError as exc:
                raise ParseError(f"non-numeric origin id {parts[1]!r}", lineno) from exc
            if not 1 <= origin <= zones:
                raise ValidationError(
                    f"line {lineno}: origin {origin} outside zone range 1..{zones}"
                )
            continue
        if origin is None:
            raise ParseError("demand entry before any Origin header", lineno)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise ParseError(f"malformed demand entry {chunk!r}", lineno)
            dest_str, _, flow_str = chunk.partition(":")
            try:
                dest = int(dest_str.strip())
                flow = float(flow_str.strip())
            except ValueError as exc:
                raise ParseError(f"non-numeric demand entry {chunk!r}", lineno) from exc
            if not 1 <= dest <= zones:
                raise ValidationError(
                    f"line {lineno}: destination {dest} outside zone range 1..{zones}"
                )
            if flow < 0:
                raise ValidationError(
                    f"line {lineno}: negative demand {flow} for pair ({origin}, {dest})"
                )
            if dest == origin or flow == 0.0:
                continue
            demand[(origin, dest)] = flow
    return ODMatrix(demand, zones)


def format_tntp_network(net: Network) -> str:
    lines = [
        f"<NUMBER OF ZONES> {net.zones}",
        f"<NUMBER OF NODES> {net.num_nodes}",
        f"<FIRST THRU NODE> {net.first_thru_node}",
        f"<NUMBER OF LINKS> {len(net.links)}",
        "<END OF METADATA>",
        "~ \tinit_node \tterm_node \tcapacity \tlength \tfree_flow_time \tb \tpower \tspeed \ttoll \tlink_type \t;",
    ]
    for ln in net.links:
        lines.append(
            "\t".join(
                [
                    str(ln.from_node),
                    str(ln.to_node),
                    repr(ln.capacity),
                    repr(ln.length),
                    repr(ln.free_flow_time),
                    repr(ln.vdf_alpha),
                    repr(ln.vdf_beta),
                    repr(ln.speed),
                    repr(ln.toll),
                    str(ln.link_type),
                ]
            )
            + "\t;"
        )
    return "\n".join(lines) + "\n"


def format_tntp_trips(od: ODMatrix) -> str:
    lines = [
        f"<NUMBER OF ZONES> {od.zones}",
        f"<TOTAL OD FLOW> {repr(od.total())}",
        "<END OF METADATA>",
        "",
    ]
    for origin, dests in sorted(od.by_origin().items()):
        lines.append(f"Origin {origin}")
        row = []
        for dest, flow in dests:
            row.append(f"{dest} : {repr(flow)}; ")
            if len(row) == 5:
                lines.append("".join(row).rstrip())
                row = []
        if row:
            lines.append("".join(row).rstrip())
        lines.append("")
    return "\n".join(lines)


def network_to_json(net: Network) -> str:
    doc = {
        "format_version": 1,
        "zones": net.zones,
        "nodes": list(net.nodes),
        "first_thru_node": net.first_thru_node,
        "links": [
            {
                "id": ln.id,
                "from": ln.from_node,
                "to": ln.to_node,
                "capacity": ln.capacity,
                "length": ln.length,
                "free_flow_time": ln.free_flow_time,
                "vdf_alpha": ln.vdf_alpha,
                "vdf_beta": ln.vdf_beta,
                "speed": ln.speed,
                "toll": ln.toll,
                "link_type": ln.link_type,
            }
            for ln in net.links
        ],
    }
    return json.dumps(doc, sort_keys=True)


def network_from_json(text: str) -> Network:
    doc = json.loads(text)
    links = tuple(
        Link(
            id=d["id"],
            from_node=d["from"],
            to_node=d["to"],
            capacity=d["capacity"],
            length=d["length"],
            free_flow_time=d["free_flow_time"],
            vdf_alpha=d["vdf_alpha"],
            vdf_beta=d["vdf_beta"],
            speed=d["speed"],
            toll=d["toll"],
            link_type=d["link_type"],
        )
        for d in doc["links"]
    )
    return Network(
        nodes=tuple(doc["nodes"]),
        zones=doc["zones"],
        links=links,
        first_thru_node=doc["first_thru_node"],
    )


def od_to_json(od: ODMatrix) -> str:
    doc = {
        "format_version": 1,
        "zones": od.zones,
        "pairs": [[o, d, v] for (o, d), v in sorted(od.demand.items())],
    }
    return json.dumps(doc, sort_keys=True)


def od_from_json(text: str) -> ODMatrix:
    doc = json.loads(text)
    return ODMatrix({(o, d): v for o, d, v in doc["pairs"]}, doc["zones"])


def _zone_reachability_violations(net: Network) -> list[str]:
    zone_set = set(net.zone_nodes())
    out: list[str] = []
    for origin in net.zone_nodes():
        seen = {origin}
        stack = [origin]
        while stack:
            node = stack.pop()
            for li in net.adjacency.get(node, ()):
                nxt = net.links[li].to_node
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        missing = sorted(zone_set - seen)
        if missing:
            out.append(
                f"zone {missing[0]} unreachable from zone {origin}"
                + (f" ({len(missing)} zones total)" if len(missing) > 1 else "")
            )
    return out


def validate_network(net: Network) -> list[str]:
    """Return a description of every violated invariant (empty list if valid)."""
    violations: list[str] = []
    node_set = set(net.nodes)
    for ln in net.links:
        if ln.capacity <= 0:
            violations.append(f"link {ln.id}: capacity {ln.capacity} is not > 0")
        if ln.free_flow_time <= 0:
            violations.append(
                f"link {ln.id}: free_flow_time {ln.free_flow_time} is not > 0"
            )
        if ln.vdf_alpha < 0:
            violations.append(f"link {ln.id}: vdf_alpha {ln.vdf_alpha} is negative")
        if ln.vdf_beta < 1:
            violations.append(f"link {ln.id}: vdf_beta {ln.vdf_beta} is < 1")
        if ln.from_node == ln.to_node:
            violations.append(f"link {ln.id}: self loop at node {ln.from_node}")
        for endpoint in (ln.from_node, ln.to_node):
            if endpoint not in node_set:
                violations.append(f"link {ln.id}: endpoint {endpoint} is not a node")
    if net.zones > net.num_nodes:
        violations.append(f"{net.zones} zones exceed {net.num_nodes} nodes")
    else:
        violations.extend(_zone_reachability_violations(net))
    return violations
