"""Leaf-spine topology model: directed links, agent ports, ECMP, mutations.

A topology is a set of nodes (hosts and switches) joined by full-duplex
cables; every cable contributes one directed link per direction. The links
whose source is a switch are the tunable egress ports ("agents"). All
collections are kept in a canonical order (lexicographic by (src, dst)) so
that downstream consumers index agents deterministically.
"""

from __future__ import annotations

import json
import zlib
from collections import deque
from dataclasses import dataclass

HOST = "host"
LEAF = "leaf"
SPINE = "spine"
CORE = "core"
NODE_KINDS = (HOST, LEAF, SPINE, CORE)
SWITCH_KINDS = (LEAF, SPINE, CORE)


class TopologyError(ValueError):
    """Malformed topology or invalid operation argument."""


class DisconnectedTopologyError(TopologyError):
    """A mutation (or input file) would leave the graph disconnected."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str


@dataclass(frozen=True)
class Link:
    """One direction of a cable. Links with a switch source are agents."""

    src: str
    dst: str
    capacity_bps: float
    delay_s: float

    @property
    def key(self) -> tuple[str, str]:
        return (self.src, self.dst)


class Topology:
    """Immutable directed multigraph-free network graph.

    Construction validates node/link consistency and connectivity. Instances
    are safe for concurrent read-only use; mutations return new objects.
    """

    def __init__(self, nodes: list[Node], links: list[Link]):
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate node ids")
        for n in nodes:
            if n.kind not in NODE_KINDS:
                raise TopologyError(f"unknown node kind {n.kind!r} for {n.id!r}")
        self.nodes: dict[str, Node] = {n.id: n for n in sorted(nodes, key=lambda n: n.id)}
        seen = set()
        for l in links:
            if l.src not in self.nodes or l.dst not in self.nodes:
                raise TopologyError(f"link {l.src}->{l.dst} references unknown node")
            if l.src == l.dst:
                raise TopologyError(f"self-loop at {l.src}")
            if l.key in seen:
                raise TopologyError(f"duplicate link {l.src}->{l.dst}")
            if l.capacity_bps <= 0 or l.delay_s <= 0:
                raise TopologyError(f"link {l.src}->{l.dst} needs positive capacity and delay")
            seen.add(l.key)
        for l in links:
            if (l.dst, l.src) not in seen:
                raise TopologyError(f"link {l.src}->{l.dst} has no reverse direction")
        self.links: tuple[Link, ...] = tuple(sorted(links, key=lambda l: l.key))
        self._out: dict[str, tuple[Link, ...]] = {nid: () for nid in self.nodes}
        self._in: dict[str, tuple[Link, ...]] = {nid: () for nid in self.nodes}
        for l in self.links:
            self._out[l.src] = self._out[l.src] + (l,)
            self._in[l.dst] = self._in[l.dst] + (l,)
        self._check_connected()
        self._agents = tuple(l for l in self.links if self.is_switch(l.src))
        self._agent_index = {l.key: i for i, l in enumerate(self._agents)}
        self._dist_cache: dict[str, dict[str, int]] = {}

    def is_switch(self, node_id: str) -> bool:
        return self.nodes[node_id].kind in SWITCH_KINDS

    def hosts(self) -> list[str]:
        return [nid for nid, n in self.nodes.items() if n.kind == HOST]

    def out_links(self, node_id: str) -> tuple[Link, ...]:
        return self._out[node_id]

    def in_links(self, node_id: str) -> tuple[Link, ...]:
        return self._in[node_id]

    def _check_connected(self) -> None:
        if not self.nodes:
            raise TopologyError("empty topology")
        start = next(iter(self.nodes))
        seen = {start}
        frontier = deque([start])
        while frontier:
            nid = frontier.popleft()
            for l in self._out[nid] + self._in[nid]:
                other = l.dst if l.src == nid else l.src
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        if len(seen) != len(self.nodes):
            missing = sorted(set(self.nodes) - seen)
            raise DisconnectedTopologyError(f"unreachable nodes: {missing}")

    def dist_to(self, dst: str) -> dict[str, int]:
        """Hop counts from every node to dst, following link directions."""
        cached = self._dist_cache.get(dst)
        if cached is not None:
            return cached
        dist = {dst: 0}
        frontier = deque([dst])
        while frontier:
            nid = frontier.popleft()
            for l in self._in[nid]:
                if l.src not in dist:
                    dist[l.src] = dist[nid] + 1
                    frontier.append(l.src)
        self._dist_cache[dst] = dist
        return dist

    def to_json(self) -> str:
        cables = []
        for l in self.links:
            if l.src < l.dst:
                cables.append(
                    {"a": l.src, "b": l.dst, "capacity_bps": l.capacity_bps, "delay_s": l.delay_s}
                )
        doc = {
            "nodes": [{"id": n.id, "kind": n.kind} for n in self.nodes.values()],
            "cables": cables,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise TopologyError(f"invalid topology JSON: {e}") from e
        try:
            nodes = [Node(str(n["id"]), str(n["kind"])) for n in doc["nodes"]]
            links = []
            for c in doc["cables"]:
                cap = float(c["capacity_bps"])
                delay = float(c["delay_s"])
                links.append(Link(str(c["a"]), str(c["b"]), cap, delay))
                links.append(Link(str(c["b"]), str(c["a"]), cap, delay))
        except (KeyError, TypeError) as e:
            raise TopologyError(f"topology document missing field: {e}") from e
        return cls(nodes, links)


def build_clos(
    hosts_per_leaf: int,
    n_leaf: int,
    n_spine: int,
    host_capacity_bps: float = 25e9,
    fabric_capacity_bps: float = 100e9,
    delay_s: float = 1e-6,
) -> Topology:
    """Two-tier Clos: every leaf cabled to every spine, hosts under leaves."""
    if hosts_per_leaf < 1 or n_leaf < 1 or n_spine < 1:
        raise TopologyError("hosts_per_leaf, n_leaf and n_spine must all be >= 1")
    if host_capacity_bps <= 0 or fabric_capacity_bps <= 0 or delay_s <= 0:
        raise TopologyError("capacities and delay must be positive")
    nodes = []
    links = []

    def cable(a: str, b: str, cap: float) -> None:
        links.append(Link(a, b, cap, delay_s))
        links.append(Link(b, a, cap, delay_s))

    for j in range(n_leaf):
        nodes.append(Node(f"l{j}", LEAF))
    for k in range(n_spine):
        nodes.append(Node(f"s{k}", SPINE))
    for i in range(hosts_per_leaf * n_leaf):
        nodes.append(Node(f"h{i:02d}", HOST))
        cable(f"h{i:02d}", f"l{i // hosts_per_leaf}", host_capacity_bps)
    for j in range(n_leaf):
        for k in range(n_spine):
            cable(f"l{j}", f"s{k}", fabric_capacity_bps)
    return Topology(nodes, links)


def agents(t: Topology) -> tuple[Link, ...]:
    """Tunable egress ports: switch-sourced directed links, canonical order."""
    return t._agents


def agent_index(t: Topology, v: Link) -> int:
    try:
        return t._agent_index[v.key]
    except KeyError:
        raise TopologyError(f"{v.src}->{v.dst} is not an agent port") from None


def ingress_neighbors(t: Topology, v: Link) -> tuple[Link, ...]:
    """Agent ports feeding v: agents whose destination is v's source."""
    agent_index(t, v)
    return tuple(e for e in t._agents if e.dst == v.src)


def egress_neighbors(t: Topology, v: Link) -> tuple[Link, ...]:
    """Agent ports fed by v: agents whose source is v's destination."""
    agent_index(t, v)
    return tuple(e for e in t._agents if e.src == v.dst)


@dataclass(frozen=True)
class RemoveLink:
    a: str
    b: str


@dataclass(frozen=True)
class AddBranch:
    """Graft a sub-fabric: one core over the existing spines, new spines
    under the core, and hosts under the new spines."""

    n_spines: int = 2
    hosts_per_spine: int = 3
    host_capacity_bps: float | None = None
    fabric_capacity_bps: float | None = None
    delay_s: float | None = None


@dataclass(frozen=True)
class AddHosts:
    leaf: str
    count: int
    capacity_bps: float | None = None
    delay_s: float | None = None


def _next_id(t: Topology, prefix: str, width: int = 0) -> int:
    n = 0
    for nid in t.nodes:
        if nid.startswith(prefix) and nid[len(prefix):].isdigit():
            n = max(n, int(nid[len(prefix):]) + 1)
    return n


def _reference_caps(t: Topology) -> tuple[float, float, float]:
    host_cap = fabric_cap = delay = None
    for l in t.links:
        if t.nodes[l.src].kind == HOST:
            host_cap = host_cap or l.capacity_bps
        if t.is_switch(l.src) and t.is_switch(l.dst):
            fabric_cap = fabric_cap or l.capacity_bps
        delay = delay or l.delay_s
    return host_cap or 25e9, fabric_cap or 100e9, delay or 1e-6


def mutate(t: Topology, change) -> Topology:
    """Return a new topology with the change applied.

    Raises DisconnectedTopologyError if the result would not be connected,
    TopologyError for invalid arguments. The input is never modified.
    """
    nodes = list(t.nodes.values())
    links = list(t.links)
    host_cap, fabric_cap, delay = _reference_caps(t)

    def cable(a: str, b: str, cap: float, dl: float) -> None:
        links.append(Link(a, b, cap, dl))
        links.append(Link(b, a, cap, dl))

    if isinstance(change, RemoveLink):
        fwd = [l for l in links if l.key == (change.a, change.b)]
        rev = [l for l in links if l.key == (change.b, change.a)]
        if not fwd or not rev:
            raise TopologyError(f"no cable between {change.a!r} and {change.b!r}")
        links = [l for l in links if l.key not in ((change.a, change.b), (change.b, change.a))]
    elif isinstance(change, AddBranch):
        if change.n_spines < 1 or change.hosts_per_spine < 0:
            raise TopologyError("branch needs at least one spine")
        hcap = change.host_capacity_bps or host_cap
        fcap = change.fabric_capacity_bps or fabric_cap
        dl = change.delay_s or delay
        core_id = f"c{_next_id(t, 'c')}"
        nodes.append(Node(core_id, CORE))
        old_spines = [n.id for n in t.nodes.values() if n.kind == SPINE]
        if not old_spines:
            raise TopologyError("add_branch needs an existing spine tier")
        for sid in old_spines:
            cable(core_id, sid, fcap, dl)
        spine_base = _next_id(t, "s")
        host_base = _next_id(t, "h")
        for k in range(change.n_spines):
            sid = f"s{spine_base + k}"
            nodes.append(Node(sid, SPINE))
            cable(core_id, sid, fcap, dl)
            for m in range(change.hosts_per_spine):
                hid = f"h{host_base + k * change.hosts_per_spine + m:02d}"
                nodes.append(Node(hid, HOST))
                cable(hid, sid, hcap, dl)
    elif isinstance(change, AddHosts):
        if change.leaf not in t.nodes or not t.is_switch(change.leaf):
            raise TopologyError(f"{change.leaf!r} is not a switch")
        if change.count < 1:
            raise TopologyError("count must be >= 1")
        hcap = change.capacity_bps or host_cap
        dl = change.delay_s or delay
        host_base = _next_id(t, "h")
        for m in range(change.count):
            hid = f"h{host_base + m:02d}"
            nodes.append(Node(hid, HOST))
            cable(hid, change.leaf, hcap, dl)
    else:
        raise TopologyError(f"unknown change {change!r}")
    return Topology(nodes, links)


def _pick(src: str, dst: str, flow_key: int, node_id: str, n: int) -> int:
    """Stable non-cryptographic choice among n equal-cost next hops."""
    h = zlib.crc32(f"{src}|{dst}|{flow_key}|{node_id}".encode())
    return h % n


def ecmp_route(t: Topology, src: str, dst: str, flow_key: int) -> list[Link]:
    """Shortest path by hop count, hash-splitting over equal-cost next hops.

    Deterministic in (topology, src, dst, flow_key); loop-free because hop
    distance to dst strictly decreases along the chosen links.
    """
    if src not in t.nodes or dst not in t.nodes:
        raise TopologyError(f"unknown endpoint {src!r} or {dst!r}")
    if src == dst:
        raise TopologyError("src and dst must differ")
    dist = t.dist_to(dst)
    if src not in dist:
        raise TopologyError(f"no route from {src!r} to {dst!r}")
    path = []
    node = src
    while node != dst:
        cands = [l for l in t._out[node] if dist.get(l.dst, -1) == dist[node] - 1]
        step = cands[_pick(src, dst, flow_key, node, len(cands))] if len(cands) > 1 else cands[0]
        path.append(step)
        node = step.dst
    return path
