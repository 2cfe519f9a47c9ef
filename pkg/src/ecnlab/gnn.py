"""Graph network over agent ports: message passing, Q readout, action table.

Each switch egress port is a vertex. Vertices exchange their hidden states
with the ports that feed them (ingress neighbors), compute messages from
(own hidden, sender hidden) pairs, aggregate with elementwise min and max,
and update their hidden state; after a fixed number of rounds a readout MLP
turns the hidden state into one Q-value per marking configuration.

Three equivalent execution paths:
  * q_values        - centralized reference built from init_hidden and
                      mp_round, plain per-vertex loops
  * distributed_run - per-replica protocol simulation with explicit message
                      records; payloads are hidden states, the receiver runs
                      the message net (bitwise identical to q_values)
  * batch_forward   - padded dense-batch path used for training, with
                      batch_backward providing exact gradients
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn, topo
from .netsim import FEATURE_DIM, EcnConfig

HIDDEN_DIM = 24
N_ROUNDS = 2

KMIN_GRID_BYTES = tuple(k * 1024 for k in (2, 4, 8, 16, 32))
KMAX_GRID_BYTES = tuple(k * 1024 for k in (16, 32, 64, 128, 256))
PMAX_GRID = (0.01, 0.25, 0.5, 0.75, 1.0)

POLICY_SCHEMA = 1


def build_action_table() -> tuple[EcnConfig, ...]:
    """All (kmin, kmax, pmax) combinations with kmin <= kmax, lexicographic."""
    out = []
    for kmin in KMIN_GRID_BYTES:
        for kmax in KMAX_GRID_BYTES:
            if kmin > kmax:
                continue
            for pmax in PMAX_GRID:
                out.append(EcnConfig(kmin_bytes=float(kmin), kmax_bytes=float(kmax), pmax=pmax))
    return tuple(out)


N_ACTIONS = len(build_action_table())


@dataclass
class GnnParams:
    message: nn.MlpParams  # (2*hidden) -> hidden
    update: nn.MlpParams   # (3*hidden) -> hidden
    readout: nn.MlpParams  # hidden -> n_actions

    def copy(self) -> "GnnParams":
        return GnnParams(self.message.copy(), self.update.copy(), self.readout.copy())

    @property
    def n_actions(self) -> int:
        return self.readout.n_out


def init_params(seed: int) -> GnnParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    message = nn.init_mlp(rng, [2 * HIDDEN_DIM, HIDDEN_DIM, HIDDEN_DIM])
    update = nn.init_mlp(rng, [3 * HIDDEN_DIM, HIDDEN_DIM, HIDDEN_DIM])
    readout = nn.init_mlp(rng, [HIDDEN_DIM, HIDDEN_DIM, N_ACTIONS])
    return GnnParams(message, update, readout)


def init_hidden(x: np.ndarray) -> np.ndarray:
    """Zero-pad port features up to the hidden width (initial vertex state).

    Accepts a single feature vector or any batch of them along leading axes.
    """
    x = np.asarray(x, dtype=float)
    width = x.shape[-1]
    if width > HIDDEN_DIM:
        raise ValueError(f"feature width {width} exceeds hidden width {HIDDEN_DIM}")
    h = np.zeros(x.shape[:-1] + (HIDDEN_DIM,))
    h[..., :width] = x
    return h


# -- centralized reference ----------------------------------------------------


def _neighbor_indices(t: topo.Topology) -> list[list[int]]:
    """For each agent (canonical order), indices of its ingress neighbors."""
    return [
        [topo.agent_index(t, u) for u in topo.ingress_neighbors(t, v)]
        for v in topo.agents(t)
    ]


def _aggregate(msgs: list[np.ndarray]) -> np.ndarray:
    if not msgs:
        return np.zeros(2 * HIDDEN_DIM)
    stack = np.stack(msgs)
    return np.concatenate([stack.min(axis=0), stack.max(axis=0)])


def mp_round(params: GnnParams, t: topo.Topology, hiddens: np.ndarray) -> np.ndarray:
    """One message-passing round over the agent graph.

    Every vertex v computes message(h_v, h_u) for each ingress neighbor u,
    aggregates the set with elementwise min and max, and replaces its hidden
    state with update(h_v, aggregate). Vertices without ingress neighbors
    aggregate to zeros.
    """
    nbrs = _neighbor_indices(t)
    h = np.asarray(hiddens, dtype=float)
    if h.ndim != 2 or h.shape[1] != HIDDEN_DIM:
        raise ValueError(f"hiddens must be (agents, {HIDDEN_DIM}), got {h.shape}")
    if h.shape[0] != len(nbrs):
        raise ValueError(
            f"hidden state missing: {h.shape[0]} rows for {len(nbrs)} agents"
        )
    h_next = np.empty_like(h)
    for vi in range(len(nbrs)):
        msgs = [
            nn.forward(params.message, np.concatenate([h[vi], h[ui]]))
            for ui in nbrs[vi]
        ]
        m = _aggregate(msgs)
        h_next[vi] = nn.forward(params.update, np.concatenate([h[vi], m]))
    return h_next


def q_values(
    params: GnnParams,
    t: topo.Topology,
    features: np.ndarray,
    k_rounds: int = N_ROUNDS,
) -> np.ndarray:
    """Reference forward: (V, feature) -> (V, n_actions).

    With k_rounds=0 each vertex's output depends on its own features alone.
    """
    h = init_hidden(features)
    v_count = h.shape[0]
    if v_count != len(topo.agents(t)):
        raise ValueError(f"feature rows {v_count} != agent count {len(topo.agents(t))}")
    for _ in range(k_rounds):
        h = mp_round(params, t, h)
    return np.stack([nn.forward(params.readout, h[vi]) for vi in range(v_count)])


# -- distributed protocol simulation ------------------------------------------


@dataclass(frozen=True)
class MessageRecord:
    round: int
    src: tuple  # (a, b) key of the sending port
    dst: tuple
    payload: tuple  # the hidden state that crossed the wire


class UndeliveredMessageError(RuntimeError):
    """A replica advanced a round without all of its expected messages."""


class _Replica:
    """One port's controller: local state, an inbox, local math only."""

    def __init__(self, key, features: np.ndarray, params: GnnParams, expected: int):
        self.key = key
        self.params = params
        self.h = init_hidden(features)
        self.expected = expected
        self.inbox: list[np.ndarray] = []

    def receive(self, payload: np.ndarray) -> None:
        self.inbox.append(payload)

    def advance_round(self) -> None:
        if len(self.inbox) != self.expected:
            raise UndeliveredMessageError(
                f"port {self.key} expected {self.expected} messages, "
                f"got {len(self.inbox)}"
            )
        msgs = [
            nn.forward(self.params.message, np.concatenate([self.h, h_u]))
            for h_u in self.inbox
        ]
        m = _aggregate(msgs)
        self.h = nn.forward(self.params.update, np.concatenate([self.h, m]))
        self.inbox = []

    def readout(self) -> np.ndarray:
        return nn.forward(self.params.readout, self.h)


@dataclass(frozen=True)
class DistributedResult:
    actions: np.ndarray          # per-agent greedy action index
    q: np.ndarray                # per-agent Q-vectors, (V, n_actions)
    records: list[MessageRecord]


def distributed_run(
    params: GnnParams, t: topo.Topology, features: np.ndarray
) -> DistributedResult:
    """Run the protocol with one replica per agent; greedy action per agent.

    Replicas only ever touch their own state plus received payloads, so this
    exercises the claim that each port can pick its own action with nothing
    but neighbor hidden-state exchange. A replica that advances a round with
    messages missing raises UndeliveredMessageError.
    """
    agents = topo.agents(t)
    features = np.asarray(features, dtype=float)
    senders = {
        a.key: [u.key for u in topo.ingress_neighbors(t, a)] for a in agents
    }
    replicas = [
        _Replica(a.key, features[i], params, expected=len(senders[a.key]))
        for i, a in enumerate(agents)
    ]
    by_key = {r.key: r for r in replicas}
    records: list[MessageRecord] = []
    for k in range(N_ROUNDS):
        for r in replicas:
            for src_key in senders[r.key]:
                payload = by_key[src_key].h.copy()
                records.append(
                    MessageRecord(round=k, src=src_key, dst=r.key, payload=tuple(payload))
                )
                r.receive(payload)
        for r in replicas:
            r.advance_round()
    q = np.stack([r.readout() for r in replicas])
    return DistributedResult(actions=select_actions(q), q=q, records=records)


# -- padded batch path (training) ---------------------------------------------


class Neighborhood:
    """Precomputed edge structure of one topology for the dense-batch path."""

    def __init__(self, t: topo.Topology):
        self.agents = topo.agents(t)
        nbrs = _neighbor_indices(t)
        self.n_vertices = len(nbrs)
        src, dst = [], []
        for vi, lst in enumerate(nbrs):
            for ui in lst:
                src.append(ui)
                dst.append(vi)
        self.n_edges = len(src)
        self.src_idx = np.array(src, dtype=np.int64)
        self.dst_idx = np.array(dst, dtype=np.int64)
        self.max_deg = max(1, max((len(lst) for lst in nbrs), default=0))
        # (V, max_deg) edge ids, padded with edge 0 and masked out
        self.slot_edge = np.zeros((self.n_vertices, self.max_deg), dtype=np.int64)
        self.slot_mask = np.zeros((self.n_vertices, self.max_deg), dtype=bool)
        self.slot_of_edge = np.zeros(self.n_edges, dtype=np.int64)
        e = 0
        for vi, lst in enumerate(nbrs):
            for j in range(len(lst)):
                self.slot_edge[vi, j] = e
                self.slot_mask[vi, j] = True
                self.slot_of_edge[e] = j
                e += 1
        self.has_nbr = self.slot_mask.any(axis=1)


def batch_forward(
    params: GnnParams,
    nbr: Neighborhood,
    features: np.ndarray,
    k_rounds: int = N_ROUNDS,
) -> tuple[np.ndarray, dict]:
    """Dense forward over a batch of feature snapshots: (B, V, F) -> (B, V, A)."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 3:
        raise ValueError("batch_forward expects (batch, vertex, feature)")
    B, V, _ = features.shape
    if V != nbr.n_vertices:
        raise ValueError(f"feature vertices {V} != topology agents {nbr.n_vertices}")
    h = init_hidden(features)
    cache: dict = {"h0": h, "rounds": [], "B": B, "V": V}
    for _ in range(k_rounds):
        rc: dict = {"h_in": h}
        if nbr.n_edges:
            x_msg = np.concatenate([h[:, nbr.dst_idx], h[:, nbr.src_idx]], axis=2)
            m_flat, m_cache = nn.forward_with_cache(
                params.message, x_msg.reshape(B * nbr.n_edges, 2 * HIDDEN_DIM)
            )
            m = m_flat.reshape(B, nbr.n_edges, HIDDEN_DIM)
            slotted = m[:, nbr.slot_edge]  # (B, V, max_deg, hidden)
            mask = nbr.slot_mask[None, :, :, None]
            lo = np.where(mask, slotted, np.inf)
            hi = np.where(mask, slotted, -np.inf)
            argmin = lo.argmin(axis=2)
            argmax = hi.argmax(axis=2)
            m_min = np.take_along_axis(lo, argmin[:, :, None], axis=2)[:, :, 0]
            m_max = np.take_along_axis(hi, argmax[:, :, None], axis=2)[:, :, 0]
            empty = ~nbr.has_nbr
            m_min[:, empty] = 0.0
            m_max[:, empty] = 0.0
            agg = np.concatenate([m_min, m_max], axis=2)
            rc.update(m_cache=m_cache, argmin=argmin, argmax=argmax)
        else:
            agg = np.zeros((B, V, 2 * HIDDEN_DIM))
        x_upd = np.concatenate([h, agg], axis=2)
        h_flat, u_cache = nn.forward_with_cache(
            params.update, x_upd.reshape(B * V, 3 * HIDDEN_DIM)
        )
        h = h_flat.reshape(B, V, HIDDEN_DIM)
        rc["u_cache"] = u_cache
        cache["rounds"].append(rc)
    q_flat, r_cache = nn.forward_with_cache(params.readout, h.reshape(B * V, HIDDEN_DIM))
    cache["r_cache"] = r_cache
    return q_flat.reshape(B, V, params.n_actions), cache


def batch_backward(
    params: GnnParams, nbr: Neighborhood, cache: dict, dq: np.ndarray
) -> tuple[nn.MlpGrads, nn.MlpGrads, nn.MlpGrads]:
    """Exact gradients of sum(dq * q) w.r.t. the three nets."""
    B, V = cache["B"], cache["V"]
    g_msg = nn.zeros_like_grads(params.message)
    g_upd = nn.zeros_like_grads(params.update)
    g_ro, dh_flat = nn.backward(
        params.readout, None, dq.reshape(B * V, params.n_actions), cache=cache["r_cache"]
    )
    dh = dh_flat.reshape(B, V, HIDDEN_DIM)
    for rc in reversed(cache["rounds"]):
        g_u, dx_flat = nn.backward(
            params.update, None, dh.reshape(B * V, HIDDEN_DIM), cache=rc["u_cache"]
        )
        nn.add_grads(g_upd, g_u)
        dx = dx_flat.reshape(B, V, 3 * HIDDEN_DIM)
        dh = dx[:, :, :HIDDEN_DIM].copy()
        if nbr.n_edges:
            d_agg = dx[:, :, HIDDEN_DIM:]
            d_min = d_agg[:, :, :HIDDEN_DIM].copy()
            d_max = d_agg[:, :, HIDDEN_DIM:].copy()
            empty = ~nbr.has_nbr
            d_min[:, empty] = 0.0
            d_max[:, empty] = 0.0
            # route each aggregate gradient to the edge that achieved it
            slot_grad = np.zeros((B, V, nbr.max_deg, HIDDEN_DIM))
            np.put_along_axis(slot_grad, rc["argmin"][:, :, None], d_min[:, :, None], axis=2)
            lifted = np.zeros_like(slot_grad)
            np.put_along_axis(lifted, rc["argmax"][:, :, None], d_max[:, :, None], axis=2)
            slot_grad += lifted
            d_m = slot_grad[:, nbr.dst_idx, nbr.slot_of_edge]  # (B, E, hidden)
            g_m, dx_msg = nn.backward(
                params.message,
                None,
                d_m.reshape(B * nbr.n_edges, HIDDEN_DIM),
                cache=rc["m_cache"],
            )
            nn.add_grads(g_msg, g_m)
            dx_msg = dx_msg.reshape(B, nbr.n_edges, 2 * HIDDEN_DIM)
            np.add.at(dh, (slice(None), nbr.dst_idx), dx_msg[:, :, :HIDDEN_DIM])
            np.add.at(dh, (slice(None), nbr.src_idx), dx_msg[:, :, HIDDEN_DIM:])
    return g_msg, g_upd, g_ro


def select_actions(
    qs: np.ndarray,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Action index per Q-vector: argmax (lowest index on ties), or with
    probability epsilon a uniformly random action per agent.

    Accepts a single Q-vector (returns an int) or a (V, n_actions) stack
    (returns an index array).
    """
    arr = np.asarray(qs, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.ndim != 2:
        raise ValueError(f"expected one Q-vector per agent, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise ValueError("empty Q-vector")
    greedy = arr.argmax(axis=1)
    if epsilon > 0.0:
        if rng is None:
            raise ValueError("epsilon-greedy selection needs an rng")
        explore = rng.random(len(greedy)) < epsilon
        randoms = rng.integers(0, arr.shape[1], len(greedy))
        out = np.where(explore, randoms, greedy)
    else:
        out = greedy
    return int(out[0]) if single else out


def act_from_features(
    params: GnnParams,
    nbr: Neighborhood,
    features: np.ndarray,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Fast rollout helper: Q via the dense batch path, then select_actions."""
    q, _ = batch_forward(params, nbr, np.asarray(features, dtype=float)[None])
    return select_actions(q[0], epsilon=epsilon, rng=rng)


# -- persistence ----------------------------------------------------------------


def save_policy(path: str | Path, params: GnnParams, meta: dict | None = None) -> None:
    doc = {
        "schema": POLICY_SCHEMA,
        "kind": "graphcc",
        "hidden_dim": HIDDEN_DIM,
        "feature_dim": FEATURE_DIM,
        "rounds": N_ROUNDS,
        "action_table": [
            [c.kmin_bytes, c.kmax_bytes, c.pmax] for c in build_action_table()
        ],
        "message": nn.params_to_doc(params.message),
        "update": nn.params_to_doc(params.update),
        "readout": nn.params_to_doc(params.readout),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_policy(path: str | Path) -> tuple[GnnParams, tuple[EcnConfig, ...], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != POLICY_SCHEMA or doc.get("kind") != "graphcc":
        raise nn.CheckpointError(f"not a graphcc policy file: {path}")
    params = GnnParams(
        message=nn.params_from_doc(doc["message"]),
        update=nn.params_from_doc(doc["update"]),
        readout=nn.params_from_doc(doc["readout"]),
    )
    table = tuple(
        EcnConfig(kmin_bytes=a, kmax_bytes=b, pmax=c) for a, b, c in doc["action_table"]
    )
    return params, table, doc.get("meta", {})


class GreedyMpnnPolicy:
    """Evaluation-time controller: greedy action per port from the graph net."""

    name = "graphcc"

    def __init__(self, params: GnnParams, table: tuple[EcnConfig, ...] | None = None):
        self.params = params
        self.table = table or build_action_table()
        self._nbr: Neighborhood | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "GreedyMpnnPolicy":
        params, table, _ = load_policy(path)
        return cls(params, table)

    def reset(self, t: topo.Topology) -> None:
        self._nbr = Neighborhood(t)

    def act(self, features: np.ndarray) -> list[EcnConfig]:
        if self._nbr is None:
            raise RuntimeError("policy.reset(topology) must run before act()")
        idx = act_from_features(self.params, self._nbr, features)
        return [self.table[i] for i in idx]
