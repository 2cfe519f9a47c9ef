"""Fluid flow-level simulator: shared-buffer ports, RED/ECN marking, DCQCN-ish senders.

Time advances in fixed ticks. Each tick, active flows inject bytes along
their precomputed ECMP path subject to rate and a BDP window cap, every port
serves up to capacity x tick bytes (proportionally across the flows queued on
it), served bytes are ECN-marked against the port's RED curve, and marks
travel back to the sender after the path round trip plus current queueing
delay, where they drive multiplicative decrease; senders recover additively
once per signal-free RTT. The fabric is lossless: if switch queues ever
exceed the shared buffer pool the run halts, it never drops.

Service uses cut-through accounting (per-hop serialization is charged once),
so an uncontended flow completes in base-RTT + size/min-capacity to within
one tick.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .topo import Link, Topology, agents as topo_agents, ecmp_route
from .workload import FlowArrival

OBS_FIELDS = 3  # utilization, normalized queue, ecn mark rate
HISTORY_DEPTH = 2  # how many past observations ride along with the current one
FEATURE_DIM = OBS_FIELDS * (HISTORY_DEPTH + 1)


class BufferOverrunError(RuntimeError):
    """Switch queues exceeded the shared pool; the lossless model is violated."""


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EcnConfig:
    kmin_bytes: float
    kmax_bytes: float
    pmax: float

    def __post_init__(self):
        if not self.kmin_bytes > 0:
            raise ValueError(f"kmin must be positive, got {self.kmin_bytes}")
        if self.kmax_bytes < self.kmin_bytes:
            raise ValueError(f"kmin {self.kmin_bytes} exceeds kmax {self.kmax_bytes}")
        if not 0.0 < self.pmax <= 1.0:
            raise ValueError(f"pmax must be in (0, 1], got {self.pmax}")


def mark_probability(cfg: EcnConfig, queue_bytes: float) -> float:
    """RED-style curve: 0 below kmin, linear to pmax, 1 at and beyond kmax."""
    if queue_bytes < cfg.kmin_bytes:
        return 0.0
    if queue_bytes >= cfg.kmax_bytes:
        return 1.0
    return cfg.pmax * (queue_bytes - cfg.kmin_bytes) / (cfg.kmax_bytes - cfg.kmin_bytes)


def mark_probability_array(kmin, kmax, pmax, queue_bytes) -> np.ndarray:
    """Elementwise mark_probability over parallel arrays."""
    kmin = np.asarray(kmin, dtype=float)
    kmax = np.asarray(kmax, dtype=float)
    pmax = np.asarray(pmax, dtype=float)
    q = np.asarray(queue_bytes, dtype=float)
    p = np.zeros(np.broadcast(kmin, kmax, pmax, q).shape)
    span = kmax - kmin
    mid = (q >= kmin) & (q < kmax) & (span > 0)
    p[mid] = (pmax * (q - kmin))[mid] / span[mid]
    p[q >= kmax] = 1.0
    return p


@dataclass(frozen=True)
class SimConfig:
    tick_s: float = 1e-6
    agent_interval_s: float = 100e-6
    episode_s: float = 25e-3
    buffer_total_bytes: float = 32 * 2**20
    mtu_bytes: int = 1000
    queue_norm_bytes: float = float(2**20)
    g: float = 1.0 / 16.0
    rate_ai_bps: float = 0.5e9
    min_rate_bps: float = 100e6
    seed: int = 0

    def __post_init__(self):
        if self.tick_s <= 0 or self.agent_interval_s <= 0 or self.episode_s <= 0:
            raise ValueError("tick, agent interval and episode must be positive")
        if self.ticks_per_interval < 1:
            raise ValueError("agent interval must be at least one tick")
        if abs(self.ticks_per_interval * self.tick_s - self.agent_interval_s) > 1e-12:
            raise ValueError("agent interval must be a whole number of ticks")
        if self.buffer_total_bytes <= 0 or self.mtu_bytes < 1 or self.queue_norm_bytes <= 0:
            raise ValueError("buffer, mtu and queue normalization must be positive")
        if not 0.0 < self.g < 1.0:
            raise ValueError("g must be in (0, 1)")
        if self.min_rate_bps <= 0 or self.rate_ai_bps <= 0:
            raise ValueError("rate constants must be positive")

    @property
    def ticks_per_interval(self) -> int:
        return int(round(self.agent_interval_s / self.tick_s))

    @property
    def intervals_per_episode(self) -> int:
        return int(round(self.episode_s / self.agent_interval_s))


def _rate_cut(rate, alpha, cfg: SimConfig):
    alpha = (1.0 - cfg.g) * alpha + cfg.g
    rate = np.maximum(rate * (1.0 - alpha / 2.0), cfg.min_rate_bps)
    return rate, alpha


def _rate_raise(rate, alpha, line_rate, cfg: SimConfig):
    alpha = (1.0 - cfg.g) * alpha
    rate = np.minimum(rate + cfg.rate_ai_bps, line_rate)
    return rate, alpha


@dataclass
class FlowState:
    """Sender-side view of one flow; the unit rate_update operates on."""

    flow_id: int
    src: str
    dst: str
    size_bytes: float
    remaining_bytes: float
    rate_bps: float
    alpha: float
    line_rate_bps: float
    inflight_cap_bytes: float
    base_rtt_s: float
    start_s: float
    finish_s: float | None = None
    tag: str = "bg"


def rate_update(flow: FlowState, congested: bool, cfg: SimConfig) -> FlowState:
    """DCQCN-style reaction: multiplicative decrease on marks, additive raise."""
    if congested:
        flow.rate_bps, flow.alpha = _rate_cut(flow.rate_bps, flow.alpha, cfg)
    else:
        flow.rate_bps, flow.alpha = _rate_raise(flow.rate_bps, flow.alpha, flow.line_rate_bps, cfg)
    flow.rate_bps = float(flow.rate_bps)
    flow.alpha = float(flow.alpha)
    return flow


@dataclass
class FlowRecord:
    flow_id: int
    src: str
    dst: str
    size_bytes: float
    tag: str
    start_s: float
    base_rtt_s: float
    min_capacity_bps: float
    finish_s: float | None = None
    delivered_bytes: float = 0.0

    @property
    def ideal_fct_s(self) -> float:
        return self.base_rtt_s + self.size_bytes * 8.0 / self.min_capacity_bps


def fct_slowdown(rec: FlowRecord) -> float:
    """Completion time over the uncontended ideal (base RTT + serialization)."""
    if rec.finish_s is None:
        raise SimulationError(f"flow {rec.flow_id} has not finished")
    return (rec.finish_s - rec.start_s) / rec.ideal_fct_s


FLOW_CSV_FIELDS = ("flow_id", "size", "start", "finish", "slowdown", "tag")
PORT_CSV_FIELDS = ("t", "port", "u", "q_bytes", "ecn_rate", "kmin", "kmax", "pmax")


def flow_records_to_csv(records: Iterable[FlowRecord]) -> str:
    """Per-flow results of one run; unfinished flows leave finish/slowdown blank."""
    lines = [",".join(FLOW_CSV_FIELDS)]
    for rec in records:
        finish = "" if rec.finish_s is None else repr(float(rec.finish_s))
        slow = "" if rec.finish_s is None else repr(float(fct_slowdown(rec)))
        lines.append(
            f"{rec.flow_id},{rec.size_bytes:g},{float(rec.start_s)!r},{finish},{slow},{rec.tag}"
        )
    return "\n".join(lines) + "\n"


def port_log_to_csv(rows: Iterable[tuple]) -> str:
    """Per-interval port log (Simulation.port_log_rows) in tabular form."""
    lines = [",".join(PORT_CSV_FIELDS)]
    for t, port, u, q, ecn, kmin, kmax, pmax in rows:
        lines.append(
            f"{float(t)!r},{port},{float(u)!r},{float(q)!r},{float(ecn)!r},"
            f"{kmin:g},{kmax:g},{pmax:g}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class PortState:
    """Observable state of one egress port, windowed per agent interval."""

    link: Link
    capacity_bps: float
    queue_norm_bytes: float
    ecn: EcnConfig
    is_agent: bool
    queue_bytes: float = 0.0
    tx_bytes: float = 0.0
    marked_bytes: float = 0.0
    tx_packets: float = 0.0
    marked_packets: float = 0.0
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_DEPTH + 1))


def observe(port: PortState, interval_s: float) -> tuple[float, float, float]:
    """End-of-interval observation; resets the window counters.

    u, ecn rate are byte counts over capacity x interval; queue is the
    instantaneous backlog over the normalization constant. All clamped [0,1].
    """
    denom = port.capacity_bps * interval_s / 8.0
    u = min(max(port.tx_bytes / denom, 0.0), 1.0)
    q_norm = min(max(port.queue_bytes / port.queue_norm_bytes, 0.0), 1.0)
    ecn_rate = min(max(port.marked_bytes / denom, 0.0), 1.0)
    port.tx_bytes = 0.0
    port.marked_bytes = 0.0
    port.tx_packets = 0.0
    port.marked_packets = 0.0
    obs = (u, q_norm, ecn_rate)
    port.history.append(obs)
    return obs


def port_features(port: PortState) -> np.ndarray:
    """Current plus last HISTORY_DEPTH observations, newest first, zero-padded."""
    out = np.zeros(FEATURE_DIM)
    hist = list(port.history)
    for i in range(HISTORY_DEPTH + 1):
        j = len(hist) - 1 - i
        if j >= 0:
            out[i * OBS_FIELDS:(i + 1) * OBS_FIELDS] = hist[j]
    return out


def apply_action(port: PortState, cfg: EcnConfig) -> None:
    """Stage a new marking curve; it applies from the next tick on."""
    port.ecn = cfg


class Simulation:
    """Drives one trace over one topology under per-port marking configs."""

    def __init__(
        self,
        topology: Topology,
        flows: list[FlowArrival],
        config: SimConfig,
        initial_ecn: EcnConfig | None = None,
        keep_port_log: bool = False,
    ):
        self.topology = topology
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        cfg = config
        self._tick = 0
        self._dt = cfg.tick_s

        links = topology.links
        self.n_ports = len(links)
        self._port_links = links
        self._port_idx = {l.key: i for i, l in enumerate(links)}
        self._cap = np.array([l.capacity_bps for l in links])
        self._serve_cap = self._cap * cfg.tick_s / 8.0
        self._is_agent_port = np.array([topology.is_switch(l.src) for l in links])
        self.agent_links = topo_agents(topology)
        self._agent_ports = np.array([self._port_idx[l.key] for l in self.agent_links])

        off = initial_ecn or EcnConfig(cfg.buffer_total_bytes, cfg.buffer_total_bytes, 1.0)
        self.ports = [
            PortState(
                link=l,
                capacity_bps=l.capacity_bps,
                queue_norm_bytes=cfg.queue_norm_bytes,
                ecn=off,
                is_agent=bool(self._is_agent_port[i]),
            )
            for i, l in enumerate(links)
        ]
        self._kmin = np.full(self.n_ports, off.kmin_bytes)
        self._kmax = np.full(self.n_ports, off.kmax_bytes)
        self._pmax = np.full(self.n_ports, off.pmax)

        # Per-flow static route data, computed once from the trace.
        self._trace = flows
        n = len(flows)
        if n == 0:
            raise SimulationError("empty trace")
        max_hops = 0
        paths = []
        for fi, f in enumerate(flows):
            path = ecmp_route(topology, f.src, f.dst, fi)
            paths.append([self._port_idx[l.key] for l in path])
            max_hops = max(max_hops, len(path))
        self._H = max_hops
        self._flow_ports = np.zeros((n, max_hops), dtype=np.int32)
        self._flow_hops = np.zeros(n, dtype=np.int32)
        self._flow_line_rate = np.zeros(n)
        self._flow_rtt_s = np.zeros(n)
        self._flow_start_tick = np.zeros(n, dtype=np.int64)
        delay_ticks_max = 1
        self._flow_delay_ticks = np.ones((n, max_hops), dtype=np.int32)
        for fi, (f, path) in enumerate(zip(flows, paths)):
            h = len(path)
            self._flow_hops[fi] = h
            self._flow_ports[fi, :h] = path
            caps = self._cap[path]
            self._flow_line_rate[fi] = caps.min()
            fwd = sum(links[p].delay_s for p in path)
            self._flow_rtt_s[fi] = 2.0 * fwd
            self._flow_start_tick[fi] = int(math.ceil(f.start_s / cfg.tick_s - 1e-9))
            for hi, p in enumerate(path):
                dt = max(1, int(round(links[p].delay_s / cfg.tick_s)))
                self._flow_delay_ticks[fi, hi] = dt
                delay_ticks_max = max(delay_ticks_max, dt)
        self._flow_rtt_ticks = np.maximum(
            1, np.round(self._flow_rtt_s / cfg.tick_s).astype(np.int64)
        )
        self._flow_win_cap = self._flow_line_rate * self._flow_rtt_s / 8.0
        order = np.argsort(self._flow_start_tick, kind="stable")
        self._arrival_order = order
        self._next_arrival = 0

        # Slot pool: per-(flow-in-flight, hop) byte matrices.
        self._P = 256
        H = max_hops
        self._D = delay_ticks_max + 1
        self._q = np.zeros((self._P, H))
        self._ring = np.zeros((self._D, self._P, H + 1))
        self._slot_flow = np.full(self._P, -1, dtype=np.int64)
        self._slot_gen = np.zeros(self._P, dtype=np.int64)
        self._active = np.zeros(self._P, dtype=bool)
        self._remaining = np.zeros(self._P)  # bytes not yet injected
        self._inflight = np.zeros(self._P)
        self._delivered = np.zeros(self._P)
        self._size = np.zeros(self._P)
        self._rate = np.zeros(self._P)
        self._alpha = np.zeros(self._P)
        self._line_rate = np.zeros(self._P)
        self._win_cap = np.zeros(self._P)
        self._rtt_ticks = np.ones(self._P, dtype=np.int64)
        self._next_react = np.zeros(self._P, dtype=np.int64)
        self._next_incr = np.zeros(self._P, dtype=np.int64)
        self._slot_ports = np.zeros((self._P, H), dtype=np.int32)
        self._slot_hops = np.zeros(self._P, dtype=np.int32)
        self._slot_delay = np.ones((self._P, H), dtype=np.int32)
        self._slot_target_col = np.zeros((self._P, H), dtype=np.int32)
        self._free_slots = list(range(self._P - 1, -1, -1))
        self._slot_of_flow = {}

        self._fb_buckets: dict[int, list[tuple[int, int]]] = {}
        self._standing_q = np.zeros(self.n_ports)
        self._queue_integral = 0.0   # sum over ticks of switch-port queue bytes
        self._queue_ticks = 0
        self._tx_accum = np.zeros(self.n_ports)
        self._marked_accum = np.zeros(self.n_ports)
        self._pkt_accum = np.zeros(self.n_ports)
        self._mpkt_accum = np.zeros(self.n_ports)

        self._injected_total = 0.0
        self._delivered_total = 0.0
        self.records: list[FlowRecord] = [
            FlowRecord(
                flow_id=fi,
                src=f.src,
                dst=f.dst,
                size_bytes=float(f.size_bytes),
                tag=f.tag,
                start_s=f.start_s,
                base_rtt_s=self._flow_rtt_s[fi],
                min_capacity_bps=self._flow_line_rate[fi],
            )
            for fi, f in enumerate(flows)
        ]
        self._n_finished = 0
        self.keep_port_log = keep_port_log
        self.port_log_rows: list[tuple] = []

    # -- properties ---------------------------------------------------------

    @property
    def time_s(self) -> float:
        return self._tick * self._dt

    @property
    def n_agents(self) -> int:
        return len(self.agent_links)

    @property
    def finished_count(self) -> int:
        return self._n_finished

    @property
    def all_done(self) -> bool:
        return self._n_finished == len(self._trace)

    def total_switch_queue_bytes(self) -> float:
        return float(self._standing_q[self._is_agent_port].sum())

    @property
    def delivered_bytes_total(self) -> float:
        """Bytes consumed at their destinations so far."""
        return float(self._delivered_total)

    @property
    def n_switch_ports(self) -> int:
        return int(self._is_agent_port.sum())

    def queue_time_average(self) -> tuple[float, int]:
        """Running (integral, ticks) of total switch-port queue bytes.

        integral / (ticks * n_switch_ports) is the mean queue length in bytes
        averaged over switch ports and simulated time so far.
        """
        return self._queue_integral, self._queue_ticks

    def mean_switch_queue_bytes(self) -> float:
        if self._queue_ticks == 0:
            return 0.0
        return self._queue_integral / (self._queue_ticks * self.n_switch_ports)

    def conservation_error(self) -> float:
        """Relative gap between injected bytes and their current whereabouts."""
        held = self._q.sum() + self._ring.sum() + self._delivered_total
        return abs(self._injected_total - held) / max(1.0, self._injected_total)

    # -- slot management ----------------------------------------------------

    def _grow_pool(self) -> None:
        old = self._P
        new = old * 2
        H = self._H

        def grow2(a, fill=0.0):
            out = np.full((new,) + a.shape[1:], fill, dtype=a.dtype)
            out[:old] = a
            return out

        self._q = grow2(self._q)
        ring = np.zeros((self._D, new, H + 1))
        ring[:, :old] = self._ring
        self._ring = ring
        self._slot_flow = grow2(self._slot_flow, -1)
        self._slot_gen = grow2(self._slot_gen, 0)
        self._active = grow2(self._active, False)
        for name in ("_remaining", "_inflight", "_delivered", "_size", "_rate", "_alpha",
                     "_line_rate", "_win_cap"):
            setattr(self, name, grow2(getattr(self, name)))
        for name in ("_rtt_ticks", "_next_react", "_next_incr"):
            setattr(self, name, grow2(getattr(self, name), 0))
        self._slot_ports = grow2(self._slot_ports, 0)
        self._slot_hops = grow2(self._slot_hops, 0)
        self._slot_delay = grow2(self._slot_delay, 1)
        self._slot_target_col = grow2(self._slot_target_col, 0)
        self._free_slots.extend(range(new - 1, old - 1, -1))
        self._P = new

    def _activate(self, fi: int) -> None:
        if not self._free_slots:
            self._grow_pool()
        s = self._free_slots.pop()
        f = self._trace[fi]
        self._slot_flow[s] = fi
        self._slot_of_flow[fi] = s
        self._active[s] = True
        self._remaining[s] = float(f.size_bytes)
        self._inflight[s] = 0.0
        self._delivered[s] = 0.0
        self._size[s] = float(f.size_bytes)
        self._rate[s] = self._flow_line_rate[fi]
        self._alpha[s] = 0.0
        self._line_rate[s] = self._flow_line_rate[fi]
        self._win_cap[s] = self._flow_win_cap[fi]
        self._rtt_ticks[s] = self._flow_rtt_ticks[fi]
        self._next_react[s] = self._tick
        self._next_incr[s] = self._tick + self._rtt_ticks[s]
        h = self._flow_hops[fi]
        self._slot_hops[s] = h
        self._slot_ports[s, :] = 0
        self._slot_ports[s, :h] = self._flow_ports[fi, :h]
        self._slot_delay[s, :] = 1
        self._slot_delay[s, :h] = self._flow_delay_ticks[fi, :h]
        cols = np.arange(1, self._H + 1, dtype=np.int32)
        self._slot_target_col[s, :] = cols
        self._slot_target_col[s, h - 1] = self._H  # delivery column

    def _finish(self, s: int) -> None:
        fi = int(self._slot_flow[s])
        rec = self.records[fi]
        # last byte reaches the receiver at the end of this tick; the sender
        # learns of it one forward propagation later (the return path)
        rec.finish_s = (self._tick + 1) * self._dt + self._flow_rtt_s[fi] / 2.0
        rec.delivered_bytes = float(self._delivered[s])
        self._active[s] = False
        self._slot_flow[s] = -1
        self._slot_gen[s] += 1
        self._q[s, :] = 0.0
        self._ring[:, s, :] = 0.0
        del self._slot_of_flow[fi]
        self._free_slots.append(s)
        self._n_finished += 1

    # -- the tick -----------------------------------------------------------

    def step(self) -> None:
        """Advance one tick."""
        cfg = self.config
        t = self._tick
        H = self._H

        # 1. consume scheduled arrivals (queue handoffs and deliveries)
        slot_arr = self._ring[t % self._D]
        if slot_arr.any():
            self._q[:, 1:] += slot_arr[:, 1:H]
            delivered_now = slot_arr[:, H]
            got = delivered_now > 0.0
            if got.any():
                self._delivered[got] += delivered_now[got]
                self._inflight[got] -= delivered_now[got]
                self._delivered_total += float(delivered_now[got].sum())
                done = got & self._active & (self._delivered >= self._size - 1e-3)
                for s in np.nonzero(done)[0]:
                    self._finish(int(s))
            slot_arr[:] = 0.0

        # 2. congestion feedback scheduled for this tick
        for s, gen in self._fb_buckets.pop(t, ()):
            if not self._active[s] or self._slot_gen[s] != gen:
                continue
            if t >= self._next_react[s]:
                self._rate[s], self._alpha[s] = _rate_cut(self._rate[s], self._alpha[s], cfg)
                self._next_react[s] = t + self._rtt_ticks[s]
                self._next_incr[s] = t + self._rtt_ticks[s]

        # 3. additive increase after a signal-free RTT
        raise_mask = self._active & (self._next_incr <= t)
        if raise_mask.any():
            self._rate[raise_mask], self._alpha[raise_mask] = _rate_raise(
                self._rate[raise_mask], self._alpha[raise_mask], self._line_rate[raise_mask], cfg
            )
            self._next_incr[raise_mask] = t + self._rtt_ticks[raise_mask]

        # 4. new flows
        while self._next_arrival < len(self._arrival_order):
            fi = int(self._arrival_order[self._next_arrival])
            if self._flow_start_tick[fi] > t:
                break
            self._activate(fi)
            self._next_arrival += 1

        # 5. injection at the current sending rate, window-capped
        inj = np.minimum(self._rate * (self._dt / 8.0), self._remaining)
        np.minimum(inj, self._win_cap - self._inflight, out=inj)
        np.clip(inj, 0.0, None, out=inj)
        inj[~self._active] = 0.0
        has_inj = inj > 0.0
        if has_inj.any():
            self._q[has_inj, 0] += inj[has_inj]
            self._inflight[has_inj] += inj[has_inj]
            self._remaining[has_inj] -= inj[has_inj]
            self._injected_total += float(inj[has_inj].sum())

        # 6. pre-service queue depths (what arriving packets see)
        port_q = np.bincount(
            self._slot_ports.ravel(), weights=self._q.ravel(), minlength=self.n_ports
        )

        switch_total = float(port_q[self._is_agent_port].sum())
        if switch_total > cfg.buffer_total_bytes:
            worst = int(np.argmax(np.where(self._is_agent_port, port_q, -1.0)))
            l = self._port_links[worst]
            raise BufferOverrunError(
                f"shared buffer exceeded at t={self.time_s:.6f}s: "
                f"{switch_total:.0f} > {cfg.buffer_total_bytes:.0f} bytes "
                f"(fullest port {l.src}->{l.dst} at {port_q[worst]:.0f})"
            )

        # 7. proportional service
        frac = np.ones(self.n_ports)
        backlogged = port_q > self._serve_cap
        frac[backlogged] = self._serve_cap[backlogged] / port_q[backlogged]
        served = self._q * frac[self._slot_ports]
        served[~self._active] = 0.0
        self._q -= served
        port_served = np.bincount(
            self._slot_ports.ravel(), weights=served.ravel(), minlength=self.n_ports
        )
        self._tx_accum += port_served
        self._pkt_accum += port_served / cfg.mtu_bytes

        # 8. marking and sender feedback
        pmark = mark_probability_array(self._kmin, self._kmax, self._pmax, port_q)
        pmark[~self._is_agent_port] = 0.0
        if pmark.any():
            self._marked_accum += port_served * pmark
            self._mpkt_accum += port_served * pmark / cfg.mtu_bytes
            cell_p = pmark[self._slot_ports]
            hot = (served > 0.0) & (cell_p > 0.0)
            if hot.any():
                rows, hops = np.nonzero(hot)
                n_pkts = np.ceil(served[rows, hops] / cfg.mtu_bytes)
                p_any = 1.0 - np.power(1.0 - cell_p[rows, hops], n_pkts)
                fired = self.rng.random(len(rows)) < p_any
                if fired.any():
                    post_q = port_q - port_served
                    qd_s = post_q / self._cap * 8.0
                    f_rows = rows[fired]
                    f_hops = hops[fired]
                    for s in np.unique(f_rows):
                        fi = int(self._slot_flow[s])
                        h = int(self._slot_hops[s])
                        path_qd = qd_s[self._slot_ports[s, :h]]
                        # the mark rides out with the serviced bytes, so only
                        # queues downstream of the marking hop delay it; the
                        # earliest mark of the tick drives the reaction
                        best = math.inf
                        for hh in f_hops[f_rows == s]:
                            best = min(best, float(path_qd[hh + 1:].sum()))
                        delay_s = self._flow_rtt_s[fi] + best
                        fb_tick = t + max(1, int(math.ceil(delay_s / self._dt)))
                        self._fb_buckets.setdefault(fb_tick, []).append(
                            (int(s), int(self._slot_gen[s]))
                        )

        # 9. hand served bytes to the next hop (or deliver) after propagation
        moving = served > 0.0
        if moving.any():
            rows, hops = np.nonzero(moving)
            vals = served[rows, hops]
            cols = self._slot_target_col[rows, hops]
            delays = self._slot_delay[rows, hops]
            for d in np.unique(delays):
                pick = delays == d
                self._ring[(t + d) % self._D][rows[pick], cols[pick]] += vals[pick]

        self._standing_q = port_q - port_served
        self._queue_integral += float(self._standing_q[self._is_agent_port].sum())
        self._queue_ticks += 1
        self._tick += 1

    # -- agent-facing surface ------------------------------------------------

    def run_interval(self) -> np.ndarray:
        """Advance one agent interval; observe each agent port, return (V, 3)."""
        for _ in range(self.config.ticks_per_interval):
            self.step()
        out = np.zeros((self.n_agents, OBS_FIELDS))
        for vi, port_idx in enumerate(self._agent_ports):
            ps = self.ports[port_idx]
            ps.queue_bytes = float(self._standing_q[port_idx])
            ps.tx_bytes = float(self._tx_accum[port_idx])
            ps.marked_bytes = float(self._marked_accum[port_idx])
            ps.tx_packets = float(self._pkt_accum[port_idx])
            ps.marked_packets = float(self._mpkt_accum[port_idx])
            out[vi] = observe(ps, self.config.agent_interval_s)
            if self.keep_port_log:
                self.port_log_rows.append(
                    (
                        self.time_s,
                        f"{ps.link.src}->{ps.link.dst}",
                        out[vi, 0],
                        ps.queue_bytes,
                        out[vi, 2],
                        ps.ecn.kmin_bytes,
                        ps.ecn.kmax_bytes,
                        ps.ecn.pmax,
                    )
                )
        self._tx_accum[:] = 0.0
        self._marked_accum[:] = 0.0
        self._pkt_accum[:] = 0.0
        self._mpkt_accum[:] = 0.0
        return out

    def agent_features(self) -> np.ndarray:
        return np.stack([port_features(self.ports[p]) for p in self._agent_ports])

    def apply_agent_actions(self, configs: Iterable[EcnConfig]) -> None:
        configs = list(configs)
        if len(configs) != self.n_agents:
            raise SimulationError(f"expected {self.n_agents} configs, got {len(configs)}")
        for port_idx, cfg in zip(self._agent_ports, configs):
            apply_action(self.ports[port_idx], cfg)
            self._kmin[port_idx] = cfg.kmin_bytes
            self._kmax[port_idx] = cfg.kmax_bytes
            self._pmax[port_idx] = cfg.pmax

    def drain(self, timeout_s: float | None = None) -> bool:
        """Run past the trace end until all flows finish; False on timeout."""
        if timeout_s is None:
            timeout_s = 10.0 * self.config.episode_s
        deadline = self.time_s + timeout_s
        while not self.all_done and self.time_s < deadline:
            self.run_interval()
        return self.all_done
