"""Traffic generation: flow-size CDFs, Poisson background, periodic incasts.

Flow sizes come from piecewise-linear CDF files ("size_bytes cum_prob" per
line) sampled by inverse transform. Background flows arrive as a Poisson
process whose rate is calibrated so that offered bytes match the requested
fraction of aggregate host-link capacity; incast bursts are layered on top
and do not count toward the load calibration.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .topo import HOST, Topology

BACKGROUND = "bg"
INCAST = "incast"

BUILTIN_CDFS = ("fb_hadoop", "websearch", "alistorage")


class CdfFormatError(ValueError):
    """Malformed CDF file; message carries the offending line number."""


@dataclass(frozen=True)
class FlowSizeCdf:
    name: str
    sizes: tuple[float, ...]
    probs: tuple[float, ...]

    def mean(self) -> float:
        """Analytic mean: atom at the first knot plus uniform segments."""
        m = self.probs[0] * self.sizes[0]
        for i in range(len(self.sizes) - 1):
            m += (self.probs[i + 1] - self.probs[i]) * (self.sizes[i] + self.sizes[i + 1]) / 2.0
        return m

    def cdf(self, x):
        """P(size <= x), vectorized; used by goodness-of-fit checks."""
        x = np.asarray(x, dtype=float)
        s = np.asarray(self.sizes)
        p = np.asarray(self.probs)
        out = np.interp(x, s, p)
        out = np.where(x < s[0], 0.0, out)
        return np.where(x >= s[-1], 1.0, out)


def parse_cdf(text: str, name: str = "<string>") -> FlowSizeCdf:
    sizes: list[float] = []
    probs: list[float] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CdfFormatError(f"{name}:{lineno}: expected 'size_bytes cum_prob', got {raw!r}")
        try:
            size, prob = float(parts[0]), float(parts[1])
        except ValueError:
            raise CdfFormatError(f"{name}:{lineno}: non-numeric field in {raw!r}") from None
        if size < 1:
            raise CdfFormatError(f"{name}:{lineno}: size must be >= 1 byte")
        if not 0.0 <= prob <= 1.0:
            raise CdfFormatError(f"{name}:{lineno}: cumulative probability outside [0, 1]")
        if sizes and size <= sizes[-1]:
            raise CdfFormatError(f"{name}:{lineno}: sizes must increase strictly")
        if probs and prob < probs[-1]:
            raise CdfFormatError(f"{name}:{lineno}: cumulative probability decreased")
        sizes.append(size)
        probs.append(prob)
    if not sizes:
        raise CdfFormatError(f"{name}: no data lines")
    if probs[-1] != 1.0:
        raise CdfFormatError(f"{name}: last cumulative probability must be 1.0, got {probs[-1]}")
    return FlowSizeCdf(name=name, sizes=tuple(sizes), probs=tuple(probs))


def load_cdf(path) -> FlowSizeCdf:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cdf(fh.read(), name=str(path))


def builtin_cdf(name: str) -> FlowSizeCdf:
    if name not in BUILTIN_CDFS:
        raise KeyError(f"unknown workload {name!r}; choose from {BUILTIN_CDFS}")
    text = resources.files("ecnlab.data").joinpath(f"{name}.cdf").read_text(encoding="utf-8")
    return parse_cdf(text, name=name)


def sample_size(cdf: FlowSizeCdf, u: float) -> float:
    """Inverse-transform sample; linear interpolation between knots."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    probs = cdf.probs
    sizes = cdf.sizes
    if u < probs[0]:
        return sizes[0]
    i = int(np.searchsorted(probs, u, side="right")) - 1
    if i >= len(sizes) - 1:
        return sizes[-1]
    p0, p1 = probs[i], probs[i + 1]
    if p1 == p0:
        return sizes[i]
    return sizes[i] + (u - p0) / (p1 - p0) * (sizes[i + 1] - sizes[i])


@dataclass(frozen=True)
class IncastSpec:
    fanout: int = 16
    period_s: float = 1e-3
    flow_size_bytes: int = 64 * 1024

    def __post_init__(self):
        if not isinstance(self.fanout, int) or self.fanout < 1:
            raise ValueError(f"fanout must be a positive integer, got {self.fanout!r}")
        if not self.period_s > 0:
            raise ValueError("period_s must be positive")
        if not self.flow_size_bytes > 0:
            raise ValueError("flow_size_bytes must be positive")


@dataclass(frozen=True)
class TrafficSpec:
    cdf: FlowSizeCdf
    load: float
    duration_s: float
    incast: IncastSpec | None = None

    def __post_init__(self):
        if not 0.0 < self.load <= 1.0:
            raise ValueError(f"load must be in (0, 1], got {self.load}")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class FlowArrival:
    start_s: float
    src: str
    dst: str
    size_bytes: int
    tag: str


def host_capacity_sum(t: Topology) -> float:
    """Aggregate access capacity: one link per host, counted once."""
    return sum(l.capacity_bps for l in t.links if t.nodes[l.src].kind == HOST)


def arrival_rate(t: Topology, spec: TrafficSpec) -> float:
    """Background Poisson rate (flows/s) hitting the requested load."""
    return spec.load * host_capacity_sum(t) / (8.0 * spec.cdf.mean())


def generate(t: Topology, spec: TrafficSpec, seed: int) -> list[FlowArrival]:
    """Deterministic trace for (topology, spec, seed), sorted by start time.

    Background and incast draws use separately spawned streams, so toggling
    incasts does not perturb the background trace at a given seed.
    """
    hosts = t.hosts()
    if len(hosts) < 2:
        raise ValueError("need at least two hosts to generate traffic")
    bg_ss, in_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(bg_ss)
    lam = arrival_rate(t, spec)
    flows: list[FlowArrival] = []
    n = len(hosts)
    now = rng.exponential(1.0 / lam)
    while now < spec.duration_s:
        si = int(rng.integers(0, n))
        di = int(rng.integers(0, n - 1))
        if di >= si:
            di += 1
        size = max(1, round(sample_size(spec.cdf, float(rng.random()))))
        flows.append(FlowArrival(now, hosts[si], hosts[di], size, BACKGROUND))
        now += rng.exponential(1.0 / lam)
    if spec.incast is not None:
        inc = spec.incast
        if not 1 <= inc.fanout <= n - 1:
            raise ValueError(f"incast fanout {inc.fanout} needs {inc.fanout + 1} hosts")
        irng = np.random.default_rng(in_ss)
        k = 0
        while k * inc.period_s < spec.duration_s:
            victim = hosts[k % n]
            others = [h for h in hosts if h != victim]
            senders = irng.choice(len(others), size=inc.fanout, replace=False)
            for s in sorted(senders):
                flows.append(
                    FlowArrival(k * inc.period_s, others[s], victim, inc.flow_size_bytes, INCAST)
                )
            k += 1
    flows.sort(key=lambda f: (f.start_s, f.tag, f.src, f.dst))
    return flows


def offered_load(t: Topology, flows: list[FlowArrival], duration_s: float) -> float:
    """Background bytes over capacity-duration; incast bytes are additive."""
    total = sum(f.size_bytes for f in flows if f.tag == BACKGROUND)
    return total * 8.0 / (duration_s * host_capacity_sum(t))


TRACE_FIELDS = ("start_s", "src", "dst", "size_bytes", "tag")


def trace_to_csv(flows: list[FlowArrival]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for f in flows:
        w.writerow([repr(f.start_s), f.src, f.dst, f.size_bytes, f.tag])
    return buf.getvalue()


def trace_from_csv(text: str) -> list[FlowArrival]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRACE_FIELDS:
        raise ValueError(f"trace header must be {','.join(TRACE_FIELDS)}")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        start, src, dst, size, tag = row
        out.append(FlowArrival(float(start), src, dst, int(size), tag))
    return out
