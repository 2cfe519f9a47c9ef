"""Scenario catalog, evaluation rollouts, metric reports, and comparisons.

A scenario names a topology recipe, a workload, a load level, and an incast
toggle. Evaluation rolls a policy greedily over the scenario for each seed,
then lets the network drain so the same flow set finishes. Reports carry
per-flow FCT slowdowns (bucketed by size, drain included so stragglers
count), goodput over the scheduled window, and the time-averaged switch
queue occupancy. Reports from different policies on the same scenario can
be joined into a normalized comparison table.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gnn, netsim, rl, topo, workload

REPORT_SCHEMA = 1

# log-spaced size buckets: 1 KiB, 4 KiB, ..., 64 MiB, plus an open top bucket
BUCKET_EDGES_BYTES = tuple(1024 * 4 ** k for k in range(9))

WORKLOAD_NAMES = workload.BUILTIN_CDFS
TOPOLOGY_RECIPES = ("base", "fail1", "fail2", "branch", "hosts32", "hosts40")

DEFAULT_SEEDS = (1, 2, 3)
DRAIN_FACTOR = 10.0


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """One evaluation cell: what network, what traffic, how long, which seeds."""

    name: str
    workload: str
    load: float
    incast: bool
    topology: str = "base"
    duration_s: float = 25e-3
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    incast_spec: workload.IncastSpec | None = None  # custom shape; default when None

    def __post_init__(self):
        if self.workload not in WORKLOAD_NAMES:
            raise ScenarioError(f"unknown workload {self.workload!r}")
        if self.topology not in TOPOLOGY_RECIPES:
            raise ScenarioError(f"unknown topology recipe {self.topology!r}")
        if not 0.0 < self.load < 1.0:
            raise ScenarioError(f"load must be in (0, 1), got {self.load}")
        if self.duration_s <= 0:
            raise ScenarioError("duration must be positive")
        if not self.seeds:
            raise ScenarioError("need at least one seed")


def base_topology() -> topo.Topology:
    """24 hosts under 4 leaves, 2 spines; 25G host links, 100G fabric."""
    return topo.build_clos(hosts_per_leaf=6, n_leaf=4, n_spine=2)


def scenario_topology(spec: ScenarioSpec) -> topo.Topology:
    t = base_topology()
    if spec.topology == "base":
        return t
    if spec.topology == "fail1":
        return topo.mutate(t, topo.RemoveLink("l0", "s0"))
    if spec.topology == "fail2":
        t = topo.mutate(t, topo.RemoveLink("l0", "s0"))
        return topo.mutate(t, topo.RemoveLink("l1", "s1"))
    if spec.topology == "branch":
        return topo.mutate(t, topo.AddBranch())
    if spec.topology in ("hosts32", "hosts40"):
        extra_per_leaf = 2 if spec.topology == "hosts32" else 4
        for leaf in ("l0", "l1", "l2", "l3"):
            t = topo.mutate(t, topo.AddHosts(leaf, extra_per_leaf))
        return t
    raise ScenarioError(f"unknown topology recipe {spec.topology!r}")


def scenario_traffic(spec: ScenarioSpec) -> workload.TrafficSpec:
    return workload.TrafficSpec(
        cdf=workload.builtin_cdf(spec.workload),
        load=spec.load,
        duration_s=spec.duration_s,
        incast=(spec.incast_spec or workload.IncastSpec()) if spec.incast else None,
    )


def scenario_catalog() -> tuple[ScenarioSpec, ...]:
    """The evaluation grid: six workload/incast cells at 60% load, higher
    loads, link failures, a grafted branch, and host scale-ups."""
    cells = []
    for name in WORKLOAD_NAMES:
        for incast in (True, False):
            suffix = "-incast" if incast else ""
            cells.append(ScenarioSpec(f"{name}-60{suffix}", name, 0.60, incast))
    cells.append(ScenarioSpec("fb_hadoop-70-incast", "fb_hadoop", 0.70, True))
    cells.append(ScenarioSpec("fb_hadoop-80-incast", "fb_hadoop", 0.80, True))
    cells.append(ScenarioSpec("fail1", "fb_hadoop", 0.60, True, topology="fail1"))
    cells.append(ScenarioSpec("fail2", "fb_hadoop", 0.60, True, topology="fail2"))
    cells.append(ScenarioSpec("branch", "fb_hadoop", 0.60, True, topology="branch"))
    cells.append(ScenarioSpec("hosts32", "fb_hadoop", 0.60, True, topology="hosts32"))
    cells.append(ScenarioSpec("hosts40", "fb_hadoop", 0.60, True, topology="hosts40"))
    return tuple(cells)


TRAIN_SCENARIO = "fb_hadoop-60-incast"


def find_scenario(name: str) -> ScenarioSpec:
    for spec in scenario_catalog():
        if spec.name == name:
            return spec
    known = ", ".join(s.name for s in scenario_catalog())
    raise ScenarioError(f"unknown scenario {name!r}; known: {known}")


# -- training environment ---------------------------------------------------------


class NetsimEnv:
    """rl.AgentEnv over the simulator: one episode = one fresh traffic trace.

    Episode e of a run seeded with s draws its trace and marking randomness
    from SeedSequence((s, e)), so training is reproducible end to end while
    every episode still sees new traffic.
    """

    def __init__(
        self,
        scenario: ScenarioSpec,
        sim_config: netsim.SimConfig | None = None,
        seed: int = 0,
        w_queue: float = rl.REWARD_QUEUE_WEIGHT,
        w_util: float = rl.REWARD_UTIL_WEIGHT,
    ):
        self.scenario = scenario
        self.topology = scenario_topology(scenario)
        self.neighborhood = gnn.Neighborhood(self.topology)
        base = sim_config or netsim.SimConfig()
        self.sim_config = dataclasses.replace(base, episode_s=scenario.duration_s)
        self.traffic = scenario_traffic(scenario)
        self.seed = seed
        self.w_queue = w_queue
        self.w_util = w_util
        self._episode = -1
        self.sim: netsim.Simulation | None = None
        self._interval = 0

    def reset(self) -> np.ndarray:
        self._episode += 1
        children = np.random.SeedSequence((self.seed, self._episode)).spawn(2)
        trace_seed = int(children[0].generate_state(1)[0])
        sim_seed = int(children[1].generate_state(1)[0])
        flows = workload.generate(self.topology, self.traffic, seed=trace_seed)
        cfg = dataclasses.replace(self.sim_config, seed=sim_seed)
        self.sim = netsim.Simulation(self.topology, flows, cfg)
        self._interval = 0
        return self.sim.agent_features()

    def step(self, configs) -> tuple[np.ndarray, np.ndarray, bool]:
        if self.sim is None:
            raise RuntimeError("env.reset() must run before step()")
        self.sim.apply_agent_actions(configs)
        obs = self.sim.run_interval()
        rewards = rl.reward(obs[:, 0], obs[:, 1], w_queue=self.w_queue, w_util=self.w_util)
        self._interval += 1
        done = self._interval >= self.sim.config.intervals_per_episode
        return self.sim.agent_features(), rewards, done


# -- evaluation rollouts ------------------------------------------------------------


@dataclass
class SeedStats:
    seed: int
    completed: list  # (size_bytes, slowdown, tag)
    unfinished: int
    throughput_bps: float
    mean_queue_bytes: float
    elapsed_s: float
    flow_rows: list
    port_rows: list


def _rollout(
    t: topo.Topology,
    spec: ScenarioSpec,
    policy,
    seed: int,
    base_cfg: netsim.SimConfig,
    keep_port_log: bool,
) -> SeedStats:
    flows = workload.generate(t, scenario_traffic(spec), seed=seed)
    if not flows:
        # idle network: nothing arrives, nothing queues
        return SeedStats(seed, [], 0, 0.0, 0.0, spec.duration_s, [], [])
    cfg = dataclasses.replace(base_cfg, episode_s=spec.duration_s, seed=seed)
    sim = netsim.Simulation(t, flows, cfg, keep_port_log=keep_port_log)
    policy.reset(t)

    for _ in range(cfg.intervals_per_episode):
        sim.apply_agent_actions(policy.act(sim.agent_features()))
        sim.run_interval()

    integral, ticks = sim.queue_time_average()
    mean_queue = integral / (ticks * sim.n_switch_ports) if ticks else 0.0
    # goodput over the scheduled window; the drain below only settles FCTs
    delivered_nominal = sim.delivered_bytes_total
    nominal_s = sim.time_s

    # drain with the policy still in the loop until every flow lands
    deadline = sim.time_s + DRAIN_FACTOR * spec.duration_s
    while not sim.all_done and sim.time_s < deadline - 1e-12:
        sim.apply_agent_actions(policy.act(sim.agent_features()))
        sim.run_interval()

    completed = []
    flow_rows = []
    unfinished = 0
    for rec in sim.records:
        if rec.finish_s is None:
            unfinished += 1
            flow_rows.append(
                (seed, rec.flow_id, rec.size_bytes, rec.start_s, "", "", rec.tag)
            )
        else:
            s = netsim.fct_slowdown(rec)
            completed.append((rec.size_bytes, s, rec.tag))
            flow_rows.append(
                (seed, rec.flow_id, rec.size_bytes, rec.start_s, rec.finish_s, s, rec.tag)
            )

    n_hosts = len(t.hosts())
    throughput = delivered_nominal * 8.0 / (nominal_s * n_hosts) if nominal_s > 0 else 0.0
    port_rows = [(seed,) + row for row in sim.port_log_rows]
    return SeedStats(
        seed=seed,
        completed=completed,
        unfinished=unfinished,
        throughput_bps=throughput,
        mean_queue_bytes=mean_queue,
        elapsed_s=sim.time_s,
        flow_rows=flow_rows,
        port_rows=port_rows,
    )


def _bucket_index(size_bytes: float) -> int:
    return int(np.searchsorted(BUCKET_EDGES_BYTES, size_bytes, side="right"))


def _bucket_bounds(i: int) -> tuple[float, float | None]:
    lo = 0.0 if i == 0 else float(BUCKET_EDGES_BYTES[i - 1])
    hi = float(BUCKET_EDGES_BYTES[i]) if i < len(BUCKET_EDGES_BYTES) else None
    return lo, hi


def _bucket_stats(pooled: list) -> list[dict]:
    n_buckets = len(BUCKET_EDGES_BYTES) + 1
    per_bucket: list[list[float]] = [[] for _ in range(n_buckets)]
    for size, slowdown, _tag in pooled:
        per_bucket[_bucket_index(size)].append(slowdown)
    out = []
    for i, xs in enumerate(per_bucket):
        lo, hi = _bucket_bounds(i)
        if xs:
            med, p95, p99 = np.percentile(xs, [50.0, 95.0, 99.0])
            out.append(
                {
                    "lo_bytes": lo,
                    "hi_bytes": hi,
                    "count": len(xs),
                    "median": float(med),
                    "p95": float(p95),
                    "p99": float(p99),
                }
            )
        else:
            out.append(
                {
                    "lo_bytes": lo,
                    "hi_bytes": hi,
                    "count": 0,
                    "median": None,
                    "p95": None,
                    "p99": None,
                }
            )
    return out


def run(
    spec: ScenarioSpec,
    policy,
    seeds: tuple[int, ...] | None = None,
    sim_config: netsim.SimConfig | None = None,
    artifacts: dict | None = None,
) -> dict:
    """Evaluate one policy on one scenario across seeds; returns the report.

    Pass an `artifacts` dict to also receive per-flow rows under "flows" and
    (with a non-empty dict key "ports" requested) per-interval port rows.
    """
    seeds = tuple(seeds) if seeds is not None else spec.seeds
    base_cfg = sim_config or netsim.SimConfig()
    keep_port_log = artifacts is not None and artifacts.get("want_ports", False)
    t = scenario_topology(spec)

    stats = [_rollout(t, spec, policy, s, base_cfg, keep_port_log) for s in seeds]

    pooled = [row for st in stats for row in st.completed]
    slowdowns = np.array([s for _, s, _ in pooled]) if pooled else np.array([])
    report = {
        "schema": REPORT_SCHEMA,
        "kind": "metrics_report",
        "scenario": spec.name,
        "policy": getattr(policy, "name", policy.__class__.__name__),
        "seeds": list(seeds),
        "bucket_edges_bytes": list(BUCKET_EDGES_BYTES),
        "buckets": _bucket_stats(pooled),
        "completed_flows": len(pooled),
        "unfinished_flows": int(sum(st.unfinished for st in stats)),
        "mean_fct_slowdown": float(slowdowns.mean()) if pooled else None,
        "mean_throughput_bps": float(np.mean([st.throughput_bps for st in stats])),
        "mean_queue_bytes": float(np.mean([st.mean_queue_bytes for st in stats])),
        "per_seed": [
            {
                "seed": st.seed,
                "completed": len(st.completed),
                "unfinished": st.unfinished,
                "throughput_bps": st.throughput_bps,
                "mean_queue_bytes": st.mean_queue_bytes,
                "elapsed_s": st.elapsed_s,
            }
            for st in stats
        ],
    }
    if artifacts is not None:
        artifacts["flows"] = [row for st in stats for row in st.flow_rows]
        if keep_port_log:
            artifacts["ports"] = [row for st in stats for row in st.port_rows]
    return report


def evaluate_policy(
    policy,
    spec: ScenarioSpec,
    seeds: tuple[int, ...] | None = None,
    sim_config: netsim.SimConfig | None = None,
) -> dict:
    """Greedy rollout of a policy over a scenario; metrics report."""
    return run(spec, policy, seeds=seeds, sim_config=sim_config)


# -- comparisons ---------------------------------------------------------------------


AGGREGATE_FIELDS = ("mean_fct_slowdown", "mean_throughput_bps", "mean_queue_bytes")


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return a / b


def compare(reports: list[dict], reference: str) -> dict:
    """Normalize every report against the named one, per bucket and aggregate.

    Reports are keyed by their "policy" field; bucket boundaries must match.
    """
    by_name = {}
    for rep in reports:
        name = rep["policy"]
        if name in by_name:
            raise ValueError(f"duplicate report name {name!r}")
        by_name[name] = rep
    if reference not in by_name:
        raise ValueError(f"reference {reference!r} not among {sorted(by_name)}")
    ref = by_name[reference]
    for rep in reports:
        if rep["bucket_edges_bytes"] != ref["bucket_edges_bytes"]:
            raise ValueError(
                f"bucket boundaries of {rep['policy']!r} do not match the reference"
            )

    rows = []
    for name, rep in by_name.items():
        buckets = []
        for b, rb in zip(rep["buckets"], ref["buckets"]):
            buckets.append(
                {
                    "lo_bytes": b["lo_bytes"],
                    "hi_bytes": b["hi_bytes"],
                    "median_ratio": _ratio(b["median"], rb["median"]),
                    "p95_ratio": _ratio(b["p95"], rb["p95"]),
                    "p99_ratio": _ratio(b["p99"], rb["p99"]),
                }
            )
        aggregates = {}
        for field in AGGREGATE_FIELDS:
            r = _ratio(rep[field], ref[field])
            aggregates[field + "_pct"] = None if r is None else (r - 1.0) * 100.0
        rows.append({"policy": name, "buckets": buckets, **aggregates})

    return {
        "schema": REPORT_SCHEMA,
        "kind": "comparison",
        "reference": reference,
        "scenario": ref.get("scenario"),
        "bucket_edges_bytes": list(ref["bucket_edges_bytes"]),
        "rows": rows,
    }


# -- serialization ---------------------------------------------------------------------


def save_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1))


def load_report(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != REPORT_SCHEMA or doc.get("kind") != "metrics_report":
        raise ValueError(f"not a metrics report: {path}")
    return doc


REPORT_CSV_FIELDS = (
    "schema", "scenario", "policy", "section",
    "lo_bytes", "hi_bytes", "count", "median", "p95", "p99", "value",
)


def report_to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(REPORT_CSV_FIELDS)
    head = [report["schema"], report["scenario"], report["policy"]]
    for b in report["buckets"]:
        w.writerow(
            head
            + ["bucket", b["lo_bytes"], b["hi_bytes"], b["count"],
               b["median"], b["p95"], b["p99"], ""]
        )
    for field in AGGREGATE_FIELDS + ("completed_flows", "unfinished_flows"):
        w.writerow(head + [field, "", "", "", "", "", "", report[field]])
    return buf.getvalue()


COMPARE_CSV_FIELDS = (
    "schema", "reference", "policy", "section",
    "lo_bytes", "hi_bytes", "median_ratio", "p95_ratio", "p99_ratio", "delta_pct",
)


def compare_to_csv(comparison: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(COMPARE_CSV_FIELDS)
    head = [comparison["schema"], comparison["reference"]]
    for row in comparison["rows"]:
        for b in row["buckets"]:
            w.writerow(
                head
                + [row["policy"], "bucket", b["lo_bytes"], b["hi_bytes"],
                   b["median_ratio"], b["p95_ratio"], b["p99_ratio"], ""]
            )
        for field in AGGREGATE_FIELDS:
            w.writerow(
                head
                + [row["policy"], field, "", "", "", "", "", row[field + "_pct"]]
            )
    return buf.getvalue()


FLOW_CSV_FIELDS = ("seed", "flow_id", "size_bytes", "start_s", "finish_s", "slowdown", "tag")
PORT_CSV_FIELDS = (
    "seed", "time_s", "port", "util", "queue_bytes", "ecn_rate",
    "kmin_bytes", "kmax_bytes", "pmax",
)


def rows_to_csv(fields: tuple, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(fields)
    w.writerows(rows)
    return buf.getvalue()
