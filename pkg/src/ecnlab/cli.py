"""Command-line front end: train policies, evaluate scenarios, compare reports.

One optional JSON config file feeds every subcommand. Top-level sections:

    {
      "schema_version": 1,
      "sim":      { ... netsim.SimConfig overrides ... },
      "train":    { ... rl.TrainConfig overrides ... },
      "traffic":  { ... workload.IncastSpec overrides ... },
      "scenario": { "name": "fb_hadoop-60-incast", ... ScenarioSpec overrides ... }
    }

Command-line flags win over config file values, which win over defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import baselines, gnn, harness, netsim, nn, rl, workload

CONFIG_SCHEMA = 1
CONFIG_SECTIONS = ("schema_version", "sim", "train", "traffic", "scenario")

POLICY_KINDS = ("graphcc", "independent", "static")


class ConfigError(ValueError):
    pass


# -- config file -------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {"schema_version": CONFIG_SCHEMA}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("schema_version", CONFIG_SCHEMA)
    if version != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for key in CONFIG_SECTIONS[1:]:
        if key in doc and not isinstance(doc[key], dict):
            raise ConfigError(f"config section {key!r} must be an object")
    return doc


def _build(factory, settings: dict, what: str):
    try:
        return factory(**settings)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {what} settings: {e}") from None


def sim_config(doc: dict) -> netsim.SimConfig:
    return _build(netsim.SimConfig, doc.get("sim", {}), "sim")


def train_config(doc: dict, **overrides) -> rl.TrainConfig:
    merged = dict(doc.get("train", {}))
    merged.update(overrides)
    return _build(rl.TrainConfig, merged, "train")


def scenario_spec(
    doc: dict,
    name: str | None = None,
    seeds: tuple[int, ...] | None = None,
) -> harness.ScenarioSpec:
    """Catalog entry selected by name, then config overrides, then CLI seeds."""
    section = dict(doc.get("scenario", {}))
    base_name = name or section.pop("name", None) or harness.TRAIN_SCENARIO
    section.pop("name", None)
    spec = harness.find_scenario(base_name)
    traffic = doc.get("traffic", {})
    if traffic:
        section.setdefault("incast_spec", _build(workload.IncastSpec, traffic, "traffic"))
    if "seeds" in section:
        section["seeds"] = tuple(section["seeds"])
    if seeds is not None:
        section["seeds"] = seeds
    if not section:
        return spec
    try:
        return dataclasses.replace(spec, **section)
    except (TypeError, harness.ScenarioError) as e:
        raise ConfigError(f"bad scenario overrides: {e}") from None


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


# -- policies ----------------------------------------------------------------------


def load_any_policy(path: str | Path):
    """Open a checkpoint and build the matching policy from its kind tag."""
    doc = json.loads(Path(path).read_text())
    kind = doc.get("kind")
    if kind == "graphcc":
        return gnn.GreedyMpnnPolicy.from_file(path)
    if kind == "independent":
        return baselines.IndependentPolicy.from_file(path)
    raise nn.CheckpointError(f"unrecognized checkpoint kind {kind!r} in {path}")


def build_policy(kind: str, model: str | None):
    if kind == "static":
        if model:
            raise ConfigError("the static policy takes no --model")
        return baselines.StaticEcnPolicy()
    if model is None:
        raise ConfigError("--model is required unless --policy static")
    policy = load_any_policy(model)
    if kind != "auto" and policy.name != kind:
        raise ConfigError(f"--policy {kind} but {model} holds a {policy.name} checkpoint")
    return policy


# -- subcommands -------------------------------------------------------------------


def cmd_catalog(args) -> int:
    for s in harness.scenario_catalog():
        mix = "incast" if s.incast else "background"
        print(
            f"{s.name:20s} workload={s.workload:11s} load={s.load:.2f} "
            f"traffic={mix:10s} topology={s.topology:7s} "
            f"duration={s.duration_s * 1e3:g}ms seeds={','.join(map(str, s.seeds))}"
        )
    return 0


def cmd_train(args) -> int:
    doc = load_config(args.config)
    spec = scenario_spec(doc, name=args.scenario)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    overrides["log_path"] = args.log or f"{args.out}.log.csv"
    if args.checkpoint_every:
        overrides["checkpoint_every"] = args.checkpoint_every
        overrides["checkpoint_dir"] = args.checkpoint_dir or f"{args.out}.snapshots"
    cfg = train_config(doc, **overrides)

    env = harness.NetsimEnv(
        spec, sim_config=sim_config(doc), seed=cfg.seed,
        w_queue=cfg.w_queue, w_util=cfg.w_util,
    )
    meta = {"scenario": spec.name, "seed": cfg.seed}
    if args.policy == "graphcc":
        result = rl.train(env, cfg)
        gnn.save_policy(args.out, result.params, meta=meta)
    else:
        result = baselines.train_independent(env, cfg)
        baselines.save_independent(args.out, result.params, meta=meta)

    tail = result.log_rows[-1] if result.log_rows else {}
    status = "ABORTED (non-finite weights; kept last good)" if result.aborted else "done"
    print(f"train {args.policy} on {spec.name}: {status}")
    print(
        f"  episodes={result.episodes_run} grad_steps={result.grad_steps} "
        f"final_mean_reward={tail.get('mean_reward', float('nan')):.4f}"
    )
    print(f"  model -> {args.out}")
    print(f"  log   -> {cfg.log_path}")
    return 1 if result.aborted else 0


def cmd_evaluate(args) -> int:
    doc = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    spec = scenario_spec(doc, name=args.scenario, seeds=seeds)
    policy = build_policy(args.policy, args.model)

    artifacts: dict = {"want_ports": bool(args.port_log)}
    report = harness.run(spec, policy, sim_config=sim_config(doc), artifacts=artifacts)
    harness.save_report(args.out, report)

    stem = Path(args.out)
    flow_path = stem.with_suffix(".flows.csv")
    flow_path.write_text(harness.rows_to_csv(harness.FLOW_CSV_FIELDS, artifacts["flows"]))
    if args.csv:
        Path(args.csv).write_text(harness.report_to_csv(report))
    if args.port_log:
        port_path = stem.with_suffix(".ports.csv")
        port_path.write_text(harness.rows_to_csv(harness.PORT_CSV_FIELDS, artifacts["ports"]))
        print(f"port log -> {port_path}")

    slow = report["mean_fct_slowdown"]
    print(f"evaluate {report['policy']} on {spec.name}: seeds={list(spec.seeds)}")
    print(
        f"  flows completed={report['completed_flows']} unfinished={report['unfinished_flows']}"
    )
    print(
        f"  mean_fct_slowdown={slow if slow is None else round(slow, 4)} "
        f"mean_throughput={report['mean_throughput_bps'] / 1e9:.3f}Gbps/host "
        f"mean_queue={report['mean_queue_bytes'] / 1024:.1f}KiB"
    )
    print(f"  report -> {args.out}")
    print(f"  flows  -> {flow_path}")
    return 0


def cmd_compare(args) -> int:
    reports = [harness.load_report(p) for p in args.reports]
    table = harness.compare(reports, args.reference)
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        print(f"comparison -> {args.out}")
    if args.csv:
        Path(args.csv).write_text(harness.compare_to_csv(table))
        print(f"csv        -> {args.csv}")

    print(f"scenario {table['scenario']}, reference {table['reference']} (deltas vs reference)")
    for row in table["rows"]:
        parts = []
        for field, label in (
            ("mean_fct_slowdown_pct", "slowdown"),
            ("mean_throughput_bps_pct", "throughput"),
            ("mean_queue_bytes_pct", "queue"),
        ):
            val = row[field]
            parts.append(f"{label}={'n/a' if val is None else f'{val:+.1f}%'}")
        print(f"  {row['policy']:12s} " + " ".join(parts))
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecnlab",
        description="Train, evaluate, and compare ECN threshold policies on the fluid fabric.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy and write a checkpoint")
    p_train.add_argument("--config", help="JSON config file")
    p_train.add_argument("--out", required=True, help="checkpoint path to write")
    p_train.add_argument("--policy", choices=("graphcc", "independent"), default="graphcc")
    p_train.add_argument("--scenario", help="catalog scenario to train on")
    p_train.add_argument("--seed", type=int, help="training seed")
    p_train.add_argument("--episodes", type=int, help="episode count")
    p_train.add_argument("--log", help="training log CSV (default: OUT.log.csv)")
    p_train.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                         help="also snapshot the model every N episodes")
    p_train.add_argument("--checkpoint-dir", help="snapshot directory (default: OUT.snapshots)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="roll a policy over a scenario, write a report")
    p_eval.add_argument("--config", help="JSON config file")
    p_eval.add_argument("--model", help="checkpoint to evaluate")
    p_eval.add_argument("--policy", choices=("auto",) + POLICY_KINDS, default="auto",
                        help="force the policy kind; 'static' needs no model")
    p_eval.add_argument("--scenario", required=True, help="catalog scenario name")
    p_eval.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    p_eval.add_argument("--out", required=True, help="report JSON path")
    p_eval.add_argument("--csv", help="also write the report as CSV")
    p_eval.add_argument("--port-log", action="store_true",
                        help="write the per-interval port log CSV")
    p_eval.set_defaults(func=cmd_evaluate)

    p_cmp = sub.add_parser("compare", help="normalize reports against a reference policy")
    p_cmp.add_argument("--reference", required=True, help="policy name to normalize against")
    p_cmp.add_argument("reports", nargs="+", help="report JSON files")
    p_cmp.add_argument("--csv", help="write the comparison as CSV")
    p_cmp.add_argument("--out", help="write the comparison as JSON")
    p_cmp.set_defaults(func=cmd_compare)

    p_cat = sub.add_parser("catalog", help="list the scenario catalog")
    p_cat.set_defaults(func=cmd_catalog)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        harness.ScenarioError,
        nn.CheckpointError,
        netsim.SimulationError,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
