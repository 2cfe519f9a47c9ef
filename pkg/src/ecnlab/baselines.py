"""Reference controllers the graph policy is measured against.

* static: fixed RED thresholds scaled linearly with port speed, the
  classic datacenter operating point. Never reacts to anything.
* independent: one tiny Q-net per port trained on local observations only,
  no exchange between ports. Same action table, same reward, same replay
  discipline as the graph policy, so differences come down to coordination.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gnn, nn, rl, topo
from .netsim import FEATURE_DIM, EcnConfig

KIB = 1024

STATIC_REFERENCE_BPS = 25e9
STATIC_KMIN_BYTES = 100 * KIB
STATIC_KMAX_BYTES = 400 * KIB
STATIC_PMAX = 0.25

INDEPENDENT_SCHEMA = 1
INDEPENDENT_HIDDEN = 24


def static_ecn(capacity_bps: float) -> EcnConfig:
    """Speed-proportional fixed thresholds (100KiB/400KiB/0.25 at 25 Gbps)."""
    if capacity_bps <= 0:
        raise ValueError("capacity must be positive")
    scale = capacity_bps / STATIC_REFERENCE_BPS
    return EcnConfig(
        kmin_bytes=STATIC_KMIN_BYTES * scale,
        kmax_bytes=STATIC_KMAX_BYTES * scale,
        pmax=STATIC_PMAX,
    )


class StaticEcnPolicy:
    """Applies the speed-scaled static curve to every port, forever."""

    name = "static"

    def __init__(self):
        self._configs: list[EcnConfig] | None = None

    def reset(self, t: topo.Topology) -> None:
        self._configs = [static_ecn(l.capacity_bps) for l in topo.agents(t)]

    def act(self, features: np.ndarray) -> list[EcnConfig]:
        if self._configs is None:
            raise RuntimeError("policy.reset(topology) must run before act()")
        if len(features) != len(self._configs):
            raise ValueError("feature rows do not match agent count")
        return list(self._configs)


@dataclass
class IndependentParams:
    nets: list[nn.MlpParams]

    def copy(self) -> "IndependentParams":
        return IndependentParams([p.copy() for p in self.nets])


def init_independent(seed: int, n_agents: int) -> IndependentParams:
    """All agents start from the same weights; experience sets them apart."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    proto = nn.init_mlp(rng, [FEATURE_DIM, INDEPENDENT_HIDDEN, gnn.N_ACTIONS])
    return IndependentParams([proto.copy() for _ in range(n_agents)])


def independent_q(params: IndependentParams, features: np.ndarray) -> np.ndarray:
    """(V, F) -> (V, A), each row through its own net. No cross-port terms."""
    features = np.asarray(features, dtype=float)
    if len(features) != len(params.nets):
        raise ValueError(f"expected {len(params.nets)} feature rows")
    return np.stack([nn.forward(p, features[v]) for v, p in enumerate(params.nets)])


def select_independent_actions(
    params: IndependentParams,
    features: np.ndarray,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    q = independent_q(params, features)
    return gnn.select_actions(q, epsilon=epsilon, rng=rng)


def save_independent(path: str | Path, params: IndependentParams,
                     meta: dict | None = None) -> None:
    doc = {
        "schema": INDEPENDENT_SCHEMA,
        "kind": "independent",
        "feature_dim": FEATURE_DIM,
        "action_table": [
            [c.kmin_bytes, c.kmax_bytes, c.pmax] for c in gnn.build_action_table()
        ],
        "agents": [nn.params_to_doc(p) for p in params.nets],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_independent(path: str | Path) -> tuple[IndependentParams, tuple[EcnConfig, ...], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != INDEPENDENT_SCHEMA or doc.get("kind") != "independent":
        raise nn.CheckpointError(f"not an independent policy file: {path}")
    params = IndependentParams([nn.params_from_doc(d) for d in doc["agents"]])
    table = tuple(
        EcnConfig(kmin_bytes=a, kmax_bytes=b, pmax=c) for a, b, c in doc["action_table"]
    )
    return params, table, doc.get("meta", {})


class IndependentPolicy:
    """Greedy evaluation wrapper over per-port nets."""

    name = "independent"

    def __init__(self, params: IndependentParams, table=None):
        self.params = params
        self.table = table or gnn.build_action_table()

    @classmethod
    def from_file(cls, path: str | Path) -> "IndependentPolicy":
        params, table, _ = load_independent(path)
        return cls(params, table)

    def reset(self, t: topo.Topology) -> None:
        want = len(topo.agents(t))
        if len(self.params.nets) != want:
            raise ValueError(
                f"policy has {len(self.params.nets)} agents, topology has {want}"
            )

    def act(self, features: np.ndarray) -> list[EcnConfig]:
        idx = select_independent_actions(self.params, features)
        return [self.table[i] for i in idx]


@dataclass
class IndependentResult:
    params: IndependentParams
    episodes_run: int
    grad_steps: int
    aborted: bool
    log_rows: list[dict] = field(default_factory=list)


def train_independent(env: rl.AgentEnv, cfg: rl.TrainConfig) -> IndependentResult:
    """Same training discipline as the graph policy, minus any communication.

    One shared replay of whole-fabric snapshots; each agent learns only from
    its own column. Target nets and epsilon follow the shared schedule.
    """
    n_agents = env.neighborhood.n_vertices
    online = init_independent(cfg.seed, n_agents)
    target = online.copy()
    opts = [nn.init_optimizer(p, lr=cfg.lr) for p in online.nets]

    ss = np.random.SeedSequence(cfg.seed)
    act_rng, sample_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    replay = rl.ReplayBuffer(cfg.replay_capacity, prioritized=cfg.prioritized)
    table = gnn.build_action_table()

    grad_steps = 0
    aborted = False
    last_good = online.copy()
    log_rows: list[dict] = []

    for ep in range(cfg.episodes):
        eps = rl.epsilon_at(ep, cfg)
        feats = np.asarray(env.reset(), dtype=float)
        ep_rewards: list[float] = []
        ep_losses: list[float] = []
        done = False
        while not done:
            actions = select_independent_actions(online, feats, epsilon=eps, rng=act_rng)
            next_feats, rewards, done = env.step([table[a] for a in actions])
            next_feats = np.asarray(next_feats, dtype=float)
            rewards = np.asarray(rewards, dtype=float)
            replay.add(rl.Transition(feats, actions, rewards, next_feats))
            ep_rewards.append(float(rewards.mean()))
            feats = next_feats

            if len(replay) >= max(cfg.min_replay, cfg.batch_size):
                idx, batch, is_w = replay.sample(
                    cfg.batch_size, sample_rng, beta=rl.beta_at(ep, cfg)
                )
                bf = np.stack([t.features for t in batch])
                ba = np.stack([t.actions for t in batch])
                br = np.stack([t.rewards for t in batch])
                bnf = np.stack([t.next_features for t in batch])
                bterm = np.array([t.terminal for t in batch], dtype=bool)
                step_losses = []
                td_abs = np.zeros((cfg.batch_size, n_agents))
                for v in range(n_agents):
                    q_next_on = nn.forward(online.nets[v], bnf[:, v])
                    a_star = q_next_on.argmax(axis=1)
                    q_next_tg = nn.forward(target.nets[v], bnf[:, v])
                    boot = q_next_tg[np.arange(len(batch)), a_star] * ~bterm
                    y = br[:, v] + cfg.gamma * boot
                    q, cache = nn.forward_with_cache(online.nets[v], bf[:, v])
                    sel = ba[:, v]
                    err = q[np.arange(len(batch)), sel] - y
                    td_abs[:, v] = np.abs(err)
                    step_losses.append(float(np.mean(is_w * err * err)))
                    dq = np.zeros_like(q)
                    dq[np.arange(len(batch)), sel] = 2.0 * is_w * err / err.size
                    grads, _ = nn.backward(online.nets[v], None, dq, cache=cache)
                    if grads.finite():
                        nn.update(online.nets[v], opts[v], grads)
                ep_losses.append(float(np.mean(step_losses)))
                grad_steps += 1
                if grad_steps % cfg.target_sync == 0:
                    target = online.copy()
                if cfg.prioritized:
                    replay.update_priorities(idx, td_abs.mean(axis=1))

        healthy = all(
            np.all(np.isfinite(w))
            for p in online.nets
            for w in list(p.weights) + list(p.biases)
        )
        if not healthy:
            online = last_good
            aborted = True
            break
        last_good = online.copy()
        log_rows.append(
            {
                "episode": ep,
                "epsilon": eps,
                "mean_reward": float(np.mean(ep_rewards)) if ep_rewards else 0.0,
                "loss": float(np.mean(ep_losses)) if ep_losses else 0.0,
                "grad_steps": grad_steps,
            }
        )
        if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            snap_dir = Path(cfg.checkpoint_dir)
            snap_dir.mkdir(parents=True, exist_ok=True)
            save_independent(
                snap_dir / f"episode-{ep + 1:05d}.ckpt", online,
                meta={"episode": ep + 1, "seed": cfg.seed},
            )

    if cfg.log_path:
        with open(cfg.log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=rl.LOG_FIELDS)
            writer.writeheader()
            writer.writerows(log_rows)

    episodes_run = len(log_rows) + (1 if aborted else 0)
    return IndependentResult(
        params=online, episodes_run=episodes_run, grad_steps=grad_steps,
        aborted=aborted, log_rows=log_rows,
    )


def evaluate_policy(policy, scenario, seeds=None, sim_config=None) -> dict:
    """Greedy rollout of any policy object over a scenario; metrics report.

    Thin dispatch to the harness so static, independent, and graph-net
    policies all go through one measurement path.
    """
    from . import harness

    return harness.evaluate_policy(policy, scenario, seeds=seeds, sim_config=sim_config)
