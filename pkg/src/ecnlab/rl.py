"""Multi-agent Q-learning on top of the graph net.

Every switch port is an agent; all agents share one set of network weights.
Training is standard DQN machinery adapted to the shared-weight multi-agent
setting: a replay ring of whole-fabric transitions, epsilon-greedy rollouts,
Double-DQN targets per agent, and a periodically synced target network.

Episode ends are truncations of a continuing control process, not terminal
states, so TD targets always bootstrap.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from . import gnn, nn

REWARD_QUEUE_WEIGHT = 0.7
REWARD_UTIL_WEIGHT = 0.3


def reward(util, queue_norm, w_queue: float = REWARD_QUEUE_WEIGHT,
           w_util: float = REWARD_UTIL_WEIGHT):
    """Per-port reward: keep queues empty, keep the link busy.

    Inputs are clamped to [0, 1]; works elementwise on arrays.
    """
    u = np.clip(util, 0.0, 1.0)
    q = np.clip(queue_norm, 0.0, 1.0)
    return w_queue * (1.0 - q) + w_util * u


class Transition(NamedTuple):
    features: np.ndarray       # (V, F)
    actions: np.ndarray        # (V,) int indices into the action table
    rewards: np.ndarray        # (V,)
    next_features: np.ndarray  # (V, F)
    terminal: bool = False     # true end state; episode truncation stays False


class ReplayBuffer:
    """Fixed-size ring of transitions; uniform or proportional sampling."""

    def __init__(self, capacity: int = 10_000, prioritized: bool = False,
                 alpha: float = 0.6):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.prioritized = prioritized
        self.alpha = alpha
        self._items: list[Transition] = []
        self._next = 0
        self._prio = np.zeros(capacity)
        self._max_prio = 1.0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
            slot = len(self._items) - 1
        else:
            slot = self._next
            self._items[slot] = tr
        self._next = (self._next + 1) % self.capacity
        self._prio[slot] = self._max_prio

    def sample(
        self, batch_size: int, rng: np.random.Generator, beta: float = 0.4
    ) -> tuple[np.ndarray, list[Transition], np.ndarray]:
        """Draw a batch; returns (indices, transitions, importance weights).

        Uniform mode returns unit weights. Proportional mode draws with
        probability ~ priority^alpha and corrects the induced bias with
        (n * P(i))^-beta weights, normalized so the largest weight is 1.
        """
        n = len(self._items)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        if self.prioritized:
            scaled = self._prio[:n] ** self.alpha
            probs = scaled / scaled.sum()
            cum = np.cumsum(probs)
            draws = rng.random(batch_size) * cum[-1]
            idx = np.searchsorted(cum, draws, side="right")
            idx = np.minimum(idx, n - 1)
            weights = (n * probs[idx]) ** -beta
            weights = weights / weights.max()
        else:
            idx = rng.integers(0, n, size=batch_size)
            weights = np.ones(batch_size)
        return idx, [self._items[i] for i in idx], weights

    def update_priorities(self, idx: np.ndarray, td_abs: np.ndarray) -> None:
        p = np.abs(td_abs) + 1e-3
        self._prio[idx] = p
        self._max_prio = max(self._max_prio, float(p.max()))


def td_targets(
    online: gnn.GnnParams,
    target: gnn.GnnParams,
    nbr: gnn.Neighborhood,
    rewards: np.ndarray,
    next_features: np.ndarray,
    gamma: float,
    terminal: np.ndarray | None = None,
) -> np.ndarray:
    """Double-DQN: online net picks the argmax, target net prices it.

    terminal, when given, is a (B,) mask; those rows regress to the bare
    reward with no bootstrap.
    """
    q_online, _ = gnn.batch_forward(online, nbr, next_features)
    a_star = q_online.argmax(axis=2)
    q_target, _ = gnn.batch_forward(target, nbr, next_features)
    chosen = np.take_along_axis(q_target, a_star[:, :, None], axis=2)[:, :, 0]
    if terminal is not None:
        chosen = chosen * ~np.asarray(terminal, dtype=bool)[:, None]
    return rewards + gamma * chosen


class AgentEnv(Protocol):
    """What the trainer needs from an environment."""

    neighborhood: gnn.Neighborhood

    def reset(self) -> np.ndarray:
        """Start a fresh episode; returns initial (V, F) features."""
        ...

    def step(self, configs) -> tuple[np.ndarray, np.ndarray, bool]:
        """Apply per-agent marking configs; returns (features, rewards, done)."""
        ...


@dataclass
class TrainConfig:
    episodes: int = 120
    gamma: float = 0.95
    lr: float = 1e-3
    batch_size: int = 32
    target_sync: int = 100       # gradient steps between target refreshes
    replay_capacity: int = 10_000
    min_replay: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_frac: float = 0.6        # fraction of episodes spent annealing
    prioritized: bool = False
    w_queue: float = REWARD_QUEUE_WEIGHT
    w_util: float = REWARD_UTIL_WEIGHT
    seed: int = 0
    log_path: str | None = None
    checkpoint_every: int = 0    # episodes between snapshots; 0 disables
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("need at least one episode")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 < self.eps_frac <= 1.0:
            raise ValueError("eps_frac must be in (0, 1]")
        if self.eps_end > self.eps_start:
            raise ValueError("epsilon must not grow")
        if min(self.w_queue, self.w_util) < 0 or abs(self.w_queue + self.w_util - 1.0) > 1e-9:
            raise ValueError("reward weights must be nonnegative and sum to 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ValueError("periodic checkpoints need a checkpoint_dir")


def epsilon_at(episode: int, cfg: TrainConfig) -> float:
    """Linear anneal over the first eps_frac of training, then flat."""
    span = max(1, int(round(cfg.eps_frac * cfg.episodes)))
    if episode >= span:
        return cfg.eps_end
    t = episode / span
    return cfg.eps_start + t * (cfg.eps_end - cfg.eps_start)


def beta_at(episode: int, cfg: TrainConfig) -> float:
    """Importance-correction exponent: 0.4 at the start, 1.0 by the end."""
    if cfg.episodes <= 1:
        return 1.0
    return 0.4 + 0.6 * min(1.0, episode / (cfg.episodes - 1))


@dataclass
class TrainResult:
    params: gnn.GnnParams
    episodes_run: int
    grad_steps: int
    aborted: bool
    log_rows: list[dict] = field(default_factory=list)


LOG_FIELDS = ["episode", "mean_reward", "loss", "epsilon", "grad_steps"]


def _stack(batch: list[Transition]):
    f = np.stack([t.features for t in batch])
    a = np.stack([t.actions for t in batch])
    r = np.stack([t.rewards for t in batch])
    nf = np.stack([t.next_features for t in batch])
    term = np.array([t.terminal for t in batch], dtype=bool)
    return f, a, r, nf, term


def train(env: AgentEnv, cfg: TrainConfig) -> TrainResult:
    """Q-learning loop over env episodes; returns the trained parameters."""
    online = gnn.init_params(cfg.seed)
    target = online.copy()
    opt_m = nn.init_optimizer(online.message, lr=cfg.lr)
    opt_u = nn.init_optimizer(online.update, lr=cfg.lr)
    opt_r = nn.init_optimizer(online.readout, lr=cfg.lr)

    ss = np.random.SeedSequence(cfg.seed)
    act_rng, sample_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    replay = ReplayBuffer(cfg.replay_capacity, prioritized=cfg.prioritized)
    table = gnn.build_action_table()

    grad_steps = 0
    aborted = False
    last_good = online.copy()
    log_rows: list[dict] = []

    for ep in range(cfg.episodes):
        eps = epsilon_at(ep, cfg)
        feats = np.asarray(env.reset(), dtype=float)
        nbr = env.neighborhood
        ep_rewards: list[float] = []
        ep_losses: list[float] = []
        done = False
        while not done:
            actions = gnn.act_from_features(online, nbr, feats, epsilon=eps, rng=act_rng)
            next_feats, rewards, done = env.step([table[a] for a in actions])
            next_feats = np.asarray(next_feats, dtype=float)
            rewards = np.asarray(rewards, dtype=float)
            replay.add(Transition(feats, actions, rewards, next_feats))
            ep_rewards.append(float(rewards.mean()))
            feats = next_feats

            if len(replay) >= max(cfg.min_replay, cfg.batch_size):
                idx, batch, is_w = replay.sample(
                    cfg.batch_size, sample_rng, beta=beta_at(ep, cfg)
                )
                bf, ba, br, bnf, bterm = _stack(batch)
                y = td_targets(online, target, nbr, br, bnf, cfg.gamma, terminal=bterm)
                q, cache = gnn.batch_forward(online, nbr, bf)
                q_sel = np.take_along_axis(q, ba[:, :, None], axis=2)[:, :, 0]
                err = q_sel - y
                loss = float(np.mean(is_w[:, None] * err * err))
                ep_losses.append(loss)
                dq = np.zeros_like(q)
                np.put_along_axis(
                    dq, ba[:, :, None],
                    (2.0 * is_w[:, None] * err / err.size)[:, :, None], axis=2,
                )
                g_msg, g_upd, g_ro = gnn.batch_backward(online, nbr, cache, dq)
                if g_msg.finite() and g_upd.finite() and g_ro.finite():
                    nn.update(online.message, opt_m, g_msg)
                    nn.update(online.update, opt_u, g_upd)
                    nn.update(online.readout, opt_r, g_ro)
                    grad_steps += 1
                    if grad_steps % cfg.target_sync == 0:
                        target = online.copy()
                if cfg.prioritized:
                    replay.update_priorities(idx, np.abs(err).mean(axis=1))

        healthy = all(
            np.all(np.isfinite(w)) for p in (online.message, online.update, online.readout)
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
            gnn.save_policy(
                snap_dir / f"episode-{ep + 1:05d}.ckpt", online,
                meta={"episode": ep + 1, "seed": cfg.seed},
            )

    if cfg.log_path:
        with open(cfg.log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            writer.writerows(log_rows)

    episodes_run = len(log_rows) + (1 if aborted else 0)
    return TrainResult(
        params=online, episodes_run=episodes_run, grad_steps=grad_steps,
        aborted=aborted, log_rows=log_rows,
    )
