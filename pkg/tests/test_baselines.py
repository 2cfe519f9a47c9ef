"""Baseline controller tests: static scaling, locality, independent training."""

import numpy as np
import pytest

from ecnlab import baselines, gnn, rl, topo
from ecnlab.netsim import EcnConfig

KIB = 1024


def small_clos():
    return topo.build_clos(hosts_per_leaf=4, n_leaf=2, n_spine=2)


def star_topology():
    nodes = [topo.Node("h0", "host"), topo.Node("h1", "host"), topo.Node("s0", "leaf")]
    links = []
    for h in ("h0", "h1"):
        links.append(topo.Link(h, "s0", 25e9, 1e-6))
        links.append(topo.Link("s0", h, 25e9, 1e-6))
    return topo.Topology(nodes, links)


# -- static --------------------------------------------------------------------


def test_static_scaling_worked_examples():
    c25 = baselines.static_ecn(25e9)
    assert (c25.kmin_bytes, c25.kmax_bytes, c25.pmax) == (100 * KIB, 400 * KIB, 0.25)
    c100 = baselines.static_ecn(100e9)
    assert (c100.kmin_bytes, c100.kmax_bytes, c100.pmax) == (400 * KIB, 1600 * KIB, 0.25)
    c10 = baselines.static_ecn(10e9)
    assert c10.kmin_bytes == pytest.approx(40 * KIB)
    with pytest.raises(ValueError):
        baselines.static_ecn(0)


def test_static_policy_ignores_features():
    t = small_clos()
    policy = baselines.StaticEcnPolicy()
    policy.reset(t)
    agents = topo.agents(t)
    rng = np.random.default_rng(0)
    a = policy.act(rng.random((len(agents), gnn.FEATURE_DIM)))
    b = policy.act(rng.random((len(agents), gnn.FEATURE_DIM)))
    assert a == b
    # per-port scaling follows the port's speed
    for cfg, link in zip(a, agents):
        assert cfg == baselines.static_ecn(link.capacity_bps)


def test_static_policy_needs_reset():
    with pytest.raises(RuntimeError):
        baselines.StaticEcnPolicy().act(np.zeros((4, gnn.FEATURE_DIM)))


# -- independent ------------------------------------------------------------------


def test_independent_agents_start_identical():
    params = baselines.init_independent(3, n_agents=5)
    first = params.nets[0]
    for other in params.nets[1:]:
        for w1, w2 in zip(first.weights, other.weights):
            assert np.array_equal(w1, w2)
    # and they are real copies, not views
    params.nets[1].weights[0][0, 0] += 1.0
    assert params.nets[0].weights[0][0, 0] != params.nets[1].weights[0][0, 0]


def test_independent_actions_are_local():
    # changing other agents' observations must not change agent 0's action
    params = baselines.init_independent(1, n_agents=6)
    params.nets[2].weights[-1][:] += 0.05  # give one agent distinct weights
    rng = np.random.default_rng(4)
    feats = rng.random((6, gnn.FEATURE_DIM))
    base = baselines.select_independent_actions(params, feats)
    for _ in range(5):
        other = feats.copy()
        other[1:] = rng.random((5, gnn.FEATURE_DIM))
        got = baselines.select_independent_actions(params, other)
        assert got[0] == base[0]


def test_independent_q_shape_and_validation():
    params = baselines.init_independent(0, n_agents=3)
    q = baselines.independent_q(params, np.zeros((3, gnn.FEATURE_DIM)))
    assert q.shape == (3, gnn.N_ACTIONS)
    with pytest.raises(ValueError):
        baselines.independent_q(params, np.zeros((4, gnn.FEATURE_DIM)))


def test_independent_policy_round_trip(tmp_path):
    params = baselines.init_independent(9, n_agents=4)
    path = tmp_path / "indep.json"
    baselines.save_independent(path, params, meta={"episodes": 2})
    policy = baselines.IndependentPolicy.from_file(path)
    feats = np.random.default_rng(1).random((4, gnn.FEATURE_DIM))
    direct = baselines.IndependentPolicy(params)
    assert [c.kmin_bytes for c in policy.act(feats)] == [
        c.kmin_bytes for c in direct.act(feats)
    ]


def test_independent_policy_checks_agent_count():
    t = small_clos()
    policy = baselines.IndependentPolicy(baselines.init_independent(0, n_agents=3))
    with pytest.raises(ValueError):
        policy.reset(t)


def test_load_independent_rejects_graphcc_files(tmp_path):
    params = gnn.init_params(0)
    path = tmp_path / "g.json"
    gnn.save_policy(path, params)
    from ecnlab import nn
    with pytest.raises(nn.CheckpointError):
        baselines.load_independent(path)


class BanditEnv:
    """Reward peaks at one designated action index with a decisive gap."""

    def __init__(self, t, best_action=7, horizon=10):
        self.neighborhood = gnn.Neighborhood(t)
        self.table = gnn.build_action_table()
        self.best_action = best_action
        self._index = {c: i for i, c in enumerate(self.table)}
        self.horizon = horizon
        self._step = 0
        v = self.neighborhood.n_vertices
        self._feats = np.full((v, gnn.FEATURE_DIM), 0.4)

    def reset(self):
        self._step = 0
        return self._feats.copy()

    def step(self, configs):
        r = np.array([
            1.0 / (1.0 + abs(self._index[c] - self.best_action))
            for c in configs
        ])
        self._step += 1
        return self._feats.copy(), r, self._step >= self.horizon


def test_independent_training_learns_a_bandit():
    env = BanditEnv(star_topology(), best_action=11)
    cfg = rl.TrainConfig(
        episodes=150, gamma=0.0, lr=5e-3, batch_size=32, min_replay=64,
        target_sync=50, eps_end=0.2, eps_frac=0.9, seed=0,
    )
    result = baselines.train_independent(env, cfg)
    assert not result.aborted
    greedy = baselines.select_independent_actions(result.params, env.reset())
    assert np.array_equal(greedy, [11, 11])


def test_independent_training_log_schema():
    env = BanditEnv(star_topology())
    cfg = rl.TrainConfig(episodes=3, min_replay=16, batch_size=16, seed=1)
    result = baselines.train_independent(env, cfg)
    assert len(result.log_rows) == 3
    assert set(result.log_rows[0]) == set(rl.LOG_FIELDS)
