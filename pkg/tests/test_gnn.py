"""Graph net tests: action table, path equivalence, gradients, persistence."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from gradcheck import fd_max_rel_err

from ecnlab import gnn, nn, topo
from ecnlab.netsim import EcnConfig

KIB = 1024


def small_clos():
    return topo.build_clos(hosts_per_leaf=4, n_leaf=2, n_spine=2)


def star_topology():
    # one switch, two hosts: both agent ports have no ingress agents
    nodes = [topo.Node("h0", "host"), topo.Node("h1", "host"), topo.Node("s0", "leaf")]
    links = []
    for h in ("h0", "h1"):
        links.append(topo.Link(h, "s0", 25e9, 1e-6))
        links.append(topo.Link("s0", h, 25e9, 1e-6))
    return topo.Topology(nodes, links)


# -- action table --------------------------------------------------------------


def test_action_table_size_first_last():
    table = gnn.build_action_table()
    assert len(table) == 120
    assert (table[0].kmin_bytes, table[0].kmax_bytes, table[0].pmax) == (2 * KIB, 16 * KIB, 0.01)
    assert (table[-1].kmin_bytes, table[-1].kmax_bytes, table[-1].pmax) == (
        32 * KIB, 256 * KIB, 1.0,
    )


def test_action_table_is_lexicographic_and_valid():
    table = gnn.build_action_table()
    keys = [(c.kmin_bytes, c.kmax_bytes, c.pmax) for c in table]
    assert keys == sorted(keys)
    assert len(set(keys)) == 120
    assert all(c.kmin_bytes <= c.kmax_bytes for c in table)


def test_action_table_membership():
    keys = {(c.kmin_bytes, c.kmax_bytes, c.pmax) for c in gnn.build_action_table()}
    assert (16 * KIB, 16 * KIB, 0.5) in keys
    assert (32 * KIB, 32 * KIB, 1.0) in keys
    assert not any(a > b for a, b, _ in keys)


# -- hidden-state initialization ---------------------------------------------------


def test_init_hidden_pads_with_zeros():
    assert np.array_equal(gnn.init_hidden(np.zeros(9)), np.zeros(24))
    h = gnn.init_hidden(np.ones(9))
    assert np.array_equal(h[:9], np.ones(9))
    assert np.array_equal(h[9:], np.zeros(15))


def test_init_hidden_round_trip_and_width_limit():
    x = np.random.default_rng(0).random(9)
    assert np.array_equal(gnn.init_hidden(x)[:9], x)
    full = np.random.default_rng(1).random(24)
    assert np.array_equal(gnn.init_hidden(full), full)
    with pytest.raises(ValueError):
        gnn.init_hidden(np.zeros(25))


# -- single message-passing rounds ---------------------------------------------------


def test_mp_round_single_ingress_min_equals_max():
    # one spine: every leaf egress port has exactly one ingress agent
    t = topo.build_clos(hosts_per_leaf=2, n_leaf=2, n_spine=1)
    agents = topo.agents(t)
    params = gnn.init_params(3)
    rng = np.random.default_rng(4)
    h = rng.random((len(agents), gnn.HIDDEN_DIM))
    out = gnn.mp_round(params, t, h)
    idx = {a.key: i for i, a in enumerate(agents)}
    for v in agents:
        ingress = topo.ingress_neighbors(t, v)
        if len(ingress) != 1:
            continue
        vi, ui = idx[v.key], idx[ingress[0].key]
        m = nn.forward(params.message, np.concatenate([h[vi], h[ui]]))
        expect = nn.forward(params.update, np.concatenate([h[vi], m, m]))
        assert np.array_equal(out[vi], expect)


def test_mp_round_ingress_permutation_bit_identical(monkeypatch):
    t = small_clos()
    params = gnn.init_params(12)
    rng = np.random.default_rng(7)
    h = rng.random((len(topo.agents(t)), gnn.HIDDEN_DIM))
    base = gnn.mp_round(params, t, h)
    nbrs = gnn._neighbor_indices(t)
    for trial in range(5):
        shuffled = [list(lst) for lst in nbrs]
        for lst in shuffled:
            rng.shuffle(lst)
        monkeypatch.setattr(gnn, "_neighbor_indices", lambda _t: shuffled)
        assert np.array_equal(gnn.mp_round(params, t, h), base)
    monkeypatch.undo()


def test_mp_round_rejects_missing_hidden():
    t = small_clos()
    params = gnn.init_params(0)
    v = len(topo.agents(t))
    with pytest.raises(ValueError):
        gnn.mp_round(params, t, np.zeros((v - 1, gnn.HIDDEN_DIM)))
    with pytest.raises(ValueError):
        gnn.mp_round(params, t, np.zeros((v, gnn.HIDDEN_DIM - 1)))


def test_zero_rounds_uses_own_features_only():
    t = small_clos()
    params = gnn.init_params(9)
    rng = np.random.default_rng(11)
    v = len(topo.agents(t))
    feats = rng.random((v, gnn.FEATURE_DIM))
    q0 = gnn.q_values(params, t, feats, k_rounds=0)
    for vi in range(v):
        assert np.array_equal(
            q0[vi], nn.forward(params.readout, gnn.init_hidden(feats[vi]))
        )
    # perturbing every other vertex leaves this one untouched
    other = feats.copy()
    other[1:] = rng.random((v - 1, gnn.FEATURE_DIM))
    q0b = gnn.q_values(params, t, other, k_rounds=0)
    assert np.array_equal(q0[0], q0b[0])
    qb, _ = gnn.batch_forward(params, gnn.Neighborhood(t), feats[None], k_rounds=0)
    np.testing.assert_allclose(qb[0], q0, rtol=1e-12, atol=0)


# -- forward paths agree ---------------------------------------------------------


def test_distributed_matches_centralized_bitwise():
    t = small_clos()
    params = gnn.init_params(7)
    rng = np.random.default_rng(0)
    V = len(topo.agents(t))
    for _ in range(25):
        feats = rng.random((V, gnn.FEATURE_DIM))
        q_ref = gnn.q_values(params, t, feats)
        res = gnn.distributed_run(params, t, feats)
        assert np.array_equal(q_ref, res.q)
        assert np.array_equal(res.actions, gnn.select_actions(q_ref))


def test_distributed_matches_on_mutated_topology():
    t = topo.mutate(small_clos(), topo.RemoveLink("l0", "s0"))
    params = gnn.init_params(1)
    rng = np.random.default_rng(3)
    feats = rng.random((len(topo.agents(t)), gnn.FEATURE_DIM))
    q_ref = gnn.q_values(params, t, feats)
    res = gnn.distributed_run(params, t, feats)
    assert np.array_equal(q_ref, res.q)
    assert np.array_equal(res.actions, gnn.select_actions(q_ref))


def test_message_records_structure():
    t = small_clos()
    params = gnn.init_params(2)
    rng = np.random.default_rng(1)
    agents = topo.agents(t)
    feats = rng.random((len(agents), gnn.FEATURE_DIM))
    records = gnn.distributed_run(params, t, feats).records
    expected_edges = sum(len(topo.ingress_neighbors(t, v)) for v in agents)
    assert len(records) == gnn.N_ROUNDS * expected_edges
    assert {r.round for r in records} == set(range(gnn.N_ROUNDS))
    # round-0 payloads are exactly the padded features of the sender
    idx = {a.key: i for i, a in enumerate(agents)}
    for r in records:
        assert len(r.payload) == gnn.HIDDEN_DIM
        if r.round == 0:
            expect = gnn.init_hidden(feats[idx[r.src]])
            assert np.array_equal(np.array(r.payload), expect)


def test_replica_missing_message_is_hard_error():
    params = gnn.init_params(0)
    replica = gnn._Replica("p", np.zeros(gnn.FEATURE_DIM), params, expected=2)
    replica.receive(np.zeros(gnn.HIDDEN_DIM))
    with pytest.raises(gnn.UndeliveredMessageError):
        replica.advance_round()


def test_batch_forward_matches_reference():
    t = small_clos()
    params = gnn.init_params(5)
    nbr = gnn.Neighborhood(t)
    rng = np.random.default_rng(9)
    feats = rng.random((4, nbr.n_vertices, gnn.FEATURE_DIM))
    q_batch, _ = gnn.batch_forward(params, nbr, feats)
    for b in range(4):
        q_ref = gnn.q_values(params, t, feats[b])
        np.testing.assert_allclose(q_batch[b], q_ref, rtol=1e-10, atol=1e-12)


def test_empty_ingress_gives_zero_aggregate():
    t = star_topology()
    params = gnn.init_params(4)
    feats = np.full((2, gnn.FEATURE_DIM), 0.25)
    q_ref = gnn.q_values(params, t, feats)
    # with no messages the hidden state evolves through the update net alone
    h = gnn.init_hidden(feats[0])
    for _ in range(gnn.N_ROUNDS):
        h = nn.forward(params.update, np.concatenate([h, np.zeros(2 * gnn.HIDDEN_DIM)]))
    expect = nn.forward(params.readout, h)
    assert np.array_equal(q_ref[0], expect)
    assert np.array_equal(q_ref[1], expect)
    res = gnn.distributed_run(params, t, feats)
    assert res.records == []
    assert np.array_equal(res.q, q_ref)
    q_batch, _ = gnn.batch_forward(params, gnn.Neighborhood(t), feats[None])
    np.testing.assert_allclose(q_batch[0], q_ref, rtol=1e-12, atol=0)


# -- symmetry --------------------------------------------------------------------


def test_uniform_features_collapse_by_port_class():
    t = small_clos()
    params = gnn.init_params(11)
    agents = topo.agents(t)
    feats = np.full((len(agents), gnn.FEATURE_DIM), 0.5)
    q = gnn.q_values(params, t, feats)

    classes = {}
    for i, a in enumerate(agents):
        kind = (t.nodes[a.src].kind, t.nodes[a.dst].kind)
        classes.setdefault(kind, []).append(i)
    assert len(classes) == 3  # leaf->host, leaf->spine, spine->leaf
    for rows in classes.values():
        for r in rows[1:]:
            assert np.array_equal(q[rows[0]], q[r])


def test_spine_swap_automorphism_permutes_q():
    t = small_clos()
    params = gnn.init_params(13)
    agents = topo.agents(t)
    rng = np.random.default_rng(21)
    feats = rng.random((len(agents), gnn.FEATURE_DIM))

    swap = {"s0": "s1", "s1": "s0"}
    relabel = lambda n: swap.get(n, n)
    idx = {a.key: i for i, a in enumerate(agents)}
    perm = np.array([idx[(relabel(a.src), relabel(a.dst))] for a in agents])

    q = gnn.q_values(params, t, feats)
    q_perm = gnn.q_values(params, t, feats[perm])
    assert np.array_equal(q_perm, q[perm])


# -- gradients --------------------------------------------------------------------


def test_batch_backward_matches_finite_differences():
    t = small_clos()
    params = gnn.init_params(3)
    nbr = gnn.Neighborhood(t)
    rng = np.random.default_rng(0)
    feats = rng.random((3, nbr.n_vertices, gnn.FEATURE_DIM))
    proj = rng.standard_normal((3, nbr.n_vertices, gnn.N_ACTIONS))

    def loss_fn():
        q, _ = gnn.batch_forward(params, nbr, feats)
        return float((q * proj).sum())

    _, cache = gnn.batch_forward(params, nbr, feats)
    gm, gu, gr = gnn.batch_backward(params, nbr, cache, proj)
    arrays, analytic = [], []
    for p, g in ((params.message, gm), (params.update, gu), (params.readout, gr)):
        arrays += list(p.weights) + list(p.biases)
        analytic += list(g.weights) + list(g.biases)
    err = fd_max_rel_err(
        arrays, loss_fn, analytic, eps=1e-6, n_samples=12, rng=np.random.default_rng(5)
    )
    assert err < 1e-4


def test_backward_empty_graph_has_zero_message_grads():
    t = star_topology()
    params = gnn.init_params(8)
    nbr = gnn.Neighborhood(t)
    feats = np.random.default_rng(2).random((2, 2, gnn.FEATURE_DIM))
    q, cache = gnn.batch_forward(params, nbr, feats)
    gm, gu, gr = gnn.batch_backward(params, nbr, cache, np.ones_like(q))
    assert all(np.all(w == 0) for w in gm.weights)
    assert any(np.any(w != 0) for w in gu.weights)


# -- action selection --------------------------------------------------------------


def test_greedy_picks_the_one_hot_index():
    q = np.zeros(120)
    q[7] = 1.0
    assert gnn.select_actions(q) == 7
    stacked = np.zeros((3, 120))
    stacked[0, 7] = 1.0
    stacked[2, 119] = 2.0
    assert np.array_equal(gnn.select_actions(stacked), [7, 0, 119])


def test_greedy_breaks_ties_toward_lower_index():
    assert gnn.select_actions(np.zeros(120)) == 0
    q = np.full((5, 120), 3.25)
    assert np.array_equal(gnn.select_actions(q), np.zeros(5, dtype=np.int64))


def test_full_epsilon_is_uniform_within_three_sigma():
    n_draws = 100_000
    agents = 100
    q = np.zeros((agents, gnn.N_ACTIONS))
    rng = np.random.default_rng(42)
    counts = np.zeros(gnn.N_ACTIONS, dtype=np.int64)
    for _ in range(n_draws // agents):
        counts += np.bincount(
            gnn.select_actions(q, epsilon=1.0, rng=rng), minlength=gnn.N_ACTIONS
        )
    assert counts.sum() == n_draws
    p = 1.0 / gnn.N_ACTIONS
    sigma = np.sqrt(n_draws * p * (1 - p))
    assert np.all(np.abs(counts - n_draws * p) <= 3 * sigma)


def test_epsilon_greedy_disagreement_rate():
    rng_q = np.random.default_rng(1)
    q = rng_q.random((48, gnn.N_ACTIONS))
    greedy = gnn.select_actions(q)
    rng = np.random.default_rng(42)
    diffs = 0
    total = 0
    for _ in range(200):
        a = gnn.select_actions(q, epsilon=0.3, rng=rng)
        diffs += int((a != greedy).sum())
        total += len(a)
    frac = diffs / total
    assert abs(frac - 0.3 * 119 / 120) < 0.04


def test_epsilon_requires_rng():
    with pytest.raises(ValueError):
        gnn.select_actions(np.zeros((4, 120)), epsilon=0.5)


def test_empty_q_vector_is_rejected():
    with pytest.raises(ValueError):
        gnn.select_actions(np.zeros((3, 0)))
    with pytest.raises(ValueError):
        gnn.select_actions(np.array([]))


def test_feature_width_is_validated():
    t = small_clos()
    with pytest.raises(ValueError):
        gnn.q_values(gnn.init_params(0), t, np.zeros((16, 25)))
    # narrower features are zero-padded, same as explicit trailing zeros
    rng = np.random.default_rng(5)
    seven = rng.random((16, 7))
    nine = np.concatenate([seven, np.zeros((16, 2))], axis=1)
    params = gnn.init_params(1)
    assert np.array_equal(
        gnn.q_values(params, t, seven), gnn.q_values(params, t, nine)
    )


# -- persistence --------------------------------------------------------------------


def test_policy_file_round_trip(tmp_path):
    params = gnn.init_params(17)
    path = tmp_path / "policy.json"
    gnn.save_policy(path, params, meta={"episodes": 3})
    loaded, table, meta = gnn.load_policy(path)
    assert meta == {"episodes": 3}
    assert len(table) == 120
    for a, b in zip(params.message.weights, loaded.message.weights):
        assert np.array_equal(a, b)
    t = small_clos()
    feats = np.random.default_rng(2).random((len(topo.agents(t)), gnn.FEATURE_DIM))
    assert np.array_equal(gnn.q_values(params, t, feats), gnn.q_values(loaded, t, feats))


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"schema": 1, "kind": "something-else"}')
    with pytest.raises(nn.CheckpointError):
        gnn.load_policy(path)


def test_greedy_policy_protocol(tmp_path):
    t = small_clos()
    params = gnn.init_params(19)
    policy = gnn.GreedyMpnnPolicy(params)
    with pytest.raises(RuntimeError):
        policy.act(np.zeros((16, gnn.FEATURE_DIM)))
    policy.reset(t)
    configs = policy.act(np.random.default_rng(0).random((16, gnn.FEATURE_DIM)))
    assert len(configs) == 16
    assert all(isinstance(c, EcnConfig) for c in configs)
    table_keys = {(c.kmin_bytes, c.kmax_bytes, c.pmax) for c in policy.table}
    assert all((c.kmin_bytes, c.kmax_bytes, c.pmax) in table_keys for c in configs)

    path = tmp_path / "p.json"
    gnn.save_policy(path, params)
    p2 = gnn.GreedyMpnnPolicy.from_file(path)
    p2.reset(t)
    feats = np.random.default_rng(1).random((16, gnn.FEATURE_DIM))
    a = [(c.kmin_bytes, c.kmax_bytes, c.pmax) for c in policy.act(feats)]
    b = [(c.kmin_bytes, c.kmax_bytes, c.pmax) for c in p2.act(feats)]
    assert a == b
