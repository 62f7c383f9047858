import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlight.agent import (DQNAgents, QNetworks, ReplayBuffer, TrainConfig, assemble_observation, decay_epsilon,
                           epsilon_after, select_action, select_actions)
from mtlight.neural import backward, finite_difference_grads, gather_last, max_relative_error, no_grad


def test_assemble_scales_latents():
    raw = np.arange(16.0)
    obs = assemble_observation(raw, np.ones(5), np.full(5, 0.5))
    np.testing.assert_array_equal(obs["shr"], 10.0)
    np.testing.assert_array_equal(obs["spe"], 5.0)
    np.testing.assert_array_equal(obs["flat"], np.concatenate([raw, np.full(5, 10.0), np.full(5, 5.0)]))


def test_assemble_zero_latents_and_dim():
    raw = np.ones(16)
    obs = assemble_observation(raw, np.zeros(5), np.zeros(5))
    assert obs["flat"].shape == (26,)
    np.testing.assert_array_equal(obs["flat"][16:], 0.0)


def test_assemble_dim_mismatch():
    with pytest.raises(ValueError):
        assemble_observation(np.ones(16), np.zeros(4), np.zeros(5))
    with pytest.raises(ValueError):
        assemble_observation(np.ones((3, 16)), np.zeros((2, 5)), np.zeros((3, 5)))


def test_select_greedy_and_ties():
    rng = np.random.default_rng(0)
    assert select_action([0.1, 3.0, -1.0, 2.0], 0.0, rng) == 1
    assert select_action([1.0, 1.0, 0.0, 0.0], 0.0, rng) == 0


def test_select_uniform_when_eps_one():
    from scipy.stats import chisquare
    rng = np.random.default_rng(1)
    draws = [select_action([5.0, 0.0, 0.0, 0.0], 1.0, rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=4)
    assert chisquare(counts).pvalue > 0.001


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), shift=st.floats(-1e3, 1e3))
def test_greedy_argmax_shift_invariant(seed, shift):
    q = np.random.default_rng(seed).normal(size=(6, 4))
    a = select_actions(q, 0.0, np.random.default_rng(0))
    b = select_actions(q + shift, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)


def test_select_actions_rng_use_independent_of_eps():
    q = np.random.default_rng(2).normal(size=(5, 4))
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    select_actions(q, 0.0, r1)
    select_actions(q, 0.7, r2)
    assert r1.random() == r2.random()


def test_decay_examples():
    assert decay_epsilon(0.1) == pytest.approx(0.0995, abs=1e-15)
    assert decay_epsilon(0.01) == 0.01
    assert 0.1 * 0.995 ** 461 < 0.01
    assert epsilon_after(461) == 0.01
    assert epsilon_after(459) > 0.01


def _agents(n=2, obs_dim=6, K=3, **cfg):
    return DQNAgents(n, {"raw": obs_dim}, K, TrainConfig(**cfg), seed=0)


def _fill(agents, n_rows, rng, reward=-1.0, terminal=False):
    A = agents.n_agents
    for _ in range(n_rows):
        obs = {"raw": rng.normal(size=(A, 6))}
        nxt = {"raw": rng.normal(size=(A, 6))}
        agents.buffer.store(obs, rng.integers(3, size=A), np.full(A, reward), nxt, terminal)


def test_epsilon_sequence_matches_closed_form():
    ag = _agents(minibatch=2)
    rng = np.random.default_rng(0)
    for n in range(1, 500):
        _fill(ag, 1, rng)
        before = ag.epsilon
        ag.td_train()
        assert ag.epsilon <= before
        assert abs(ag.epsilon - max(0.01, 0.1 * 0.995 ** n)) <= 1e-12


def test_td_target_terminal_is_reward():
    ag = _agents(reward_scale=1.0)
    nxt = {"raw": np.ones((2, 1, 6))}
    y = ag.td_targets(np.array([[-4.0], [-2.0]]), nxt, np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(y, [[-4.0], [-2.0]])


def test_td_target_bootstrap():
    ag = _agents(n=1, K=2, reward_scale=1.0)
    # force max next Q = 10 through the output bias
    for p in (ag.target.W3,):
        p.data[:] = 0.0
    ag.target.b3.data[:] = [[[10.0, 2.0]]]
    y = ag.td_targets(np.array([[-3.0]]), {"raw": np.zeros((1, 1, 6))}, np.array([[0.0]]))
    assert y[0, 0] == pytest.approx(6.5)


def test_reward_scale_applies_to_reward_only():
    ag = _agents(n=1, K=2, reward_scale=0.1)
    ag.target.W3.data[:] = 0.0
    ag.target.b3.data[:] = [[[10.0, 2.0]]]
    y = ag.td_targets(np.array([[-3.0]]), {"raw": np.zeros((1, 1, 6))}, np.array([[0.0]]))
    assert y[0, 0] == pytest.approx(-0.3 + 9.5)


def test_single_transition_fixed_point():
    ag = _agents(n=1, clear_buffer=False, target_update=1, reward_scale=1.0, updates_per_train=1)
    obs = {"raw": np.full((1, 6), 0.5)}
    ag.buffer.store(obs, np.array([1]), np.array([-2.0]), obs, True)
    for _ in range(3000):
        ag.td_train()
    q = ag.q_values(obs)[0, 1]
    assert abs(q - (-2.0)) < 1e-3


def test_empty_buffer_warns(caplog):
    ag = _agents()
    with caplog.at_level("WARNING"):
        assert ag.td_train() is None
    assert "empty" in caplog.text
    assert ag.epsilon == 0.1


def test_buffer_cleared_after_training():
    ag = _agents()
    _fill(ag, 5, np.random.default_rng(1))
    ag.td_train()
    assert len(ag.buffer) == 0


def test_buffer_store_clear_and_eviction():
    buf = ReplayBuffer(capacity=3)
    buf.clear()
    assert len(buf) == 0
    for k in range(5):
        buf.store({"raw": np.full((1, 2), k)}, [0], [-k], {"raw": np.zeros((1, 2))}, False)
    assert len(buf) == 3
    assert [r[0]["raw"][0, 0] for r in buf.rows] == [2, 3, 4]
    buf.clear()
    assert len(buf) == 0


def test_buffer_rejects_positive_reward():
    with pytest.raises(ValueError):
        ReplayBuffer().store({}, [0], [0.5], {}, False)


def test_buffer_sample_per_agent_rows():
    buf = ReplayBuffer()
    for t in range(4):
        buf.store({"raw": np.array([[t, 0.0], [10 + t, 0.0]])}, [t % 2, 1], [-t, -10 - t],
                  {"raw": np.zeros((2, 2))}, t == 3)
    obs, acts, rew, _, term = buf.sample(np.array([[0, 3], [2, 2]]), ["raw"])
    np.testing.assert_array_equal(obs["raw"][:, :, 0], [[0, 3], [12, 12]])
    np.testing.assert_array_equal(rew, [[0, -3], [-12, -12]])
    np.testing.assert_array_equal(acts, [[0, 1], [1, 1]])
    np.testing.assert_array_equal(term, [[False, True], [False, False]])


def test_q_values_fast_path_matches_taped():
    rng = np.random.default_rng(4)
    q = QNetworks(3, {"raw": 16, "shr": 5, "spe": 5}, 4, seed=2)
    inp = {b: rng.normal(size=(3, d)) for b, d in (("raw", 16), ("shr", 5), ("spe", 5))}
    with no_grad():
        ref = q.forward({b: v[:, None] for b, v in inp.items()}).data[:, 0]
    np.testing.assert_allclose(q.q_values(inp), ref, rtol=0, atol=1e-13)


def test_shared_path_identical_across_variants():
    base = QNetworks(2, {"raw": 16}, 4, seed=5)
    full = QNetworks(2, {"raw": 16, "shr": 5, "spe": 5}, 4, seed=5)
    for name, arr in base.named_arrays().items():
        np.testing.assert_array_equal(full.named_arrays()[name], arr)


@pytest.mark.parametrize("seed", range(3))
def test_policy_network_gradcheck(seed):
    rng = np.random.default_rng(seed)
    q = QNetworks(2, {"raw": 7, "shr": 5, "spe": 5}, 4, hidden=6, seed=seed)
    for p in (q.b1, q.b2, q.b3):
        p.data[:] = rng.normal(size=p.data.shape) * 0.3
    inp = {b: rng.normal(size=(2, 3, d)) for b, d in (("raw", 7), ("shr", 5), ("spe", 5))}
    acts, y = rng.integers(4, size=(2, 3)), rng.normal(size=(2, 3))

    def loss():
        d = gather_last(q.forward(inp), acts) - y
        return (d * d).mean()

    params = q.parameters()
    analytic = backward(loss(), params)
    numeric = finite_difference_grads(lambda: float(loss().data), params)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_agents_are_independent():
    # agent 0's update must not depend on agent 1's data
    a, b = _agents(n=2), _agents(n=2)
    rng = np.random.default_rng(6)
    for _ in range(4):
        obs, nxt = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        acts, rew = rng.integers(3, size=2), -rng.random(2)
        a.buffer.store({"raw": obs}, acts, rew, {"raw": nxt}, False)
        obs2, nxt2 = obs.copy(), nxt.copy()
        obs2[1], nxt2[1] = rng.normal(size=6), rng.normal(size=6)
        b.buffer.store({"raw": obs2}, acts, rew * [1, 3], {"raw": nxt2}, False)
    a.td_train()
    b.td_train()
    for k, v in a.q.named_arrays().items():
        np.testing.assert_array_equal(v[0], b.q.named_arrays()[k][0])
        assert not np.array_equal(v[1], b.q.named_arrays()[k][1]) or k.endswith("b3")


def test_checkpoint_round_trip():
    ag = _agents()
    ag.epsilon = 0.05
    other = _agents()
    other.load_checkpoint_arrays(ag.checkpoint_arrays())
    assert other.epsilon == 0.05
    for k, v in ag.q.named_arrays().items():
        np.testing.assert_array_equal(other.q.named_arrays()[k], v)


@pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(gamma=-0.1), dict(minibatch=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_shared_parameters_single_stack():
    ag = _agents(n=3, share_parameters=True)
    assert ag.q.W["raw"].data.shape[0] == 1
    x = {"raw": np.random.default_rng(0).normal(size=(3, 6))}
    with no_grad():
        ref = ag._forward(ag.q, {"raw": x["raw"][:, None]}).data[:, 0]
    np.testing.assert_allclose(ag.q_values(x), ref, rtol=0, atol=1e-13)
    # identical observations give identical Q for every intersection
    same = {"raw": np.ones((3, 6))}
    q = ag.q_values(same)
    np.testing.assert_array_equal(q[0], q[1])


def test_shared_parameters_train_on_all_agents():
    ag = _agents(n=2, share_parameters=True, updates_per_train=1)
    _fill(ag, 5, np.random.default_rng(7))
    before = {k: v.copy() for k, v in ag.q.named_arrays().items()}
    losses = ag.td_train()
    assert losses.shape == (2,)
    assert any(not np.array_equal(before[k], v) for k, v in ag.q.named_arrays().items())


def test_presets():
    assert TrainConfig.preset("alt_lr").lr == 0.005
    assert TrainConfig.preset("default") == TrainConfig()
    cfg = TrainConfig.preset("single_step", minibatch=8)
    assert (cfg.reward_scale, cfg.updates_per_train, cfg.minibatch) == (1.0, 1, 8)
    with pytest.raises(ValueError):
        TrainConfig.preset("nope")
