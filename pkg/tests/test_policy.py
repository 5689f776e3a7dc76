import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import make_strip
from clothloop.nn import MLP, Adam, check_finite, clip_grad_norm, log_softmax, sigmoid
from clothloop.policy import (
    ActorCritic,
    GraspEnv,
    PPOConfig,
    RewardConfig,
    action_count,
    candidate_vertices,
    clipped_surrogate,
    decode_action,
    encode_action,
    env_step,
    evaluate,
    gae,
    ppo_train,
    subgoal_distance,
    summarize_episodes,
)


def strip():
    return make_strip(0.5, 0.1, 11, 5)


def test_action_space_size() -> None:
    assert action_count(40) == 820
    assert action_count(1) == 1


def test_action_round_trip_over_whole_space() -> None:
    seen = set()
    for flat in range(action_count(40)):
        selection = decode_action(flat, 40)
        assert encode_action(selection, 40) == flat
        seen.add(selection)
    assert len(seen) == 820


def test_action_layout() -> None:
    assert encode_action([0], 40) == 0
    assert encode_action([39], 40) == 39
    assert encode_action([0, 1], 40) == 40
    assert encode_action([1, 0], 40) == 40
    assert decode_action(819, 40) == (38, 39)


@settings(max_examples=50)
@given(st.integers(2, 60), st.data())
def test_pairs_decode_sorted(candidates: int, data: st.DataObject) -> None:
    i = data.draw(st.integers(0, candidates - 2))
    j = data.draw(st.integers(i + 1, candidates - 1))
    assert decode_action(encode_action([j, i], candidates), candidates) == (i, j)


def test_invalid_actions() -> None:
    with pytest.raises(InputError):
        decode_action(820, 40)
    with pytest.raises(InputError):
        decode_action(-1, 40)
    with pytest.raises(InputError):
        encode_action([3, 3], 40)
    with pytest.raises(InputError):
        encode_action([40], 40)
    with pytest.raises(InputError):
        encode_action([1, 2, 3], 40)


def test_candidates_span_midline() -> None:
    mesh = strip()
    picks = candidate_vertices(mesh, 3)
    assert list(picks) == [mesh.midline[0], mesh.midline[5], mesh.midline[10]]
    with pytest.raises(InputError):
        candidate_vertices(mesh, 12)


def test_reward_cases() -> None:
    cfg = RewardConfig(thresholds=(2.0, 2.0, 2.0))
    assert cfg.reward(0, 5.0) == (-30.0, True, False)
    assert cfg.reward(2, 1.0) == (5.0, True, True)
    assert cfg.reward(0, 1.0) == (29.0, False, False)
    with pytest.raises(InputError):
        RewardConfig(thresholds=())
    with pytest.raises(InputError):
        RewardConfig(thresholds=(1.0,), c2=-1.0)


def test_subgoal_distance_is_summed() -> None:
    mesh = strip()
    moved = mesh.with_vertices(mesh.vertices + [0.0, 0.0, 0.1])
    assert subgoal_distance(moved, mesh) == pytest.approx(0.1 * mesh.vertex_count)
    assert subgoal_distance(moved, mesh, scale=2.0) == pytest.approx(0.05 * mesh.vertex_count)


def test_episode_through_unchanged_subgoals() -> None:
    mesh = strip()
    env = GraspEnv(mesh, [mesh, mesh], RewardConfig(thresholds=(1.0, 1.0)), candidates=3)
    state = env.reset()
    assert env.observe(state).shape == (3, 6)
    assert not env.observe(state)[:, 3:].any()
    state, reward, done, info = env_step(env, state, 0)
    assert not done
    assert reward == pytest.approx(30.0 - info.distance)
    assert state.subgoal == 1
    state, reward, done, info = env_step(env, state, encode_action([0, 2], 3))
    assert done
    assert info.success
    assert reward == 5.0
    with pytest.raises(InputError):
        env_step(env, state, 0)


def test_missed_threshold_fails_episode() -> None:
    mesh = strip()
    far = mesh.with_vertices(mesh.vertices + [0.0, 0.2, 0.0])
    env = GraspEnv(mesh, [far], RewardConfig(thresholds=(1e-9,)), candidates=3)
    state, reward, done, info = env_step(env, env.reset(), 1)
    assert (reward, done, state.success) == (-30.0, True, False)
    assert info.distance > 1e-9


def test_transitions_are_memoized() -> None:
    mesh = strip()
    env = GraspEnv(mesh, [mesh.with_vertices(mesh.vertices + [0.05, 0.0, 0.0])], RewardConfig(thresholds=(1.0,)), candidates=3)
    first = env.simulate(env.reset(), 4)
    second = env.simulate(env.reset(), 4)
    assert np.array_equal(first.positions, second.positions)
    env.clear_cache()
    assert np.array_equal(env.simulate(env.reset(), 4).positions, first.positions)


def test_env_validation() -> None:
    mesh = strip()
    with pytest.raises(InputError):
        GraspEnv(mesh, [mesh], RewardConfig(thresholds=(1.0, 1.0)), candidates=3)
    with pytest.raises(InputError):
        GraspEnv(mesh, [make_strip(0.5, 0.1, 5, 3)], RewardConfig(thresholds=(1.0,)), candidates=3)


def test_transformed_env_scales_distance() -> None:
    mesh = strip()
    env = GraspEnv(mesh, [mesh], RewardConfig(thresholds=(1.0,)), candidates=3)
    bigger = env.transformed(1.1, (0.02, -0.01))
    assert bigger.reward_config.scale == pytest.approx(1.1)
    assert np.allclose(bigger.mesh.vertices[:, :2], mesh.vertices[:, :2] * 1.1 + [0.02, -0.01])
    assert bigger.mesh.mean_edge_length == pytest.approx(1.1 * mesh.mean_edge_length)


def test_gae_two_steps() -> None:
    adv, ret = gae([1.0, 1.0], [0.0, 0.0, 0.0], 0.99, 0.95)
    assert adv == pytest.approx([1.9405, 1.0])
    assert ret == pytest.approx(adv)


def test_gae_limits() -> None:
    rng = np.random.default_rng(0)
    rewards, values = rng.normal(size=5), rng.normal(size=6)
    adv, _ = gae(rewards, values, 0.9, 0.0)
    assert adv == pytest.approx(rewards + 0.9 * values[1:] - values[:-1])
    values[-1] = 0.0
    _, ret = gae(rewards, values, 1.0, 1.0)
    assert ret == pytest.approx(np.cumsum(rewards[::-1])[::-1])
    with pytest.raises(InputError):
        gae(rewards, values[:-1], 0.9, 0.9)


def test_gae_done_cuts_bootstrap() -> None:
    adv, _ = gae([1.0, 1.0], [0.0, 5.0, 5.0], 1.0, 1.0, dones=[True, False])
    assert adv[0] == pytest.approx(1.0)


def test_clipped_surrogate() -> None:
    assert clipped_surrogate([1.5], [2.0], 0.2)[0] == pytest.approx(1.2 * 2.0)
    assert clipped_surrogate([0.5], [2.0], 0.2)[0] == pytest.approx(0.5 * 2.0)
    assert clipped_surrogate([0.5], [-2.0], 0.2)[0] == pytest.approx(0.8 * -2.0)


def test_policy_outputs_distribution() -> None:
    net = ActorCritic(12, 10, np.random.default_rng(1), hidden=16)
    obs = np.random.default_rng(2).normal(size=12)
    probs = net.probs(obs)
    assert probs.shape == (10,)
    assert probs.sum() == pytest.approx(1.0)
    action, logp = net.act(obs, np.random.default_rng(3), greedy=True)
    assert action == int(np.argmax(probs))
    assert logp == pytest.approx(np.log(probs[action]))


def test_policy_save_and_load(tmp_path) -> None:
    net = ActorCritic(6, 4, np.random.default_rng(4), hidden=8)
    net.save(tmp_path / "policy.params", {"scenario": "unit"})
    loaded, header = ActorCritic.load(tmp_path / "policy.params")
    assert header["scenario"] == "unit"
    obs = np.ones(6)
    assert np.array_equal(loaded.probs(obs), net.probs(obs))
    assert np.array_equal(loaded.values(obs), net.values(obs))


def test_summarize_episodes() -> None:
    successes = [True] * 6 + [False] * 4
    summary = summarize_episodes(successes, [2, 3, 1, 3, 3, 2, 3, 3, 1, 3])
    assert summary.success_rate == pytest.approx(0.6)
    assert summary.average_subgoals == pytest.approx(2.4)
    with pytest.raises(InputError):
        summarize_episodes([], [])


def test_mlp_backward_matches_finite_differences() -> None:
    rng = np.random.default_rng(5)
    net = MLP([4, 6, 3], rng)
    x = rng.normal(size=(5, 4))
    weights = rng.normal(size=(5, 3))

    def loss() -> float:
        out, _ = net.forward(x)
        return float((out * weights).sum())

    _, cache = net.forward(x)
    grads = net.backward(cache, weights)
    h = 1e-6
    for name, value in net.params.items():
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + h
            up = loss()
            value[index] = original - h
            down = loss()
            value[index] = original
            assert grads[name][index] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-6)


def test_adam_minimizes_quadratic() -> None:
    params = {"w": np.array([3.0, -2.0])}
    opt = Adam()
    for _ in range(2000):
        opt.step(params, {"w": 2 * params["w"]}, 0.01)
    assert np.abs(params["w"]).max() < 0.05


def test_numeric_helpers() -> None:
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
    assert np.exp(log_softmax(np.array([[1.0, 2.0, 1000.0]]))).sum() == pytest.approx(1.0)
    assert sigmoid(np.array([-1000.0, 0.0, 1000.0])) == pytest.approx([0.0, 0.5, 1.0])
    with pytest.raises(NumericalError, match="logits"):
        check_finite("logits", np.array([np.nan]))


def tiny_ppo() -> PPOConfig:
    return PPOConfig(iterations=2, episodes_per_iteration=2, batch_size=4, update_epochs=1, hidden=8)


def test_ppo_is_deterministic_across_threads() -> None:
    mesh = strip()
    env = GraspEnv(mesh, [mesh], RewardConfig(thresholds=(1.0,)), candidates=3)
    _, one = ppo_train(env, tiny_ppo(), seed=6, threads=1)
    _, two = ppo_train(env, tiny_ppo(), seed=6, threads=2)
    assert len(one) == 2
    assert one == two


@pytest.mark.slow
def test_ppo_finds_the_only_good_grasp() -> None:
    mesh = strip()
    goal = mesh.with_vertices(mesh.vertices + [0.0, 0.1, 0.0])
    scout = GraspEnv(mesh, [goal], RewardConfig(thresholds=(1e6,)), candidates=3)
    distances = [env_step(scout, scout.reset(), a)[3].distance for a in range(scout.action_count)]
    env = GraspEnv(mesh, [goal], RewardConfig(thresholds=(1.01 * min(distances),)), candidates=3)
    cfg = PPOConfig(learning_rate=3e-3, iterations=40, episodes_per_iteration=8, batch_size=8, hidden=32)
    net, curve = ppo_train(env, cfg, seed=7)
    assert curve[-1].success_rate >= curve[0].success_rate
    assert evaluate(env, net, 5, seed=8, greedy=True).success_rate == 1.0
