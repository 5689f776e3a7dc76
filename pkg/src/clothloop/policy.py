"""Grasp selection over midline candidates, its reward, and a PPO teacher."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from clothloop.errors import ClothLoopError, InputError, NumericalError
from clothloop.mesh import DeformableMesh, FloatArray, IntArray
from clothloop.nn import MLP, Adam, check_finite, clip_grad_norm, log_softmax
from clothloop.sim import ClothSimulator, RigidPose, SimConfig, SimState
from clothloop.util.enum.warning_types import WarningTypes
from clothloop.util.serialize import read_arrays, write_arrays

logger = logging.getLogger("clothloop")


def action_count(candidates: int) -> int:
    """Singles plus unordered pairs: ``M + M(M-1)/2``."""
    return candidates + candidates * (candidates - 1) // 2


def encode_action(selection: Sequence[int], candidates: int) -> int:
    """Flat index of a single candidate or an unordered pair.

    Singles occupy ``[0, M)``; pair ``(i, j)`` with ``i < j`` follows in
    lexicographic order at ``M + i(2M - i - 1)/2 + (j - i - 1)``.

    Raises:
        InputError: For out-of-range, repeated or too many indices.
    """
    sel = sorted(int(s) for s in selection)
    if not 1 <= len(sel) <= 2 or sel[0] < 0 or sel[-1] >= candidates:  # noqa: PLR2004
        msg = f"selection {list(selection)} is not one or two candidates in [0, {candidates})"
        raise InputError(msg)
    if len(sel) == 1:
        return sel[0]
    i, j = sel
    if i == j:
        msg = f"a pair needs two distinct candidates (got {i} twice)"
        raise InputError(msg)
    return candidates + i * (2 * candidates - i - 1) // 2 + (j - i - 1)


def decode_action(flat: int, candidates: int) -> tuple[int, ...]:
    """Inverse of :func:`encode_action`.

    Raises:
        InputError: If ``flat`` is outside the action space.
    """
    if not 0 <= flat < action_count(candidates):
        msg = f"action {flat} outside [0, {action_count(candidates)})"
        raise InputError(msg)
    if flat < candidates:
        return (int(flat),)
    rest = flat - candidates
    i = 0
    while rest >= candidates - i - 1:
        rest -= candidates - i - 1
        i += 1
    return (i, i + 1 + int(rest))


def candidate_vertices(mesh: DeformableMesh, count: int) -> IntArray:
    """``count`` vertices evenly spaced along the midline.

    Raises:
        InputError: If the midline has fewer vertices than requested.
    """
    midline = mesh.midline
    if not 1 <= count <= len(midline):
        msg = f"cannot pick {count} candidates from a {len(midline)}-vertex midline"
        raise InputError(msg)
    picks = np.round(np.linspace(0, len(midline) - 1, count)).astype(np.int64)
    return midline[picks]


def subgoal_distance(mesh: DeformableMesh, subgoal: DeformableMesh, scale: float = 1.0) -> float:
    """Summed per-vertex distance to the subgoal divided by ``scale``."""
    return float(np.linalg.norm(mesh.vertices - subgoal.vertices, axis=1).sum()) / scale


@dataclass(frozen=True)
class RewardConfig:
    """Success bonus C1, failure penalty C2, per-subgoal bonus C3 and thresholds."""

    thresholds: tuple[float, ...]
    c1: float = 5.0
    c2: float = 30.0
    c3: float = 30.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        """Check signs."""
        if min(self.c1, self.c2, self.c3, self.scale) <= 0:
            msg = "reward constants and the distance scale must be positive"
            raise InputError(msg)
        if not self.thresholds or min(self.thresholds) <= 0:
            msg = "every subgoal needs a positive fitting threshold"
            raise InputError(msg)

    @classmethod
    def from_settings(cls, settings: dict[str, Any], thresholds: Sequence[float], scale: float = 1.0) -> RewardConfig:
        """Constants from settings, thresholds and scale from the scenario."""
        return cls(
            thresholds=tuple(float(t) for t in thresholds),
            c1=float(settings["REWARD_C1"]),
            c2=float(settings["REWARD_C2"]),
            c3=float(settings["REWARD_C3"]),
            scale=scale,
        )

    def reward(self, subgoal: int, distance: float) -> tuple[float, bool, bool]:
        """(reward, done, success) after reaching ``distance`` from subgoal ``subgoal``."""
        if distance > self.thresholds[subgoal]:
            return -self.c2, True, False
        if subgoal == len(self.thresholds) - 1:
            return self.c1, True, True
        return self.c3 - distance, False, False


@dataclass(eq=False)
class GraspEnvState:
    """Cloth state, the current subgoal and the actions that led here."""

    sim: SimState
    subgoal: int = 0
    history: tuple[int, ...] = ()
    done: bool = False
    success: bool = False


@dataclass(frozen=True)
class StepInfo:
    """What happened during one environment step."""

    distance: float
    success: bool
    aborted: bool = False


class GraspEnv:
    """A cloth, its ordered subgoals and the candidate grasp vertices.

    Transitions are deterministic, so results are memoized by action history.
    """

    def __init__(
        self,
        mesh: DeformableMesh,
        subgoals: Sequence[DeformableMesh],
        reward: RewardConfig,
        sim_config: SimConfig | None = None,
        candidates: int = 40,
        cache: bool = True,  # noqa: FBT001, FBT002
    ) -> None:
        """Initialize the environment.

        Args:
            mesh: Initial cloth.
            subgoals: Vertex-aligned subgoal meshes in order.
            reward: Reward constants with one threshold per subgoal.
            sim_config: Simulator settings.
            candidates: Number of midline grasp candidates (M).
            cache: Memoize transitions by action history.
        """
        if len(subgoals) != len(reward.thresholds):
            msg = f"{len(subgoals)} subgoals but {len(reward.thresholds)} fitting thresholds"
            raise InputError(msg)
        for k, goal in enumerate(subgoals):
            if goal.vertex_count != mesh.vertex_count:
                msg = f"subgoal {k} is not vertex-aligned with the cloth"
                raise InputError(msg)
        self.mesh = mesh
        self.subgoals = list(subgoals)
        self.reward_config = reward
        self.simulator = ClothSimulator(mesh, sim_config)
        self.candidates = candidate_vertices(mesh, candidates)
        self.use_cache = cache
        self._cache: dict[tuple[int, ...], FloatArray | None] = {}

    @property
    def candidate_count(self) -> int:
        """M."""
        return len(self.candidates)

    @property
    def action_count(self) -> int:
        """Size of the flat action space."""
        return action_count(self.candidate_count)

    @property
    def state_size(self) -> int:
        """Length of the flattened M x 6 observation."""
        return 6 * self.candidate_count

    def reset(self) -> GraspEnvState:
        """Episode start."""
        return GraspEnvState(SimState.at_rest(self.mesh))

    def observe(self, state: GraspEnvState) -> FloatArray:
        """M x 6 matrix: candidate positions and their displacement to the current subgoal."""
        goal = self.subgoals[min(state.subgoal, len(self.subgoals) - 1)]
        positions = state.sim.positions[self.candidates]
        return np.concatenate([positions, goal.vertices[self.candidates] - positions], axis=1)

    def transformed(self, scale: float = 1.0, offset: Sequence[float] = (0.0, 0.0)) -> GraspEnv:
        """Same task on a cloth scaled about the origin and shifted horizontally.

        The distance scale grows with the cloth so thresholds stay comparable.
        """
        shift = np.array([offset[0], offset[1], 0.0])
        topo = self.mesh.topology
        mesh = DeformableMesh.build(
            self.mesh.vertices * scale + shift,
            topo.faces,
            topo.midline,
            topo.side_flags,
            topo.rest_vertices * scale + shift,
        )
        subgoals = [mesh.with_vertices(g.vertices * scale + shift) for g in self.subgoals]
        reward = RewardConfig(
            self.reward_config.thresholds,
            self.reward_config.c1,
            self.reward_config.c2,
            self.reward_config.c3,
            self.reward_config.scale * scale,
        )
        return GraspEnv(mesh, subgoals, reward, self.simulator.config, self.candidate_count, self.use_cache)

    def pull(self, state: GraspEnvState, grasp: Sequence[int], poses: Sequence[RigidPose] | None = None) -> SimState:
        """Pull grasp vertices to the current subgoal (or to explicit poses) and relax."""
        goal = self.subgoals[state.subgoal]
        if poses is None:
            return self.simulator.pull_to_subgoal(state.sim, grasp, goal)
        return self.simulator.pull_to_targets(state.sim, grasp, poses)

    def simulate(self, state: GraspEnvState, action: int) -> SimState | None:
        """Cloth after the grasp action, at rest; None when the simulation fails."""
        key = (*state.history, action)
        if self.use_cache and key in self._cache:
            positions = self._cache[key]
            return None if positions is None else SimState(positions.copy(), np.zeros_like(positions))
        selection = decode_action(action, self.candidate_count)
        try:
            pulled = self.pull(state, [int(self.candidates[s]) for s in selection])
            result = SimState(pulled.positions, np.zeros_like(pulled.positions))
        except ClothLoopError as err:
            logger.warning("%s: action %d aborted the episode: %s", WarningTypes.EPISODE_ABORTED.name, action, err)
            result = None
        if self.use_cache:
            self._cache[key] = None if result is None else result.positions.copy()
        return result

    def advance(self, state: GraspEnvState, next_sim: SimState | None, key: tuple[int, ...]) -> tuple[GraspEnvState, float, StepInfo]:
        """Score a finished pull; ``next_sim`` None means the simulation failed."""
        cfg = self.reward_config
        if next_sim is None:
            return GraspEnvState(state.sim, state.subgoal, key, done=True), -cfg.c2, StepInfo(math.inf, False, True)
        distance = subgoal_distance(self.simulator.mesh_at(next_sim), self.subgoals[state.subgoal], cfg.scale)
        reward, done, success = cfg.reward(state.subgoal, distance)
        subgoal = state.subgoal if done else state.subgoal + 1
        return GraspEnvState(next_sim, subgoal, key, done, success), reward, StepInfo(distance, success)

    def clear_cache(self) -> None:
        """Forget memoized transitions."""
        self._cache.clear()


def env_step(env: GraspEnv, state: GraspEnvState, action: int) -> tuple[GraspEnvState, float, bool, StepInfo]:
    """Apply one grasp action.

    Pulls the selected candidates to their poses on the current subgoal,
    releases and relaxes, then scores the distance: above the subgoal's
    threshold gives ``-C2`` and ends the episode, reaching the last subgoal
    gives ``C1``, any other subgoal ``C3 - D`` and moves on. A simulator
    error aborts the episode as a failure.

    Returns:
        tuple: Next state, reward, done flag and step details.

    Raises:
        InputError: If the episode is already over or the action is invalid.
    """
    if state.done:
        msg = "episode is over; reset the environment"
        raise InputError(msg)
    next_sim = env.simulate(state, action)
    next_state, reward, info = env.advance(state, next_sim, (*state.history, action))
    return next_state, reward, next_state.done, info


def gae(
    rewards: Sequence[float],
    values: Sequence[float],
    gamma: float,
    lam: float,
    dones: Sequence[bool] | None = None,
) -> tuple[FloatArray, FloatArray]:
    """Generalized advantage estimates and returns.

    Args:
        rewards: T rewards.
        values: T + 1 value estimates (the last one bootstraps).
        gamma: Discount.
        lam: GAE lambda.
        dones: Whether step t ended an episode (cuts the bootstrap).

    Returns:
        tuple: Advantages and returns (advantages + values), both length T.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(v) != len(r) + 1:
        msg = f"need {len(r) + 1} values for {len(r)} rewards (got {len(v)})"
        raise InputError(msg)
    d = np.zeros(len(r)) if dones is None else np.asarray(dones, dtype=float)
    advantages = np.zeros(len(r))
    running = 0.0
    for t in reversed(range(len(r))):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        running = delta + gamma * lam * live * running
        advantages[t] = running
    return advantages, advantages + v[:-1]


def clipped_surrogate(ratio: FloatArray, advantage: FloatArray, clip: float) -> FloatArray:
    """Pessimistic PPO objective per sample."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip, 1 + clip) * advantage)


@dataclass(frozen=True)
class PPOConfig:
    """PPO hyperparameters."""

    learning_rate: float = 3e-4
    batch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    iterations: int = 200
    episodes_per_iteration: int = 16
    update_epochs: int = 4
    hidden: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> PPOConfig:
        """Build from a converted settings dictionary."""
        return cls(
            learning_rate=float(settings["PPO_LEARNING_RATE"]),
            batch_size=int(settings["PPO_BATCH_SIZE"]),
            gamma=float(settings["PPO_GAMMA"]),
            gae_lambda=float(settings["PPO_GAE_LAMBDA"]),
            clip=float(settings["PPO_CLIP"]),
            iterations=int(settings["PPO_ITERATIONS"]),
            episodes_per_iteration=int(settings["PPO_EPISODES"]),
            update_epochs=int(settings["PPO_EPOCHS"]),
            hidden=int(settings["PPO_HIDDEN"]),
            entropy_coef=float(settings["PPO_ENTROPY"]),
        )


class ActorCritic:
    """Policy and value MLPs over the flattened observation."""

    def __init__(self, state_size: int, actions: int, rng: np.random.Generator, hidden: int = 256) -> None:
        """Two hidden layers each; small initial policy logits."""
        self.policy = MLP([state_size, hidden, hidden, actions], rng, out_scale=0.01)
        self.value = MLP([state_size, hidden, hidden, 1], rng, out_scale=1.0)

    @property
    def actions(self) -> int:
        """Size of the action space."""
        return self.policy.sizes[-1]

    def log_probs(self, obs: FloatArray) -> FloatArray:
        """(B, A) log action probabilities."""
        logits, _ = self.policy.forward(np.atleast_2d(obs))
        return log_softmax(logits)

    def probs(self, obs: FloatArray) -> FloatArray:
        """Action distribution for one observation."""
        return np.exp(self.log_probs(obs.reshape(1, -1))[0])

    def values(self, obs: FloatArray) -> FloatArray:
        """(B,) state values."""
        out, _ = self.value.forward(np.atleast_2d(obs))
        return out[:, 0]

    def act(self, obs: FloatArray, rng: np.random.Generator, greedy: bool = False) -> tuple[int, float]:  # noqa: FBT001, FBT002
        """Sampled (or most likely) action and its log probability."""
        logp = self.log_probs(obs.reshape(1, -1))[0]
        action = int(np.argmax(logp)) if greedy else int(rng.choice(len(logp), p=np.exp(logp) / np.exp(logp).sum()))
        return action, float(logp[action])

    def save(self, path: Path, meta: dict[str, Any] | None = None) -> None:
        """Write both networks to one parameter file."""
        arrays = {f"policy.{k}": v for k, v in self.policy.params.items()}
        arrays |= {f"value.{k}": v for k, v in self.value.params.items()}
        header = {"kind": "policy", "policy_sizes": self.policy.sizes, "value_sizes": self.value.sizes, **(meta or {})}
        write_arrays(path, header, arrays)

    @classmethod
    def load(cls, path: Path) -> tuple[ActorCritic, dict[str, Any]]:
        """Read a file written by :meth:`save`; returns the networks and the header."""
        header, arrays = read_arrays(path)
        if header.get("kind") != "policy":
            msg = f"{path} does not hold policy parameters"
            raise InputError(msg)
        sizes = header["policy_sizes"]
        net = cls(sizes[0], sizes[-1], np.random.default_rng(0), sizes[1])
        net.policy.load({k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("policy.")})
        net.value.load({k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("value.")})
        return net, header


@dataclass
class Episode:
    """One rollout."""

    observations: list[FloatArray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    success: bool = False
    achieved: int = 0

    @property
    def total_reward(self) -> float:
        """Undiscounted return."""
        return float(sum(self.rewards))


def rollout(env: GraspEnv, net: ActorCritic, rng: np.random.Generator, greedy: bool = False) -> Episode:  # noqa: FBT001, FBT002
    """Run one episode with the teacher policy."""
    episode = Episode()
    state = env.reset()
    while not state.done:
        obs = env.observe(state).ravel()
        action, logp = net.act(obs, rng, greedy)
        state, reward, _, info = env_step(env, state, action)
        episode.observations.append(obs)
        episode.actions.append(action)
        episode.log_probs.append(logp)
        episode.rewards.append(reward)
        if info.success or not state.done:
            episode.achieved += 1
    episode.success = state.success
    return episode


@dataclass(frozen=True)
class EvalSummary:
    """Success rate and average achieved subgoals over evaluation episodes."""

    episodes: int
    success_rate: float
    average_subgoals: float
    mean_return: float = 0.0


def summarize_episodes(successes: Sequence[bool], achieved: Sequence[int], returns: Sequence[float] = ()) -> EvalSummary:
    """Aggregate per-episode outcomes."""
    if not successes:
        msg = "no episodes to summarize"
        raise InputError(msg)
    return EvalSummary(
        len(successes),
        float(np.mean(successes)),
        float(np.mean(achieved)),
        float(np.mean(returns)) if len(returns) else 0.0,
    )


def evaluate(env: GraspEnv, net: ActorCritic, episodes: int, seed: int, greedy: bool = False) -> EvalSummary:  # noqa: FBT001, FBT002
    """Roll out ``episodes`` episodes with independent child seeds."""
    runs = [rollout(env, net, np.random.default_rng(s), greedy) for s in np.random.SeedSequence(seed).spawn(episodes)]
    return summarize_episodes([r.success for r in runs], [r.achieved for r in runs], [r.total_reward for r in runs])


@dataclass(frozen=True)
class CurvePoint:
    """One row of the PPO training curve."""

    iteration: int
    mean_return: float
    success_rate: float


def _policy_grads(
    net: ActorCritic,
    obs: FloatArray,
    actions: IntArray,
    old_logp: FloatArray,
    advantages: FloatArray,
    cfg: PPOConfig,
) -> tuple[float, dict[str, FloatArray]]:
    logits, cache = net.policy.forward(obs)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    n = len(actions)
    rows = np.arange(n)
    ratio = np.exp(logp_all[rows, actions] - old_logp)
    surrogate = clipped_surrogate(ratio, advantages, cfg.clip)
    entropy = -(probs * logp_all).sum(axis=1)
    loss = float(-surrogate.mean() - cfg.entropy_coef * entropy.mean())

    # the unclipped branch carries the gradient wherever it is the minimum
    active = ratio * advantages <= np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * advantages
    dlogp = np.where(active, -advantages * ratio, 0.0) / n
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    dlogits += cfg.entropy_coef * probs * (logp_all + entropy[:, None]) / n
    return loss, net.policy.backward(cache, dlogits)


def _value_grads(net: ActorCritic, obs: FloatArray, returns: FloatArray, cfg: PPOConfig) -> tuple[float, dict[str, FloatArray]]:
    out, cache = net.value.forward(obs)
    err = out[:, 0] - returns
    loss = float(cfg.value_coef * np.mean(err**2))
    dout = (2 * cfg.value_coef * err / len(err))[:, None]
    return loss, net.value.backward(cache, dout)


def ppo_train(
    env: GraspEnv,
    cfg: PPOConfig,
    seed: int,
    threads: int = 1,
) -> tuple[ActorCritic, list[CurvePoint]]:
    """Train the teacher with clipped-surrogate PPO and GAE.

    Each iteration collects ``episodes_per_iteration`` episodes (in parallel
    when ``threads > 1``, each with its own child seed), normalizes the
    advantages and runs ``update_epochs`` passes of minibatch Adam.

    Returns:
        tuple: Trained networks and one curve point per iteration.

    Raises:
        NumericalError: If a loss turns NaN (the message names the iteration).
    """
    root = np.random.SeedSequence(seed)
    init_seed, shuffle_seed, rollout_root = root.spawn(3)
    net = ActorCritic(env.state_size, env.action_count, np.random.default_rng(init_seed), cfg.hidden)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    policy_opt = Adam()
    value_opt = Adam()
    curve: list[CurvePoint] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for iteration in range(1, cfg.iterations + 1):
            seeds = rollout_root.spawn(cfg.episodes_per_iteration)
            episodes = list(pool.map(lambda s: rollout(env, net, np.random.default_rng(s)), seeds))

            obs, actions, old_logp, advantages, returns = [], [], [], [], []
            for ep in episodes:
                ep_obs = np.stack(ep.observations)
                values = np.append(net.values(ep_obs), 0.0)
                adv, ret = gae(ep.rewards, values, cfg.gamma, cfg.gae_lambda)
                obs.append(ep_obs)
                actions += ep.actions
                old_logp += ep.log_probs
                advantages.append(adv)
                returns.append(ret)
            obs_arr = np.concatenate(obs)
            act_arr = np.asarray(actions, dtype=np.int64)
            logp_arr = np.asarray(old_logp)
            adv_arr = np.concatenate(advantages)
            ret_arr = np.concatenate(returns)
            adv_arr = (adv_arr - adv_arr.mean()) / (adv_arr.std() + 1e-8)

            for _ in range(cfg.update_epochs):
                order = shuffle_rng.permutation(len(act_arr))
                for start in range(0, len(order), cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    pi_loss, pi_grads = _policy_grads(net, obs_arr[idx], act_arr[idx], logp_arr[idx], adv_arr[idx], cfg)
                    v_loss, v_grads = _value_grads(net, obs_arr[idx], ret_arr[idx], cfg)
                    if not (math.isfinite(pi_loss) and math.isfinite(v_loss)):
                        msg = f"PPO loss became non-finite at iteration {iteration}"
                        raise NumericalError(msg)
                    clip_grad_norm(pi_grads, cfg.max_grad_norm)
                    clip_grad_norm(v_grads, cfg.max_grad_norm)
                    policy_opt.step(net.policy.params, pi_grads, cfg.learning_rate)
                    value_opt.step(net.value.params, v_grads, cfg.learning_rate)
            for params in (net.policy.params, net.value.params):
                for name, value in params.items():
                    check_finite(f"iteration {iteration} parameter {name}", value)

            point = CurvePoint(
                iteration,
                float(np.mean([ep.total_reward for ep in episodes])),
                float(np.mean([ep.success for ep in episodes])),
            )
            curve.append(point)
            logger.debug(
                "ppo iteration %d: mean return %.3f, success %.2f", iteration, point.mean_return, point.success_rate
            )
    return net, curve
