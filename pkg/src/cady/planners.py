"""Sampling-based MPC: cross-entropy method and path-integral planning.

Both planners score candidate action sequences through a rollout evaluator.
Model-backed evaluators draw a fresh causal mask from the edge distribution
at every model call, so planning marginalizes over plausible structures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import causal, envs, model as model_mod


@dataclass
class CemConfig:
    horizon: int = 15
    population: int = 200
    elite_ratio: float = 0.1
    alpha: float = 0.1
    iterations: int = 5
    replan_frequency: int = 1

    def __post_init__(self):
        if not 0.0 < self.elite_ratio <= 1.0:
            raise ValueError("elite_ratio must be in (0, 1]")
        if math.ceil(self.elite_ratio * self.population) < 2:
            raise ValueError("need at least 2 elites")


@dataclass
class MppiConfig:
    horizon: int = 20
    num_samples: int = 256
    gamma: float = 0.9
    sigma: float = 0.01   # noise variance
    beta: float = 0.6     # time-correlated noise filter coefficient

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")


class ModelStep:
    """Batched one-step transition through a learned model.

    Samples one causal mask per call (Eq.-of-motion sampling contract) and
    counts calls and draws so tests can verify the one-mask-per-call rule.
    """

    def __init__(self, model, edge_probs, propagation="sample"):
        self.model = model
        self.edge_probs = edge_probs
        self.propagation = propagation
        self.model_calls = 0
        self.mask_draws = 0

    def __call__(self, states, actions, rng):
        mask = causal.sample_mask(self.edge_probs, rng)
        self.mask_draws += 1
        self.model_calls += 1
        return model_mod.predict_next_batch(
            self.model, states, actions, mask.M, rng,
            deterministic=(self.propagation == "mean-only"))


class RolloutEvaluator:
    """Scores (K, H, adim) candidate action sequences.

    step_fn(states, actions, rng) -> next states, batched.
    reward_fn(states, actions) -> per-candidate instantaneous reward.
    alive_fn: optional survival predicate; reward accrual stops for a
    candidate once it leaves the alive set.
    """

    def __init__(self, step_fn, reward_fn, alive_fn=None):
        self.step_fn = step_fn
        self.reward_fn = reward_fn
        self.alive_fn = alive_fn

    def rollout_scores(self, state, seqs, rng):
        seqs = np.asarray(seqs, dtype=np.float64)
        k, horizon, _ = seqs.shape
        states = np.tile(np.asarray(state, dtype=np.float64), (k, 1))
        alive = np.ones(k)
        total = np.zeros(k)
        for t in range(horizon):
            states = self.step_fn(states, seqs[:, t, :], rng)
            if self.alive_fn is not None:
                alive = alive * self.alive_fn(states)
                total += alive * self.reward_fn(states, seqs[:, t, :])
            else:
                total += self.reward_fn(states, seqs[:, t, :])
        return total


def _truncated_normal(rng, mean, std, low, high, size):
    """Sample within [low, high]; degenerate dimensions stay at the mean."""
    std = np.broadcast_to(std, mean.shape)
    mean_b = np.broadcast_to(mean, mean.shape)
    ok = (std > 1e-12) & (high > low)
    a = np.where(ok, (low - mean_b) / np.where(ok, std, 1.0), -1.0)
    b = np.where(ok, (high - mean_b) / np.where(ok, std, 1.0), 1.0)
    samples = stats.truncnorm.rvs(
        a, b, loc=mean_b, scale=np.where(ok, std, 1.0),
        size=size, random_state=rng)
    return np.where(ok, samples, mean_b)


def cem_plan(evaluator, state, cfg, rng, bounds, init_mean=None):
    """Cross-entropy optimization of one action sequence.

    Returns the final mean sequence of shape (horizon, adim).
    """
    low, high = (np.asarray(b, dtype=np.float64) for b in bounds)
    adim = low.shape[0]
    if np.all(low == high):
        return np.tile(low, (cfg.horizon, 1))
    mean = np.tile((low + high) / 2.0, (cfg.horizon, 1)) \
        if init_mean is None else np.asarray(init_mean, dtype=np.float64).copy()
    var = np.tile(((high - low) / 2.0) ** 2, (cfg.horizon, 1))
    n_elite = math.ceil(cfg.elite_ratio * cfg.population)
    for _ in range(cfg.iterations):
        samples = _truncated_normal(
            rng, mean[None, :, :], np.sqrt(var)[None, :, :],
            low, high, (cfg.population, cfg.horizon, adim))
        scores = evaluator.rollout_scores(state, samples, rng)
        elite_idx = np.argsort(scores)[-n_elite:]
        elites = samples[elite_idx]
        mean = cfg.alpha * mean + (1.0 - cfg.alpha) * elites.mean(axis=0)
        var = cfg.alpha * var + (1.0 - cfg.alpha) * elites.var(axis=0)
    return np.clip(mean, low, high)


class CemPlanner:
    """Receding-horizon CEM with a one-step-shift warm start."""

    def __init__(self, cfg, bounds):
        self.cfg = cfg
        self.bounds = (np.asarray(bounds[0], dtype=np.float64),
                       np.asarray(bounds[1], dtype=np.float64))
        self.prev_mean = None

    def reset(self):
        self.prev_mean = None

    def plan(self, evaluator, state, rng):
        init = None
        if self.prev_mean is not None:
            init = np.vstack([self.prev_mean[1:], self.prev_mean[-1:]])
        mean = cem_plan(evaluator, state, self.cfg, rng, self.bounds, init)
        self.prev_mean = mean
        return mean[0].copy()


def mppi_weights(scores, gamma):
    """Softmax weights over rollout scores (higher score, higher weight)."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = gamma * (scores - scores.max())
    w = np.exp(shifted)
    return w / w.sum()


def filter_noise(eps, beta):
    """Time-correlated noise: n_t = beta * eps_t + (1 - beta) * n_{t-1}."""
    n = np.zeros_like(eps)
    prev = np.zeros_like(eps[:, 0, :])
    for t in range(eps.shape[1]):
        prev = beta * eps[:, t, :] + (1.0 - beta) * prev
        n[:, t, :] = prev
    return n


class MppiPlanner:
    """Path-integral planner over a persistent nominal action sequence."""

    def __init__(self, cfg, bounds):
        self.cfg = cfg
        self.low = np.asarray(bounds[0], dtype=np.float64)
        self.high = np.asarray(bounds[1], dtype=np.float64)
        self.nominal = np.zeros((cfg.horizon, self.low.shape[0]))

    def reset(self):
        self.nominal = np.zeros_like(self.nominal)

    def plan(self, evaluator, state, rng):
        cfg = self.cfg
        eps = rng.normal(
            0.0, np.sqrt(cfg.sigma),
            size=(cfg.num_samples, cfg.horizon, self.low.shape[0]))
        noise = filter_noise(eps, cfg.beta)
        candidates = np.clip(self.nominal[None] + noise, self.low, self.high)
        scores = evaluator.rollout_scores(state, candidates, rng)
        if not np.all(np.isfinite(scores)):
            raise RuntimeError(
                f"mppi: non-finite rollout scores "
                f"({np.sum(~np.isfinite(scores))}/{scores.size})")
        w = mppi_weights(scores, cfg.gamma)
        self.nominal = np.einsum("k,kha->ha", w, candidates)
        action = self.nominal[0].copy()
        self.nominal = np.vstack([self.nominal[1:], self.nominal[-1:]])
        return action


class RandomPlanner:
    """Uniform random actions within bounds (exploration baseline)."""

    def __init__(self, bounds):
        self.low = np.asarray(bounds[0], dtype=np.float64)
        self.high = np.asarray(bounds[1], dtype=np.float64)

    def reset(self):
        pass

    def plan(self, evaluator, state, rng):
        return rng.uniform(self.low, self.high)


# -- objectives ----------------------------------------------------------------

def cartpole_objective(params):
    """Reward/alive functions for planning the cartpole balance task.

    Reward ~1 per surviving step with a small quadratic pull toward the
    upright centered state (tie-breaker when all candidates survive the
    horizon).
    """

    def reward_fn(states, actions):
        return (1.0
                - 0.01 * (states[:, 0] / params.x_limit) ** 2
                - 0.1 * (states[:, 1] / params.theta_limit) ** 2)

    def alive_fn(states):
        return envs.cartpole_in_bounds(states, params).astype(np.float64)

    return reward_fn, alive_fn


class WaypointObjective:
    """Negative distance to the active waypoint; retargeted by the runner."""

    def __init__(self):
        self.target = np.zeros(2)

    def set_target(self, xy):
        self.target = np.asarray(xy, dtype=np.float64)

    def reward_fn(self, states, actions):
        return -np.hypot(states[:, 0] - self.target[0],
                         states[:, 1] - self.target[1])


# -- MPC episode loop ------------------------------------------------------------

@dataclass
class EpisodeConfig:
    max_steps: int = 200
    mission: envs.Mission = None
    dt: float = 1.0               # seconds per step (mission timing)


@dataclass
class TrajectoryLog:
    rows: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def mpc_run(env, planner, evaluator, episode, fault=None, intervention=None,
            rng=None, objective=None, init_state=None):
    """Receding-horizon control loop with faults and interventions.

    Faults corrupt only the observation the planner sees; interventions scale
    the simulator-side controls. Returns a TrajectoryLog with per-step rows
    (t, true state, observed state, action, reward, done) and summary
    metrics.
    """
    rng = rng or np.random.default_rng(0)
    if init_state is not None:
        state = env.reset(rng, state=init_state)
    else:
        state = env.reset(rng)
    low, high = env.action_bounds
    log = TrajectoryLog()
    memory = {}
    total_reward = 0.0
    distance = 0.0
    progress = 0
    mission = episode.mission
    success = False
    steps = 0
    for t in range(episode.max_steps):
        obs = envs.apply_fault(state, fault, t, memory, rng,
                               episode.max_steps)
        if mission is not None:
            progress = envs.mission_progress(state, mission, progress)
            if progress >= len(mission.waypoints):
                success = True
                break
            if t * episode.dt > mission.time_limit:
                break
            objective.set_target(mission.waypoints[progress])
        action = planner.plan(evaluator, obs, rng)
        sim_action = envs.apply_intervention(action, intervention, t,
                                             low, high)
        prev_state = state
        state, reward, done = env.step(sim_action)
        total_reward += reward
        distance += float(np.hypot(state[0] - prev_state[0],
                                   state[1] - prev_state[1]))
        log.rows.append((t, prev_state.copy(), obs.copy(), action.copy()
                         if isinstance(action, np.ndarray) else action,
                         reward, done))
        steps = t + 1
        if done:
            break
    if mission is not None and not success:
        progress = envs.mission_progress(state, mission, progress)
        success = progress >= len(mission.waypoints)
    log.metrics = {
        "reward": total_reward,
        "steps": steps,
        "distance": distance,
    }
    if mission is not None:
        log.metrics["success"] = bool(success)
        log.metrics["time"] = steps * episode.dt
    return log
