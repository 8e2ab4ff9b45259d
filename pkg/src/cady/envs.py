"""Deterministic simulators, missions, and fault/intervention wrappers.

Continuous cartpole (classic Barto-Sutton-Anderson dynamics, Euler
integration) with state [x, theta, x_dot, theta_dot], and a discretized
differential-drive robot with state [x, y, theta]. Observation faults corrupt
only what the planner sees; the true simulator state is never modified.
Interventions are multiplicative gains applied to the simulator-side controls
and are invisible to the dynamics models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CartpoleParams:
    gravity: float = 9.8
    mass_cart: float = 1.0
    mass_pole: float = 0.1
    half_length: float = 0.5
    force_scale: float = 10.0
    tau: float = 0.02
    x_limit: float = 2.4
    theta_limit: float = 12.0 * np.pi / 180.0
    episode_length: int = 200
    action_low: float = -3.0
    action_high: float = 3.0


@dataclass
class DiffDriveParams:
    dt: float = 0.1
    v_low: float = -1.0
    v_high: float = 1.0
    w_low: float = -np.pi / 3.0
    w_high: float = np.pi / 3.0
    wrap_angle: bool = True


@dataclass
class Mission:
    waypoints: list               # ordered (x, y) pairs, meters
    arrival_radius: float = 0.5
    time_limit: float = 60.0      # seconds

    def __post_init__(self):
        if len(self.waypoints) == 0:
            raise ValueError("mission needs at least one waypoint")
        if self.arrival_radius <= 0:
            raise ValueError("arrival radius must be positive")


@dataclass
class FaultConfig:
    mode: str = "none"            # none | freeze | gaussian_noise
    index: int = 0                # frozen variable (freeze mode)
    onset: float = 0.1            # fraction of the episode (freeze mode)
    sigma2: float = 0.0           # noise variance (gaussian mode)

    def __post_init__(self):
        if self.mode not in ("none", "freeze", "gaussian_noise"):
            raise ValueError(f"unknown fault mode: {self.mode}")
        if self.mode == "freeze" and not 0.0 < self.onset < 1.0:
            raise ValueError("freeze onset fraction must be in (0, 1)")
        if self.sigma2 < 0:
            raise ValueError("noise variance must be >= 0")


@dataclass
class InterventionSchedule:
    onset_step: int = 0
    gains: tuple = (1.0,)         # per-control multipliers


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


# -- cartpole ----------------------------------------------------------------

def cartpole_step(state, action, params=None):
    """One Euler step. Returns (next_state, reward, done).

    `done` reflects the position/angle bounds of the next state only; the
    episode length cap is enforced by CartpoleEnv.
    """
    params = params or CartpoleParams()
    next_state = cartpole_step_batch(
        np.asarray(state, dtype=np.float64)[None, :],
        np.asarray([action], dtype=np.float64), params)[0]
    done = bool(abs(next_state[0]) > params.x_limit
                or abs(next_state[1]) > params.theta_limit)
    return next_state, 1.0, done


def cartpole_step_batch(states, actions, params):
    """Vectorized dynamics for a (B, 4) state batch."""
    x, th, xd, thd = states[:, 0], states[:, 1], states[:, 2], states[:, 3]
    force = params.force_scale * np.clip(
        actions, params.action_low, params.action_high)
    total_mass = params.mass_cart + params.mass_pole
    pml = params.mass_pole * params.half_length
    cos_th, sin_th = np.cos(th), np.sin(th)
    temp = (force + pml * thd ** 2 * sin_th) / total_mass
    th_acc = (params.gravity * sin_th - cos_th * temp) / (
        params.half_length
        * (4.0 / 3.0 - params.mass_pole * cos_th ** 2 / total_mass))
    x_acc = temp - pml * th_acc * cos_th / total_mass
    tau = params.tau
    return np.stack(
        [x + tau * xd, th + tau * thd, xd + tau * x_acc, thd + tau * th_acc],
        axis=1)


def cartpole_in_bounds(states, params):
    return (np.abs(states[..., 0]) <= params.x_limit) \
        & (np.abs(states[..., 1]) <= params.theta_limit)


def cartpole_energy(state, params):
    """Total mechanical energy (pole modeled as a uniform rod)."""
    _, th, xd, thd = state
    m_c, m_p, ell = params.mass_cart, params.mass_pole, params.half_length
    i_com = m_p * ell ** 2 / 3.0
    kinetic = 0.5 * m_c * xd ** 2 + 0.5 * m_p * (
        xd ** 2 + 2.0 * ell * thd * xd * np.cos(th) + ell ** 2 * thd ** 2) \
        + 0.5 * i_com * thd ** 2
    potential = m_p * params.gravity * ell * np.cos(th)
    return kinetic + potential


class CartpoleEnv:
    """Episode-stateful wrapper around the cartpole dynamics."""

    n, p = 4, 1

    def __init__(self, params=None):
        self.params = params or CartpoleParams()
        self.state = None
        self.steps = 0

    @property
    def action_bounds(self):
        return (np.array([self.params.action_low]),
                np.array([self.params.action_high]))

    def reset(self, rng, state=None):
        if state is None:
            state = rng.uniform(-0.05, 0.05, size=4)
        self.state = np.asarray(state, dtype=np.float64).copy()
        self.steps = 0
        return self.state.copy()

    def step(self, action):
        action = float(np.asarray(action).reshape(-1)[0])
        self.state, reward, done = cartpole_step(
            self.state, action, self.params)
        self.steps += 1
        if self.steps >= self.params.episode_length:
            done = True
        return self.state.copy(), reward, done


# -- differential drive --------------------------------------------------------

def diffdrive_step(state, action, params=None):
    """Discretized unicycle update with clamped controls."""
    params = params or DiffDriveParams()
    return diffdrive_step_batch(
        np.asarray(state, dtype=np.float64)[None, :],
        np.asarray(action, dtype=np.float64)[None, :], params)[0]


def diffdrive_step_batch(states, actions, params):
    """Vectorized dynamics for a (B, 3) state batch and (B, 2) controls."""
    v = np.clip(actions[:, 0], params.v_low, params.v_high)
    w = np.clip(actions[:, 1], params.w_low, params.w_high)
    x, y, th = states[:, 0], states[:, 1], states[:, 2]
    nx = x + v * np.cos(th) * params.dt
    ny = y + v * np.sin(th) * params.dt
    nth = th + w * params.dt
    if params.wrap_angle:
        nth = wrap_angle(nth)
    return np.stack([nx, ny, nth], axis=1)


class DiffDriveEnv:
    """Episode-stateful wrapper around the diff-drive kinematics."""

    n, p = 3, 2

    def __init__(self, params=None):
        self.params = params or DiffDriveParams()
        self.state = None
        self.steps = 0

    @property
    def action_bounds(self):
        return (np.array([self.params.v_low, self.params.w_low]),
                np.array([self.params.v_high, self.params.w_high]))

    def reset(self, rng, state=None):
        if state is None:
            xy = rng.uniform(-1.0, 1.0, size=2)
            th = rng.uniform(-0.8 * np.pi, 0.8 * np.pi)
            state = np.array([xy[0], xy[1], th])
        self.state = np.asarray(state, dtype=np.float64).copy()
        self.steps = 0
        return self.state.copy()

    def step(self, action):
        self.state = diffdrive_step(self.state, action, self.params)
        self.steps += 1
        return self.state.copy(), 0.0, False


# -- missions, faults, interventions ------------------------------------------

def mission_cost(state, mission, progress_index):
    """Euclidean distance from the robot's (x, y) to the active waypoint."""
    if progress_index >= len(mission.waypoints):
        raise IndexError("progress index past the last waypoint")
    wx, wy = mission.waypoints[progress_index]
    return float(np.hypot(state[0] - wx, state[1] - wy))


def mission_progress(state, mission, progress_index):
    """Advance the waypoint index while the robot is within arrival radius."""
    while (progress_index < len(mission.waypoints)
           and mission_cost(state, mission, progress_index)
           <= mission.arrival_radius):
        progress_index += 1
    return progress_index


def apply_fault(observation, fault, t, memory, rng, episode_length):
    """Corrupt an observation; the true simulator state is untouched."""
    obs = np.asarray(observation, dtype=np.float64)
    if fault is None or fault.mode == "none":
        return obs.copy()
    if fault.mode == "freeze":
        onset_step = int(fault.onset * episode_length)
        if t < onset_step:
            memory["held"] = obs.copy()
            return obs.copy()
        out = obs.copy()
        out[fault.index] = memory["held"][fault.index]
        return out
    # gaussian_noise
    return obs + rng.normal(0.0, np.sqrt(fault.sigma2), size=obs.shape)


def apply_intervention(action, schedule, t, low, high):
    """Gain-scale the simulator-side controls at/after the onset step."""
    action = np.asarray(action, dtype=np.float64)
    if schedule is None or t < schedule.onset_step:
        return action.copy()
    gains = np.asarray(schedule.gains, dtype=np.float64)
    return np.clip(action * gains, low, high)
