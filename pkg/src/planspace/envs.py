"""Analytic cart-pole and planar two-link reacher environments.

States are numpy arrays and every function broadcasts over leading batch
axes, so a whole batch of episodes steps with one call.

Cart-pole state: ``(cart position m, cart velocity m/s, pole angle rad,
pole angular velocity rad/s)``.  The angle is measured from upright and is
never wrapped.  Reacher state: ``(q1, q2, dq1, dq2, target_x, target_y)``.

Physical constants stand in for the MuJoCo models and are fixed:

=================  =============
cart mass          1.0 kg
pole mass          0.1 kg
pole half-length   0.5 m (uniform rod)
gravity            9.81 m/s^2
track              |x| <= 0.5 m
force bound        10 N
reacher links      0.1 m, 0.11 m
joint damping      0.1
torque bound       1 N m
dt                 0.01 s (cart-pole: 4 Euler substeps)
=================  =============
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Trajectory, wrap_angle

CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
GRAVITY = 9.81
TRACK_HALF_WIDTH = 0.5
FORCE_BOUND = 10.0
DT = 0.01
CARTPOLE_SUBSTEPS = 4

LINK1 = 0.1
LINK2 = 0.11
JOINT_DAMPING = 0.1
TORQUE_BOUND = 1.0
TARGET_RADIUS = 0.2

BALANCE_ANGLE_LIMIT = 0.2
CONTROL_COST = 0.01

TASKS = ("balance", "swingup", "reacher")
OBS_MODES = ("raw", "trig", "embedded", "augmented")

_TOTAL_MASS = CART_MASS + POLE_MASS
_POLE_INERTIA = POLE_MASS * POLE_HALF_LENGTH**2 / 3.0  # about the centre of mass


def _accel(th, thd, force):
    sin, cos = np.sin(th), np.cos(th)
    temp = (force + POLE_MASS * POLE_HALF_LENGTH * thd**2 * sin) / _TOTAL_MASS
    thdd = (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos**2 / _TOTAL_MASS))
    xdd = temp - POLE_MASS * POLE_HALF_LENGTH * thdd * cos / _TOTAL_MASS
    return xdd, thdd


def cartpole_accel(state, force):
    """Cart and pole accelerations of the frictionless cart-pole."""
    state = np.asarray(state, dtype=float)
    return _accel(state[..., 2], state[..., 3], force)


def cartpole_step(state, force, dt: float = DT, substeps: int = CARTPOLE_SUBSTEPS):
    """Advance by ``dt`` with ``substeps`` semi-implicit Euler steps; the cart stops dead at the track ends.

    The force is held constant over the step.  One Euler step of 0.01 s lets
    the energy oscillate by about 2%; four substeps keep it well under 1%.
    """
    state = np.asarray(state, dtype=float)
    force = np.clip(np.asarray(force, dtype=float), -FORCE_BOUND, FORCE_BOUND)
    x, xd, th, thd = (state[..., i] for i in range(4))
    h = dt / substeps
    for _ in range(substeps):
        xdd, thdd = _accel(th, thd, force)
        xd = xd + h * xdd
        thd = thd + h * thdd
        x = x + h * xd
        th = th + h * thd
        hit = np.abs(x) > TRACK_HALF_WIDTH
        x = np.clip(x, -TRACK_HALF_WIDTH, TRACK_HALF_WIDTH)
        xd = np.where(hit, 0.0, xd)
    return np.stack([x, xd, th, thd], axis=-1)


def cartpole_energy(state):
    """Total mechanical energy, potential measured from the hanging pole."""
    state = np.asarray(state, dtype=float)
    _, xd, th, thd = np.moveaxis(state, -1, 0)
    vx = xd + POLE_HALF_LENGTH * thd * np.cos(th)
    vy = -POLE_HALF_LENGTH * thd * np.sin(th)
    kinetic = 0.5 * CART_MASS * xd**2 + 0.5 * POLE_MASS * (vx**2 + vy**2) + 0.5 * _POLE_INERTIA * thd**2
    return kinetic + POLE_MASS * GRAVITY * POLE_HALF_LENGTH * (1.0 + np.cos(th))


def pole_energy(state):
    """Pole energy about a fixed pivot, zero at upright rest and negative below."""
    state = np.asarray(state, dtype=float)
    th, thd = state[..., 2], state[..., 3]
    inertia = _POLE_INERTIA + POLE_MASS * POLE_HALF_LENGTH**2
    return 0.5 * inertia * thd**2 + POLE_MASS * GRAVITY * POLE_HALF_LENGTH * (np.cos(th) - 1.0)


def reacher_step(state, torques, dt: float = DT):
    """Per-joint damped double integrator with unit inertia."""
    state = np.asarray(state, dtype=float)
    tau = np.clip(np.asarray(torques, dtype=float), -TORQUE_BOUND, TORQUE_BOUND)
    q, dq, target = state[..., 0:2], state[..., 2:4], state[..., 4:6]
    dq = dq + dt * (tau - JOINT_DAMPING * dq)
    q = q + dt * dq
    return np.concatenate([q, dq, np.broadcast_to(target, q.shape)], axis=-1)


def reacher_tip(state):
    state = np.asarray(state, dtype=float)
    q1, q2 = state[..., 0], state[..., 1]
    x = LINK1 * np.cos(q1) + LINK2 * np.cos(q1 + q2)
    y = LINK1 * np.sin(q1) + LINK2 * np.sin(q1 + q2)
    return np.stack([x, y], axis=-1)


def reward(task: str, state, action):
    """Per-step reward of ``action`` taken in ``state`` (physical units)."""
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    if task == "balance":
        ok = (np.abs(state[..., 2]) < BALANCE_ANGLE_LIMIT) & (np.abs(state[..., 0]) < TRACK_HALF_WIDTH)
        return ok.astype(float)
    if task == "swingup":
        force = action[..., 0] if action.shape == state.shape[:-1] + (1,) else action
        return np.cos(state[..., 2]) - CONTROL_COST * force**2
    if task == "reacher":
        dist = np.linalg.norm(reacher_tip(state) - state[..., 4:6], axis=-1)
        return -dist - CONTROL_COST * np.sum(action**2, axis=-1)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    task: str
    state_dim: int
    action_dim: int
    action_bound: float
    dt: float
    horizon: int
    obs_mode: str
    angle_dims: tuple[int, ...]
    embed_dims: tuple[int, ...]


class Env:
    """Batched, value-semantic environment: no state is kept between calls."""

    spec: EnvSpec

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, states, actions) -> np.ndarray:
        raise NotImplementedError

    def reward(self, states, actions) -> np.ndarray:
        return reward(self.spec.task, states, actions)

    def done(self, states) -> np.ndarray:
        """True where the episode has ended before acting in ``states``."""
        return np.zeros(np.shape(states)[:-1], dtype=bool)

    def base_observation(self, states) -> np.ndarray:
        return np.asarray(states, dtype=float)

    def embed_input(self, states) -> np.ndarray:
        return np.asarray(states, dtype=float)[..., list(self.spec.embed_dims)]

    def observe(self, states, mode: str | None = None, model=None) -> np.ndarray:
        """Observation vector for ``mode``.

        ``embedded`` returns the encoder mean only; ``augmented`` appends it to
        the environment's base observation.
        """
        mode = self.spec.obs_mode if mode is None else mode
        if mode in ("embedded", "augmented"):
            if model is None:
                raise ValueError(f"observation mode {mode!r} needs an embedding model")
            z = model.encode_mean(self.embed_input(states))
            if mode == "embedded":
                return z
            return np.concatenate([self.base_observation(states), z], axis=-1)
        if mode != self.spec.obs_mode:
            raise ValueError(f"{self.spec.env_id} has base observation {self.spec.obs_mode!r}, not {mode!r}")
        return self.base_observation(states)

    def obs_dim(self, mode: str | None = None, z_dim: int = 0) -> int:
        mode = self.spec.obs_mode if mode is None else mode
        base = self.base_observation(np.zeros(self.spec.state_dim)).shape[-1]
        return {"embedded": z_dim, "augmented": base + z_dim}.get(mode, base)

    # planning interface
    def goal_cost(self, states) -> np.ndarray:
        raise NotImplementedError

    def is_goal(self, states) -> np.ndarray:
        raise NotImplementedError

    def to_trajectory(self, states, controls=None, success: bool = True) -> Trajectory:
        return Trajectory(np.asarray(states), self.spec.env_id, self.spec.dt, self.spec.angle_dims,
                          None if controls is None else np.asarray(controls).reshape(len(states) - 1, self.spec.action_dim),
                          success)


class CartPole(Env):
    def __init__(self, task: str = "swingup"):
        if task not in ("balance", "swingup"):
            raise ValueError(f"cart-pole task must be 'balance' or 'swingup', got {task!r}")
        self.spec = EnvSpec(f"cartpole_{task}", task, 4, 1, FORCE_BOUND, DT,
                            200 if task == "swingup" else 100, "raw", (2,), (0, 1, 2, 3))

    def reset(self, rng, n):
        s = np.zeros((n, 4))
        if self.spec.task == "balance":
            s[:, 0] = rng.uniform(-0.05, 0.05, n)
            s[:, 1] = rng.uniform(-0.05, 0.05, n)
            s[:, 2] = rng.uniform(-0.05, 0.05, n)
            s[:, 3] = rng.uniform(-0.05, 0.05, n)
        else:
            s[:, 0] = rng.uniform(-0.1, 0.1, n)
            s[:, 1] = rng.uniform(-0.5, 0.5, n)
            s[:, 2] = rng.uniform(-np.pi, np.pi, n)
            s[:, 3] = rng.uniform(-0.5, 0.5, n)
        return s

    def step(self, states, actions):
        return cartpole_step(states, np.asarray(actions, dtype=float)[..., 0])

    def reward(self, states, actions):
        return reward(self.spec.task, states, np.asarray(actions, dtype=float)[..., 0])

    def done(self, states):
        if self.spec.task == "balance":
            return reward("balance", states, 0.0) == 0.0
        return super().done(states)

    def goal_cost(self, states):
        # pole energy mismatch, normalized to 1 for the hanging pole, plus cart centering
        states = np.asarray(states, dtype=float)
        e_scale = 2.0 * POLE_MASS * GRAVITY * POLE_HALF_LENGTH
        return np.abs(pole_energy(states)) / e_scale + 0.1 * states[..., 0] ** 2

    def is_goal(self, states):
        states = np.asarray(states, dtype=float)
        up = np.abs(wrap_angle(states[..., 2])) < BALANCE_ANGLE_LIMIT
        return up & (np.abs(states[..., 3]) < 1.0)


class Reacher(Env):
    def __init__(self, obs_mode: str = "raw"):
        if obs_mode not in ("raw", "trig"):
            raise ValueError(f"reacher observation must be 'raw' or 'trig', got {obs_mode!r}")
        self.spec = EnvSpec(f"reacher_{obs_mode}", "reacher", 6, 2, TORQUE_BOUND, DT, 100, obs_mode,
                            (0, 1), (0, 1, 2, 3))

    def reset(self, rng, n):
        s = np.zeros((n, 6))
        s[:, 0:2] = rng.uniform(-np.pi, np.pi, (n, 2))
        s[:, 2:4] = rng.uniform(-0.1, 0.1, (n, 2))
        r = TARGET_RADIUS * np.sqrt(rng.uniform(0.0, 1.0, n))
        phi = rng.uniform(-np.pi, np.pi, n)
        s[:, 4] = r * np.cos(phi)
        s[:, 5] = r * np.sin(phi)
        return s

    def step(self, states, actions):
        return reacher_step(states, actions)

    def base_observation(self, states):
        states = np.asarray(states, dtype=float)
        if self.spec.obs_mode == "raw":
            return states
        q = states[..., 0:2]
        return np.concatenate([np.sin(q), np.cos(q), states[..., 2:6]], axis=-1)

    def goal_cost(self, states):
        states = np.asarray(states, dtype=float)
        return np.linalg.norm(reacher_tip(states) - states[..., 4:6], axis=-1)

    def is_goal(self, states):
        states = np.asarray(states, dtype=float)
        dist = np.linalg.norm(reacher_tip(states) - states[..., 4:6], axis=-1)
        return (dist < 0.01) & (np.linalg.norm(states[..., 2:4], axis=-1) < 0.1)


ENV_IDS = ("cartpole_balance", "cartpole_swingup", "reacher_raw", "reacher_trig")


def make_env(env_id: str) -> Env:
    if env_id == "cartpole_balance":
        return CartPole("balance")
    if env_id == "cartpole_swingup":
        return CartPole("swingup")
    if env_id == "reacher_raw":
        return Reacher("raw")
    if env_id == "reacher_trig":
        return Reacher("trig")
    raise ValueError(f"unknown environment {env_id!r}; expected one of {ENV_IDS}")


def rollout(env: Env, start, controls) -> np.ndarray:
    """States visited when replaying ``controls`` (physical units) from ``start``."""
    s = np.asarray(start, dtype=float)
    out = [s]
    for u in np.asarray(controls, dtype=float):
        s = env.step(s, u)
        out.append(s)
    return np.stack(out)


def do_nothing_return(env: Env, starts, horizon: int | None = None) -> np.ndarray:
    """Undiscounted return of the zero-action policy from each start state."""
    s = np.atleast_2d(np.asarray(starts, dtype=float))
    zero = np.zeros((s.shape[0], env.spec.action_dim))
    total = np.zeros(s.shape[0])
    alive = np.ones(s.shape[0], dtype=bool)
    for _ in range(horizon or env.spec.horizon):
        alive &= ~env.done(s)
        total += np.where(alive, env.reward(s, zero), 0.0)
        s = env.step(s, zero)
    return total
