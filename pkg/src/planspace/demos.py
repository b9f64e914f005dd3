"""Demonstration generation: random-shooting kinodynamic planner and scripted experts.

The planner grows a trajectory one control segment at a time.  Each iteration
it simulates ``samples`` constant-control segments from the current end state
and keeps the candidate with the lowest goal cost plus ``path_weight`` times
its path length.  Any candidate that passes the goal predicate mid-segment is
truncated there and ends the search (the shortest such candidate wins).

By default the best candidate is always appended.  With ``monotone=True`` a
candidate is appended only if its goal cost does not exceed the current one,
so goal cost is non-increasing along the plan; a rejected iteration leaves the
plan unchanged and resamples.  Monotone mode stalls on underactuated systems
whose state drifts away from the goal regardless of control, which is why it
is not the default.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Trajectory, path_length, save_trajectories, wrap_angle
from .envs import FORCE_BOUND, LINK1, LINK2, TORQUE_BOUND, CartPole, Env, Reacher, make_env, pole_energy, rollout

log = logging.getLogger(__name__)

SOURCES = ("planner", "scripted")


class DatasetError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    samples: int = 64
    segment_length: int = 10
    iterations: int = 400
    seed: int = 0
    path_weight: float = 0.01
    monotone: bool = False

    def __post_init__(self):
        if self.samples < 1 or self.segment_length < 1 or self.iterations < 1:
            raise ValueError("samples, segment_length and iterations must be >= 1")


@dataclass
class PlanResult:
    trajectory: Trajectory
    success: bool
    costs: list[float]  # goal cost after each accepted segment, starting with the start state
    iterations: int


def plan_kinodynamic(env: Env, start, cfg: PlannerConfig) -> PlanResult:
    rng = np.random.default_rng(cfg.seed)
    state = np.asarray(start, dtype=float)
    m, bound = env.spec.action_dim, env.spec.action_bound
    states, controls = [state], []
    cost = float(env.goal_cost(state))
    costs = [cost]
    if bool(env.is_goal(state)):
        return PlanResult(env.to_trajectory(np.stack(states), np.zeros((0, m)), True), True, costs, 0)

    for it in range(1, cfg.iterations + 1):
        u = rng.uniform(-bound, bound, size=(cfg.samples, m))
        s = np.broadcast_to(state, (cfg.samples, state.size)).copy()
        seg = np.empty((cfg.segment_length, cfg.samples, state.size))
        hit_at = np.full(cfg.samples, -1)
        for i in range(cfg.segment_length):
            s = env.step(s, u)
            seg[i] = s
            newly = (hit_at < 0) & env.is_goal(s)
            hit_at[newly] = i

        full = np.concatenate([np.broadcast_to(state, (1, cfg.samples, state.size)), seg])
        steps = np.diff(full, axis=0)
        ad = list(env.spec.angle_dims)
        if ad:
            steps[..., ad] = wrap_angle(steps[..., ad])
        step_len = np.linalg.norm(steps, axis=-1)  # (segment_length, samples)

        reached = np.flatnonzero(hit_at >= 0)
        if reached.size:
            lens = [step_len[: hit_at[j] + 1, j].sum() for j in reached]
            j = reached[int(np.argmin(lens))]
            n = hit_at[j] + 1
            # vectorized transcendentals can differ from the single-state path in the last bit, so the
            # recorded states come from the same replay that consumers use
            replay = rollout(env, state, [u[j]] * n)[1:]
            states.extend(replay)
            controls.extend([u[j]] * n)
            state = replay[-1]
            cost = float(env.goal_cost(state))
            costs.append(cost)
            if bool(env.is_goal(state)):
                traj = env.to_trajectory(np.stack(states), np.stack(controls), True)
                return PlanResult(traj, True, costs, it)
            continue

        end_cost = env.goal_cost(s)
        score = end_cost + cfg.path_weight * step_len.sum(axis=0)
        j = int(np.argmin(score))
        if end_cost[j] <= cost or not cfg.monotone:
            replay = rollout(env, state, [u[j]] * cfg.segment_length)[1:]
            states.extend(replay)
            controls.extend([u[j]] * cfg.segment_length)
            state = replay[-1]
            cost = float(env.goal_cost(state))
            costs.append(cost)

    ctrl = np.stack(controls) if controls else np.zeros((0, m))
    return PlanResult(env.to_trajectory(np.stack(states), ctrl, False), False, costs, cfg.iterations)


# LQR gains for the upright cart-pole, Q = diag(10, 1, 100, 1), R = 0.1
CARTPOLE_LQR = np.array([10.0, 12.13395284, 78.10369402, 18.67585225])
SWINGUP_CENTERING = 10.0
SWINGUP_CATCH_ANGLE = 0.5
SWINGUP_CATCH_RATE = 4.0
REACHER_KP = 4.0
REACHER_KD = 4.0


def cartpole_expert_force(state) -> float:
    """Bang-bang energy pumping with cart centering, LQR catch near upright."""
    x, xd, th, thd = state
    w = float(wrap_angle(th))
    if abs(w) < SWINGUP_CATCH_ANGLE and abs(thd) < SWINGUP_CATCH_RATE:
        f = float(CARTPOLE_LQR @ np.array([x, xd, w, thd]))
    else:
        e = float(pole_energy(state))
        f = FORCE_BOUND * np.sign(e) * np.sign(thd * np.cos(th)) - SWINGUP_CENTERING * x
    return float(np.clip(f, -FORCE_BOUND, FORCE_BOUND))


def reacher_ik(target, current=None) -> np.ndarray:
    """Joint angles placing the tip at ``target``; picks the elbow nearest ``current``."""
    tx, ty = target
    r2 = tx * tx + ty * ty
    c2 = np.clip((r2 - LINK1**2 - LINK2**2) / (2 * LINK1 * LINK2), -1.0, 1.0)
    sols = []
    for q2 in (np.arccos(c2), -np.arccos(c2)):
        q1 = np.arctan2(ty, tx) - np.arctan2(LINK2 * np.sin(q2), LINK1 + LINK2 * np.cos(q2))
        sols.append(np.array([q1, q2]))
    if current is None:
        return sols[0]
    return min(sols, key=lambda q: float(np.sum(wrap_angle(q - current) ** 2)))


def reacher_expert_torque(state) -> np.ndarray:
    q, dq = state[0:2], state[2:4]
    q_star = reacher_ik(state[4:6], q)
    tau = REACHER_KP * wrap_angle(q_star - q) - REACHER_KD * dq
    return np.clip(tau, -TORQUE_BOUND, TORQUE_BOUND)


def scripted_expert(env: Env, start, max_steps: int = 1000) -> PlanResult:
    """Closed-loop rollout of the task's hand-written controller.

    Swing-up and reacher rollouts stop when the goal predicate fires; the
    balance controller runs the full horizon and succeeds if the pole never
    leaves the allowed band.
    """
    s = np.asarray(start, dtype=float)
    states, controls = [s], []
    if isinstance(env, CartPole) and env.spec.task == "balance":
        for _ in range(env.spec.horizon):
            if bool(env.done(s)):
                break
            u = np.array([float(np.clip(CARTPOLE_LQR @ s, -FORCE_BOUND, FORCE_BOUND))])
            s = env.step(s, u)
            states.append(s)
            controls.append(u)
        ok = not bool(env.done(s))
    else:
        if isinstance(env, CartPole):
            policy = lambda st: np.array([cartpole_expert_force(st)])  # noqa: E731
        elif isinstance(env, Reacher):
            policy = reacher_expert_torque
        else:
            raise ValueError(f"no scripted expert for {env.spec.env_id}")
        ok = bool(env.is_goal(s))
        while not ok and len(controls) < max_steps:
            u = policy(s)
            s = env.step(s, u)
            states.append(s)
            controls.append(u)
            ok = bool(env.is_goal(s))
    ctrl = np.stack(controls) if controls else np.zeros((0, env.spec.action_dim))
    traj = env.to_trajectory(np.stack(states), ctrl, ok)
    return PlanResult(traj, ok, [], len(controls))


def default_planner_config(env_id: str) -> PlannerConfig:
    # the reacher barely moves in 0.1 s, so short segments make greedy selection myopic
    if env_id.startswith("reacher"):
        return PlannerConfig(segment_length=50, iterations=100)
    return PlannerConfig()


def _episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_demo(env: Env, source: str, seed: int, planner: PlannerConfig | None = None,
                  max_steps: int = 1000) -> PlanResult:
    """One demonstration from a start drawn from ``env.reset`` with ``seed``."""
    start = env.reset(np.random.default_rng(seed), 1)[0]
    if source == "planner":
        cfg = PlannerConfig(**{**asdict(planner or default_planner_config(env.spec.env_id)), "seed": seed})
        return plan_kinodynamic(env, start, cfg)
    if source == "scripted":
        return scripted_expert(env, start, max_steps)
    raise ValueError(f"unknown demonstration source {source!r}; expected one of {SOURCES}")


def build_dataset(
    env_id: str,
    source: str,
    count: int,
    seed: int,
    out_dir,
    min_success_rate: float = 0.5,
    planner: PlannerConfig | None = None,
    max_steps: int = 1000,
    max_attempts: int | None = None,
) -> dict:
    """Write ``count`` successful demonstrations and a manifest.

    Attempts run in seed order until ``count`` successes are collected.
    Successful trajectories with fewer than three states (start already at the
    goal) carry no triplets and are skipped.  Raises :class:`DatasetError` if
    the success rate drops below ``min_success_rate``.

    Returns the manifest dict, also written to ``manifest.json``.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown demonstration source {source!r}; expected one of {SOURCES}")
    env = make_env(env_id)
    max_attempts = max_attempts or max(10, int(np.ceil(count / max(min_success_rate, 1e-3))) + 10)
    kept: list[Trajectory] = []
    seeds: list[int] = []
    attempts = successes = trivial = 0
    while len(kept) < count and attempts < max_attempts:
        ep_seed = _episode_seed(seed, attempts)
        attempts += 1
        res = generate_demo(env, source, ep_seed, planner, max_steps)
        if not res.success:
            continue
        successes += 1
        if len(res.trajectory) < 3:
            trivial += 1
            continue
        kept.append(res.trajectory)
        seeds.append(ep_seed)

    rate = successes / attempts if attempts else 1.0
    lengths = np.array([len(t) for t in kept], dtype=float)
    paths = np.array([path_length(t) for t in kept])
    manifest = {
        "env_id": env_id,
        "source": source,
        "seed": seed,
        "count": len(kept),
        "requested": count,
        "attempts": attempts,
        "successes": successes,
        "trivial": trivial,
        "success_rate": rate,
        "episode_seeds": seeds,
        "length_mean": float(lengths.mean()) if kept else 0.0,
        "length_min": int(lengths.min()) if kept else 0,
        "length_max": int(lengths.max()) if kept else 0,
        "path_length_mean": float(paths.mean()) if kept else 0.0,
        "path_length_std": float(paths.std()) if kept else 0.0,
    }
    if source == "planner":
        manifest["planner"] = asdict(planner or default_planner_config(env_id))
    if attempts and (rate < min_success_rate or len(kept) < count):
        raise DatasetError(f"{env_id}/{source}: {len(kept)} of {count} demonstrations after {attempts} "
                           f"attempts, success rate {rate:.3f} (floor {min_success_rate})")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectories(kept, out / "trajectories.jsonl")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d %s demonstrations (%s) to %s", len(kept), env_id, source, out)
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

