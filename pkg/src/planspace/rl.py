"""REINFORCE with a learned per-timestep value baseline.

The learner stands in for TRPO/PPO: every observation mode (raw, trig,
embedded, augmented) is trained with the same algorithm, seeds and budget, so
only the relative effect of the observation space is measured.

Policies act in normalized units: a sampled action is clipped to ``[-1, 1]``
and scaled by the environment's action bound before stepping.  The log-prob
and gradient use the unclipped sample.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import EmbeddingModel, rolling_mean
from .envs import Env, do_nothing_return, make_env
from .nn import AdamState, MlpParams, NonFiniteError, adam_step, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
OBS_CLIP = 10.0
LEARNER = "REINFORCE + value baseline (stand-in for TRPO/PPO)"


class RLDiverged(RuntimeError):
    pass


@dataclass
class Policy:
    """Gaussian policy; observations are standardized with ``obs_shift``/``obs_scale`` first."""

    net: MlpParams
    log_std: np.ndarray
    obs_shift: np.ndarray | None = None
    obs_scale: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        return self.net.arrays() + [self.log_std]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "Policy":
        log_std = np.clip(arrays[-1], LOG_STD_MIN, LOG_STD_MAX)
        return Policy(self.net.with_arrays(arrays[:-1]), log_std, self.obs_shift, self.obs_scale)

    def normalize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if self.obs_shift is None:
            return obs
        return np.clip((obs - self.obs_shift) / self.obs_scale, -OBS_CLIP, OBS_CLIP)

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.net, self.normalize(obs))[0]

    def sample(self, obs, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(obs)
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)


def init_policy(obs_dim: int, action_dim: int, hidden: Sequence[int] = (32, 32), init_log_std: float = -0.5,
                rng: np.random.Generator | None = None) -> Policy:
    net = init_mlp(obs_dim, hidden, action_dim, sigma_head=False, rng=rng)
    return Policy(net, np.full(action_dim, float(init_log_std)))


def gaussian_log_prob(mean, log_std, actions) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi), axis=-1)


def surrogate_loss_and_grad(policy: Policy, obs, actions, weights):
    """``-mean(weights * log pi(actions | obs))`` and its gradient.

    The gradient list is aligned with ``policy.arrays()``.
    """
    obs = policy.normalize(np.atleast_2d(np.asarray(obs, dtype=float)))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    w = np.asarray(weights, dtype=float).reshape(-1)
    n = obs.shape[0]
    mu, _, tape = mlp_forward(policy.net, obs)
    inv_std = np.exp(-policy.log_std)
    z = (actions - mu) * inv_std
    logp = np.sum(-0.5 * z * z - policy.log_std - 0.5 * math.log(2.0 * math.pi), axis=1)
    loss = -float(np.mean(w * logp))
    scale = (w / n)[:, None]
    g_mu = -scale * z * inv_std
    g_log_std = -np.sum(scale * (z * z - 1.0), axis=0)
    net_grads, _ = mlp_backward(policy.net, tape, g_mu)
    return loss, net_grads.arrays() + [g_log_std]


class RunningStats:
    """Mean and variance of every observation seen so far (Chan et al. merge)."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.size)
        n = x.shape[0]
        if n == 0:
            return
        bm = x.mean(axis=0)
        delta = bm - self.mean
        total = self.count + n
        self.m2 = self.m2 + ((x - bm) ** 2).sum(axis=0) + delta**2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.maximum(np.sqrt(self.m2 / self.count), 1e-6)


class ValueBaseline:
    """MLP over ``(observation, t / horizon)`` predicting standardized returns-to-go.

    Targets are standardized with running return statistics; the baseline is
    fitted after the batch it scores, so it never sees the returns it is
    subtracted from.
    """

    def __init__(self, obs_dim: int, hidden: Sequence[int], lr: float, iters: int, rng: np.random.Generator):
        self.net = init_mlp(obs_dim + 1, hidden, 1, sigma_head=False, rng=rng)
        self.opt = AdamState.create(self.net.arrays(), lr=lr)
        self.iters = iters
        self.ret_mean = 0.0
        self.ret_std = 1.0
        self.fitted = False

    @staticmethod
    def _inputs(obs, t_frac):
        return np.concatenate([obs, t_frac[:, None]], axis=1)

    def predict(self, obs, t_frac) -> np.ndarray:
        if not self.fitted:
            return np.zeros(obs.shape[0])
        v = mlp_forward(self.net, self._inputs(obs, t_frac))[0][:, 0]
        return self.ret_mean + self.ret_std * v

    def fit(self, obs, t_frac, returns) -> float:
        self.ret_mean = float(returns.mean())
        self.ret_std = float(returns.std()) + 1e-8
        target = (returns - self.ret_mean) / self.ret_std
        x = self._inputs(obs, t_frac)
        params = self.net.arrays()
        loss = float("nan")
        for _ in range(self.iters):
            v, _, tape = mlp_forward(self.net, x)
            r = v[:, 0] - target
            loss = float(np.mean(r * r))
            grads, _ = mlp_backward(self.net, tape, (2.0 / len(r)) * r[:, None])
            params, self.opt = adam_step(self.opt, params, grads.arrays())
            self.net = self.net.with_arrays(params)
        self.fitted = True
        return loss


@dataclass
class RLConfig:
    env_id: str = "cartpole_swingup"
    obs_mode: str | None = None  # None -> the environment's base observation
    discount: float = 0.99
    horizon: int | None = None
    batch_episodes: int = 20
    updates: int = 500
    seed: int = 0
    lr: float = 3e-3
    hidden: tuple[int, ...] = (32, 32)
    init_log_std: float = -0.5
    normalize_obs: bool = True
    value_lr: float = 3e-3
    value_iters: int = 20
    value_hidden: tuple[int, ...] = (32, 32)
    smooth_window: int = 10
    eval_episodes: int = 200
    eval_seed: int = 12345
    embedding: str | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.value_hidden = tuple(int(h) for h in self.value_hidden)
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.batch_episodes < 1 or self.updates < 0 or self.lr < 0:
            raise ValueError("batch_episodes must be >= 1, updates and lr >= 0")


@dataclass
class Batch:
    obs: np.ndarray      # (H, E, obs_dim)
    actions: np.ndarray  # (H, E, action_dim), unclipped policy samples
    rewards: np.ndarray  # (H, E), zero after termination
    mask: np.ndarray     # (H, E), True while the episode is running

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)


def collect_batch(env: Env, policy: Policy, rng: np.random.Generator, episodes: int, horizon: int,
                  obs_mode: str | None = None, model: EmbeddingModel | None = None) -> Batch:
    s = env.reset(rng, episodes)
    bound = env.spec.action_bound
    obs_l, act_l, rew_l, mask_l = [], [], [], []
    alive = np.ones(episodes, dtype=bool)
    for t in range(horizon):
        alive = alive & ~env.done(s)
        obs = env.observe(s, obs_mode, model)
        if t == 0 and obs_mode == "augmented":
            base = env.base_observation(s)
            z = model.encode_mean(env.embed_input(s))
            if not (np.array_equal(obs[:, : base.shape[1]], base) and np.array_equal(obs[:, base.shape[1]:], z)):
                raise RuntimeError("augmented observation is not base observation ++ encoder mean")
        a = policy.sample(obs, rng)
        u = np.clip(a, -1.0, 1.0) * bound
        rew_l.append(np.where(alive, env.reward(s, u), 0.0))
        obs_l.append(obs)
        act_l.append(a)
        mask_l.append(alive.copy())
        s = env.step(s, u)
    return Batch(np.stack(obs_l), np.stack(act_l), np.stack(rew_l), np.stack(mask_l))


def discounted_returns(rewards: np.ndarray, discount: float) -> np.ndarray:
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def evaluate_policy(env: Env, policy: Policy, starts, horizon: int | None = None,
                    obs_mode: str | None = None, model: EmbeddingModel | None = None) -> np.ndarray:
    """Undiscounted returns of the mean action (no exploration noise) from each start."""
    s = np.array(starts, dtype=float)
    horizon = horizon or env.spec.horizon
    total = np.zeros(s.shape[0])
    alive = np.ones(s.shape[0], dtype=bool)
    for _ in range(horizon):
        alive = alive & ~env.done(s)
        u = np.clip(policy.mean(env.observe(s, obs_mode, model)), -1.0, 1.0) * env.spec.action_bound
        total += np.where(alive, env.reward(s, u), 0.0)
        s = env.step(s, u)
    return total


@dataclass
class LearningCurve:
    seed: int
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray
    smooth_window: int
    policy: Policy | None = None
    eval_returns: np.ndarray | None = None  # mean-action returns on the held-out starts

    @property
    def smoothed(self) -> np.ndarray:
        return rolling_mean(self.mean, self.smooth_window)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("update", "mean", "min", "max", "smoothed"))
            for i, row in enumerate(zip(self.mean, self.min, self.max, self.smoothed)):
                w.writerow((i, *(repr(float(v)) for v in row)))


def train_policy(env: Env, cfg: RLConfig, model: EmbeddingModel | None = None) -> LearningCurve:
    """Train one policy; returns per-update mean/min/max undiscounted returns."""
    mode = cfg.obs_mode
    if mode in ("embedded", "augmented") and model is None:
        raise ValueError(f"observation mode {mode!r} needs an embedding model")
    horizon = cfg.horizon or env.spec.horizon
    rng = np.random.default_rng(cfg.seed)
    env.observe(np.zeros((1, env.spec.state_dim)), mode, model)  # rejects a mode the env lacks
    obs_dim = env.obs_dim(mode, model.z_dim if model is not None else 0)
    policy = init_policy(obs_dim, env.spec.action_dim, cfg.hidden, cfg.init_log_std, rng)
    params = policy.arrays()
    opt = AdamState.create(params, lr=cfg.lr) if cfg.lr > 0 else None
    baseline = ValueBaseline(obs_dim, cfg.value_hidden, cfg.value_lr, cfg.value_iters, rng)
    stats = RunningStats(obs_dim)
    t_frac = np.broadcast_to((np.arange(horizon) / horizon)[:, None], (horizon, cfg.batch_episodes))

    means, mins, maxs = [], [], []
    for update in range(cfg.updates):
        batch = collect_batch(env, policy, rng, cfg.batch_episodes, horizon, mode, model)
        ret = batch.returns
        means.append(float(ret.mean()))
        mins.append(float(ret.min()))
        maxs.append(float(ret.max()))
        if opt is None:
            continue

        m = batch.mask
        obs, acts, tf = batch.obs[m], batch.actions[m], t_frac[m]
        rtg = discounted_returns(batch.rewards, cfg.discount)[m]
        adv = rtg - baseline.predict(policy.normalize(obs), tf)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        _, grads = surrogate_loss_and_grad(policy, obs, acts, adv)
        try:
            params, opt = adam_step(opt, params, grads)
        except NonFiniteError as exc:
            raise RLDiverged(f"seed {cfg.seed}, update {update}: {exc}") from exc
        policy = policy.with_arrays(params)
        params = policy.arrays()
        if cfg.normalize_obs:
            stats.update(obs)
            policy.obs_shift, policy.obs_scale = stats.mean.copy(), stats.std.copy()
        baseline.fit(policy.normalize(obs), tf, rtg)
        if update % 50 == 0:
            log.debug("seed %d update %d mean return %.2f", cfg.seed, update, means[-1])

    return LearningCurve(cfg.seed, np.array(means), np.array(mins), np.array(maxs), cfg.smooth_window, policy)


@dataclass
class SweepReport:
    label: str
    seeds: list[int]
    curves: list[LearningCurve]
    failures: dict[int, str] = field(default_factory=dict)
    do_nothing: np.ndarray | None = None  # zero-force returns on the same held-out starts

    def smoothed(self) -> np.ndarray:
        return np.stack([c.smoothed for c in self.curves])

    @property
    def mean_curve(self) -> np.ndarray:
        return self.smoothed().mean(axis=0)

    @property
    def band(self) -> tuple[np.ndarray, np.ndarray]:
        """Second-worst and second-best smoothed curve at each update."""
        s = np.sort(self.smoothed(), axis=0)
        return s[1], s[-2]

    @property
    def best_ever(self) -> LearningCurve:
        s = self.smoothed()
        return self.curves[int(np.argmax(s.max(axis=1)))]

    @property
    def final(self) -> np.ndarray:
        return self.smoothed()[:, -1]

    @property
    def final_variance(self) -> float:
        return float(np.var(self.final, ddof=1))

    def do_nothing_band(self) -> tuple[float, float]:
        """Zero-force mean return on the held-out starts, plus or minus two standard errors."""
        dn = self.do_nothing
        se = float(dn.std(ddof=1) / np.sqrt(dn.size))
        return float(dn.mean()) - 2 * se, float(dn.mean()) + 2 * se

    def eval_means(self) -> np.ndarray:
        return np.array([c.eval_returns.mean() for c in self.curves])

    def seeds_above_do_nothing(self) -> int:
        return int(np.sum(self.eval_means() > self.do_nothing_band()[1]))

    def summary(self) -> dict:
        lo, hi = self.band
        best = self.best_ever
        out = {
            "label": self.label,
            "learner": LEARNER,
            "seeds": self.seeds,
            "completed_seeds": [c.seed for c in self.curves],
            "failures": {str(k): v for k, v in self.failures.items()},
            "final_smoothed": [float(v) for v in self.final],
            "final_mean": float(self.final.mean()),
            "final_variance": self.final_variance,
            "final_band": [float(lo[-1]), float(hi[-1])],
            "best_ever_seed": best.seed,
            "best_ever_max": float(best.smoothed.max()),
        }
        if self.do_nothing is not None and all(c.eval_returns is not None for c in self.curves):
            out["eval_mean"] = [float(v) for v in self.eval_means()]
            out["do_nothing_mean"] = float(self.do_nothing.mean())
            out["do_nothing_band"] = list(self.do_nothing_band())
            out["seeds_above_do_nothing"] = self.seeds_above_do_nothing()
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "curves.csv").open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("seed", "update", "mean", "min", "max", "smoothed"))
            for c in self.curves:
                for i, row in enumerate(zip(c.mean, c.min, c.max, c.smoothed)):
                    w.writerow((c.seed, i, *(repr(float(v)) for v in row)))
        lo, hi = self.band
        best = self.best_ever.smoothed
        with (out / "summary.csv").open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("update", "mean", "band_low", "band_high", "best_ever"))
            for i, row in enumerate(zip(self.mean_curve, lo, hi, best)):
                w.writerow((i, *(repr(float(v)) for v in row)))
        with (out / "final.csv").open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("seed", "final_smoothed", "eval_mean"))
            for c in self.curves:
                ev = "" if c.eval_returns is None else repr(float(c.eval_returns.mean()))
                w.writerow((c.seed, repr(float(c.smoothed[-1])), ev))
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def eval_starts(env: Env, cfg: RLConfig) -> np.ndarray:
    return env.reset(np.random.default_rng(cfg.eval_seed), cfg.eval_episodes)


def _run_seed(args):
    env_id, cfg, model = args
    env = make_env(env_id)
    try:
        curve = train_policy(env, cfg, model)
        if cfg.eval_episodes > 0:
            curve.eval_returns = evaluate_policy(env, curve.policy, eval_starts(env, cfg), cfg.horizon,
                                                 cfg.obs_mode, model)
        return curve, None
    except (RLDiverged, FloatingPointError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def seed_sweep(env_id: str, cfg: RLConfig, seeds: Sequence[int], model: EmbeddingModel | None = None,
               label: str | None = None, workers: int = 1) -> SweepReport:
    """Train one policy per seed and collect the cross-seed statistics."""
    if len(seeds) < 3:
        raise ValueError("a seed sweep needs at least three seeds")
    jobs = [(env_id, RLConfig(**{**asdict(cfg), "seed": int(s)}), model) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    curves, failures = [], {}
    for s, (curve, err) in zip(seeds, results):
        if curve is None:
            failures[int(s)] = err
        else:
            curves.append(curve)
    if len(curves) < 3:
        raise RLDiverged(f"only {len(curves)} of {len(seeds)} seeds completed: {failures}")
    env = make_env(env_id)
    label = label or f"{env_id}/{cfg.obs_mode or env.spec.obs_mode}"
    dn = do_nothing_return(env, eval_starts(env, cfg), cfg.horizon) if cfg.eval_episodes > 0 else None
    return SweepReport(label, [int(s) for s in seeds], curves, failures, dn)
