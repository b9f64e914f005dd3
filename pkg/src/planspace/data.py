"""Demonstration trajectories, triplet extraction and path lengths.

Trajectory files are JSON lines, one trajectory per line::

    {"env_id": "cartpole_swingup", "dt": 0.01, "states": [[...], ...],
     "angle_dims": [2], "controls": [[...], ...], "success": true}

Only ``env_id``, ``dt`` and ``states`` are required.  ``controls`` holds one
row per transition (``len(states) - 1`` rows) when present.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_STEPS = (1, 3, 5, 10, 30)


class TrajectoryFormatError(ValueError):
    pass


def wrap_angle(a):
    """Map angles to ``[-pi, pi)``."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class Trajectory:
    states: np.ndarray
    env_id: str = "unknown"
    dt: float = 0.01
    angle_dims: tuple[int, ...] = ()
    controls: np.ndarray | None = None
    success: bool = True

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise TrajectoryFormatError(f"states must be a non-empty (T, n) array, got shape {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise TrajectoryFormatError("states contain NaN or inf")
        self.angle_dims = tuple(int(i) for i in self.angle_dims)
        if any(i < 0 or i >= self.state_dim for i in self.angle_dims):
            raise TrajectoryFormatError(f"angle_dims {self.angle_dims} out of range for state dim {self.state_dim}")
        if self.controls is not None:
            self.controls = np.asarray(self.controls, dtype=float)
            if self.controls.ndim != 2 or self.controls.shape[0] != len(self) - 1:
                raise TrajectoryFormatError(
                    f"controls must have one row per transition ({len(self) - 1}), got shape {self.controls.shape}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class Triplet:
    x_prev: np.ndarray
    x_mid: np.ndarray
    x_next: np.ndarray
    step: int


def sample_triplets(traj: Trajectory, steps: Sequence[int] = DEFAULT_STEPS) -> list[Triplet]:
    """Every evenly spaced ``(t-k, t, t+k)`` triplet for each spacing ``k``."""
    idx = _triplet_indices(len(traj), steps)
    s = traj.states
    return [Triplet(s[t - k], s[t], s[t + k], int(k)) for t, k in idx]


def _triplet_indices(n: int, steps: Sequence[int]) -> list[tuple[int, int]]:
    if not steps:
        raise ValueError("at least one triplet spacing is required")
    out = []
    for k in steps:
        if int(k) < 1:
            raise ValueError(f"triplet spacing must be positive, got {k}")
        out.extend((t, int(k)) for t in range(k, n - k))
    return out


def triplet_count(n: int, steps: Sequence[int]) -> int:
    return sum(max(n - 2 * k, 0) for k in steps)


@dataclass
class TripletDataset:
    """Triplets stacked into arrays, plus the trajectories they came from."""

    x_prev: np.ndarray
    x_mid: np.ndarray
    x_next: np.ndarray
    step: np.ndarray
    counts: list[int] = field(default_factory=list)
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x_mid.shape[0]

    @property
    def state_dim(self) -> int:
        return self.x_mid.shape[1]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.x_prev[idx], self.x_mid[idx], self.x_next[idx]

    def all_states(self) -> np.ndarray:
        return np.concatenate([self.x_prev, self.x_mid, self.x_next])


def build_triplet_dataset(trajs: Iterable[Trajectory], steps: Sequence[int] = DEFAULT_STEPS) -> TripletDataset:
    trajs = list(trajs)
    prev, mid, nxt, ks, counts = [], [], [], [], []
    dims = {t.state_dim for t in trajs}
    if len(dims) > 1:
        raise TrajectoryFormatError(f"trajectories disagree on state dimension: {sorted(dims)}")
    for traj in trajs:
        idx = _triplet_indices(len(traj), steps)
        counts.append(len(idx))
        if not idx:
            continue
        t = np.array([i for i, _ in idx])
        k = np.array([j for _, j in idx])
        prev.append(traj.states[t - k])
        mid.append(traj.states[t])
        nxt.append(traj.states[t + k])
        ks.append(k)
    n = dims.pop() if dims else 0
    if not mid:
        empty = np.zeros((0, n))
        return TripletDataset(empty, empty.copy(), empty.copy(), np.zeros(0, dtype=int), counts, trajs)
    return TripletDataset(np.concatenate(prev), np.concatenate(mid), np.concatenate(nxt),
                          np.concatenate(ks), counts, trajs)


def shuffled_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def path_length(traj: Trajectory, dims: Sequence[int] | None = None) -> float:
    """Sum of Euclidean steps between consecutive states.

    Differences along ``traj.angle_dims`` take the shortest angular
    displacement.  ``dims`` restricts the metric to a subset of state
    components (e.g. positions only).
    """
    s = traj.states
    if len(s) < 2:
        return 0.0
    diff = np.diff(s, axis=0)
    if traj.angle_dims:
        ad = list(traj.angle_dims)
        diff[:, ad] = wrap_angle(diff[:, ad])
    if dims is not None:
        diff = diff[:, list(dims)]
    return float(np.sum(np.linalg.norm(diff, axis=1)))


def trajectory_to_dict(traj: Trajectory) -> dict:
    d = {"env_id": traj.env_id, "dt": traj.dt, "states": traj.states.tolist()}
    if traj.angle_dims:
        d["angle_dims"] = list(traj.angle_dims)
    if traj.controls is not None:
        d["controls"] = traj.controls.tolist()
    if not traj.success:
        d["success"] = False
    return d


def trajectory_from_dict(d: dict) -> Trajectory:
    missing = [k for k in ("env_id", "dt", "states") if k not in d]
    if missing:
        raise TrajectoryFormatError(f"missing fields {missing}")
    states = d["states"]
    if not isinstance(states, list) or not states:
        raise TrajectoryFormatError("states must be a non-empty list of vectors")
    lengths = {len(row) if isinstance(row, list) else -1 for row in states}
    if len(lengths) != 1 or -1 in lengths:
        raise TrajectoryFormatError(f"state vectors have mismatched lengths {sorted(lengths)}")
    return Trajectory(np.array(states, dtype=float), str(d["env_id"]), float(d["dt"]),
                      tuple(d.get("angle_dims", ())), d.get("controls"), bool(d.get("success", True)))


def save_trajectories(trajs: Iterable[Trajectory], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for traj in trajs:
            f.write(json.dumps(trajectory_to_dict(traj)) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    out = []
    with Path(path).open() as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(trajectory_from_dict(json.loads(line)))
            except (json.JSONDecodeError, TrajectoryFormatError, TypeError, ValueError) as exc:
                raise TrajectoryFormatError(f"{path}: record {len(out)} (line {lineno}): {exc}") from exc
    return out


def straight_line_trajectories(n: int = 50, dim: int = 4, min_len: int = 20, max_len: int = 60,
                               seed: int = 0, whiten: bool = True) -> list[Trajectory]:
    """Constant-velocity straight lines between Gaussian endpoints.

    A sanity dataset on which a good embedding is linear by construction.
    With ``whiten`` the pooled states are mapped to zero mean and identity
    covariance, so no direction is privileged over another.
    """
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n):
        a, b = rng.standard_normal(dim), rng.standard_normal(dim)
        length = int(rng.integers(min_len, max_len + 1))
        lines.append(a + np.linspace(0.0, 1.0, length)[:, None] * (b - a))
    if whiten:
        pooled = np.concatenate(lines)
        mean = pooled.mean(axis=0)
        w = np.linalg.inv(np.linalg.cholesky(np.cov(pooled.T)))
        lines = [(s - mean) @ w.T for s in lines]
    return [Trajectory(s, "lines", 1.0) for s in lines]
