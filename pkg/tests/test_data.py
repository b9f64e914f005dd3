from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planspace.data import (Trajectory, TrajectoryFormatError, build_triplet_dataset, load_trajectories,
                            path_length, sample_triplets, save_trajectories, shuffled_order,
                            straight_line_trajectories, triplet_count, wrap_angle)


def _line(n, dim=2):
    return Trajectory(np.arange(n * dim, dtype=float).reshape(n, dim))


def test_triplets_are_evenly_spaced():
    traj = _line(12)
    trips = sample_triplets(traj, steps=(1, 3))
    assert len(trips) == triplet_count(12, (1, 3)) == 10 + 6
    for t in trips:
        np.testing.assert_allclose(t.x_mid - t.x_prev, t.x_next - t.x_mid)
        np.testing.assert_allclose(t.x_next - t.x_prev, 2 * t.step * np.array([2.0, 2.0]))


@given(st.integers(1, 80), st.lists(st.integers(1, 40), min_size=1, max_size=5))
def test_triplet_count_matches_sampler(n, steps):
    assert len(sample_triplets(_line(n), steps)) == triplet_count(n, steps)


def test_short_trajectory_yields_no_triplets():
    assert sample_triplets(_line(2), (1,)) == []
    assert sample_triplets(_line(60), (30,)) == []


def test_bad_spacing_rejected():
    with pytest.raises(ValueError):
        sample_triplets(_line(5), (0,))
    with pytest.raises(ValueError):
        sample_triplets(_line(5), ())


def test_dataset_stacks_and_counts():
    trajs = [_line(10), _line(4), _line(1)]
    ds = build_triplet_dataset(trajs, (1, 2))
    assert ds.counts == [triplet_count(10, (1, 2)), triplet_count(4, (1, 2)), 0]
    assert len(ds) == sum(ds.counts)
    xp, xm, xn = ds.batch([0, 5])
    np.testing.assert_allclose(xm - xp, xn - xm)
    assert ds.all_states().shape == (3 * len(ds), 2)


def test_dataset_rejects_mixed_dimensions():
    with pytest.raises(TrajectoryFormatError):
        build_triplet_dataset([_line(5, 2), _line(5, 3)])


def test_empty_dataset():
    ds = build_triplet_dataset([_line(2)])
    assert len(ds) == 0 and ds.state_dim == 2


def test_trajectory_validation():
    with pytest.raises(TrajectoryFormatError):
        Trajectory(np.zeros((0, 3)))
    with pytest.raises(TrajectoryFormatError):
        Trajectory(np.array([[0.0, np.inf]]))
    with pytest.raises(TrajectoryFormatError, match="controls"):
        Trajectory(np.zeros((4, 2)), controls=np.zeros((4, 1)))
    with pytest.raises(TrajectoryFormatError):
        Trajectory(np.zeros((4, 2)), angle_dims=(2,))


def test_path_length_wraps_angles():
    # angle goes pi-0.1 -> -pi+0.1: a 0.2 rad step, not 2pi-0.2
    traj = Trajectory(np.array([[0.0, np.pi - 0.1], [0.0, -np.pi + 0.1]]), angle_dims=(1,))
    assert path_length(traj) == pytest.approx(0.2)
    plain = Trajectory(traj.states)
    assert path_length(plain) == pytest.approx(2 * np.pi - 0.2)


def test_path_length_subset_and_single_state():
    traj = Trajectory(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert path_length(traj) == 5.0
    assert path_length(traj, dims=[0]) == 3.0
    assert path_length(Trajectory(np.zeros((1, 2)))) == 0.0


@given(st.floats(-100, 100))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi <= w < np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-9)


def test_save_load_round_trip(tmp_path):
    trajs = [Trajectory(np.random.default_rng(0).standard_normal((5, 4)), "cartpole_swingup", 0.01, (2,),
                        np.ones((4, 1)), True),
             Trajectory(np.zeros((3, 4)), "x", 0.5, success=False)]
    save_trajectories(trajs, tmp_path / "t.jsonl")
    back = load_trajectories(tmp_path / "t.jsonl")
    assert len(back) == 2
    np.testing.assert_array_equal(back[0].states, trajs[0].states)
    np.testing.assert_array_equal(back[0].controls, trajs[0].controls)
    assert back[0].angle_dims == (2,) and back[1].success is False and back[1].controls is None


def test_load_reports_record_and_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = json.dumps({"env_id": "a", "dt": 0.1, "states": [[0.0], [1.0]]})
    p.write_text(good + "\n\n" + json.dumps({"env_id": "a", "dt": 0.1, "states": [[0.0], [1.0, 2.0]]}) + "\n")
    with pytest.raises(TrajectoryFormatError, match=r"record 1 \(line 3\)"):
        load_trajectories(p)
    p.write_text(json.dumps({"env_id": "a", "states": [[0.0]]}) + "\n")
    with pytest.raises(TrajectoryFormatError, match="missing fields"):
        load_trajectories(p)


def test_shuffled_order_is_a_seeded_permutation():
    a = shuffled_order(20, 3)
    np.testing.assert_array_equal(a, shuffled_order(20, 3))
    assert sorted(a.tolist()) == list(range(20))


def test_straight_lines_are_whitened_and_straight():
    trajs = straight_line_trajectories(n=30, seed=1)
    pooled = np.concatenate([t.states for t in trajs])
    np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(np.cov(pooled.T), np.eye(4), atol=1e-10)
    for t in trajs:
        assert 20 <= len(t) <= 60
        steps = np.diff(t.states, axis=0)
        np.testing.assert_allclose(steps, np.broadcast_to(steps[0], steps.shape), atol=1e-12)
