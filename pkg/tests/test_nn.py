from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planspace.nn import (AdamState, MlpParams, NonFiniteError, ShapeError, adam_step, init_mlp, load_mlp,
                          mlp_backward, mlp_forward, save_mlp, sigma_activation, sigma_activation_grad)


def _fd_check(params, x, rng, sigma_head=True, eps=1e-5):
    """Relative error of analytic vs central-difference gradients for a random linear probe."""
    mu, sigma, _ = mlp_forward(params, x)
    a = rng.standard_normal(mu.shape)
    b = rng.standard_normal(mu.shape) if sigma_head else None

    def f(p, xx):
        m, s, _ = mlp_forward(p, xx)
        return float(np.sum(a * m) + (np.sum(b * s) if sigma_head else 0.0))

    _, _, tape = mlp_forward(params, x)
    grads, gx = mlp_backward(params, tape, a, b)
    worst = 0.0
    arrays = params.arrays()
    for i, (arr, g) in enumerate(zip(arrays, grads.arrays())):
        num = np.zeros_like(arr)
        for j in range(arr.size):
            plus = [w.copy() for w in arrays]
            minus = [w.copy() for w in arrays]
            plus[i].flat[j] += eps
            minus[i].flat[j] -= eps
            num.flat[j] = (f(params.with_arrays(plus), x) - f(params.with_arrays(minus), x)) / (2 * eps)
        worst = max(worst, np.max(np.abs(num - g)) / max(1e-8, np.max(np.abs(num)) + np.max(np.abs(g))))
    numx = np.zeros_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += eps
        xm.flat[j] -= eps
        numx.flat[j] = (f(params, xp) - f(params, xm)) / (2 * eps)
    worst = max(worst, np.max(np.abs(numx - gx)) / max(1e-8, np.max(np.abs(numx)) + np.max(np.abs(gx))))
    return worst


def test_sigma_activation_branches_meet_at_zero():
    x = np.array([-50.0, -1.0, 0.0, 2.5])
    np.testing.assert_allclose(sigma_activation(x), [np.exp(-50.0), np.exp(-1.0), 1.0, 3.5])
    np.testing.assert_allclose(sigma_activation_grad(x), [np.exp(-50.0), np.exp(-1.0), 1.0, 1.0])
    assert np.all(sigma_activation(np.linspace(-700, 700, 101)) > 0)


@given(st.floats(-20, 20, allow_nan=False))
def test_sigma_activation_grad_matches_difference(x):
    if abs(x) < 1e-4:
        return  # kink-free but the FD stencil straddles the branch switch
    h = 1e-6
    num = (sigma_activation(x + h) - sigma_activation(x - h)) / (2 * h)
    assert abs(num - sigma_activation_grad(x)) < 1e-5 * max(1.0, abs(num))


def test_init_is_seed_deterministic_and_shaped():
    a = init_mlp(5, (7, 3), 2, seed=4)
    b = init_mlp(5, (7, 3), 2, seed=4)
    assert all(np.array_equal(u, v) for u, v in zip(a.arrays(), b.arrays()))
    assert [w.shape for w, _ in a.layers] == [(7, 5), (3, 7), (4, 3)]
    assert a.hidden_sizes == (7, 3) and a.in_dim == 5
    assert a.num_params() == 7 * 5 + 7 + 3 * 7 + 3 + 4 * 3 + 4


def test_forward_single_matches_batch_row():
    p = init_mlp(3, (8,), 2, seed=0)
    x = np.random.default_rng(1).standard_normal((4, 3))
    mu_b, s_b, _ = mlp_forward(p, x)
    mu_1, s_1, _ = mlp_forward(p, x[2])
    # BLAS may sum in a different order for one row, so allow last-bit differences
    np.testing.assert_allclose(mu_b[2], mu_1, rtol=1e-13)
    np.testing.assert_allclose(s_b[2], s_1, rtol=1e-13)
    assert np.all(s_b > 0)


def test_forward_rejects_bad_input():
    p = init_mlp(3, (4,), 1, seed=0)
    with pytest.raises(ShapeError, match="layer 0"):
        mlp_forward(p, np.zeros(5))
    with pytest.raises(ValueError):
        mlp_forward(p, np.array([0.0, np.nan, 1.0]))


def test_params_validate_shape_chain():
    w0, b0 = np.zeros((4, 3)), np.zeros(4)
    w1, b1 = np.zeros((2, 5)), np.zeros(2)
    with pytest.raises(ShapeError, match="layer 1"):
        MlpParams([(w0, b0), (w1, b1)], out_dim=1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 5), min_size=0, max_size=2), st.integers(1, 3),
       st.booleans(), st.integers(0, 10_000))
def test_backward_matches_finite_differences(n_in, hidden, n_out, sigma_head, seed):
    rng = np.random.default_rng(seed)
    p = init_mlp(n_in, hidden, n_out, sigma_head=sigma_head, rng=rng)
    x = rng.standard_normal((3, n_in))
    assert _fd_check(p, x, rng, sigma_head) < 1e-6


def test_backward_single_vector():
    rng = np.random.default_rng(0)
    p = init_mlp(3, (5, 5), 2, rng=rng)
    assert _fd_check(p, rng.standard_normal(3), rng) < 1e-6


def test_tape_is_single_use_and_bound_to_params():
    p = init_mlp(2, (3,), 1, seed=0)
    q = p.copy()
    _, _, tape = mlp_forward(p, np.ones(2))
    with pytest.raises(ValueError, match="different parameters"):
        mlp_backward(q, tape, np.ones(1), np.ones(1))
    mlp_backward(p, tape, np.ones(1), np.ones(1))
    with pytest.raises(ValueError, match="consumed"):
        mlp_backward(p, tape, np.ones(1), np.ones(1))


def test_backward_rejects_sigma_grad_on_mean_only_net():
    p = init_mlp(2, (3,), 1, sigma_head=False, seed=0)
    _, sigma, tape = mlp_forward(p, np.ones(2))
    assert sigma is None
    with pytest.raises(ShapeError):
        mlp_backward(p, tape, np.ones(1), np.ones(1))


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -40.0, 1e-3])]
    st_ = AdamState.create(p, lr=0.1)
    new, st2 = adam_step(st_, p, g)
    np.testing.assert_allclose(new[0], p[0] - 0.1 * np.sign(g[0]), rtol=1e-4)
    assert st2.t == 1 and st_.t == 0
    np.testing.assert_array_equal(p[0], [1.0, -2.0, 3.0])  # inputs untouched


def test_adam_minimizes_quadratic():
    target = np.array([3.0, -1.0])
    p = [np.zeros(2)]
    state = AdamState.create(p, lr=0.05)
    for _ in range(2000):
        p, state = adam_step(state, p, [2.0 * (p[0] - target)])
    np.testing.assert_allclose(p[0], target, atol=1e-3)


def test_adam_rejects_non_finite_gradient():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.create(p), p, [np.array([0.0, np.inf])])


def test_save_load_round_trip(tmp_path):
    p = init_mlp(3, (4, 2), 2, seed=11)
    save_mlp(p, tmp_path / "net.json")
    q = load_mlp(tmp_path / "net.json")
    assert q.seed == 11 and q.sigma_head
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
