"""Small fully connected networks with hand-written reverse mode and Adam.

Networks are stored as plain lists of ``(weight, bias)`` pairs, weights laid out
``out x in``.  Hidden layers use ``tanh``.  The final linear layer produces
either a mean head alone or a mean head and a standard-deviation head; the
latter is made positive with :func:`sigma_activation`.

Everything operates on single vectors ``(n,)`` or batches ``(B, n)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an input or gradient does not fit the network."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss contains NaN or inf."""


def sigma_activation(x):
    """Positive activation: ``x + 1`` for ``x >= 0`` and ``exp(x)`` below.

    Both branches meet with value 1 and slope 1 at the origin.
    """
    x = np.asarray(x, dtype=float)
    # exp on the clipped value avoids overflow warnings from the unused branch
    return np.where(x >= 0.0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def sigma_activation_grad(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class MlpParams:
    """Weights of a tanh MLP with a linear mean head and optional sigma head."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    out_dim: int
    sigma_head: bool = True
    seed: int | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        prev = None
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {k}: expects {w.shape[1]} inputs but layer {k - 1} emits {prev}")
            prev = w.shape[0]
        expected = self.out_dim * (2 if self.sigma_head else 1)
        if prev != expected:
            raise ShapeError(f"output layer emits {prev} values, heads need {expected}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w, _ in self.layers[:-1])

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        return [a for layer in self.layers for a in layer]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        it = iter(arrays)
        layers = [(next(it), next(it)) for _ in self.layers]
        return MlpParams(layers, self.out_dim, self.sigma_head, self.seed)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(
    in_dim: int,
    hidden_sizes: Sequence[int],
    out_dim: int,
    sigma_head: bool = True,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> MlpParams:
    """Glorot-uniform weights, zero biases.

    Pass either ``seed`` or an existing ``rng``; the seed is recorded on the
    returned params for checkpointing.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden_sizes, out_dim * (2 if sigma_head else 1)]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers, out_dim, sigma_head, seed)


@dataclass
class Tape:
    """Activations recorded by :func:`mlp_forward` for one backward pass."""

    params: MlpParams
    activations: list[np.ndarray]  # inputs to each layer, batched
    sigma_pre: np.ndarray | None
    batched: bool
    used: bool = field(default=False)


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, np.ndarray | None, Tape]:
    """Evaluate the network.

    Returns ``(mu, sigma, tape)``; ``sigma`` is ``None`` for mean-only nets.
    Non-finite inputs are rejected.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    if x.ndim not in (1, 2):
        raise ShapeError(f"input must be a vector or a batch of vectors, got shape {x.shape}")
    h = x if batched else x[None, :]
    if h.shape[1] != params.in_dim:
        raise ShapeError(f"layer 0: expects {params.in_dim} inputs, got {h.shape[1]}")
    if not np.all(np.isfinite(h)):
        raise ValueError("mlp_forward: input contains NaN or inf")

    acts = [h]
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        h = h @ w.T
        h += b
        if k < last:
            np.tanh(h, out=h)
            acts.append(h)

    m = params.out_dim
    mu = h[:, :m]
    sigma = sigma_pre = None
    if params.sigma_head:
        sigma_pre = h[:, m:]
        sigma = sigma_activation(sigma_pre)
    if not batched:
        mu = mu[0]
        sigma = None if sigma is None else sigma[0]
    return mu, sigma, Tape(params, acts, sigma_pre, batched)


def mlp_backward(
    params: MlpParams, tape: Tape, grad_mu, grad_sigma=None
) -> tuple[MlpParams, np.ndarray]:
    """Backpropagate head gradients through the network.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` has the same
    structure as ``params``.  For a batch, parameter gradients are summed over
    rows.  A tape may be consumed once and only with the params that made it.
    """
    if tape.params is not params:
        raise ValueError("mlp_backward: tape was recorded with different parameters")
    if tape.used:
        raise ValueError("mlp_backward: tape already consumed")
    tape.used = True

    grad_mu = np.asarray(grad_mu, dtype=float)
    if not tape.batched:
        grad_mu = grad_mu[None, :]
    n_rows = tape.activations[0].shape[0]
    if grad_mu.shape != (n_rows, params.out_dim):
        raise ShapeError(f"grad_mu has shape {grad_mu.shape}, expected {(n_rows, params.out_dim)}")

    if params.sigma_head:
        if grad_sigma is None:
            grad_sigma = np.zeros_like(grad_mu)
        grad_sigma = np.asarray(grad_sigma, dtype=float)
        if not tape.batched:
            grad_sigma = grad_sigma[None, :]
        if grad_sigma.shape != grad_mu.shape:
            raise ShapeError(f"grad_sigma has shape {grad_sigma.shape}, expected {grad_mu.shape}")
        delta = np.concatenate([grad_mu, grad_sigma * sigma_activation_grad(tape.sigma_pre)], axis=1)
    else:
        if grad_sigma is not None:
            raise ShapeError("grad_sigma given for a mean-only network")
        delta = grad_mu

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        a = tape.activations[k]
        grads.append((delta.T @ a, delta.sum(axis=0)))
        delta = delta @ w
        if k > 0:
            # tanh' = 1 - a^2, applied in place
            deriv = np.multiply(a, a)
            np.subtract(1.0, deriv, out=deriv)
            delta *= deriv
    grads.reverse()
    grad_in = delta if tape.batched else delta[0]
    return MlpParams(grads, params.out_dim, params.sigma_head, params.seed), grad_in


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update on a flat list of arrays.

    Inputs are left untouched; new arrays are returned.  Raises
    :class:`NonFiniteError` if any gradient entry is NaN or inf.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: parameter, gradient and moment lists differ in length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: array {i} shapes {p.shape}, {g.shape}, {m.shape} differ")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: gradient array {i} is not finite")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def mlp_to_dict(params: MlpParams) -> dict:
    """JSON-ready dict.  Python's float repr round-trips float64 exactly."""
    return {
        "in_dim": params.in_dim,
        "hidden_sizes": list(params.hidden_sizes),
        "out_dim": params.out_dim,
        "sigma_head": params.sigma_head,
        "seed": params.seed,
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in params.layers
        ],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    layers = []
    for k, rec in enumerate(d["layers"]):
        shape = tuple(rec["shape"])
        w = np.asarray(rec["weight"], dtype=float)
        if w.size != shape[0] * shape[1]:
            raise ShapeError(f"layer {k}: {w.size} weights stored for shape {shape}")
        layers.append((w.reshape(shape), np.asarray(rec["bias"], dtype=float)))
    params = MlpParams(layers, int(d["out_dim"]), bool(d["sigma_head"]), d.get("seed"))
    if params.hidden_sizes != tuple(d["hidden_sizes"]) or params.in_dim != d["in_dim"]:
        raise ShapeError("stored hidden_sizes / in_dim disagree with layer shapes")
    return params


def save_mlp(params: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(mlp_to_dict(params)))


def load_mlp(path) -> MlpParams:
    return mlp_from_dict(json.loads(Path(path).read_text()))
