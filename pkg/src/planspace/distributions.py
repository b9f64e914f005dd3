"""Diagonal Gaussian algebra used by the variational embedding.

All functions broadcast over leading axes and reduce over the last one, so a
batch of ``B`` distributions in ``k`` dimensions is a pair of ``(B, k)``
arrays.  The ``*_grads`` helpers return the partial derivatives the embedding
loss needs for its hand-written backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class DiagGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0.0)):
            raise ValueError("sigma must be finite and strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def standard(cls, k: int) -> "DiagGaussian":
        return cls(np.zeros(k), np.ones(k))

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return self.sigma**2


def _check_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"{what}: dimension mismatch {a.shape[-1:]} vs {b.shape[-1:]}")


def log_prob(d: DiagGaussian, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_dims(d.mu, x, "log_prob")
    z = (x - d.mu) / d.sigma
    return np.sum(-0.5 * LOG_2PI - np.log(d.sigma) - 0.5 * z * z, axis=-1)


def log_prob_grads(d: DiagGaussian, x):
    """Partials of :func:`log_prob` w.r.t. ``(mu, sigma, x)``, per component."""
    x = np.asarray(x, dtype=float)
    r = x - d.mu
    inv_var = 1.0 / d.var
    d_mu = r * inv_var
    d_sigma = -1.0 / d.sigma + r * r * inv_var / d.sigma
    return d_mu, d_sigma, -d_mu


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> np.ndarray:
    """Closed-form ``KL(q || p)`` summed over dimensions."""
    _check_dims(q.mu, p.mu, "kl_divergence")
    diff = q.mu - p.mu
    terms = np.log(p.sigma / q.sigma) + (q.var + diff * diff) / (2.0 * p.var) - 0.5
    return np.sum(terms, axis=-1)


def kl_divergence_grads(q: DiagGaussian, p: DiagGaussian):
    """Partials of :func:`kl_divergence` w.r.t. ``(q.mu, q.sigma, p.mu, p.sigma)``."""
    diff = q.mu - p.mu
    inv_pvar = 1.0 / p.var
    d_qmu = diff * inv_pvar
    d_qsigma = -1.0 / q.sigma + q.sigma * inv_pvar
    d_psigma = 1.0 / p.sigma - (q.var + diff * diff) * inv_pvar / p.sigma
    return d_qmu, d_qsigma, -d_qmu, d_psigma


def kl_to_standard_normal(q: DiagGaussian) -> np.ndarray:
    return np.sum(0.5 * (q.var + q.mu**2 - 1.0) - np.log(q.sigma), axis=-1)


def reparam_sample(d: DiagGaussian, noise) -> np.ndarray:
    """``mu + sigma * noise`` with externally drawn standard-normal noise."""
    noise = np.asarray(noise, dtype=float)
    _check_dims(d.mu, noise, "reparam_sample")
    return d.mu + d.sigma * noise


def midpoint_distribution(a: DiagGaussian, b: DiagGaussian, variance_doubling: bool = False) -> DiagGaussian:
    """Law of ``(za + zb) / 2`` for independent ``za ~ a`` and ``zb ~ b``.

    With ``variance_doubling`` the variance ``(var_a + var_b) / 4`` is doubled,
    which restores the spread of a single encoding when ``a`` and ``b`` have
    equal variance.
    """
    _check_dims(a.mu, b.mu, "midpoint_distribution")
    var = (a.var + b.var) / 4.0
    if variance_doubling:
        var = 2.0 * var
    return DiagGaussian(0.5 * (a.mu + b.mu), np.sqrt(var))
