"""Variational plan-space state embedding.

A triplet ``(x_prev, x_mid, x_next)`` taken from a demonstration is encoded
edge-first: ``z_prev ~ q(z|x_prev)`` and ``z_next ~ q(z|x_next)`` are drawn by
reparameterization, the midpoint latent ``z_hat`` is drawn from the law of
their average, and all three latents are decoded back to states.  The loss
minimized here is the negated modified bound::

    loss = KL(q(z_prev|x_prev) || N(0, I)) + KL(q(z_next|x_next) || N(0, I))
           - [log p(x_prev|z_prev) + log p(x_mid|z_hat) + log p(x_next|z_next)]
           + lam * KL(mid(z_prev, z_next) || q(z_mid|x_mid))

States are standardized with a fixed affine map before entering the encoder;
the reconstruction term is reported in raw state units (the Jacobian of the
standardization is added back) so loss values do not depend on it.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DEFAULT_STEPS, Trajectory, Triplet, TripletDataset, path_length
from .distributions import (
    SIGMA_FLOOR,
    DiagGaussian,
    kl_divergence,
    kl_divergence_grads,
    kl_to_standard_normal,
    log_prob,
    log_prob_grads,
)
from .nn import (
    AdamState,
    MlpParams,
    NonFiniteError,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_from_dict,
    mlp_to_dict,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "kl_prior", "recon", "kl_mid", "metric_mean", "metric_std")


class TrainingDiverged(RuntimeError):
    pass


class SelectionError(RuntimeError):
    pass


@dataclass
class EmbeddingModel:
    encoder: MlpParams
    decoder: MlpParams
    z_dim: int
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        n = self.encoder.in_dim
        if self.encoder.out_dim != self.z_dim or self.decoder.in_dim != self.z_dim:
            raise ValueError("encoder output / decoder input widths must equal z_dim")
        if self.decoder.out_dim != n or self.shift.shape != (n,) or self.scale.shape != (n,):
            raise ValueError("decoder output, shift and scale must match the state dimension")
        if not self.encoder.sigma_head or not self.decoder.sigma_head:
            raise ValueError("encoder and decoder both need a sigma head")

    @property
    def state_dim(self) -> int:
        return self.encoder.in_dim

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def encode(self, x) -> DiagGaussian:
        mu, sigma, _ = mlp_forward(self.encoder, self.normalize(x))
        return DiagGaussian(mu, np.maximum(sigma, SIGMA_FLOOR))

    def encode_mean(self, x) -> np.ndarray:
        return mlp_forward(self.encoder, self.normalize(x))[0]

    def decode(self, z) -> DiagGaussian:
        """Decoder distribution over raw (un-standardized) states."""
        mu, sigma, _ = mlp_forward(self.decoder, z)
        return DiagGaussian(self.shift + self.scale * mu, self.scale * np.maximum(sigma, SIGMA_FLOOR))

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays()

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "EmbeddingModel":
        n_enc = len(self.encoder.arrays())
        return EmbeddingModel(self.encoder.with_arrays(arrays[:n_enc]), self.decoder.with_arrays(arrays[n_enc:]),
                              self.z_dim, self.shift, self.scale)


def init_embedding_model(
    state_dim: int,
    z_dim: int,
    hidden: Sequence[int] = (64, 64),
    rng: np.random.Generator | None = None,
    shift=None,
    scale=None,
) -> EmbeddingModel:
    rng = np.random.default_rng() if rng is None else rng
    enc = init_mlp(state_dim, hidden, z_dim, sigma_head=True, rng=rng)
    dec = init_mlp(z_dim, hidden, state_dim, sigma_head=True, rng=rng)
    shift = np.zeros(state_dim) if shift is None else shift
    scale = np.ones(state_dim) if scale is None else scale
    return EmbeddingModel(enc, dec, z_dim, shift, scale)


def standardization(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = states.mean(axis=0)
    scale = states.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return shift, scale


@dataclass
class TrainConfig:
    z_dim: int = 3
    lam: float = 0.5
    steps: int = 50_000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    triplet_steps: tuple[int, ...] = DEFAULT_STEPS
    variance_doubling: bool = True
    hidden: tuple[int, ...] = (64, 64)
    eval_every: int = 1000
    log_every: int = 10
    objective: str = "elbo"
    normalize: bool = True

    def __post_init__(self):
        self.triplet_steps = tuple(int(k) for k in self.triplet_steps)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.z_dim < 1 or self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("z_dim, steps, batch_size and lr must be positive")
        if self.objective not in ("elbo", "direct"):
            raise ValueError(f"unknown objective {self.objective!r}")


def _check_finite(terms: dict[str, np.ndarray]) -> None:
    bad = [name for name, v in terms.items() if not np.all(np.isfinite(v))]
    if bad:
        raise NonFiniteError(f"non-finite loss terms: {', '.join(bad)}")


def elbo_hat_batch(
    model: EmbeddingModel,
    x_prev: np.ndarray,
    x_mid: np.ndarray,
    x_next: np.ndarray,
    noise: np.ndarray,
    lam: float = 0.5,
    variance_doubling: bool = True,
    with_grad: bool = True,
):
    """Mean negated bound over a batch of triplets.

    ``noise`` has shape ``(B, 2 * z_dim)``: standard-normal draws for the
    previous and next latents.  The midpoint latent reuses them as
    ``mid_mu + sqrt(c) * (s_prev * e_prev + s_next * e_next) / 2`` with
    ``c = 2`` under variance doubling, which is an exact draw from the
    (corrected) midpoint law and equals the literal average when ``c = 1``.

    Returns ``(loss, terms, grads)`` where ``terms`` holds batch means of
    ``kl_prior``, ``recon`` and ``kl_mid`` and ``grads`` is a flat list aligned
    with ``model.arrays()`` (``None`` if ``with_grad`` is false).
    """
    x_prev, x_mid, x_next = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x_prev, x_mid, x_next))
    B, k = x_prev.shape[0], model.z_dim
    noise = np.asarray(noise, dtype=float).reshape(B, 2 * k)
    if x_prev.shape[1] != model.state_dim:
        raise ValueError(f"triplet state dim {x_prev.shape[1]} != encoder input {model.state_dim}")
    eps_a, eps_b = noise[:, :k], noise[:, k:]

    U = model.normalize(np.concatenate([x_prev, x_mid, x_next]))
    mu_e, sig_e_raw, tape_e = mlp_forward(model.encoder, U)
    sig_e = np.maximum(sig_e_raw, SIGMA_FLOOR)
    mu_a, mu_t, mu_b = mu_e[:B], mu_e[B:2 * B], mu_e[2 * B:]
    s_a, s_t, s_b = sig_e[:B], sig_e[B:2 * B], sig_e[2 * B:]

    c = 2.0 if variance_doubling else 1.0
    root_c = np.sqrt(c)
    z_a = mu_a + s_a * eps_a
    z_b = mu_b + s_b * eps_b
    mid = DiagGaussian(0.5 * (mu_a + mu_b), np.sqrt(c * (s_a**2 + s_b**2) / 4.0))
    z_h = mid.mu + 0.5 * root_c * (s_a * eps_a + s_b * eps_b)

    mu_x, sig_x_raw, tape_d = mlp_forward(model.decoder, np.concatenate([z_a, z_h, z_b]))
    dec = DiagGaussian(mu_x, np.maximum(sig_x_raw, SIGMA_FLOOR))
    nll = -log_prob(dec, U)
    recon = nll[:B] + nll[B:2 * B] + nll[2 * B:] + 3.0 * np.sum(np.log(model.scale))

    q_a, q_t, q_b = DiagGaussian(mu_a, s_a), DiagGaussian(mu_t, s_t), DiagGaussian(mu_b, s_b)
    kl_prior = kl_to_standard_normal(q_a) + kl_to_standard_normal(q_b)
    kl_mid = kl_divergence(mid, q_t)
    _check_finite({"kl_prior": kl_prior, "recon": recon, "kl_mid": kl_mid})

    per = kl_prior + recon + lam * kl_mid
    terms = {"kl_prior": float(kl_prior.mean()), "recon": float(recon.mean()), "kl_mid": float(kl_mid.mean())}
    loss = float(per.mean())
    if not with_grad:
        return loss, terms, None

    w = 1.0 / B
    g_mu, g_sig, _ = log_prob_grads(dec, U)
    g_sig_x = -w * g_sig * (sig_x_raw > SIGMA_FLOOR)
    dec_grads, g_z = mlp_backward(model.decoder, tape_d, -w * g_mu, g_sig_x)
    g_za, g_zh, g_zb = g_z[:B], g_z[B:2 * B], g_z[2 * B:]

    dq_mu, dq_s, dp_mu, dp_s = kl_divergence_grads(mid, q_t)
    g_mid_mu = w * lam * dq_mu
    g_mid_s = w * lam * dq_s

    g_mu_a = w * mu_a + g_za + 0.5 * g_zh + 0.5 * g_mid_mu
    g_mu_b = w * mu_b + g_zb + 0.5 * g_zh + 0.5 * g_mid_mu
    g_s_a = w * (s_a - 1.0 / s_a) + eps_a * (g_za + 0.5 * root_c * g_zh) + g_mid_s * c * s_a / (4.0 * mid.sigma)
    g_s_b = w * (s_b - 1.0 / s_b) + eps_b * (g_zb + 0.5 * root_c * g_zh) + g_mid_s * c * s_b / (4.0 * mid.sigma)
    g_mu_t = w * lam * dp_mu
    g_s_t = w * lam * dp_s

    g_mu_e = np.concatenate([g_mu_a, g_mu_t, g_mu_b])
    g_sig_e = np.concatenate([g_s_a, g_s_t, g_s_b]) * (sig_e_raw > SIGMA_FLOOR)
    enc_grads, _ = mlp_backward(model.encoder, tape_e, g_mu_e, g_sig_e)
    return loss, terms, enc_grads.arrays() + dec_grads.arrays()


def elbo_hat(model: EmbeddingModel, triplet: Triplet, noise, cfg: TrainConfig) -> tuple[float, dict]:
    loss, terms, _ = elbo_hat_batch(model, triplet.x_prev, triplet.x_mid, triplet.x_next, noise,
                                    cfg.lam, cfg.variance_doubling, with_grad=False)
    return loss, terms


def direct_loss_batch(model: EmbeddingModel, x_prev, x_mid, x_next, with_grad: bool = True):
    """Mean l2 distance between ``x_mid`` and the decoded midpoint of the edge encodings.

    Only the mean heads are used.  The distance is measured in raw state units.
    """
    x_prev, x_mid, x_next = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x_prev, x_mid, x_next))
    B = x_prev.shape[0]
    mu_e, _, tape_e = mlp_forward(model.encoder, model.normalize(np.concatenate([x_prev, x_next])))
    z_mid = 0.5 * (mu_e[:B] + mu_e[B:])
    mu_x, _, tape_d = mlp_forward(model.decoder, z_mid)
    r = x_mid - (model.shift + model.scale * mu_x)
    dist = np.linalg.norm(r, axis=1)
    _check_finite({"direct": dist})
    loss = float(dist.mean())
    if not with_grad:
        return loss, None

    safe = np.where(dist > 0.0, dist, 1.0)[:, None]
    g_xhat = np.where(dist[:, None] > 0.0, -r / safe, 0.0) / B
    g_mu_x = g_xhat * model.scale
    dec_grads, g_z = mlp_backward(model.decoder, tape_d, g_mu_x, np.zeros_like(g_mu_x))
    g_mu_e = np.concatenate([0.5 * g_z, 0.5 * g_z])
    enc_grads, _ = mlp_backward(model.encoder, tape_e, g_mu_e, np.zeros_like(g_mu_e))
    return loss, enc_grads.arrays() + dec_grads.arrays()


def direct_loss(model: EmbeddingModel, triplet: Triplet) -> float:
    return direct_loss_batch(model, triplet.x_prev, triplet.x_mid, triplet.x_next, with_grad=False)[0]


@dataclass
class EvalReport:
    d: np.ndarray
    y: np.ndarray
    C: float
    errors: np.ndarray
    mean_abs_error: float
    std_abs_error: float
    degenerate: bool = False


def fit_scale(d, y) -> float:
    """Least-squares scale ``C`` minimizing ``sum (y - C d)^2``; NaN if all ``d`` are zero."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    denom = float(np.dot(d, d))
    if denom == 0.0:
        return float("nan")
    return float(np.dot(d, y) / denom)


def score_distances(d, y) -> EvalReport:
    """Linearity score for embedded distances ``d`` against normalized path lengths ``y``."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    C = fit_scale(d, y)
    if not np.isfinite(C):
        nan = np.full_like(y, np.nan)
        return EvalReport(d, y, float("nan"), nan, float("nan"), float("nan"), degenerate=True)
    err = np.abs(y - C * d)
    return EvalReport(d, y, C, err, float(err.mean()), float(err.std()))


def eval_metric(model: EmbeddingModel, trajs: Sequence[Trajectory]) -> EvalReport:
    """Compare endpoint distances in latent space with demonstrated path lengths."""
    if len(trajs) < 2:
        raise ValueError("eval_metric needs at least two trajectories")
    starts = np.stack([t.states[0] for t in trajs])
    ends = np.stack([t.states[-1] for t in trajs])
    d = np.linalg.norm(model.encode_mean(starts) - model.encode_mean(ends), axis=1)
    lengths = np.array([path_length(t) for t in trajs])
    mean_len = lengths.mean()
    if mean_len == 0.0:
        nan = np.full_like(lengths, np.nan)
        return EvalReport(d, lengths, float("nan"), nan, float("nan"), float("nan"), degenerate=True)
    return score_distances(d, lengths / mean_len)


def rolling_mean(values, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TrainResult:
    model: EmbeddingModel
    log: list[dict]
    report: EvalReport | None
    config: TrainConfig
    reports: list[tuple[int, EvalReport]] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed


def train_embedding(cfg: TrainConfig, data: TripletDataset, eval_trajs: Sequence[Trajectory] | None = None) -> TrainResult:
    """Minibatch Adam on the mean negated bound (or the direct baseline loss).

    ``eval_trajs`` defaults to the dataset's source trajectories.  Fully
    deterministic for a given ``cfg.seed``.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty triplet dataset")
    eval_trajs = list(data.trajectories if eval_trajs is None else eval_trajs)
    can_eval = len(eval_trajs) >= 2

    rng = np.random.default_rng(cfg.seed)
    shift, scale = standardization(data.all_states()) if cfg.normalize else (None, None)
    model = init_embedding_model(data.state_dim, cfg.z_dim, cfg.hidden, rng, shift, scale)
    params = model.arrays()
    opt = AdamState.create(params, lr=cfg.lr)

    N, B, k = len(data), min(cfg.batch_size, len(data)), cfg.z_dim
    order, pos = rng.permutation(N), 0
    window = {"loss": 0.0, "kl_prior": 0.0, "recon": 0.0, "kl_mid": 0.0}
    n_window = 0
    rows: list[dict] = []
    reports: list[tuple[int, EvalReport]] = []
    report = None

    for step in range(1, cfg.steps + 1):
        if pos + B > N:
            order, pos = rng.permutation(N), 0
        idx = order[pos:pos + B]
        pos += B
        xp, xm, xn = data.batch(idx)
        try:
            if cfg.objective == "elbo":
                noise = rng.standard_normal((B, 2 * k))
                loss, terms, grads = elbo_hat_batch(model, xp, xm, xn, noise, cfg.lam, cfg.variance_doubling)
            else:
                loss, grads = direct_loss_batch(model, xp, xm, xn)
                terms = {"kl_prior": 0.0, "recon": loss, "kl_mid": 0.0}
            params, opt = adam_step(opt, params, grads)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"training diverged at step {step}: {exc}") from exc
        model = model.with_arrays(params)

        window["loss"] += loss
        for name, v in terms.items():
            window[name] += v
        n_window += 1

        evaluate = can_eval and (step % cfg.eval_every == 0 or step == cfg.steps)
        if evaluate:
            report = eval_metric(model, eval_trajs)
            reports.append((step, report))
        if step % cfg.log_every == 0 or step == cfg.steps or evaluate:
            row = {name: v / n_window for name, v in window.items()}
            row["step"] = step
            row["metric_mean"] = report.mean_abs_error if evaluate else None
            row["metric_std"] = report.std_abs_error if evaluate else None
            rows.append(row)
            window = dict.fromkeys(window, 0.0)
            n_window = 0
            if evaluate:
                log.debug("seed %d step %d loss %.4f metric %.4f", cfg.seed, step, row["loss"], report.mean_abs_error)

    return TrainResult(model, rows, report, cfg, reports)


def _train_one(args):
    cfg, data, eval_trajs = args
    return train_embedding(cfg, data, eval_trajs)


def train_seeds(cfg: TrainConfig, data: TripletDataset, seeds: Sequence[int],
                eval_trajs: Sequence[Trajectory] | None = None, workers: int = 1) -> list[TrainResult]:
    """Independent runs differing only in seed, optionally in worker processes."""
    jobs = [(_with_seed(cfg, s), data, eval_trajs) for s in seeds]
    if workers <= 1:
        return [_train_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one, jobs))


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = asdict(cfg)
    d["seed"] = int(seed)
    return TrainConfig(**d)


def select_best_seed(runs: Sequence[TrainResult]) -> TrainResult:
    """Lowest final mean absolute error; ties go to lower std, then earlier runs."""
    if not runs:
        raise SelectionError("no training runs to select from")
    if len(runs) == 1:
        return runs[0]
    ok = [(r.report.mean_abs_error, r.report.std_abs_error, i)
          for i, r in enumerate(runs) if r.report is not None and not r.report.degenerate]
    if not ok:
        raise SelectionError("every run produced a degenerate embedding")
    return runs[min(ok)[2]]


def write_log_csv(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) for c in LOG_COLUMNS])


def read_log_csv(path) -> list[dict]:
    with Path(path).open() as f:
        return [{k: (None if v == "" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def model_to_dict(model: EmbeddingModel) -> dict:
    return {
        "z_dim": model.z_dim,
        "shift": model.shift.tolist(),
        "scale": model.scale.tolist(),
        "encoder": mlp_to_dict(model.encoder),
        "decoder": mlp_to_dict(model.decoder),
    }


def model_from_dict(d: dict) -> EmbeddingModel:
    return EmbeddingModel(mlp_from_dict(d["encoder"]), mlp_from_dict(d["decoder"]), int(d["z_dim"]),
                          np.asarray(d["shift"], dtype=float), np.asarray(d["scale"], dtype=float))


def save_embedding(model: EmbeddingModel, path, config: TrainConfig | None = None) -> None:
    payload = model_to_dict(model)
    if config is not None:
        cfg = asdict(config)
        cfg["triplet_steps"] = list(cfg["triplet_steps"])
        cfg["hidden"] = list(cfg["hidden"])
        payload["config"] = cfg
        payload["seed"] = config.seed
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True))


def load_embedding(path) -> EmbeddingModel:
    return model_from_dict(json.loads(Path(path).read_text()))
