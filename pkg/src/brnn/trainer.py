"""Bayes by Backprop over truncated backpropagation through time.

Each cut draws one weight sample ``theta = mu + sigma * eps``, held fixed for
the whole unroll.  The data gradient ``g`` and the gradients of
``log q(theta) - log p(theta)`` are assembled as

    d_mu    = (g + g_theta / C) / B + g_mu / (B C)
    d_sigma = ((g + g_theta / C) / B) * eps + g_sigma / (B C)

which is the gradient of ``NLL / B + (log q - log p) / (B C)``.  The 1/B on the
data term acts as a learning-rate rescaling; the reported objective is the
unscaled ``NLL + w_KL * KL`` with ``w_KL = 1 / (B C)``.

B = C = 1 recovers plain Bayes by Backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .data import CutBatch
from .errors import ContractError, DataError, NumericError
from .lstm import RnnState, batch_nll, detach_state, zero_state
from .model import BayesianLSTM
from .rng import RandomSource
from .tensor import Tape, Tensor
from .variational import MixturePrior, gaussian_log_density


def default_prior() -> MixturePrior:
    return MixturePrior.from_log_sigmas(0.25, -1.0, -7.0)


@dataclass
class TrainConfig:
    B: int = 1
    C: int = 1
    T: int = 10
    batch_size: int = 10
    learning_rate: float = 0.1
    lr_decay: float = 1.0
    decay_after: int = 0
    clip_norm: float = 5.0
    prior: object = field(default_factory=default_prior)
    seed: int = 0
    kl_enabled: bool = True
    # sigma clamped at zero: theta = mu and rho is never updated
    deterministic: bool = False
    max_skips: int = 10
    sharpen: bool = False
    second_order: bool = True
    train_eta: bool = True
    # eta is clipped on its own and stepped at learning_rate * eta_lr_scale
    eta_lr_scale: float = 0.001
    # divisor of KL[q(phi) || p(phi)] under sharpening: "C" or "BC"
    phi_kl_divisor: str = "C"

    def __post_init__(self):
        if min(self.B, self.C, self.T, self.batch_size) < 1:
            raise ContractError("B, C, T and batch_size must all be >= 1")
        if self.phi_kl_divisor not in ("C", "BC"):
            raise ContractError("phi_kl_divisor must be 'C' or 'BC'")

    def lr_at(self, epoch: int) -> float:
        """Rate of 0-based ``epoch``: epochs up to ``decay_after`` run at full rate."""
        return self.learning_rate * self.lr_decay ** max(0, epoch - self.decay_after)


def kl_weight(cfg: TrainConfig) -> float:
    if cfg.B < 1 or cfg.C < 1:
        raise ContractError("B and C must be >= 1")
    return 1.0 / (cfg.B * cfg.C)


@dataclass
class TrainState:
    model: BayesianLSTM
    rng: RandomSource
    s_prev: RnnState | None = None
    step: int = 0
    epoch: int = 0
    cut_index: int = 0
    skipped: int = 0
    kl_weight_total: Fraction = Fraction(0)

    @classmethod
    def fresh(cls, model: BayesianLSTM, seed: int) -> "TrainState":
        return cls(model=model, rng=RandomSource(seed))


# ---------------------------------------------------------------------------
# shared optimiser plumbing


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))


def clip_updates(updates: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(list(updates.values()))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient")
    if clip_norm > 0 and norm > clip_norm:
        scale = np.asarray(clip_norm / norm, dtype=next(iter(updates.values())).dtype)
        updates = {k: v * scale for k, v in updates.items()}
    return updates, norm


def sgd_apply(targets: dict[str, Tensor], updates: dict[str, np.ndarray], lr: float) -> None:
    lr = np.asarray(lr, dtype=next(iter(targets.values())).data.dtype)
    for k, d in updates.items():
        targets[k].data = targets[k].data - lr * d


def _state_for(model: BayesianLSTM, s_prev, batch_size: int) -> RnnState:
    return zero_state(model.config, batch_size) if s_prev is None else s_prev


def data_gradient(params: Mapping[str, np.ndarray], batch: CutBatch, s_prev: RnnState):
    """NLL of a cut at fixed weights, its gradient per tensor, and the final state."""
    with Tape() as tape:
        leaves = {n: Tensor(v, requires_grad=True) for n, v in params.items()}
        nll, final = batch_nll(leaves, batch, s_prev)
        grads = tape.gradient(nll, list(leaves.values()))
    return float(nll.data), dict(zip(leaves, (g.data for g in grads))), detach_state(final)


def kl_gradients(theta: Mapping[str, np.ndarray], mu: Mapping[str, np.ndarray],
                 sigma: Mapping[str, np.ndarray], prior):
    """Value of ``log N(theta | mu, sigma^2) - log p(theta)`` and its partials."""
    with Tape() as tape:
        th = {n: Tensor(v, requires_grad=True) for n, v in theta.items()}
        m = {n: Tensor(v, requires_grad=True) for n, v in mu.items()}
        s = {n: Tensor(v, requires_grad=True) for n, v in sigma.items()}
        total = None
        for n in th:
            term = gaussian_log_density(th[n], m[n], s[n]) - prior.log_prob(th[n], (m[n], s[n]))
            total = term if total is None else total + term
        names = list(th)
        grads = tape.gradient(total, [th[n] for n in names] + [m[n] for n in names]
                              + [s[n] for n in names])
    k = len(names)
    g_theta = {n: grads[i].data for i, n in enumerate(names)}
    g_mu = {n: grads[k + i].data for i, n in enumerate(names)}
    g_sigma = {n: grads[2 * k + i].data for i, n in enumerate(names)}
    return float(total.data), g_theta, g_mu, g_sigma


def draw_eps(model: BayesianLSTM, rng: RandomSource, cfg: TrainConfig) -> dict[str, np.ndarray]:
    if cfg.deterministic:
        return {n: np.zeros(q.shape, dtype=q.mu.data.dtype) for n, q in model.posterior.items()}
    return {n: rng.normal(q.shape) for n, q in model.posterior.items()}


def fig1_update(model: BayesianLSTM, batch: CutBatch, s_prev: RnnState,
                eps: Mapping[str, np.ndarray], cfg: TrainConfig):
    """Closed-form mu / rho update directions for one cut (before clipping).

    Returns ``(d_mu, d_rho, info, final_state)``; ``d_rho`` is empty when
    sigma is clamped at zero.
    """
    B, C = cfg.B, cfg.C
    mu = {n: q.mu.data for n, q in model.posterior.items()}
    if cfg.deterministic:
        theta = {n: m.copy() for n, m in mu.items()}
        sigma = None
    else:
        sigma = {n: q.sigma_np() for n, q in model.posterior.items()}
        theta = {n: mu[n] + sigma[n] * eps[n] for n in mu}
    nll, g, final = data_gradient(theta, batch, s_prev)

    kl = 0.0
    d_mu, d_rho = {}, {}
    if cfg.kl_enabled and not cfg.deterministic:
        kl, g_theta, g_mu, g_sigma = kl_gradients(theta, mu, sigma, cfg.prior)
        for n in mu:
            data_term = (g[n] + g_theta[n] / C) / B
            d_mu[n] = data_term + g_mu[n] / (B * C)
            d_sigma = data_term * eps[n] + g_sigma[n] / (B * C)
            d_rho[n] = d_sigma * expit(model.posterior[n].rho.data)
    elif cfg.kl_enabled:
        raise ContractError("the KL term is undefined with sigma clamped at zero")
    else:
        for n in mu:
            d_mu[n] = g[n] / B
            if not cfg.deterministic:
                d_rho[n] = (d_mu[n] * eps[n]) * expit(model.posterior[n].rho.data)
    info = {"nll": nll, "kl": kl}
    return d_mu, d_rho, info, final


def surrogate_loss(model: BayesianLSTM, batch: CutBatch, s_prev: RnnState,
                   eps: Mapping[str, np.ndarray], cfg: TrainConfig):
    """Scalar whose autodiff gradient w.r.t. (mu, rho) the trainer applies.

    ``NLL(theta) / B + (log q(theta) - log p(theta)) / (B C)`` with
    ``theta = mu + softplus(rho) * eps`` built on the tape.  Returns the
    loss, the tape and the ``(mu, rho)`` leaves.
    """
    tape = Tape()
    with tape:
        mus = {n: Tensor(q.mu.data, requires_grad=True) for n, q in model.posterior.items()}
        rhos = {n: Tensor(q.rho.data, requires_grad=True) for n, q in model.posterior.items()}
        sig = {n: tn.softplus(rhos[n]) for n in mus}
        theta = {n: mus[n] + sig[n] * Tensor(eps[n]) for n in mus}
        nll, _ = batch_nll(theta, batch, s_prev)
        loss = nll / float(cfg.B)
        if cfg.kl_enabled:
            for n in mus:
                term = gaussian_log_density(theta[n], mus[n], sig[n]) - cfg.prior.log_prob(theta[n], (mus[n], sig[n]))
                loss = loss + term / float(cfg.B * cfg.C)
    return loss, tape, mus, rhos


def train_step(state: TrainState, batch: CutBatch, cfg: TrainConfig, lr: float | None = None):
    """One Bayes-by-Backprop update on a cut.

    Raises :class:`NumericError` on a non-finite loss or gradient, in which
    case the parameters and carried state are left untouched (the random
    source has still advanced).
    """
    if cfg.sharpen:
        from .sharpening import sharpened_train_step
        return sharpened_train_step(state, batch, cfg, lr)
    model = state.model
    lr = cfg.lr_at(state.epoch) if lr is None else lr
    s_prev = _state_for(model, state.s_prev, batch.x.shape[0])
    eps = draw_eps(model, state.rng, cfg)
    d_mu, d_rho, info, final = fig1_update(model, batch, s_prev, eps, cfg)

    updates = {("mu", n): d for n, d in d_mu.items()}
    updates.update({("rho", n): d for n, d in d_rho.items()})
    updates, norm = clip_updates(updates, cfg.clip_norm)
    targets = {("mu", n): q.mu for n, q in model.posterior.items()}
    targets.update({("rho", n): q.rho for n, q in model.posterior.items()})
    sgd_apply(targets, updates, lr)

    state.s_prev = final
    state.step += 1
    w = kl_weight(cfg)
    tokens = batch.num_tokens
    metrics = {
        "step": state.step,
        "nll": info["nll"],
        "nll_per_token": info["nll"] / tokens,
        "kl": info["kl"],
        "kl_weight": w,
        "weighted_kl": w * info["kl"],
        "sharpening_kl": 0.0,
        "objective": info["nll"] + w * info["kl"],
        "lr": float(lr),
        "grad_norm": norm,
    }
    return state, metrics


def run_epoch(state: TrainState, cuts: Sequence[CutBatch], cfg: TrainConfig,
              max_steps: int | None = None, on_step: Callable[[dict], None] | None = None):
    """Visit every (b, c) cut of the epoch in order, carrying recurrent state.

    Resumes mid-epoch from ``state.cut_index``; ``max_steps`` stops early
    (the state then records where to continue).
    """
    total = cfg.B * cfg.C
    if len(cuts) < total:
        raise DataError(f"epoch needs {total} cuts but the data yields {len(cuts)}")
    if state.cut_index == 0:
        state.s_prev = None
        state.kl_weight_total = Fraction(0)
    lr = cfg.lr_at(state.epoch)
    nll_sum, tokens, kl_sum, done = 0.0, 0, 0.0, 0
    while state.cut_index < total:
        if max_steps is not None and done >= max_steps:
            break
        batch = cuts[state.cut_index]
        if (batch.b, batch.c) != divmod(state.cut_index, cfg.C):
            raise DataError(f"cut {state.cut_index} is out of order: (b, c) = ({batch.b}, {batch.c})")
        try:
            state, m = train_step(state, batch, cfg, lr)
        except NumericError:
            state.skipped += 1
            if state.skipped > cfg.max_skips:
                raise
            m = None
        state.cut_index += 1
        done += 1
        if m is not None:
            state.kl_weight_total += Fraction(1, total)
            nll_sum += m["nll"]
            tokens += batch.num_tokens
            kl_sum += m["weighted_kl"]
            m["epoch"] = state.epoch
            if on_step is not None:
                on_step(m)
    finished = state.cut_index >= total
    summary = {
        "epoch": state.epoch,
        "nll_per_token": nll_sum / tokens if tokens else float("nan"),
        "train_perplexity": math.exp(nll_sum / tokens) if tokens else float("nan"),
        "weighted_kl": kl_sum,
        "kl_weight_total": state.kl_weight_total,
        "steps": done,
        "skipped": state.skipped,
        "lr": lr,
    }
    if finished:
        state.epoch += 1
        state.cut_index = 0
    return state, summary


# ---------------------------------------------------------------------------
# deterministic reference


def train_deterministic_step(params: dict[str, Tensor], s_prev: RnnState | None,
                             batch: CutBatch, cfg: TrainConfig, lr: float):
    """Plain SGD on an ordinary LSTM with the same 1/B scaling and clipping."""
    if s_prev is None:
        s_prev = zero_state_like(params, batch.x.shape[0])
    nll, g, final = data_gradient({n: p.data for n, p in params.items()}, batch, s_prev)
    updates = {n: g[n] / cfg.B for n in params}
    updates, _ = clip_updates(updates, cfg.clip_norm)
    sgd_apply(params, updates, lr)
    return nll, final


def zero_state_like(params: Mapping[str, Tensor], batch: int) -> RnnState:
    H = params["out.W"].shape[0]
    layers = sum(1 for n in params if n.endswith(".W_i"))
    z = np.zeros((batch, H), dtype=params["out.W"].data.dtype)
    return [(Tensor(z), Tensor(z)) for _ in range(layers)]
