"""Posterior sharpening.

A hierarchical posterior conditions every minibatch's weights on the
minibatch's own gradient::

    phi   ~ N(mu, sigma^2)
    theta ~ N(phi - eta * g_phi, sigma0^2 I),   g_phi = -grad_phi log p(y | phi, x)

trained on ``-log p(y|theta,x) + KL[q(theta|phi,.) || N(phi, sigma0^2)]
+ KL[q(phi) || p(phi)] / C``.  The first KL is exact; the second is a
single-sample estimate against the mixture prior.

The gradient through ``g_phi`` needs the derivative of a backward pass.
With ``second_order`` the first backward pass is recorded on the tape
(reverse-over-reverse); otherwise ``g_phi`` is treated as a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .lstm import RnnState, batch_nll, detach_state
from .model import BayesianLSTM, SharpeningConfig
from .rng import RandomSource
from .tensor import Tape, Tensor
from .trainer import TrainConfig, TrainState, _state_for, clip_updates, data_gradient, sgd_apply
from .variational import gaussian_log_density


@dataclass
class SharpenedSample:
    phi: np.ndarray
    g_phi: np.ndarray
    theta: np.ndarray
    eps2: np.ndarray


def sharpen_sample(phi, g_phi, eta, sigma0: float, source: RandomSource | None = None,
                   eps2=None) -> SharpenedSample:
    """Ancestral draw ``theta ~ N(phi - eta * g_phi, sigma0^2 I)``."""
    phi, g_phi, eta = (np.asarray(a.data if isinstance(a, Tensor) else a) for a in (phi, g_phi, eta))
    if not phi.shape == g_phi.shape == eta.shape:
        raise ContractError("phi, g_phi and eta must share a shape")
    if eps2 is None:
        eps2 = source.normal(phi.shape)
    eps2 = np.asarray(eps2, dtype=phi.dtype)
    theta = (phi - eta * g_phi) + sigma0 * eps2
    return SharpenedSample(phi, g_phi, theta.astype(phi.dtype), eps2)


def sharpening_kl(eta, g_phi, sigma0: float) -> Tensor:
    """KL[N(phi - eta*g, sigma0^2) || N(phi, sigma0^2)] = |eta * g|^2 / (2 sigma0^2)."""
    if sigma0 <= 0:
        raise ContractError("sigma0 must be positive")
    shift = tn.as_tensor(eta) * tn.as_tensor(g_phi)
    sq = shift * shift
    total = tn.sum_all(sq) if sq.shape != () else sq
    return total * (0.5 / sigma0 ** 2)


def _require(model: BayesianLSTM) -> SharpeningConfig:
    if model.sharpening is None:
        raise ContractError("model has no sharpening parameters")
    return model.sharpening


def sharpened_loss(model: BayesianLSTM, batch, s_prev: RnnState, eps1: Mapping[str, np.ndarray],
                   eps2: Mapping[str, np.ndarray], cfg: TrainConfig):
    """Build the per-cut loss on a tape.

    Returns ``(loss, terms, tape, leaves, final_state)``; ``leaves`` maps
    ``("mu"|"rho"|"eta", name)`` to the tensors to differentiate.
    """
    sh = _require(model)
    tape = Tape()
    with tape:
        mus = {n: Tensor(q.mu.data, requires_grad=True) for n, q in model.posterior.items()}
        rhos = {n: Tensor(q.rho.data, requires_grad=True) for n, q in model.posterior.items()}
        etas = {n: Tensor(e.data, requires_grad=cfg.train_eta) for n, e in sh.eta.items()}
        names = list(mus)
        sig = {n: tn.softplus(rhos[n]) for n in names}
        phi = {n: mus[n] + sig[n] * Tensor(eps1[n]) for n in names}
        nll_phi, _ = batch_nll(phi, batch, s_prev)
        g_list = tape.gradient(nll_phi, [phi[n] for n in names], create_graph=cfg.second_order)
        g_phi = dict(zip(names, g_list))
        shift = {n: etas[n] * g_phi[n] for n in names}
        theta = {n: (phi[n] - shift[n]) + Tensor(eps2[n]) * sh.sigma0 for n in names}
        nll, final = batch_nll(theta, batch, s_prev)
        kl_sharp = None
        kl_phi = None
        for n in names:
            a = sharpening_kl(etas[n], g_phi[n], sh.sigma0)
            b = gaussian_log_density(phi[n], mus[n], sig[n]) - cfg.prior.log_prob(phi[n], (mus[n], sig[n]))
            kl_sharp = a if kl_sharp is None else kl_sharp + a
            kl_phi = b if kl_phi is None else kl_phi + b
        divisor = cfg.C if cfg.phi_kl_divisor == "C" else cfg.B * cfg.C
        weighted_phi = kl_phi / float(divisor)
        loss = nll + kl_sharp + weighted_phi
    leaves = {("mu", n): mus[n] for n in names}
    leaves.update({("rho", n): rhos[n] for n in names})
    if cfg.train_eta:
        leaves.update({("eta", n): etas[n] for n in names})
    terms = {
        "nll": float(nll.data),
        "nll_phi": float(nll_phi.data),
        "sharpening_kl": float(kl_sharp.data),
        "kl": float(kl_phi.data),
        "weighted_kl": float(weighted_phi.data),
        "kl_divisor": divisor,
    }
    return loss, terms, tape, leaves, detach_state(final)


def sharpened_train_step(state: TrainState, batch, cfg: TrainConfig, lr: float | None = None):
    """One step of BBB with posterior sharpening; updates mu, rho and eta."""
    model = state.model
    sh = _require(model)
    lr = cfg.lr_at(state.epoch) if lr is None else lr
    s_prev = _state_for(model, state.s_prev, batch.x.shape[0])
    eps1 = {n: state.rng.normal(q.shape) for n, q in model.posterior.items()}
    eps2 = {n: state.rng.normal(q.shape) for n, q in model.posterior.items()}
    loss, terms, tape, leaves, final = sharpened_loss(model, batch, s_prev, eps1, eps2, cfg)
    keys = list(leaves)
    with tape:
        scaled = loss * (1.0 / cfg.B)
    grads = tape.gradient(scaled, [leaves[k] for k in keys])
    updates = {k: g.data for k, g in zip(keys, grads) if k[0] != "eta"}
    eta_updates = {k: g.data for k, g in zip(keys, grads) if k[0] == "eta"}
    updates, norm = clip_updates(updates, cfg.clip_norm)
    targets = {("mu", n): q.mu for n, q in model.posterior.items()}
    targets.update({("rho", n): q.rho for n, q in model.posterior.items()})
    sgd_apply(targets, updates, lr)
    eta_norm = 0.0
    if eta_updates:
        eta_updates, eta_norm = clip_updates(eta_updates, cfg.clip_norm)
        sgd_apply({("eta", n): e for n, e in sh.eta.items()}, eta_updates, lr * cfg.eta_lr_scale)

    state.s_prev = final
    state.step += 1
    metrics = {
        "step": state.step,
        "nll": terms["nll"],
        "nll_per_token": terms["nll"] / batch.num_tokens,
        "kl": terms["kl"],
        "kl_weight": 1.0 / terms["kl_divisor"],
        "weighted_kl": terms["weighted_kl"],
        "sharpening_kl": terms["sharpening_kl"],
        "objective": float(loss.data),
        "lr": float(lr),
        "grad_norm": norm,
        "eta_grad_norm": eta_norm,
        "second_order": cfg.second_order,
    }
    return state, metrics


def eval_bound(batch, model: BayesianLSTM, S: int, source: RandomSource,
               s_prev: RnnState | None = None):
    """Monte-Carlo lower bound on ``log p(batch)`` per token under sharpening.

    Each of ``S`` draws samples ``phi ~ q(phi)``, sharpens it with the
    gradient of the batch itself and scores
    ``log p(y | theta) - KL[q(theta|phi,.) || p(theta|phi)]``.
    Returns ``(mean bound per token, standard error, per-draw bounds)``.
    """
    if S < 1:
        raise ContractError("S must be >= 1")
    sh = _require(model)
    s_prev = _state_for(model, s_prev, batch.x.shape[0])
    values = [sharpened_draw(batch, model, sh, source, s_prev)[0] for _ in range(S)]
    values = np.asarray(values) / batch.num_tokens
    se = float(values.std(ddof=1) / math.sqrt(S)) if S > 1 else float("nan")
    return float(values.mean()), se, values


def sharpened_draw(batch, model: BayesianLSTM, sh: SharpeningConfig, source: RandomSource,
                   s_prev: RnnState):
    """One ancestral draw: returns (log-lik minus sharpening KL, final state)."""
    phi = {n: (q.mean() + q.sigma() * Tensor(source.normal(q.shape))).data
           for n, q in model.posterior.items()}
    _, g, _ = data_gradient(phi, batch, s_prev)
    theta, kl = {}, 0.0
    for n in phi:
        draw = sharpen_sample(phi[n], g[n], sh.eta[n], sh.sigma0, source)
        theta[n] = Tensor(draw.theta)
        kl += float(sharpening_kl(sh.eta[n].data, g[n], sh.sigma0).data)
    with tn.no_grad():
        nll, final = batch_nll(theta, batch, s_prev)
    return -float(nll.data) - kl, detach_state(final)
