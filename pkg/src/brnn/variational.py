"""Diagonal Gaussian posteriors, priors, and KL terms.

The posterior scale is stored as ``rho`` with ``sigma = softplus(rho)`` so
unconstrained gradient steps keep it positive.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def softplus_inverse(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("sigma must be positive")
    return sigma + np.log(-np.expm1(-sigma))


class GaussianVariational:
    """q(theta) = N(mu, softplus(rho)^2) for one parameter tensor.

    ``keep`` is an optional boolean mask; coordinates where it is False are
    pruned and have their scale forced to zero.
    """

    def __init__(self, mu: Tensor, rho: Tensor, keep: np.ndarray | None = None):
        mu, rho = tn.as_tensor(mu), tn.as_tensor(rho)
        if mu.shape != rho.shape:
            raise DimensionError(f"mu {mu.shape} and rho {rho.shape} differ")
        if keep is not None and keep.shape != mu.shape:
            raise DimensionError("keep mask shape differs from mu")
        self.mu = mu
        self.rho = rho
        self.keep = keep

    @classmethod
    def initial(cls, mu: np.ndarray, sigma: float = 0.01) -> "GaussianVariational":
        rho = np.full(np.shape(mu), softplus_inverse(sigma))
        return cls(Tensor(mu), Tensor(rho))

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self) -> Tensor:
        s = tn.softplus(self.rho)
        if self.keep is not None:
            s = s * Tensor(self.keep)
        return s

    def sigma_np(self) -> np.ndarray:
        s = np.logaddexp(0.0, self.rho.data).astype(self.rho.data.dtype)
        if self.keep is not None:
            s = s * self.keep
        return s

    def mean(self) -> Tensor:
        if self.keep is None:
            return self.mu
        return self.mu * Tensor(self.keep)

    def copy(self) -> "GaussianVariational":
        keep = None if self.keep is None else self.keep.copy()
        return GaussianVariational(Tensor(self.mu.data.copy()), Tensor(self.rho.data.copy()), keep)


def sample_params(q: GaussianVariational, source=None, eps: np.ndarray | None = None):
    """Reparameterised draw ``theta = mu + sigma * eps``; returns ``(theta, eps)``."""
    if eps is None:
        eps = source.normal(q.shape)
    eps = np.asarray(eps, dtype=q.mu.data.dtype)
    if eps.shape != q.shape:
        raise DimensionError("eps shape differs from the posterior")
    return q.mean() + q.sigma() * Tensor(eps), eps


def gaussian_log_density(theta, mean, sigma) -> Tensor:
    """Summed log N(theta | mean, sigma^2) over all entries."""
    theta, mean, sigma = tn.as_tensor(theta), tn.as_tensor(mean), tn.as_tensor(sigma)
    z = (theta - mean) / sigma
    per = tn.neg(tn.log(sigma)) - 0.5 * (z * z)
    if per.shape == ():
        return per - HALF_LOG_2PI
    return tn.sum_all(per) - per.size * HALF_LOG_2PI


def log_q(q: GaussianVariational, theta) -> Tensor:
    return gaussian_log_density(theta, q.mean(), q.sigma())


class MixturePrior:
    """Two zero-mean Gaussians, weight ``pi`` on the wide ``sigma1`` component."""

    def __init__(self, pi: float, sigma1: float, sigma2: float):
        if not 0.0 <= pi <= 1.0:
            raise ContractError("pi must lie in [0, 1]")
        if sigma1 <= 0 or sigma2 <= 0:
            raise ContractError("mixture scales must be positive")
        self.pi = float(pi)
        self.sigma1 = float(sigma1)
        self.sigma2 = float(sigma2)

    @classmethod
    def from_log_sigmas(cls, pi: float, log_sigma1: float, log_sigma2: float):
        return cls(pi, math.exp(log_sigma1), math.exp(log_sigma2))

    def _component(self, theta: Tensor, weight: float, sigma: float) -> Tensor:
        c = math.log(weight) - math.log(sigma) - HALF_LOG_2PI
        return (theta * theta) * (-0.5 / sigma ** 2) + c

    def log_prob(self, theta, q=None) -> Tensor:
        """Summed log-density; ``q`` (the posterior's ``(mean, sigma)``) is ignored."""
        theta = tn.as_tensor(theta)
        if self.pi == 1.0:
            per = self._component(theta, 1.0, self.sigma1)
        elif self.pi == 0.0:
            per = self._component(theta, 1.0, self.sigma2)
        else:
            a1 = self._component(theta, self.pi, self.sigma1)
            a2 = self._component(theta, 1.0 - self.pi, self.sigma2)
            # log-sum-exp with a constant shift; the value is shift-invariant
            m = Tensor(np.maximum(a1.data, a2.data))
            per = m + tn.log(tn.exp(a1 - m) + tn.exp(a2 - m))
        return tn.sum_all(per) if per.shape != () else per

    def __repr__(self):
        return f"MixturePrior(pi={self.pi}, sigma1={self.sigma1}, sigma2={self.sigma2})"


class GaussianPrior:
    """N(mean, sigma^2 I); ``mean`` may be a tensor (hierarchical prior)."""

    def __init__(self, mean=0.0, sigma: float = 1.0):
        if sigma <= 0:
            raise ContractError("sigma must be positive")
        self.mean = mean
        self.sigma = float(sigma)

    def log_prob(self, theta, q=None) -> Tensor:
        theta = tn.as_tensor(theta)
        return gaussian_log_density(theta, self.mean, self.sigma)


def log_prior_mixture(p: MixturePrior, theta) -> Tensor:
    return p.log_prob(theta)


def kl_sample_estimate(q: GaussianVariational, p, theta) -> Tensor:
    """Single-sample Monte-Carlo estimate of KL(q || p) at a draw from q."""
    return log_q(q, theta) - p.log_prob(theta, (q.mean(), q.sigma()))


def kl_gaussian_gaussian(q_mean, q_sigma, p_mean, p_sigma) -> Tensor:
    """Closed-form KL between diagonal Gaussians, summed over dimensions."""
    q_mean, q_sigma = tn.as_tensor(q_mean), tn.as_tensor(q_sigma)
    p_mean, p_sigma = tn.as_tensor(p_mean), tn.as_tensor(p_sigma)
    if np.any(q_sigma.data <= 0) or np.any(p_sigma.data <= 0):
        raise ContractError("KL needs positive scales")
    d = q_mean - p_mean
    per = (tn.log(p_sigma / q_sigma)
           + (q_sigma * q_sigma + d * d) / (2.0 * (p_sigma * p_sigma)) - 0.5)
    return tn.sum_all(per) if per.shape != () else per
