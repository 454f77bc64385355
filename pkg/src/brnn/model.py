"""A variational LSTM language model: architecture plus one posterior per tensor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lstm import LstmConfig, init_means, param_shapes
from .rng import RandomSource
from .tensor import Tensor
from .variational import GaussianVariational, sample_params


@dataclass
class SharpeningConfig:
    """Per-parameter step sizes ``eta`` (learnable) and the inner scale ``sigma0``."""

    eta: dict[str, Tensor]
    sigma0: float = 0.02

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")

    @classmethod
    def initial(cls, shapes: dict[str, tuple], eta_init: float = 0.001, sigma0: float = 0.02):
        return cls({n: Tensor(np.full(s, eta_init)) for n, s in shapes.items()}, sigma0)

    def copy(self) -> "SharpeningConfig":
        return SharpeningConfig({n: Tensor(e.data.copy()) for n, e in self.eta.items()}, self.sigma0)


@dataclass
class BayesianLSTM:
    config: LstmConfig
    posterior: dict[str, GaussianVariational]
    sharpening: SharpeningConfig | None = None

    @classmethod
    def initial(cls, config: LstmConfig, source: RandomSource, sigma_init: float = 0.01,
                init_scale: float = 0.05) -> "BayesianLSTM":
        means = init_means(config, source, scale=init_scale)
        return cls(config, {n: GaussianVariational.initial(m, sigma_init) for n, m in means.items()})

    @property
    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    def num_params(self) -> int:
        return sum(q.mu.size for q in self.posterior.values())

    def mean_params(self) -> dict[str, Tensor]:
        return {n: q.mean() for n, q in self.posterior.items()}

    def sample(self, source: RandomSource) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
        thetas, eps = {}, {}
        for n, q in self.posterior.items():
            thetas[n], eps[n] = sample_params(q, source)
        return thetas, eps

    def copy(self) -> "BayesianLSTM":
        return BayesianLSTM(self.config, {n: q.copy() for n, q in self.posterior.items()},
                            None if self.sharpening is None else self.sharpening.copy())
