"""Perplexity in MAP / Monte-Carlo / sharpened modes and the reversed-corpus entropy gap.

Every token of an evaluation stream is a prediction target; the first is
predicted from the initial (zero) state.  The recurrent state is carried
through the whole stream and reset at the start of each pass.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import reverse_corpus, stream_segments
from .errors import ContractError
from .lstm import batch_logits, zero_state
from .model import BayesianLSTM
from .rng import RandomSource
from .sharpening import sharpened_draw

DEFAULT_T = 35


@dataclass
class EvalReport:
    mode: str
    nll_per_token: float
    perplexity: float
    tokens: int
    samples: int
    stderr: float
    upper_bound: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EntropyGapReport:
    forward: float
    reversed: float
    gap: float
    samples: int
    tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def parse_mode(spec: str) -> tuple[str, int]:
    """``"map"``, ``"mc:S"`` or ``"sharpened:S"`` -> (mode, S)."""
    name, _, count = spec.partition(":")
    if name == "map" and not count:
        return "map", 1
    if name in ("mc", "sharpened"):
        try:
            S = int(count) if count else 1
        except ValueError:
            raise ContractError(f"bad sample count in {spec!r}") from None
        if S < 1:
            raise ContractError("sample count must be >= 1")
        return name, S
    raise ContractError(f"unknown evaluation mode {spec!r}")


def _param_draws(model: BayesianLSTM, S: int, source: RandomSource | None, sampled: bool):
    if not sampled:
        yield model.mean_params()
        return
    for _ in range(S):
        yield model.sample(source)[0]


def stream_probabilities(params, ids: Sequence[int], cfg, T: int = DEFAULT_T) -> np.ndarray:
    """Predictive distribution at every position of one stream, ``[N x V]``."""
    s = zero_state(cfg, 1)
    out = []
    with tn.no_grad():
        for seg in stream_segments(ids, T):
            logits, _, s = batch_logits(params, seg, s)
            out.append(tn.softmax_np(logits.data))
    return np.concatenate(out, axis=0)


def predictive(model: BayesianLSTM, ids: Sequence[int], S: int = 0, seed: int = 0,
               T: int = DEFAULT_T) -> tuple[np.ndarray, list[np.ndarray]]:
    """Posterior-averaged predictive distributions (``S = 0`` means the posterior mean).

    Probabilities, not log-probabilities, are averaged across draws.
    Returns the average and the per-draw distributions.
    """
    source = RandomSource(seed)
    per_draw = [stream_probabilities(p, ids, model.config, T)
                for p in _param_draws(model, S, source, sampled=S > 0)]
    return np.mean(per_draw, axis=0), per_draw


def _nll(probs: np.ndarray, ids: Sequence[int]) -> float:
    picked = probs[np.arange(len(ids)), np.asarray(ids)]
    return float(-np.sum(np.log(picked)))


def perplexity(model: BayesianLSTM, ids: Sequence[int], mode: str = "map", S: int = 1,
               seed: int = 0, T: int = DEFAULT_T) -> EvalReport:
    ids = list(ids)
    N = len(ids)
    if mode == "map":
        probs, _ = predictive(model, ids, 0, seed, T)
        nll = _nll(probs, ids) / N
        return EvalReport("map", nll, math.exp(nll), N, 1, 0.0)
    if mode == "mc":
        probs, per_draw = predictive(model, ids, S, seed, T)
        nll = _nll(probs, ids) / N
        draws = np.array([_nll(p, ids) / N for p in per_draw])
        se = float(draws.std(ddof=1) / math.sqrt(S)) if S > 1 else float("nan")
        return EvalReport(f"mc:{S}", nll, math.exp(nll), N, S, se)
    if mode == "sharpened":
        bound, se = sharpened_stream_bound(model, ids, S, seed, T)
        return EvalReport(f"sharpened:{S}", -bound, math.exp(-bound), N, S, se, upper_bound=True)
    raise ContractError(f"unknown evaluation mode {mode!r}")


def sharpened_stream_bound(model: BayesianLSTM, ids: Sequence[int], S: int, seed: int = 0,
                           T: int = DEFAULT_T) -> tuple[float, float]:
    """Per-token lower bound on log-likelihood, averaged over ``S`` sample chains."""
    if model.sharpening is None:
        raise ContractError("sharpened evaluation needs a model trained with sharpening")
    source = RandomSource(seed)
    segs = stream_segments(ids, T)
    totals = []
    for _ in range(S):
        s = zero_state(model.config, 1)
        total = 0.0
        for seg in segs:
            value, s = sharpened_draw(seg, model, model.sharpening, source, s)
            total += value
        totals.append(total / len(ids))
    totals = np.asarray(totals)
    se = float(totals.std(ddof=1) / math.sqrt(S)) if S > 1 else float("nan")
    return float(totals.mean()), se


def entropy_of(probs: np.ndarray) -> np.ndarray:
    """Entropy (nats) of every row of a probability matrix."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def sequence_entropy(model: BayesianLSTM, x: Sequence[int], S: int = 0, seed: int = 0,
                     T: int = DEFAULT_T) -> float:
    """Summed entropy of the model's own predictive distribution over positions of ``x``."""
    if len(x) < 1:
        raise ContractError("sequence must be non-empty")
    probs, _ = predictive(model, x, S, seed, T)
    return float(entropy_of(probs).sum())


def entropy_gap(model: BayesianLSTM, ids: Sequence[int], S: int = 0, seed: int = 0,
                T: int = DEFAULT_T) -> EntropyGapReport:
    """Per-word entropy on the reversed stream minus that on the stream itself."""
    ids = list(ids)
    if len(ids) < 2:
        raise ContractError("entropy gap needs at least two tokens")
    fwd = sequence_entropy(model, ids, S, seed, T) / len(ids)
    rev = sequence_entropy(model, reverse_corpus(ids), S, seed, T) / len(ids)
    return EntropyGapReport(fwd, rev, rev - fwd, S, len(ids))


def unigram_entropy(ids: Sequence) -> float:
    """Per-word entropy of the empirical unigram distribution of ``ids``."""
    counts = np.array(list(Counter(ids).values()), dtype=np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())
