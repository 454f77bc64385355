"""Signal-to-noise-ratio pruning of a trained variational model.

Weights are ranked jointly across every tensor by ``|mu| / sigma``; pruning
a fraction ``f`` zeroes the lowest-ranked ``floor(f * d)`` means and forces
their scale to zero so sampled evaluation treats them as removed too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, StorageError
from .model import BayesianLSTM

DEFAULT_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


def snr_order(mu, sigma) -> np.ndarray:
    """Flat indices in ascending ``|mu| / sigma`` order; ties keep index order."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if mu.shape != sigma.shape:
        raise ContractError("mu and sigma must have the same number of entries")
    if np.any(sigma <= 0):
        raise ContractError("sigma must be positive everywhere")
    return np.argsort(np.abs(mu) / sigma, kind="stable")


def flat_snr_inputs(model: BayesianLSTM) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated (effective mean, softplus scale) over tensors in canonical order.

    Already-pruned coordinates have mean zero and therefore rank first.
    """
    mus = [model.posterior[n].mean().data.ravel() for n in model.names]
    sigmas = [np.logaddexp(0.0, model.posterior[n].rho.data.astype(np.float64)).ravel()
              for n in model.names]
    return np.concatenate(mus), np.concatenate(sigmas)


@dataclass
class PruneMask:
    keep: dict[str, np.ndarray]
    fraction: float
    threshold: float
    dropped: int = 0
    total: int = 0

    def row_drops(self) -> dict[str, np.ndarray]:
        """Dropped entries per matrix row; vectors count as a single row."""
        return {n: np.atleast_2d(~k).sum(axis=1) for n, k in self.keep.items()}


def prune(model: BayesianLSTM, fraction: float) -> tuple[BayesianLSTM, PruneMask]:
    """Copy of ``model`` with the lowest-SNR fraction of weights removed."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must lie in [0, 1], got {fraction}")
    mu, sigma = flat_snr_inputs(model)
    d = mu.size
    k = int(math.floor(fraction * d + 1e-9))
    order = snr_order(mu, sigma)
    drop = np.zeros(d, dtype=bool)
    drop[order[:k]] = True
    snr = np.abs(mu) / sigma
    threshold = float(snr[order[k - 1]]) if k > 0 else 0.0

    pruned = model.copy()
    keep, lo = {}, 0
    for n in model.names:
        q = pruned.posterior[n]
        size = q.mu.size
        mask = ~drop[lo:lo + size].reshape(q.shape)
        if q.keep is not None:
            mask &= q.keep
        q.keep = mask
        q.mu.data = np.where(mask, q.mu.data, 0).astype(q.mu.data.dtype)
        keep[n] = mask
        lo += size
    return pruned, PruneMask(keep, fraction, threshold, int(k), int(d))


@dataclass
class SweepPoint:
    fraction: float
    perplexity: float
    dropped: int
    threshold: float
    row_drops: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def prune_sweep(model: BayesianLSTM, ids: Sequence[int],
                fractions: Sequence[float] = DEFAULT_FRACTIONS, T: int = 35) -> list[SweepPoint]:
    """MAP perplexity of ``ids`` at every pruning fraction."""
    from .evaluation import perplexity

    fractions = list(fractions)
    if fractions != sorted(fractions):
        raise ContractError("fractions must be sorted ascending")
    out = []
    for f in fractions:
        pruned, mask = prune(model, f)
        report = perplexity(pruned, ids, "map", T=T)
        out.append(SweepPoint(f, report.perplexity, mask.dropped, mask.threshold, mask.row_drops()))
    return out


def sweep_table(points: Sequence[SweepPoint]) -> str:
    lines = ["fraction,perplexity,dropped,threshold"]
    lines += [f"{p.fraction:g},{p.perplexity:.6f},{p.dropped},{p.threshold:.6g}" for p in points]
    return "\n".join(lines) + "\n"


def export_masks(mask: PruneMask, directory) -> list[Path]:
    """Write one comma-separated 0/1 grid per parameter (1 = dropped)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for n, keep in mask.keep.items():
            grid = np.atleast_2d(~keep).astype(int)
            path = directory / f"{n}.csv"
            np.savetxt(path, grid, fmt="%d", delimiter=",")
            paths.append(path)
    except OSError as e:
        raise StorageError(f"cannot write masks to {directory}: {e}") from None
    return paths
