"""Shared oracles for the test-suite: finite differences and small fixtures."""

import numpy as np

from brnn import tensor as tn
from brnn.data import build_vocab, grammar_corpus, make_cuts
from brnn.lstm import LstmConfig, param_shapes
from brnn.model import BayesianLSTM, SharpeningConfig
from brnn.rng import RandomSource
from brnn.trainer import TrainConfig, TrainState, run_epoch


def central_difference(f, arrays, h=1e-3):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. every array (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = f(*arrays)
            a[idx] = old - h
            down = f(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def autodiff(f, arrays):
    """(value, gradients) of ``f`` built from tensor ops, on a fresh tape."""
    leaves = [tn.Tensor(a, requires_grad=True) for a in arrays]
    with tn.Tape() as tape:
        out = f(*leaves)
    return float(out.data), [g.data for g in tape.gradient(out, leaves)]


def tiny_model(vocab_size=5, embed=3, hidden=4, layers=1, seed=0, scale=0.5):
    cfg = LstmConfig(vocab_size, embed, hidden, layers)
    return BayesianLSTM.initial(cfg, RandomSource(seed), init_scale=scale)


def grammar_ids(n_train=4000, seed=0):
    corp = grammar_corpus(n_train, seed)
    vocab = build_vocab(corp["train"])
    return vocab, {k: vocab.encode(v) for k, v in corp.items()}


def train_toy(n_train=4000, epochs=2, seed=0, hidden=32, embed=16, lr=0.5, sharpen=False,
              eta_init=0.001, sigma0=0.02, T=10, batch_size=10, data_seed=0):
    """Train a small model on the ordered grammar; returns (model, vocab, ids by split)."""
    vocab, ids = grammar_ids(n_train, data_seed)
    source = RandomSource(seed)
    cfg_l = LstmConfig(len(vocab), embed, hidden)
    model = BayesianLSTM.initial(cfg_l, source)
    if sharpen:
        model.sharpening = SharpeningConfig.initial(param_shapes(cfg_l), eta_init, sigma0)
    cuts = make_cuts(ids["train"], batch_size, T)
    cfg = TrainConfig(C=len(cuts), T=T, batch_size=batch_size, learning_rate=lr, sharpen=sharpen)
    state = TrainState(model=model, rng=source)
    for _ in range(epochs):
        state, _ = run_epoch(state, cuts, cfg)
    return model, vocab, ids
