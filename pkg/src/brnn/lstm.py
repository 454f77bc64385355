"""LSTM language-model core without peephole connections.

Parameters are passed in as a flat mapping ``name -> Tensor`` so the same
functions run on posterior means, sampled weights, or sharpened weights.
Layer ``l`` owns ``l{l}.W_i`` ... ``l{l}.b_o``; each gate matrix maps the
concatenation ``[x_t, h_{t-1}]`` to the hidden width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor

GATES = ("i", "f", "c", "o")

LstmParams = Mapping[str, Tensor]
# one (c, h) pair per layer, bottom layer first
RnnState = list


@dataclass(frozen=True)
class LstmConfig:
    vocab_size: int
    embed_size: int = 16
    hidden_size: int = 32
    num_layers: int = 1

    def __post_init__(self):
        if min(self.vocab_size, self.embed_size, self.hidden_size, self.num_layers) < 1:
            raise ContractError("all LSTM dimensions must be positive")

    def layer_input(self, layer: int) -> int:
        return self.embed_size if layer == 0 else self.hidden_size


def param_shapes(cfg: LstmConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; the order is the canonical parameter order."""
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, cfg.embed_size)}
    H = cfg.hidden_size
    for layer in range(cfg.num_layers):
        fan_in = cfg.layer_input(layer) + H
        for g in GATES:
            shapes[f"l{layer}.W_{g}"] = (fan_in, H)
        for g in GATES:
            shapes[f"l{layer}.b_{g}"] = (H,)
    shapes["out.W"] = (H, cfg.vocab_size)
    shapes["out.b"] = (cfg.vocab_size,)
    return shapes


def param_count(cfg: LstmConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def check_params(p: LstmParams, cfg: LstmConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in p:
            raise DimensionError(f"missing parameter {name}")
        if p[name].shape != shape:
            raise DimensionError(f"{name}: expected {shape}, got {p[name].shape}")


def zero_state(cfg: LstmConfig, batch: int) -> RnnState:
    dtype = tn.get_dtype()
    z = np.zeros((batch, cfg.hidden_size), dtype=dtype)
    return [(Tensor(z), Tensor(z)) for _ in range(cfg.num_layers)]


def detach_state(s: RnnState) -> RnnState:
    return [(c.detach(), h.detach()) for c, h in s]


def _fused(p: LstmParams, layer: int, batch: int) -> tuple[Tensor, Tensor]:
    W = tn.concat([p[f"l{layer}.W_{g}"] for g in GATES], axis=1)
    b = tn.concat([p[f"l{layer}.b_{g}"] for g in GATES], axis=0)
    return W, tn.expand(b, 0, batch)


def _cell(W: Tensor, b: Tensor, x: Tensor, c_prev: Tensor, h_prev: Tensor) -> tuple[Tensor, Tensor]:
    H = h_prev.shape[1]
    z = tn.concat([x, h_prev], axis=1) @ W + b
    i = tn.sigmoid(tn.slice_axis(z, 1, 0, H))
    f = tn.sigmoid(tn.slice_axis(z, 1, H, 2 * H))
    u = tn.tanh(tn.slice_axis(z, 1, 2 * H, 3 * H))
    o = tn.sigmoid(tn.slice_axis(z, 1, 3 * H, 4 * H))
    c = f * c_prev + i * u
    h = o * tn.tanh(c)
    return c, h


def _check_state(s: RnnState, batch: int, fan_in: int, W: Tensor):
    c, h = s
    if c.shape != h.shape or c.shape[0] != batch or W.shape[0] != fan_in + h.shape[1]:
        raise DimensionError("state does not match parameters or batch")


def lstm_step(p: LstmParams, x_t: Tensor, s: RnnState) -> RnnState:
    """Advance every layer by one time step given embedded input ``x_t``."""
    batch = x_t.shape[0]
    new_state = []
    inp = x_t
    for layer, (c, h) in enumerate(s):
        W, b = _fused(p, layer, batch)
        _check_state((c, h), batch, inp.shape[1], W)
        c, h = _cell(W, b, inp, c, h)
        new_state.append((c, h))
        inp = h
    return new_state


def project(p: LstmParams, h: Tensor) -> Tensor:
    return h @ p["out.W"] + tn.expand(p["out.b"], 0, h.shape[0])


def unroll(p: LstmParams, x_ids, s0: RnnState) -> tuple[list[RnnState], Tensor]:
    """Run ``T`` steps with shared weights.

    ``x_ids`` is an integer matrix ``[batch x T]``.  Returns the states after
    each step and logits of shape ``[T x batch x V]``.
    """
    x_ids = np.asarray(x_ids)
    if x_ids.ndim != 2 or x_ids.shape[1] < 1:
        raise ContractError("unroll needs a [batch x T] id matrix with T >= 1")
    batch, T = x_ids.shape
    emb = tn.take_rows(p["embedding"], x_ids.T.reshape(-1))
    fused = [_fused(p, layer, batch) for layer in range(len(s0))]
    for layer, (W, _) in enumerate(fused):
        fan_in = emb.shape[1] if layer == 0 else s0[layer - 1][1].shape[1]
        _check_state(s0[layer], batch, fan_in, W)

    states = []
    tops = []
    s = list(s0)
    for t in range(T):
        inp = tn.slice_axis(emb, 0, t * batch, (t + 1) * batch)
        nxt = []
        for layer, (W, b) in enumerate(fused):
            c, h = _cell(W, b, inp, *s[layer])
            nxt.append((c, h))
            inp = h
        s = nxt
        states.append(s)
        tops.append(inp)
    hs = tops[0] if T == 1 else tn.concat(tops, axis=0)
    logits = project(p, hs)
    return states, tn.reshape(logits, (T, batch, logits.shape[1]))


def sequence_nll(p: LstmParams, x_ids, y_ids, s0: RnnState) -> tuple[Tensor, RnnState]:
    """Summed next-token NLL over a cut, plus the final state."""
    states, logits = unroll(p, x_ids, s0)
    T, batch, V = logits.shape
    targets = np.asarray(y_ids).T.reshape(-1)
    nll = tn.log_softmax_nll(tn.reshape(logits, (T * batch, V)), targets)
    return nll, states[-1]


def batch_logits(p: LstmParams, batch, s0: RnnState) -> tuple[Tensor, np.ndarray, RnnState]:
    """Time-major ``[L*batch x V]`` logits, matching flat targets, and final state.

    ``batch`` needs ``x`` (inputs), ``y`` (targets) and optionally ``initial``;
    when ``initial`` is set the first target of every row is predicted from
    ``s0`` before any input is consumed.
    """
    x = np.asarray(batch.x)
    y = np.asarray(batch.y)
    parts = []
    final = s0
    if getattr(batch, "initial", False):
        parts.append(project(p, s0[-1][1]))
    if x.shape[1] > 0:
        states, logits = unroll(p, x, s0)
        T, n, V = logits.shape
        parts.append(tn.reshape(logits, (T * n, V)))
        final = states[-1]
    if not parts:
        raise ContractError("empty batch")
    logits = parts[0] if len(parts) == 1 else tn.concat(parts, axis=0)
    return logits, y.T.reshape(-1), final


def batch_nll(p: LstmParams, batch, s0: RnnState) -> tuple[Tensor, RnnState]:
    logits, targets, final = batch_logits(p, batch, s0)
    return tn.log_softmax_nll(logits, targets), final


def init_means(cfg: LstmConfig, source, scale: float = 0.05,
               forget_bias: float = 1.0) -> dict[str, np.ndarray]:
    """Uniform(-scale, scale) weights, forget-gate biases at ``forget_bias``."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        arr = source.uniform(-scale, scale, shape)
        if name.endswith(".b_f"):
            arr = np.full(shape, forget_bias, dtype=arr.dtype)
        out[name] = arr
    return out
