import math

import numpy as np
import pytest

from brnn import tensor as tn
from brnn.errors import ContractError, DimensionError
from brnn.lstm import (GATES, LstmConfig, batch_logits, detach_state, init_means, lstm_step,
                       param_count, param_shapes, project, sequence_nll, unroll, zero_state)
from brnn.rng import RandomSource
from brnn.tensor import Tape, Tensor

from helpers import central_difference, relative_error


def _params(cfg, seed=0, scale=0.5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return {n: Tensor(rng.uniform(-scale, scale, s).astype(dtype)) for n, s in param_shapes(cfg).items()}


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_step(p, x, c_prev, h_prev):
    """Straight-line, one unit at a time evaluation of a single LSTM layer."""
    inp = list(x) + list(h_prev)
    H = len(h_prev)
    c, h = [0.0] * H, [0.0] * H
    for j in range(H):
        pre = {}
        for g in GATES:
            W, b = p[f"l0.W_{g}"].data, p[f"l0.b_{g}"].data
            pre[g] = b[j] + sum(inp[k] * W[k, j] for k in range(len(inp)))
        i, f, o = _sig(pre["i"]), _sig(pre["f"]), _sig(pre["o"])
        u = math.tanh(pre["c"])
        c[j] = f * c_prev[j] + i * u
        h[j] = o * math.tanh(c[j])
    return c, h


class TestShapes:
    def test_parameter_table(self):
        cfg = LstmConfig(vocab_size=7, embed_size=3, hidden_size=4, num_layers=2)
        shapes = param_shapes(cfg)
        assert shapes["embedding"] == (7, 3)
        assert {shapes[f"l0.W_{g}"] for g in GATES} == {(7, 4)}
        assert {shapes[f"l1.W_{g}"] for g in GATES} == {(8, 4)}
        assert shapes["out.W"] == (4, 7)
        expected = 7 * 3 + 4 * (7 * 4 + 4) + 4 * (8 * 4 + 4) + 4 * 7 + 7
        assert param_count(cfg) == expected

    def test_invalid_config(self):
        with pytest.raises(ContractError):
            LstmConfig(vocab_size=0)

    def test_init_means(self):
        cfg = LstmConfig(6, 3, 4)
        means = init_means(cfg, RandomSource(0))
        assert np.all(means["l0.b_f"] == 1.0)
        assert np.abs(means["l0.W_i"]).max() <= 0.05


class TestLstmStep:
    def test_zero_parameters(self):
        cfg = LstmConfig(3, 2, 3)
        p = {n: Tensor(np.zeros(s)) for n, s in param_shapes(cfg).items()}
        c0 = np.array([[0.4, -1.2, 2.0]], dtype=np.float32)
        s = [(Tensor(c0), Tensor(np.zeros((1, 3))))]
        (c1, h1), = lstm_step(p, Tensor(np.zeros((1, 2))), s)
        np.testing.assert_allclose(c1.data, 0.5 * c0, rtol=1e-6)
        np.testing.assert_allclose(h1.data, 0.5 * np.tanh(0.5 * c0), rtol=1e-6)

    def test_saturated_forget_gate_keeps_cell(self):
        cfg = LstmConfig(3, 2, 3)
        p = {n: Tensor(np.zeros(s)) for n, s in param_shapes(cfg).items()}
        p["l0.b_f"] = Tensor(np.full(3, 50.0))
        c0 = np.array([[0.4, -1.2, 2.0]], dtype=np.float32)
        (c1, _), = lstm_step(p, Tensor(np.ones((1, 2))), [(Tensor(c0), Tensor(np.zeros((1, 3))))])
        np.testing.assert_allclose(c1.data, c0, rtol=1e-6)

    def test_matches_scalar_loop(self):
        cfg = LstmConfig(5, 3, 4)
        with tn.precision(np.float64):
            p = _params(cfg, seed=3)
            rng = np.random.default_rng(4)
            x, c0, h0 = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
            (c1, h1), = lstm_step(p, Tensor(x[None]), [(Tensor(c0[None]), Tensor(h0[None]))])
        c_ref, h_ref = scalar_step(p, x, c0, h0)
        assert np.abs(c1.data[0] - c_ref).max() < 1e-6
        assert np.abs(h1.data[0] - h_ref).max() < 1e-6

    def test_state_mismatch(self):
        cfg = LstmConfig(5, 3, 4)
        p = _params(cfg)
        with pytest.raises(DimensionError):
            lstm_step(p, Tensor(np.zeros((2, 3))), zero_state(cfg, 1))


class TestUnroll:
    def test_single_step_equals_step_plus_projection(self):
        cfg = LstmConfig(5, 3, 4)
        p = _params(cfg, dtype=np.float32)
        s0 = zero_state(cfg, 2)
        ids = np.array([[1], [4]])
        states, logits = unroll(p, ids, s0)
        x = tn.take_rows(p["embedding"], ids[:, 0])
        s1 = lstm_step(p, x, s0)
        np.testing.assert_allclose(states[0][0][1].data, s1[0][1].data, rtol=1e-6)
        np.testing.assert_allclose(logits.data[0], project(p, s1[0][1]).data, rtol=1e-5, atol=1e-6)

    def test_empty_sequence(self):
        cfg = LstmConfig(5, 3, 4)
        with pytest.raises(ContractError):
            unroll(_params(cfg), np.zeros((1, 0), dtype=int), zero_state(cfg, 1))

    def test_order_sensitive(self):
        cfg = LstmConfig(6, 3, 4)
        p = _params(cfg, seed=1)
        ids = np.array([[0, 1, 2, 3, 5]])
        fwd, _ = unroll(p, ids, zero_state(cfg, 1))
        rev, _ = unroll(p, ids[:, ::-1], zero_state(cfg, 1))
        assert not np.allclose(fwd[-1][0][1].data, rev[-1][0][1].data)

    def test_state_carryover(self):
        cfg = LstmConfig(6, 3, 4, num_layers=2)
        p = _params(cfg, seed=2, dtype=np.float32)
        ids = np.random.default_rng(0).integers(0, 6, (2, 8))
        full, _ = unroll(p, ids, zero_state(cfg, 2))
        first, _ = unroll(p, ids[:, :4], zero_state(cfg, 2))
        second, _ = unroll(p, ids[:, 4:], first[-1])
        for (c1, h1), (c2, h2) in zip(full[-1], second[-1]):
            np.testing.assert_array_equal(c1.data, c2.data)
            np.testing.assert_array_equal(h1.data, h2.data)

    def test_cell_bound(self):
        cfg = LstmConfig(6, 3, 5)
        p = _params(cfg, seed=5, scale=3.0, dtype=np.float32)
        c0 = np.full((1, 5), 2.0, dtype=np.float32)
        s0 = [(Tensor(c0), Tensor(np.zeros((1, 5))))]
        T = 20
        states, _ = unroll(p, np.random.default_rng(1).integers(0, 6, (1, T)), s0)
        for t, ((c, _),) in enumerate(states, 1):
            assert np.abs(c.data).max() <= 2.0 + t + 1e-5

    def test_gradient_wrt_forget_weights(self):
        cfg = LstmConfig(4, 2, 3)
        ids = np.array([[0, 3, 1]])
        with tn.precision(np.float64):
            p = _params(cfg, seed=7)

            def loss_at(w):
                q = dict(p)
                q["l0.W_f"] = Tensor(w)
                with tn.no_grad():
                    _, logits = unroll(q, ids, zero_state(cfg, 1))
                    return float(tn.sum_all(logits).data)

            leaf = Tensor(p["l0.W_f"].data, requires_grad=True)
            q = dict(p)
            q["l0.W_f"] = leaf
            with Tape() as tape:
                _, logits = unroll(q, ids, zero_state(cfg, 1))
                total = tn.sum_all(logits)
            (g,) = tape.gradient(total, [leaf])
            (expected,) = central_difference(loss_at, [p["l0.W_f"].data])
        assert relative_error(g.data, expected) < 1e-3

    def test_gradient_is_sum_of_per_step_contributions(self):
        """Unroll gradient = sum over steps of gradients with the incoming state detached."""
        cfg = LstmConfig(4, 2, 3)
        ids = np.array([[0, 3, 1, 2]])
        targets = np.array([[3, 1, 2, 0]])
        with tn.precision(np.float64):
            p = _params(cfg, seed=8)
            leaves = {n: Tensor(v.data, requires_grad=True) for n, v in p.items()}
            with Tape() as tape:
                nll, _ = sequence_nll(leaves, ids, targets, zero_state(cfg, 1))
            full = tape.gradient(nll, [leaves["l0.W_i"]])[0].data

            # each per-step term sees the weights through exactly one step
            total = np.zeros_like(full)
            states, _ = unroll(p, ids, zero_state(cfg, 1))
            prev = zero_state(cfg, 1)
            for t in range(ids.shape[1]):
                w = Tensor(p["l0.W_i"].data, requires_grad=True)
                q = dict(p)
                q["l0.W_i"] = w
                # the step-t cell uses w; earlier steps are frozen into `prev`
                with Tape() as tape:
                    x = tn.take_rows(q["embedding"], ids[:, t])
                    s = lstm_step(q, x, prev)
                    rest = ids[:, t + 1:]
                    logits_t = project(q, s[0][1])
                    loss = tn.log_softmax_nll(logits_t, targets[:, t])
                    if rest.shape[1]:
                        fixed = {n: Tensor(v.data) for n, v in p.items()}
                        # later steps use frozen weights but a differentiable state
                        s_t = s
                        for k in range(rest.shape[1]):
                            xk = tn.take_rows(fixed["embedding"], rest[:, k])
                            s_t = lstm_step(fixed, xk, s_t)
                            loss = loss + tn.log_softmax_nll(project(fixed, s_t[0][1]),
                                                             targets[:, t + 1 + k])
                total += tape.gradient(loss, [w])[0].data
                prev = detach_state(states[t])
        np.testing.assert_allclose(total, full, rtol=1e-9, atol=1e-12)


class TestBatchLogits:
    def test_initial_prediction_uses_initial_state(self):
        cfg = LstmConfig(5, 3, 4)
        p = _params(cfg, dtype=np.float32)

        class Seg:
            x = np.array([[2, 3]])
            y = np.array([[2, 3, 4]])
            initial = True

        s0 = zero_state(cfg, 1)
        logits, targets, _ = batch_logits(p, Seg, s0)
        assert logits.shape == (3, 5)
        np.testing.assert_array_equal(targets, [2, 3, 4])
        np.testing.assert_allclose(logits.data[0], project(p, s0[0][1]).data[0], rtol=1e-6)
