import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from salm.cell import SALSTMCell

N, M, D = 3, 16, 8
W = M + D


def _cell(seed=0):
    return SALSTMCell(N, m=M, d=D, hidden=12, seed=seed).double()


def _inputs(seed, n=N):
    g = torch.Generator().manual_seed(seed)
    E = torch.randn(n, M, generator=g, dtype=torch.float64)
    R = torch.randn(n, D, generator=g, dtype=torch.float64)
    x = 50 * torch.rand(n, 3, generator=g, dtype=torch.float64)
    return E, R, x


def test_zero_relevance_scores_half():
    cell = _cell()
    with torch.no_grad():
        cell.relevance.zero_()
    X = torch.randn(N, W, dtype=torch.float64)
    torch.testing.assert_close(cell.attention_score(X), torch.full((N,), 0.5, dtype=torch.float64))


def test_zero_input_scores_half():
    cell = _cell()
    assert cell.attention_score(torch.zeros(N, W, dtype=torch.float64)).tolist() == [0.5] * N


def test_score_closed_form_per_landmark():
    cell = _cell(1)
    X = torch.randn(W, dtype=torch.float64)
    for i in range(N):
        want = torch.sigmoid(cell.relevance[i] @ torch.tanh(cell.proj.weight @ X + cell.proj.bias))
        torch.testing.assert_close(cell.attention_score(X, i), want)


def test_gates_closed_form():
    cell = _cell()
    a_minus_b = math.log(3)
    # drive the two scores through a fake scorer to hit a - b = ln 3 exactly
    scores = iter([torch.tensor([a_minus_b], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)])
    cell.attention_score = lambda X, i=None: next(scores)
    f, u = cell.compute_gates(None, None)
    assert f.item() == pytest.approx(0.75, abs=1e-12)
    assert u.item() == pytest.approx(0.25, abs=1e-12)
    C = torch.randn(N, W, dtype=torch.float64)
    f, u = _cell().compute_gates(C, C)
    assert f.tolist() == [0.5] * N and u.tolist() == [0.5] * N


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.1, 50))
def test_gates_normalised(seed, scale):
    cell = _cell(seed % 7)
    g = torch.Generator().manual_seed(seed)
    a = scale * torch.randn(N, W, generator=g, dtype=torch.float64)
    b = scale * torch.randn(N, W, generator=g, dtype=torch.float64)
    f, u = cell.compute_gates(a, b)
    assert torch.all((f > 0) & (f < 1) & (u > 0) & (u < 1))
    assert torch.all((f + u - 1).abs() < 1e-9)


def test_init_state_and_first_prediction():
    cell = _cell()
    E, R, x1 = _inputs(0)
    s = cell.init_state(E, R, x1)
    assert s.t == 1 and s.C.shape == (N, W)
    assert torch.equal(s.S, x1)
    assert s.forget is None
    want = torch.stack([cell.offset_weight[i] @ s.C[i] + cell.offset_bias[i] for i in range(N)]) + x1
    torch.testing.assert_close(cell.predict(s), want)
    for i in range(N):
        torch.testing.assert_close(cell.offset(s.C[i], i) + s.S[i], want[i])


def test_step_requires_state():
    E, R, x = _inputs(0)
    with pytest.raises(ValueError):
        _cell().step(None, E, R, x)


def test_step_matches_hand_update():
    cell = _cell(2)
    E1, R1, x1 = _inputs(1)
    s1 = cell.init_state(E1, R1, x1)
    x2 = cell.predict(s1)
    E2, R2, _ = _inputs(2)
    s2, x3 = cell.step(s1, E2, R2, x2)
    new = torch.cat([E2, R2], 1)
    a = cell.attention_score(s1.C)
    b = cell.attention_score(new)
    f = torch.exp(a) / (torch.exp(a) + torch.exp(b))
    torch.testing.assert_close(s2.forget, f)
    torch.testing.assert_close(s2.C, f[:, None] * s1.C + (1 - f)[:, None] * new)
    torch.testing.assert_close(s2.S, f[:, None] * x1 + (1 - f)[:, None] * x2)
    torch.testing.assert_close(x3, cell.offset(s2.C) + s2.S)


def _unroll(cell, T, seed):
    E, R, x = _inputs(seed)
    state = cell.init_state(E, R, x)
    xs = [x, cell.predict(state)]
    states = [state]
    for t in range(1, T):
        E, R, _ = _inputs(seed + 100 * t)
        state, nxt = cell.step(state, E, R, xs[-1])
        states.append(state)
        xs.append(nxt)
    return xs, states


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(2, 5))
def test_spatial_state_is_convex_combination(seed, T):
    cell = _cell(seed % 5)
    xs, states = _unroll(cell, T, seed)
    weights = torch.ones(N, 1, dtype=torch.float64)
    for t in range(1, T):
        f, u = states[t].forget, states[t].update
        weights = torch.cat([f[:, None] * weights, u[:, None]], 1)
        recon = torch.einsum("nk,knc->nc", weights, torch.stack(xs[: t + 1]))
        torch.testing.assert_close(recon, states[t].S, rtol=0, atol=1e-9)
        assert torch.all(weights >= 0)
        torch.testing.assert_close(weights.sum(1), torch.ones(N, dtype=torch.float64), rtol=0, atol=1e-12)


def test_three_step_unrolled_oracle():
    cell = _cell(3)
    xs, states = _unroll(cell, 3, 11)
    f2, u2 = states[1].forget, states[1].update
    f3, u3 = states[2].forget, states[2].update
    want = f3[:, None] * (f2[:, None] * xs[0] + u2[:, None] * xs[1]) + u3[:, None] * xs[2]
    torch.testing.assert_close(states[2].S, want, rtol=0, atol=1e-9)


@pytest.mark.parametrize("T", [1, 2, 3, 6])
def test_zero_offset_fixed_point(T):
    cell = _cell(4)
    with torch.no_grad():
        cell.offset_weight.zero_()
        cell.offset_bias.zero_()
    xs, _ = _unroll(cell, T, 5)
    for x in xs[1:]:
        assert torch.equal(x, xs[0])


def test_gate_extremes_preserve_state():
    cell = _cell()
    E, R, x = _inputs(0)
    s1 = cell.init_state(E, R, x)
    scores = iter([torch.full((N,), 40.0, dtype=torch.float64), torch.full((N,), -40.0, dtype=torch.float64)])
    cell.attention_score = lambda X, i=None: next(scores)
    s2, _ = cell.step(s1, E + 1, R + 1, x + 7)
    torch.testing.assert_close(s2.C, s1.C, rtol=0, atol=1e-30)
    torch.testing.assert_close(s2.S, s1.S, rtol=0, atol=1e-30)
    assert torch.all(s2.update > 0)
