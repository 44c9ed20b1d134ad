"""Recurrent refinement cell with a hidden feature state and a hidden spatial state.

Per landmark ``i`` and iteration ``t >= 2``::

    f, u = softmax(A_i(C_{t-1}), A_i(E_t ++ R_t))
    C_t  = f * C_{t-1} + u * (E_t ++ R_t)
    S_t  = f * S_{t-1} + u * x_t
    x_{t+1} = W_i C_t + S_t

with ``A_i(X) = sigmoid(p_i . tanh(P X))``.  At ``t = 1`` the state is set
directly: ``C_1 = E_1 ++ R_1`` and ``S_1 = x_1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class RefinementState:
    C: torch.Tensor  # (n, m + d)
    S: torch.Tensor  # (n, 3), original voxel coordinates
    x: torch.Tensor  # (n, 3), the prediction whose patch fed this state
    t: int
    forget: torch.Tensor | None = None  # (n,), None at t == 1
    update: torch.Tensor | None = None


class SALSTMCell(nn.Module):
    def __init__(self, n_landmarks, m=512, d=64, hidden=256, seed=None):
        super().__init__()
        self.n_landmarks = n_landmarks
        self.width = m + d
        self.proj = nn.Linear(self.width, hidden)
        self.relevance = nn.Parameter(torch.empty(n_landmarks, hidden))
        self.offset_weight = nn.Parameter(torch.empty(n_landmarks, 3, self.width))
        self.offset_bias = nn.Parameter(torch.zeros(n_landmarks, 3))
        self.reset_parameters(seed)

    def reset_parameters(self, seed=None):
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        with torch.no_grad():
            b = 1 / math.sqrt(self.width)
            self.proj.weight.uniform_(-b, b, generator=gen)
            self.proj.bias.zero_()
            b = 1 / math.sqrt(self.relevance.shape[1])
            self.relevance.uniform_(-b, b, generator=gen)
            b = 1 / math.sqrt(self.width)
            self.offset_weight.uniform_(-b, b, generator=gen)
            self.offset_bias.zero_()

    def attention_score(self, X, i=None):
        """Relevance in (0, 1). ``X`` is ``(n, width)``, or ``(width,)`` with landmark ``i``."""
        hidden = torch.tanh(self.proj(X))
        p = self.relevance if i is None else self.relevance[i]
        return torch.sigmoid((hidden * p).sum(-1))

    def compute_gates(self, C_prev, new_input, i=None):
        a = self.attention_score(C_prev, i)
        b = self.attention_score(new_input, i)
        w = torch.softmax(torch.stack([a, b], dim=-1), dim=-1)
        return w[..., 0], w[..., 1]

    def offset(self, C, i=None):
        if i is None:
            return torch.einsum("nkc,nc->nk", self.offset_weight, C) + self.offset_bias
        return self.offset_weight[i] @ C + self.offset_bias[i]

    def init_state(self, E, R, x1) -> RefinementState:
        C = torch.cat([E, R], dim=-1)
        return RefinementState(C=C, S=x1, x=x1, t=1)

    def predict(self, state: RefinementState, i=None):
        return self.offset(state.C, i) + state.S

    def step(self, state: RefinementState, E, R, x, i=None):
        """Gate in the embeddings of the patch cropped at ``x`` (= ``x_t``).

        Returns the new state and the next prediction ``x_{t+1}``.
        """
        if state is None:
            raise ValueError("refinement state is not initialised; call init_state first")
        new_input = torch.cat([E, R], dim=-1)
        f, u = self.compute_gates(state.C, new_input, i)
        # f = 1 - u; the interpolation form keeps S fixed bit-exactly when x == S
        C = state.C + u[..., None] * (new_input - state.C)
        S = state.S + u[..., None] * (x - state.S)
        new = RefinementState(C=C, S=S, x=x, t=state.t + 1, forget=f, update=u)
        return new, self.predict(new, i)
