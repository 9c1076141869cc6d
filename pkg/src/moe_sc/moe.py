"""Sparse mixture-of-experts feed-forward block with a top-K softmax gate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ACTIVATIONS, Linear, Module
from .tensor import Tensor


@dataclass
class GateDecision:
    """Routing for a batch of rows.

    ``weights`` is (rows, M): softmax over the selected logits, exact zeros
    elsewhere.  ``selected`` is (rows, K), best expert first.
    """

    weights: Tensor
    selected: np.ndarray


def select_top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def top_k_gate(x: Tensor, w_gate: Tensor | None, k: int) -> GateDecision:
    """Gate rows of ``x`` (rows, D) over M experts, keeping the K best.

    With no gate matrix (single expert) every row goes to expert 0 with
    weight one.
    """
    if w_gate is None:
        n = x.shape[0]
        return GateDecision(T.Tensor(np.ones((n, 1), dtype=x.dtype)), np.zeros((n, 1), dtype=np.int64))
    m = w_gate.shape[1]
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= K <= M, got K={k}, M={m}")
    logits = x @ w_gate
    selected = select_top_k(logits.data, k)
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, selected, True, axis=-1)
    return GateDecision(T.softmax(logits, axis=-1, mask=keep), selected)


class ExpertFFN(Module):
    """D -> d_ff -> D with an activation between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, activation: str = "gelu",
                 dtype=T.DEFAULT_DTYPE):
        self.w_in = Linear(d_model, d_ff, rng, dtype=dtype)
        self.w_out = Linear(d_ff, d_model, rng, dtype=dtype)
        self._act = ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.w_out(self._act(self.w_in(x)))


class MoEFeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, n_experts: int, top_k: int,
                 rng: np.random.Generator, activation: str = "gelu", dtype=T.DEFAULT_DTYPE):
        if n_experts > 1 and not 1 <= top_k <= n_experts:
            raise ValueError(f"need 1 <= K <= M, got K={top_k}, M={n_experts}")
        self.top_k = 1 if n_experts == 1 else top_k
        self.experts = [ExpertFFN(d_model, d_ff, rng, activation, dtype) for _ in range(n_experts)]
        self.w_gate = (T.parameter((rng.standard_normal((d_model, n_experts)) / np.sqrt(d_model)).astype(dtype))
                       if n_experts > 1 else None)
        self.last_gate: GateDecision | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return moe_ffn(x, self.experts, self.w_gate, self.top_k, self)


def moe_ffn(x: Tensor, experts: list[ExpertFFN], w_gate: Tensor | None, k: int,
            owner: MoEFeedForward | None = None) -> Tensor:
    """Per row: sum over the selected experts of gate weight times expert output.

    Only routed rows are pushed through each expert; results are scattered
    back into place, so unselected experts cost nothing.
    """
    lead = x.shape[:-1]
    d = x.shape[-1]
    rows = x.reshape(-1, d)
    n = rows.shape[0]
    gate = top_k_gate(rows, w_gate, k)
    if owner is not None:
        owner.last_gate = gate
    if len(experts) == 1:
        return experts[0](x)
    pieces, where = [], []
    for i, expert in enumerate(experts):
        idx = np.nonzero((gate.selected == i).any(axis=-1))[0]
        if idx.size == 0:
            continue
        y = expert(T.gather_rows(rows, idx))
        pieces.append(y * _rows_of(gate.weights, idx, i))
        where.append(idx)
    out = T.scatter_rows(T.concat(pieces, axis=0), np.concatenate(where), n)
    return out.reshape(lead + (d,))


def _rows_of(weights: Tensor, idx: np.ndarray, col: int) -> Tensor:
    """weights[idx, col] as an (len(idx), 1) tensor."""
    sub = T.gather_rows(weights, idx)
    return T.take_along(sub, np.full((idx.size, 1), col), axis=-1)
