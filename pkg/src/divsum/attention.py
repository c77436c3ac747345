"""Query attention and query-conditioned document attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Graph, Tensor, parameter


@dataclass
class QueryAttnParams:
    W_q: Tensor  # l2 x l1
    U_q: Tensor  # l2 x l2
    v_q: Tensor  # l2

    def __post_init__(self):
        l2, l1 = self.W_q.shape
        if self.U_q.shape != (l2, l2) or self.v_q.shape != (l2,):
            raise ValueError("query attention parameter shapes are inconsistent")

    def named(self) -> dict[str, Tensor]:
        return {"att_q.W_q": self.W_q, "att_q.U_q": self.U_q, "att_q.v_q": self.v_q}

    @classmethod
    def from_named(cls, params: dict[str, Tensor]) -> "QueryAttnParams":
        return cls(params["att_q.W_q"], params["att_q.U_q"], params["att_q.v_q"])

    @classmethod
    def init(cls, l1: int, l2: int, rng: np.random.Generator) -> "QueryAttnParams":
        b = 1.0 / np.sqrt(l2)
        return cls(
            parameter(rng.uniform(-b, b, (l2, l1)), "att_q.W_q"),
            parameter(rng.uniform(-b, b, (l2, l2)), "att_q.U_q"),
            parameter(rng.uniform(-b, b, l2), "att_q.v_q"),
        )


@dataclass
class DocAttnParams:
    W_d: Tensor  # l4 x l1
    U_d: Tensor  # l4 x l4
    v_d: Tensor  # l4
    Z: Tensor | None = None  # l4 x l2, absent when there is no query path

    def __post_init__(self):
        l4, l1 = self.W_d.shape
        if self.U_d.shape != (l4, l4) or self.v_d.shape != (l4,):
            raise ValueError("document attention parameter shapes are inconsistent")
        if self.Z is not None and self.Z.shape[0] != l4:
            raise ValueError(f"Z has {self.Z.shape[0]} rows, expected {l4}")

    def named(self) -> dict[str, Tensor]:
        out = {"att_d.W_d": self.W_d, "att_d.U_d": self.U_d, "att_d.v_d": self.v_d}
        if self.Z is not None:
            out["att_d.Z"] = self.Z
        return out

    @classmethod
    def from_named(cls, params: dict[str, Tensor]) -> "DocAttnParams":
        return cls(params["att_d.W_d"], params["att_d.U_d"], params["att_d.v_d"], params.get("att_d.Z"))

    @classmethod
    def init(cls, l1: int, l4: int, l2: int | None, rng: np.random.Generator) -> "DocAttnParams":
        b = 1.0 / np.sqrt(l4)
        Z = None if l2 is None else parameter(rng.uniform(-b, b, (l4, l2)), "att_d.Z")
        return cls(
            parameter(rng.uniform(-b, b, (l4, l1)), "att_d.W_d"),
            parameter(rng.uniform(-b, b, (l4, l4)), "att_d.U_d"),
            parameter(rng.uniform(-b, b, l4), "att_d.v_d"),
            Z,
        )


@dataclass
class AttentionResult:
    weights: Tensor
    context: Tensor


def project_keys(g: Graph, U: Tensor, states: Tensor) -> Tensor:
    """``U h_i`` for every encoder state, computed once per sequence."""
    return g.matmul_t(states, U)


def _attend(g: Graph, query_term: Tensor, keys: Tensor, v: Tensor, states: Tensor,
            mask: np.ndarray | None) -> AttentionResult:
    energies = g.matvec(g.tanh(g.add_rowvec(keys, query_term)), v)
    alpha = g.softmax(energies, mask)
    return AttentionResult(alpha, g.vecmat(alpha, states))


def query_attention(g: Graph, p: QueryAttnParams, s_t: Tensor, Hq: Tensor,
                    keys: Tensor | None = None, mask: np.ndarray | None = None) -> AttentionResult:
    """Weights over query positions from ``v_q . tanh(W_q s_t + U_q h_i)``; context is their weighted sum."""
    if Hq.data.ndim != 2 or Hq.shape[0] == 0:
        raise ValueError("query_attention: no query states")
    if keys is None:
        keys = project_keys(g, p.U_q, Hq)
    return _attend(g, g.matvec(p.W_q, s_t), keys, p.v_q, Hq, mask)


def document_attention(g: Graph, p: DocAttnParams, s_t: Tensor, Hd: Tensor, q_t: Tensor | None = None,
                       keys: Tensor | None = None, mask: np.ndarray | None = None) -> AttentionResult:
    """Like query attention, with the current query summary ``Z q_t`` added to every energy."""
    if Hd.data.ndim != 2 or Hd.shape[0] == 0:
        raise ValueError("document_attention: no document states")
    if keys is None:
        keys = project_keys(g, p.U_d, Hd)
    term = g.matvec(p.W_d, s_t)
    if p.Z is not None:
        if q_t is None:
            raise ValueError("document_attention: Z is set but no query context was given")
        term = g.add(term, g.matvec(p.Z, q_t))
    return _attend(g, term, keys, p.v_d, Hd, mask)
