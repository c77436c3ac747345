"""Diversity transforms applied to the document context before decoding.

Every mechanism maps the raw context ``d_t`` of the current decoder step to
the context ``d'_t`` the decoder actually consumes, carrying a small
recurrent :class:`DiversityState` from step to step.

* D1 / SD1: subtract (all of / a gated fraction of) the projection of
  ``d_t`` onto the previous ``d'_{t-1}``.
* D2 / SD2: run the contexts through an LSTM whose new cell is
  orthogonalised (fully / gated) against the previous cell; ``d'_t`` is
  the LSTM output.
* B1: the same LSTM without any projection.
* M1: ``tanh(w_c * d_t - u_c * sum of previous d')`` with diagonal weights.
* M2: M1 plus attention energies penalised by accumulated attention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .tensor import Graph, Tensor, constant, parameter


class DiversityMode(str, Enum):
    NONE = "NONE"
    D1 = "D1"
    SD1 = "SD1"
    D2 = "D2"
    SD2 = "SD2"
    B1 = "B1"
    M1 = "M1"
    M2 = "M2"

    @classmethod
    def parse(cls, name: str) -> "DiversityMode":
        try:
            return cls(name.upper())
        except ValueError:
            raise ValueError(f"unknown diversity mode {name!r}; choose from {[m.value for m in cls]}") from None


LSTM_MODES = (DiversityMode.D2, DiversityMode.SD2, DiversityMode.B1)


@dataclass(frozen=True)
class DiversityState:
    prev_context: Tensor | None = None   # d'_{t-1}  (D1, SD1)
    prev_raw: Tensor | None = None       # d_{t-1}   (SD1 gate input)
    cell: Tensor | None = None           # cell history fed to the next step (D2, SD2, B1)
    hidden: Tensor | None = None         # h_{t-1}   (D2, SD2, B1)
    diverse_cell: Tensor | None = None   # last diversified cell, for inspection
    context_sum: Tensor | None = None    # sum of previous d'  (M1, M2)
    attention_sum: Tensor | None = None  # sum of previous attention weights (M2)


def initial_state(mode: DiversityMode, l4: int, n_positions: int = 0) -> DiversityState:
    zero = constant(np.zeros(l4))
    if mode in (DiversityMode.D1, DiversityMode.SD1):
        return DiversityState(prev_context=zero, prev_raw=zero)
    if mode in LSTM_MODES:
        return DiversityState(cell=zero, hidden=zero)
    if mode is DiversityMode.M1:
        return DiversityState(context_sum=zero)
    if mode is DiversityMode.M2:
        return DiversityState(context_sum=zero, attention_sum=constant(np.zeros(n_positions)))
    return DiversityState()


def init_params(mode: DiversityMode, l1: int, l4: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters for ``mode``, keyed ``div.<symbol>``."""
    b = 1.0 / np.sqrt(l4)

    def mat(name, rows, cols):
        return parameter(rng.uniform(-b, b, (rows, cols)), f"div.{name}")

    def vec(name, value):
        return parameter(np.full(l4, value, dtype=float), f"div.{name}")

    out: dict[str, Tensor] = {}
    if mode is DiversityMode.SD1:
        out["div.W_g"] = mat("W_g", l4, l4)
        out["div.b_g"] = vec("b_g", 1.0)  # start close to the hard D1 projection
    elif mode in LSTM_MODES:
        for gate in "ifoc":
            out[f"div.W_{gate}"] = mat(f"W_{gate}", l4, l4)
            out[f"div.U_{gate}"] = mat(f"U_{gate}", l4, l4)
            out[f"div.b_{gate}"] = vec(f"b_{gate}", 0.0)
        if mode is DiversityMode.SD2:
            out["div.W_g"] = mat("W_g", l4, l4)
            out["div.U_g"] = mat("U_g", l4, l4)
            out["div.b_g"] = vec("b_g", 0.0)
    elif mode in (DiversityMode.M1, DiversityMode.M2):
        out["div.w_c"] = vec("w_c", 1.0)
        out["div.u_c"] = vec("u_c", 1.0)
        if mode is DiversityMode.M2:
            a = 1.0 / np.sqrt(l1)
            out["div.W_a"] = parameter(rng.uniform(-a, a, (l1, l1)), "div.W_a")
            out["div.U_a"] = parameter(rng.uniform(-a, a, (l1, l4)), "div.U_a")
            out["div.b_a"] = parameter(rng.uniform(-a, a, l1), "div.b_a")
            out["div.v_a"] = parameter(rng.uniform(-a, a, l1), "div.v_a")
    return out


def d1_step(g: Graph, d_t: Tensor, state: DiversityState) -> tuple[Tensor, DiversityState]:
    d_new = g.project_out(d_t, state.prev_context)
    return d_new, replace(state, prev_context=d_new, prev_raw=d_t)


def sd1_step(g: Graph, p: dict[str, Tensor], d_t: Tensor, state: DiversityState,
             squash: bool = False) -> tuple[Tensor, DiversityState]:
    """Gated D1 with ``gamma_t = W_g d_{t-1} + b_g`` (or its sigmoid when ``squash``)."""
    gamma = g.add(g.matvec(p["div.W_g"], state.prev_raw), p["div.b_g"])
    if squash:
        gamma = g.sigmoid(gamma)
    d_new = g.project_out(d_t, state.prev_context, gamma)
    return d_new, replace(state, prev_context=d_new, prev_raw=d_t)


def _lstm(g: Graph, p: dict[str, Tensor], d_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    def pre(gate):
        return g.add(g.add(g.matvec(p[f"div.W_{gate}"], d_t), g.matvec(p[f"div.U_{gate}"], h_prev)),
                     p[f"div.b_{gate}"])

    i = g.sigmoid(pre("i"))
    f = g.sigmoid(pre("f"))
    o = g.sigmoid(pre("o"))
    c_hat = g.tanh(pre("c"))
    c = g.add(g.mul(i, c_hat), g.mul(f, c_prev))
    return c, o


def _finish(g: Graph, state: DiversityState, c: Tensor, c_div: Tensor, o: Tensor,
            store_raw: bool) -> tuple[Tensor, DiversityState]:
    h = g.mul(o, g.tanh(c_div))
    return h, replace(state, cell=c if store_raw else c_div, hidden=h, diverse_cell=c_div)


def d2_cell_step(g: Graph, p: dict[str, Tensor], d_t: Tensor, state: DiversityState,
                 store_raw: bool = False) -> tuple[Tensor, DiversityState]:
    c, o = _lstm(g, p, d_t, state.hidden, state.cell)
    return _finish(g, state, c, g.project_out(c, state.cell), o, store_raw)


def sd2_cell_step(g: Graph, p: dict[str, Tensor], d_t: Tensor, state: DiversityState,
                  store_raw: bool = False) -> tuple[Tensor, DiversityState]:
    c, o = _lstm(g, p, d_t, state.hidden, state.cell)
    gate = g.sigmoid(g.add(g.add(g.matvec(p["div.W_g"], d_t), g.matvec(p["div.U_g"], state.hidden)),
                           p["div.b_g"]))
    return _finish(g, state, c, g.project_out(c, state.cell, gate), o, store_raw)


def b1_cell_step(g: Graph, p: dict[str, Tensor], d_t: Tensor, state: DiversityState) -> tuple[Tensor, DiversityState]:
    c, o = _lstm(g, p, d_t, state.hidden, state.cell)
    return _finish(g, state, c, c, o, store_raw=False)


def m1_step(g: Graph, p: dict[str, Tensor], d_t: Tensor, state: DiversityState) -> tuple[Tensor, DiversityState]:
    d_new = g.tanh(g.sub(g.mul(p["div.w_c"], d_t), g.mul(p["div.u_c"], state.context_sum)))
    return d_new, replace(state, context_sum=g.add(state.context_sum, d_new))


def m2_attention(g: Graph, p: dict[str, Tensor], s_t: Tensor, Hd: Tensor, state: DiversityState,
                 keys: Tensor | None = None, mask: np.ndarray | None = None):
    """Distraction attention: energies ``v_a . tanh(W_a s_t + U_a h_i - b_a * A_i)``.

    ``A_i`` is the attention already paid to position ``i``.  Returns
    ``(weights, raw context, transformed context, new state)``; the raw context
    goes through :func:`m1_step`.
    """
    if keys is None:
        keys = g.matmul_t(Hd, p["div.U_a"])
    pre = g.sub(keys, g.outer(state.attention_sum, p["div.b_a"]))
    energies = g.matvec(g.tanh(g.add_rowvec(pre, g.matvec(p["div.W_a"], s_t))), p["div.v_a"])
    alpha = g.softmax(energies, mask)
    d_t = g.vecmat(alpha, Hd)
    d_new, state = m1_step(g, p, d_t, state)
    return alpha, d_t, d_new, replace(state, attention_sum=g.add(state.attention_sum, alpha))


def apply(g: Graph, mode: DiversityMode, p: dict[str, Tensor], d_t: Tensor, state: DiversityState, *,
          sd1_squash: bool = False, store_raw_cell: bool = False) -> tuple[Tensor, DiversityState]:
    """Dispatch one step of every mode except M2, which replaces the attention itself."""
    if mode is DiversityMode.NONE:
        return d_t, state
    if mode is DiversityMode.D1:
        return d1_step(g, d_t, state)
    if mode is DiversityMode.SD1:
        return sd1_step(g, p, d_t, state, squash=sd1_squash)
    if mode is DiversityMode.D2:
        return d2_cell_step(g, p, d_t, state, store_raw=store_raw_cell)
    if mode is DiversityMode.SD2:
        return sd2_cell_step(g, p, d_t, state, store_raw=store_raw_cell)
    if mode is DiversityMode.B1:
        return b1_cell_step(g, p, d_t, state)
    if mode is DiversityMode.M1:
        return m1_step(g, p, d_t, state)
    raise ValueError("M2 is applied through m2_attention")
