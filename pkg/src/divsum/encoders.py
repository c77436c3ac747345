"""GRU cells and the left-to-right query/document encoders."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import Graph, Tensor, constant, parameter


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def __post_init__(self):
        hidden, inp = self.W_z.shape
        for f in fields(self):
            t = getattr(self, f.name)
            expect = {"W": (hidden, inp), "U": (hidden, hidden), "b": (hidden,)}[f.name[0]]
            if t.shape != expect:
                raise ValueError(f"GRU {f.name}: shape {t.shape}, expected {expect}")

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, prefix: str, params: dict[str, Tensor]) -> "GruParams":
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator, prefix: str = "gru") -> "GruParams":
        bound = 1.0 / np.sqrt(hidden)
        vals = {}
        for f in fields(cls):
            if f.name[0] == "b":
                data = np.zeros(hidden)
            else:
                cols = input_dim if f.name[0] == "W" else hidden
                data = rng.uniform(-bound, bound, size=(hidden, cols))
            vals[f.name] = parameter(data, name=f"{prefix}.{f.name}")
        return cls(**vals)


@dataclass
class EncoderOutput:
    states: list[Tensor]
    matrix: Tensor  # states stacked as rows, L x hidden

    @property
    def final(self) -> Tensor:
        return self.states[-1]


def _cell(g: Graph, p: GruParams, h_prev: Tensor, xz: Tensor, xr: Tensor, xh: Tensor) -> Tensor:
    # xz/xr/xh already hold W x + b for the three gates
    z = g.sigmoid(g.add(xz, g.matvec(p.U_z, h_prev)))
    r = g.sigmoid(g.add(xr, g.matvec(p.U_r, h_prev)))
    cand = g.tanh(g.add(xh, g.matvec(p.U_h, g.mul(r, h_prev))))
    return g.add(g.mul(g.one_minus(z), h_prev), g.mul(z, cand))


def gru_step(g: Graph, p: GruParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU update: ``h = (1 - z) * h_prev + z * tanh(W_h x + U_h (r * h_prev) + b_h)``."""
    if x.shape != (p.input_dim,) or h_prev.shape != (p.hidden,):
        raise ValueError(
            f"gru_step: input {x.shape} / state {h_prev.shape} do not fit "
            f"GRU({p.input_dim} -> {p.hidden})"
        )
    xz = g.add(g.matvec(p.W_z, x), p.b_z)
    xr = g.add(g.matvec(p.W_r, x), p.b_r)
    xh = g.add(g.matvec(p.W_h, x), p.b_h)
    return _cell(g, p, h_prev, xz, xr, xh)


def encode(g: Graph, p: GruParams, inputs: Tensor) -> EncoderOutput:
    """Run the GRU over the rows of ``inputs`` starting from a zero state."""
    if inputs.data.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError(f"encode: need a non-empty L x d input, got {inputs.shape}")
    if inputs.shape[1] != p.input_dim:
        raise ValueError(f"encode: input width {inputs.shape[1]} != GRU input {p.input_dim}")
    # input projections for every position at once
    XZ = g.add_rowvec(g.matmul_t(inputs, p.W_z), p.b_z)
    XR = g.add_rowvec(g.matmul_t(inputs, p.W_r), p.b_r)
    XH = g.add_rowvec(g.matmul_t(inputs, p.W_h), p.b_h)
    h = constant(np.zeros(p.hidden))
    states = []
    for i in range(inputs.shape[0]):
        h = _cell(g, p, h, g.row(XZ, i), g.row(XR, i), g.row(XH, i))
        states.append(h)
    return EncoderOutput(states, g.stack(states))
