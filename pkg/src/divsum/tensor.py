"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Graph` records every differentiable operation applied to tensors
that require gradients.  :func:`backward` walks the recorded nodes in
reverse insertion order and accumulates ``grad`` arrays on every tensor that
asked for one.  One graph is built per training example and thrown away.

Only the handful of operations the summarizer needs are provided; there is
no general broadcasting.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np

# Squared-norm threshold below which project_out leaves its input untouched.
PROJECTION_EPS = 1e-12


class Tensor:
    """A dense array of 64-bit reals plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Node(NamedTuple):
    tag: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _check_vector(name: str, t: Tensor) -> None:
    if t.data.ndim != 1:
        raise ValueError(f"{name}: expected a vector, got shape {t.shape}")


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Graph:
    """Append-only record of operations; also the namespace of all ops.

    With ``record=False`` the graph evaluates forward values only, which is
    what decoding and finite-difference probes want.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _emit(self, tag, inputs, value, vjp) -> Tensor:
        needs = self.record and any([t.requires_grad for t in inputs])
        out = Tensor(value, requires_grad=needs)
        if needs:
            self.nodes.append(Node(tag, tuple(inputs), out, vjp))
        return out

    # -- linear algebra ---------------------------------------------------

    def matvec(self, M: Tensor, v: Tensor) -> Tensor:
        if M.data.ndim != 2 or v.data.ndim != 1 or M.shape[1] != v.shape[0]:
            raise ValueError(f"matvec: cannot multiply {M.shape} by {v.shape}")
        m, x = M.data, v.data
        return self._emit("matvec", (M, v), m @ x, lambda g: (np.outer(g, x), m.T @ g))

    def vecmat(self, v: Tensor, M: Tensor) -> Tensor:
        """``v @ M``: a weighted sum of the rows of ``M``."""
        if M.data.ndim != 2 or v.data.ndim != 1 or M.shape[0] != v.shape[0]:
            raise ValueError(f"vecmat: cannot multiply {v.shape} by {M.shape}")
        m, x = M.data, v.data
        return self._emit("vecmat", (v, M), x @ m, lambda g: (m @ g, np.outer(x, g)))

    def matmul_t(self, A: Tensor, B: Tensor) -> Tensor:
        """``A @ B.T`` for 2-D operands."""
        if A.data.ndim != 2 or B.data.ndim != 2 or A.shape[1] != B.shape[1]:
            raise ValueError(f"matmul_t: cannot multiply {A.shape} by {B.shape}^T")
        a, b = A.data, B.data
        return self._emit("matmul_t", (A, B), a @ b.T, lambda g: (g @ b, g.T @ a))

    def add_rowvec(self, M: Tensor, v: Tensor) -> Tensor:
        """Add ``v`` to every row of ``M``."""
        if M.data.ndim != 2 or v.data.ndim != 1 or M.shape[1] != v.shape[0]:
            raise ValueError(f"add_rowvec: cannot add {v.shape} to rows of {M.shape}")
        return self._emit("add_rowvec", (M, v), M.data + v.data, lambda g: (g, g.sum(axis=0)))

    def outer(self, a: Tensor, b: Tensor) -> Tensor:
        _check_vector("outer", a)
        _check_vector("outer", b)
        x, y = a.data, b.data
        return self._emit("outer", (a, b), np.outer(x, y), lambda g: (g @ y, x @ g))

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same("dot", a, b)
        x, y = a.data, b.data
        return self._emit("dot", (a, b), np.dot(x, y), lambda g: (g * y, g * x))

    # -- elementwise ------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same("add", a, b)
        return self._emit("add", (a, b), a.data + b.data, lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same("sub", a, b)
        return self._emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same("mul", a, b)
        x, y = a.data, b.data
        return self._emit("mul", (a, b), x * y, lambda g: (g * y, g * x))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", (a,), a.data * c, lambda g: (g * c,))

    def one_minus(self, a: Tensor) -> Tensor:
        return self._emit("one_minus", (a,), 1.0 - a.data, lambda g: (-g,))

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        return self._emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a: Tensor) -> Tensor:
        # the tanh form never overflows
        y = 0.5 + 0.5 * np.tanh(0.5 * a.data)
        return self._emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))

    # -- reductions and reshaping ----------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit("sum", (a,), np.sum(a.data), lambda g: (np.full(shape, g),))

    def add_n(self, items: Sequence[Tensor]) -> Tensor:
        if not items:
            raise ValueError("add_n: nothing to add")
        for t in items[1:]:
            _check_same("add_n", items[0], t)
        total = items[0].data.copy()
        for t in items[1:]:
            total = total + t.data
        return self._emit("add_n", tuple(items), total, lambda g: [g] * len(items))

    def concat(self, items: Sequence[Tensor]) -> Tensor:
        for t in items:
            _check_vector("concat", t)
        sizes = [t.shape[0] for t in items]
        cuts = np.cumsum(sizes)[:-1]
        return self._emit(
            "concat", tuple(items), np.concatenate([t.data for t in items]),
            lambda g: np.split(g, cuts),
        )

    def stack(self, items: Sequence[Tensor]) -> Tensor:
        """Stack equal-length vectors into the rows of a matrix."""
        for t in items:
            _check_vector("stack", t)
            _check_same("stack", items[0], t)
        return self._emit(
            "stack", tuple(items), np.stack([t.data for t in items]), lambda g: list(g),
        )

    def mean_rows(self, M: Tensor) -> Tensor:
        n = M.shape[0]
        if n == 0:
            raise ValueError("mean_rows: empty matrix")
        return self._emit(
            "mean_rows", (M,), M.data.mean(axis=0),
            lambda g: (np.broadcast_to(g / n, M.shape).copy(),),
        )

    def row(self, M: Tensor, i: int) -> Tensor:
        shape = M.shape

        def vjp(g):
            out = np.zeros(shape)
            out[i] = g
            return (out,)

        return self._emit("row", (M,), M.data[i].copy(), vjp)

    def rows(self, M: Tensor, ids: Sequence[int]) -> Tensor:
        """Gather rows ``ids`` of ``M``; repeated ids accumulate gradient."""
        idx = np.asarray(ids, dtype=np.int64)
        n = M.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"rows: id out of range for {n} rows")
        shape = M.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._emit("rows", (M,), M.data[idx], vjp)

    # -- probability ------------------------------------------------------

    def softmax(self, a: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Stable softmax; positions where ``mask`` is False get exactly 0."""
        _check_vector("softmax", a)
        if a.shape[0] == 0:
            raise ValueError("softmax: empty vector")
        x = a.data
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != x.shape:
                raise ValueError(f"softmax: mask shape {mask.shape} vs {x.shape}")
            if not mask.any():
                raise ValueError("softmax: every position is masked")
            x = np.where(mask, x, -np.inf)
        e = np.exp(x - np.max(x))
        y = e / e.sum()
        return self._emit("softmax", (a,), y, lambda g: (y * (g - np.dot(g, y)),))

    def cross_entropy(self, logits: Tensor, target: int) -> Tensor:
        """``-log softmax(logits)[target]`` as a scalar."""
        _check_vector("cross_entropy", logits)
        z = logits.data
        zmax = np.max(z)
        e = np.exp(z - zmax)
        total = e.sum()
        loss = math.log(total) + zmax - z[target]
        p = e / total

        def vjp(g):
            grad = p.copy()
            grad[target] -= 1.0
            return (g * grad,)

        return self._emit("cross_entropy", (logits,), loss, vjp)

    # -- orthogonal projection ------------------------------------------

    def project_out(self, v: Tensor, u: Tensor, gate: Tensor | None = None) -> Tensor:
        """``v - gate * ((v.u) / (u.u)) * u``.

        With no gate the result is orthogonal to ``u``.  When ``u.u`` is at or
        below :data:`PROJECTION_EPS` the projection is skipped and ``v`` comes
        back unchanged (gradient flows to ``v`` only).
        """
        _check_vector("project_out", v)
        _check_same("project_out", v, u)
        if gate is not None:
            _check_same("project_out gate", v, gate)
        x, w = v.data, u.data
        s = float(np.dot(w, w))
        inputs = (v, u) if gate is None else (v, u, gate)
        if s <= PROJECTION_EPS:
            nones = [None] * (len(inputs) - 1)
            return self._emit("project_out", inputs, x.copy(), lambda g: [g, *nones])

        p = float(np.dot(x, w))
        c = p / s
        gt = np.ones_like(x) if gate is None else gate.data
        out = x - gt * (c * w)

        def vjp(g):
            k = float(np.dot(g * gt, w))
            gv = g - (k / s) * w
            gu = -g * gt * c - k * (x / s - (2.0 * p / (s * s)) * w)
            if gate is None:
                return gv, gu
            return gv, gu, -g * w * c

        return self._emit("project_out", inputs, out, vjp)


def backward(graph: Graph, loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(seed * loss)/dx into ``x.grad`` for every tensor on the tape."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    start = np.full(loss.shape, seed, dtype=np.float64)
    loss.grad = start if loss.grad is None else loss.grad + start
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def finite_diff_check(
    f: Callable[[Graph], Tensor],
    params: Sequence[Tensor],
    step: float | Sequence[float] = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` builds a scalar loss on the graph it is handed.  Parameter values are
    perturbed in place and restored.  ``max_coords`` limits how many
    coordinates of each parameter get probed (chosen with ``rng``).

    ``order=4`` uses the five-point central stencil
    ``(8(f(x+h/2) - f(x-h/2)) - (f(x+h) - f(x-h))) / (6h)``, which lets ``step``
    be large enough to keep rounding noise small on near-flat coordinates
    without the truncation error of the three-point rule.

    A sequence of steps scores each coordinate by the step that agrees best.
    No single step suits both a near-flat coordinate (rounding dominates) and
    a sharply curved one (truncation dominates); a wrong gradient disagrees at
    every step.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    steps = [float(step)] if np.isscalar(step) else [float(h) for h in step]
    if not steps or min(steps) <= 0:
        raise ValueError("steps must be positive")
    for p in params:
        p.grad = None
    g = Graph()
    loss = f(g)
    backward(g, loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def evaluate(label) -> float:
        value = float(f(Graph(record=False)).data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss while perturbing {label}")
        return value

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        grad = analytic[pi].reshape(-1)
        for j in coords:
            label = f"{p.name or pi}[{int(j)}]"
            orig = flat[j]

            def central(h: float) -> float:
                flat[j] = orig + h
                up = evaluate(label)
                flat[j] = orig - h
                down = evaluate(label)
                flat[j] = orig
                return up - down

            a = grad[j]
            best = math.inf
            for h in steps:
                if order == 2:
                    numeric = central(h) / (2.0 * h)
                else:
                    numeric = (8.0 * central(h / 2) - central(h)) / (6.0 * h)
                best = min(best, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            worst = max(worst, best)
    for p in params:
        p.grad = None
    return worst
