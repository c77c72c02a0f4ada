"""Recorded computation tape with reverse-mode differentiation.

Every op applied to a :class:`Tensor` appends a node to its :class:`Tape`.
Backward rules are themselves written with tape ops, so calling
:func:`gradient` with ``create_graph=True`` records the backward pass on the
same tape and the result can be differentiated again (double backprop).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np


class TapeError(Exception):
    """Base class for tape evaluation and differentiation errors."""


class ShapeError(TapeError, ValueError):
    pass


class NonFiniteError(TapeError, FloatingPointError):
    pass


class SecondOrderError(TapeError, NotImplementedError):
    """An op without a differentiable backward rule sits on a double-backprop path."""


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(ctx, g) -> sequence with one entry (Tensor or None) per input
    vjp: Callable[["Context", "Tensor"], Sequence["Tensor | None"]] | None
    second_order: bool = True


@dataclass
class Node:
    kind: str  # "input" | "param" | "const" | "op"
    value: np.ndarray
    op: Op | None = None
    inputs: tuple[int, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None


class Tape:
    """Append-only list of nodes in topological order."""

    def __init__(self, dtype=np.float64, strict: bool = False):
        self.dtype = np.dtype(dtype)
        self.strict = strict
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node) -> "Tensor":
        node.value.flags.writeable = False
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        if node.name is not None:
            if node.name in self._names:
                raise TapeError(f"duplicate node name {node.name!r}")
            self._names[node.name] = idx
        return Tensor(self, idx)

    def _array(self, value, copy: bool = True) -> np.ndarray:
        if not copy and isinstance(value, np.ndarray) and value.dtype == self.dtype:
            return value
        return np.array(value, dtype=self.dtype, copy=True)

    def input(self, value, name: str | None = None) -> "Tensor":
        return self._push(Node("input", self._array(value), name=name))

    def param(self, value, name: str | None = None) -> "Tensor":
        return self._push(Node("param", self._array(value), name=name))

    def const(self, value, name: str | None = None, copy: bool = True) -> "Tensor":
        # copy=False is for arrays already frozen on a tape
        return self._push(Node("const", self._array(value, copy), name=name))

    def apply(self, op: Op, inputs: Sequence["Tensor"], **attrs) -> "Tensor":
        ids = []
        for t in inputs:
            if t.tape is not self:
                raise TapeError(f"{op.name}: input belongs to a different tape")
            ids.append(t.id)
        values = [self.nodes[i].value for i in ids]
        value = _run_forward(op, values, attrs, len(self.nodes))
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        if self.strict and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op #{len(self.nodes)} ({op.name}) produced non-finite values")
        return self._push(Node("op", value, op=op, inputs=tuple(ids), attrs=attrs))

    def node_id(self, ref: "int | str | Tensor") -> int:
        if isinstance(ref, Tensor):
            return ref.id
        if isinstance(ref, str):
            try:
                return self._names[ref]
            except KeyError:
                raise TapeError(f"no node named {ref!r} on tape") from None
        if not 0 <= ref < len(self.nodes):
            raise TapeError(f"node {ref} not on tape")
        return ref

    def tensor(self, ref) -> "Tensor":
        return Tensor(self, self.node_id(ref))

    def params(self) -> dict[str, "Tensor"]:
        return {n.name: Tensor(self, i) for i, n in enumerate(self.nodes)
                if n.kind == "param" and n.name is not None}


def _run_forward(op: Op, values, attrs, index: int) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):
            return np.asarray(op.forward(*values, **attrs))
    except ValueError as exc:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"op #{index} ({op.name}) on shapes [{shapes}]: {exc}") from None


class Tensor:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.id = idx

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(#{self.id}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.add_scalar(self, float(other))
        return ops.add(self, self._lift(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.add_scalar(self, -float(other))
        return ops.sub(self, self._lift(other))

    def __rsub__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.add_scalar(ops.neg(self), float(other))
        return ops.sub(self._lift(other), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, 1.0 / float(other))
        return ops.div(self, self._lift(other))

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(self._lift(other), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, self._lift(other))


class Context:
    """What a backward rule sees: forward inputs/output as tensors on the grad tape."""

    def __init__(self, src: Tape, node_id: int, dst: Tape, cache: dict[int, Tensor]):
        self._src = src
        self._node_id = node_id
        self.tape = dst
        self._cache = cache
        node = src.nodes[node_id]
        self.attrs = node.attrs
        self.input_ids = node.inputs

    def _ref(self, idx: int) -> Tensor:
        if self.tape is self._src:
            return Tensor(self._src, idx)
        t = self._cache.get(idx)
        if t is None:
            t = self.tape.const(self._src.nodes[idx].value, copy=False)
            self._cache[idx] = t
        return t

    def input(self, k: int) -> Tensor:
        return self._ref(self.input_ids[k])

    def input_value(self, k: int) -> np.ndarray:
        return self._src.nodes[self.input_ids[k]].value

    def input_shape(self, k: int) -> tuple[int, ...]:
        return self.input_value(k).shape

    @property
    def output(self) -> Tensor:
        return self._ref(self._node_id)

    @property
    def output_value(self) -> np.ndarray:
        return self._src.nodes[self._node_id].value


def _relevant(tape: Tape, out: int, wrt: Iterable[int]) -> list[bool]:
    n = out + 1
    down = [False] * n
    for w in wrt:
        if w < n:
            down[w] = True
    nodes = tape.nodes
    for i in range(n):
        if not down[i] and nodes[i].kind == "op":
            down[i] = any(down[j] for j in nodes[i].inputs)
    up = [False] * n
    up[out] = True
    for i in range(out, -1, -1):
        if up[i] and nodes[i].kind == "op":
            for j in nodes[i].inputs:
                up[j] = True
    return [d and u for d, u in zip(down, up)]


def gradient(tape: Tape, output, wrt, create_graph: bool = False) -> dict[int, Tensor]:
    """Reverse accumulation of d(output)/d(node) for every node in ``wrt``.

    Returned tensors live on ``tape`` when ``create_graph`` is set (and can be
    differentiated again), otherwise on a scratch tape.
    """
    out = tape.node_id(output)
    if tape.nodes[out].value.size != 1:
        raise TapeError(f"gradient needs a scalar output, node {out} has shape "
                        f"{tape.nodes[out].value.shape}")
    wrt_ids = [tape.node_id(w) for w in wrt]
    dst = tape if create_graph else Tape(tape.dtype)
    relevant = _relevant(tape, out, wrt_ids)
    grads: dict[int, Tensor] = {out: dst.const(np.ones_like(tape.nodes[out].value))}
    cache: dict[int, Tensor] = {}
    wanted = set(wrt_ids)
    lowest = min(wrt_ids) if wrt_ids else out
    for i in range(out, lowest - 1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.kind != "op" or not relevant[i]:
            continue
        if i not in wanted:
            del grads[i]
        op = node.op
        if create_graph and not op.second_order:
            raise SecondOrderError(
                f"op #{i} ({op.name}) has no second-order rule but lies on a "
                f"create_graph path")
        if op.vjp is None:
            raise TapeError(f"op #{i} ({op.name}) is not differentiable")
        ctx = Context(tape, i, dst, cache)
        in_grads = op.vjp(ctx, g)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None or not relevant[j]:
                continue
            prev = grads.get(j)
            grads[j] = gj if prev is None else _accumulate(prev, gj)
    result = {}
    for w in wrt_ids:
        g = grads.get(w)
        if g is None:
            g = dst.const(np.zeros_like(tape.nodes[w].value))
        result[w] = g
    return result


def _accumulate(a: Tensor, b: Tensor) -> Tensor:
    from . import ops
    return ops.add(a, b)


def replay(tape: Tape, inputs: Mapping[Any, Any] | None = None) -> Tape:
    """Re-run every recorded op with some leaves rebound; returns a new tape."""
    overrides: dict[int, np.ndarray] = {}
    for ref, val in (inputs or {}).items():
        idx = tape.node_id(ref)
        node = tape.nodes[idx]
        if node.kind == "op":
            raise TapeError(f"node {idx} is an op result and cannot be rebound")
        arr = np.asarray(val, dtype=tape.dtype)
        if arr.shape != node.value.shape:
            raise ShapeError(f"input {ref!r}: expected shape {node.value.shape}, got {arr.shape}")
        overrides[idx] = arr
    new = Tape(tape.dtype, tape.strict)
    for i, node in enumerate(tape.nodes):
        if node.kind == "op":
            new.apply(node.op, [Tensor(new, j) for j in node.inputs], **node.attrs)
            new.nodes[-1].name = node.name
            if node.name is not None:
                new._names[node.name] = i
        else:
            val = overrides.get(i, node.value)
            new._push(Node(node.kind, np.array(val, dtype=tape.dtype), name=node.name))
    return new


def evaluate(tape: Tape, inputs: Mapping[Any, Any] | None = None,
             outputs: Sequence[Any] = ()) -> dict[Any, np.ndarray]:
    """Replay ``tape`` with rebound leaves and return the requested node values."""
    new = replay(tape, inputs)
    return {ref: new.nodes[tape.node_id(ref)].value for ref in outputs}


def finite_difference_check(tape: Tape, output, wrt, h: float = 1e-5,
                            max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between the analytic gradient and central differences."""
    out = tape.node_id(output)
    w = tape.node_id(wrt)
    analytic = gradient(tape, out, [w])[w].value.reshape(-1)
    base = tape.nodes[w].value
    coords = np.arange(base.size)
    if max_coords is not None and base.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(base.size, max_coords, replace=False))
    worst = 0.0
    for c in coords:
        vals = []
        for sign in (1.0, -1.0):
            x = base.copy().reshape(-1)
            x[c] += sign * h
            vals.append(evaluate(tape, {w: x.reshape(base.shape)}, [out])[out].reshape(-1)[0])
        fd = (vals[0] - vals[1]) / (2 * h)
        err = abs(analytic[c] - fd) / max(abs(analytic[c]), 1e-8)
        worst = max(worst, float(err))
    return worst


def gradient_penalty(tape: Tape, d_output, x_hat) -> Tensor:
    """mean over samples of (||d d_output / d x_hat||_2 - 1)^2, recorded on ``tape``.

    ``d_output`` must be a scalar; for a batch critic pass ``sum(D(x_hat))``,
    which has the same per-sample input gradients as D itself.
    """
    from . import ops
    xh = tape.node_id(x_hat)
    g = gradient(tape, d_output, [xh], create_graph=True)[xh]
    norms = ops.global_norm(g)
    return ops.mean(ops.square(ops.add_scalar(norms, -1.0)))


def gradient_of_gradient_norm(tape: Tape, d_output, x_hat, wrt=None) -> dict[int, Tensor]:
    """Gradients of the gradient penalty with respect to ``wrt`` (default: all params)."""
    if wrt is None:
        wrt = [t.id for t in tape.params().values()]
    pen = gradient_penalty(tape, d_output, x_hat)
    return gradient(tape, pen, wrt)
