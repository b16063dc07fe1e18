"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records its inputs and a local gradient rule on the output tensor.
``backward`` collects the reachable graph, orders it by recording sequence and
walks it in reverse.  Broadcasting only happens through the explicit
``broadcast`` op; every other binary op insists on identical shapes.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "DomainError",
    "tensor",
    "constant",
    "apply",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "slice_",
    "sum_",
    "mean",
    "sigmoid",
    "tanh",
    "abs_",
    "square",
    "log",
    "clip",
    "broadcast",
    "finite_difference_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_local = threading.local()


def _next_seq() -> int:
    counter = getattr(_local, "counter", None)
    if counter is None:
        counter = _local.counter = itertools.count()
    return next(counter)


class Tensor:
    """A float64 array node in a dynamically recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_rule", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str | None = None
        self._seq = _next_seq()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self._op})"

    # operator sugar; all of these go through the explicit ops below
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def tensor(data, requires_grad: bool = True, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out._parents = parents if out.requires_grad else ()
    out._rule = rule if out.requires_grad else None
    out._op = op
    out._seq = _next_seq()
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``[n, k] @ [k, m]``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.data, b.data

    def rule(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make("matmul", av @ bv, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _same_shape("elementwise_mul", a, b)
    av, bv = a.data, b.data
    return _make("elementwise_mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        s = t.shape
        if len(s) != nd or any(s[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {s} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        idx = [slice(None)] * nd
        out = []
        for i in range(len(sizes)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make("concat", data, tuple(tensors), rule)


def slice_(a: Tensor, index) -> Tensor:
    """Index ``a`` with anything numpy accepts; repeated fancy indices accumulate."""
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)
    try:
        # basic slices stay views; op outputs are never written in place
        data = a.data[index] if basic else np.array(a.data[index], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {shape}: {exc}") from None
    data = np.asarray(data, dtype=np.float64)

    return _make("slice", data, (a,), lambda g: (_Scatter(shape, index, g, basic),))


class _Scatter:
    """Gradient of a slice.  Backward adds it into one buffer per parent
    instead of materialising a full-size zero array per slice."""

    __slots__ = ("shape", "index", "g", "basic")

    def __init__(self, shape, index, g, basic):
        self.shape, self.index, self.g, self.basic = shape, index, g, basic

    def add_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.g
        else:
            np.add.at(buf, self.index, self.g)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    data = np.sum(a.data, axis=axis)

    def rule(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(data, dtype=np.float64), (a,), rule)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    shape = a.shape
    data = np.mean(a.data, axis=axis)

    def rule(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _make("mean", np.asarray(data, dtype=np.float64), (a,), rule)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    av = a.data
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def log(a: Tensor) -> Tensor:
    av = a.data
    if np.any(~(av > 0)):
        raise DomainError(f"log: non-positive input (min {np.nanmin(av) if av.size else 'n/a'})")
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    av = a.data
    inside = (av >= lo) & (av <= hi)
    return _make("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Numpy-style broadcast to ``shape``; the only place implicit expansion happens."""
    shape = tuple(shape)
    src = a.shape
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1
    )

    def rule(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(src),)

    return _make("broadcast", data, (a,), rule)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "abs": abs_,
    "square": square,
    "log": log,
    "clip": clip,
    "broadcast": broadcast,
    "scale": scale,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("matmul", a, b)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Reachable recorded ops below an output, in recording order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Graph:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def ops(self) -> list[str]:
        return [t._op for t in self.nodes if t._op is not None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t`` with requires_grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    owned: set[int] = set()  # buffers allocated here, safe to update in place
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._rule is None:
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            cur = grads.get(key)
            if isinstance(pg, _Scatter):
                if cur is None:
                    cur = np.zeros(pg.shape)
                elif key not in owned:
                    cur = np.array(cur, dtype=np.float64)
                owned.add(key)
                pg.add_into(cur)
                grads[key] = cur
            elif cur is None:
                grads[key] = pg
            elif key in owned:
                cur += pg
            else:
                grads[key] = cur + pg
                owned.add(key)
    for node in graph.nodes:
        g = grads.get(id(node))
        if g is None or not node.requires_grad:
            continue
        if np.shape(g) != node.shape:
            g = np.reshape(g, node.shape)
        node.grad = g if node.grad is None else node.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


class GradCheckReport:
    def __init__(self, names, max_rel_err, n_flagged, tolerance):
        self.names = list(names)
        self.max_rel_err = list(max_rel_err)
        self.n_flagged = list(n_flagged)
        self.tolerance = tolerance

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)

    @property
    def ok(self) -> bool:
        return not any(self.n_flagged)

    def __repr__(self) -> str:
        return f"GradCheckReport(worst={self.worst:.3e}, ok={self.ok}, n_params={len(self.names)})"


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps vanishing gradients from turning roundoff into huge ratios.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = f()
    again = f()
    if not np.array_equal(base.data, again.data):
        raise RuntimeError("finite_difference_check: f is not deterministic")
    zero_grad(params)
    backward(base)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    names, errs, flagged = [], [], []
    for i, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        worst, bad = 0.0, 0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = f().item()
            flat[k] = orig - step
            fm = f().item()
            flat[k] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(a_flat[k] - num) / max(abs(a_flat[k]), abs(num), floor)
            worst = max(worst, err)
            bad += err > tolerance
        names.append(p.name or f"param{i}")
        errs.append(worst)
        flagged.append(bad)
    zero_grad(params)
    return GradCheckReport(names, errs, flagged, tolerance)
