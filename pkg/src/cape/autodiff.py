"""Minimal dense-tensor reverse-mode automatic differentiation.

The engine is deliberately small: float64 numpy arrays, an implicit DAG
built by the op functions, and a deterministic topological backward pass.
Broadcasting is restricted to a leading-batch pattern (the smaller operand
must match the trailing dimensions of the larger one); anything else needs
an explicit reshape. ReLU uses subgradient 0 at the kink.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(ValueError):
    """Shape mismatch, non-finite values, or misuse of the graph."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=DTYPE)
    return arr


def _check_finite(arr: np.ndarray, who: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise AutodiffError(f"{who}: non-finite values (shape {arr.shape})")


class Tensor:
    """A node in the computation graph.

    Leaf tensors own their data; op outputs additionally record their
    parents and one vector-Jacobian-product callback per parent.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the math lives in the module-level op functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _op(data: np.ndarray, parents: Sequence[Tensor],
        vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None],
        name: str) -> Tensor:
    _check_finite(data, f"op {name}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out._parents = ()
        out._vjps = ()
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (leading-batch only)

def _broadcast_pair(a: Tensor, b: Tensor, name: str):
    """Return (a_data, b_data, reduce_a, reduce_b) for a leading-dim broadcast.

    reduce_* maps an output-shaped gradient back to the operand's shape by
    summing the broadcast leading axes.
    """
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a.data, b.data, None, None
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        extra = len(sa) - len(sb)
        axes = tuple(range(extra))
        return a.data, b.data, None, lambda g: g.sum(axis=axes)
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        extra = len(sb) - len(sa)
        axes = tuple(range(extra))
        return a.data, b.data, lambda g: g.sum(axis=axes), None
    raise AutodiffError(f"{name}: incompatible shapes {sa} and {sb} "
                        "(only leading-batch broadcast is supported)")


def _wrap_reduce(reduce_fn, base):
    if reduce_fn is None:
        return base
    return lambda g: reduce_fn(base(g))


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    da, db, ra, rb = _broadcast_pair(a, b, "add")
    out = da + db
    return _op(out, (a, b),
               (_wrap_reduce(ra, lambda g: g), _wrap_reduce(rb, lambda g: g)),
               "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    da, db, ra, rb = _broadcast_pair(a, b, "sub")
    out = da - db
    return _op(out, (a, b),
               (_wrap_reduce(ra, lambda g: g), _wrap_reduce(rb, lambda g: -g)),
               "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = _lift(a), _lift(b)
    da, db, ra, rb = _broadcast_pair(a, b, "mul")
    out = da * db
    return _op(out, (a, b),
               (_wrap_reduce(ra, lambda g: g * db), _wrap_reduce(rb, lambda g: g * da)),
               "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    da, db, ra, rb = _broadcast_pair(a, b, "div")
    out = da / db
    return _op(out, (a, b),
               (_wrap_reduce(ra, lambda g: g / db),
                _wrap_reduce(rb, lambda g: -g * da / (db * db))),
               "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _op(-a.data, (a,), (lambda g: -g,), "neg")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = (a.data > 0).astype(DTYPE)
    return _op(np.maximum(a.data, 0.0), (a,), (lambda g: g * mask,), "relu")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _op(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise AutodiffError("log: non-positive input")
    return _op(np.log(a.data), (a,), (lambda g: g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise AutodiffError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _op(out, (a,), (lambda g: g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = _lift(a)
    return _op(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,), "square")


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _lift(a)
    out = a.data ** exponent
    return _op(out, (a,), (lambda g: g * exponent * a.data ** (exponent - 1.0),),
               "power")


# ---------------------------------------------------------------------------
# reductions and reshaping

def tsum(a, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).astype(DTYPE, copy=True)
        g_exp = np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, shape).astype(DTYPE, copy=True)

    return _op(np.asarray(out, dtype=DTYPE), (a,), (vjp,), "sum")


def tmean(a, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _op(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _op(np.transpose(a.data, axes), (a,),
               (lambda g: np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _op(out, tensors, tuple(make_vjp(i) for i in range(len(tensors))),
               "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        def vjp(g):
            return np.take(g, i, axis=axis)

        return vjp

    return _op(out, tensors, tuple(make_vjp(i) for i in range(len(tensors))),
               "stack")


def getitem(a, key) -> Tensor:
    a = _lift(a)
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return full

    return _op(np.array(out, dtype=DTYPE), (a,), (vjp,), "getitem")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; batched when both operands share leading dims, or
    when one operand is 2-D and the other carries leading batch dims."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a != lead_b and lead_a != () and lead_b != ():
        raise AutodiffError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if lead_a == () and ga.ndim > a.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        return ga

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if lead_b == () and gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return gb

    return _op(out, (a, b), (vjp_a, vjp_b), "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along one axis."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _op(out, (a,), (vjp,), "softmax")


def _expand_last(t: Tensor, n: int) -> Tensor:
    """Tile a last-axis reduction result back to width n (explicit, not
    implicit broadcast). Input shape (...,) becomes (..., n)."""
    if t.ndim == 0:
        t = reshape(t, (1, 1))
        return reshape(matmul(t, Tensor(np.ones((1, n)))), (n,))
    t = reshape(t, t.shape + (1,))
    return matmul(t, Tensor(np.ones((1, n))))


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a = _lift(a)
    n = a.shape[-1]
    mu = _expand_last(tmean(a, axis=-1), n)
    centered = sub(a, mu)
    var = tmean(square(centered), axis=-1)
    inv = _expand_last(power(add(var, eps), -0.5), n)
    normed = mul(centered, inv)
    return add(mul(normed, gain), bias)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale vectors along the last axis to unit Euclidean norm."""
    a = _lift(a)
    norm = sqrt(add(tsum(square(a), axis=-1), eps))
    return div(a, _expand_last(norm, a.shape[-1]))


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None],
              name: str = "custom") -> Tensor:
    """Create a graph node with caller-supplied forward value and VJPs."""
    return _op(np.asarray(data, dtype=DTYPE), parents, vjps, name)


# ---------------------------------------------------------------------------
# backward pass

def topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the subgraph reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor,
             params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a map from leaf tensors with requires_grad to their gradient
    arrays. When `params` is given, the map covers exactly those tensors,
    with zeros for any parameter the loss does not reach.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            grads[id(node)] = g  # keep leaf gradients
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad or vjp is None:
                continue
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib

    result: dict[Tensor, np.ndarray] = {}
    if params is None:
        for node in order:
            if not node._parents and node.requires_grad and id(node) in grads:
                result[node] = grads[id(node)]
    else:
        for p in params:
            result[p] = grads.get(id(p), np.zeros_like(p.data))
    return result


# ---------------------------------------------------------------------------
# gradient checking

class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    def __init__(self, max_rel_error: float, passed: bool, n_checked: int,
                 n_nonfinite: int):
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.n_checked = n_checked
        self.n_nonfinite = n_nonfinite

    def __repr__(self) -> str:
        tag = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({tag}, max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.n_checked}, nonfinite={self.n_nonfinite})")


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor],
               points: Sequence[np.ndarray],
               step: float = 1e-5,
               tolerance: float = 1e-4,
               max_coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of fn against central differences.

    fn receives freshly built requires_grad tensors for `points` and must
    return a scalar Tensor. Relative error per coordinate uses
    |ad - fd| / max(|ad|, |fd|, 1e-6). A coordinate that fails at `step` is
    retried once at step/8: a stride that straddles a ReLU kink corrupts the
    difference quotient, and the shorter stride resolves it. Coordinates
    where a perturbed evaluation is non-finite are reported, not raised.
    """
    tensors = [Tensor(p, requires_grad=True) for p in points]
    loss = fn(tensors)
    grads = backward(loss, params=tensors)

    def fd_at(flat, i, h):
        orig = flat[i]
        try:
            flat[i] = orig + h
            f_plus = fn([Tensor(x.data) for x in tensors]).item()
            flat[i] = orig - h
            f_minus = fn([Tensor(x.data) for x in tensors]).item()
        finally:
            flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise AutodiffError("non-finite perturbed evaluation")
        return (f_plus - f_minus) / (2.0 * h)

    max_rel = 0.0
    n_checked = 0
    n_nonfinite = 0
    for t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        coords = range(n)
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = sorted(gen.choice(n, size=max_coords_per_tensor, replace=False))
        ad = grads[t].reshape(-1)
        for i in coords:
            try:
                fd = fd_at(flat, i, step)
            except AutodiffError:
                n_nonfinite += 1
                continue
            rel = abs(ad[i] - fd) / max(abs(ad[i]), abs(fd), 1e-6)
            if rel >= tolerance:
                try:
                    fd_small = fd_at(flat, i, step / 8.0)
                except AutodiffError:
                    n_nonfinite += 1
                    continue
                rel = min(rel, abs(ad[i] - fd_small)
                          / max(abs(ad[i]), abs(fd_small), 1e-6))
            max_rel = max(max_rel, rel)
            n_checked += 1
    return GradCheckReport(max_rel, max_rel < tolerance, n_checked, n_nonfinite)
