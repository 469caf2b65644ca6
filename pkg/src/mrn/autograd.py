"""Dense-tensor algebra with reverse-mode automatic differentiation.

Everything is float64. A computation is recorded on a Tape (define-by-run:
a fresh tape per forward pass); nodes are appended in execution order, so
topological order equals append order and one backward sweep in reverse
append order visits each node exactly once.

The op catalogue covers what the networks in this package need: matmul,
add, sub, elementwise mul, scalar mul, reshape, permute, concat/split,
softmax, log-softmax, layer-norm, sigmoid, tanh, relu, mean-pool,
embedding lookup, cross-entropy, plus a sum reduction (the natural loss
aggregator; split is concat's inverse). There is no broadcasting beyond
scalar-times-tensor: any other shape mismatch raises ContractViolation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DeterminismError, NumericFailure

Array = np.ndarray


class Tensor:
    """A float64 array plus grad bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFailure("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("op", "inputs", "outs", "back")

    def __init__(self, op: str, inputs, outs, back):
        self.op = op
        self.inputs = inputs
        self.outs = outs
        self.back = back  # back(gouts: list[Array], grads: dict[int, Array])


class Tape:
    """Append-only record of one forward pass, consumed by backward()."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, Array]:
        """Reverse sweep from a scalar loss.

        Returns a map from each tensor in `params` to its gradient; tensors
        not reachable from the loss get zeros. Also stores the gradient on
        each parameter's .grad.
        """
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            if not any(id(o) in grads for o in node.outs):
                continue
            gouts = [
                grads.get(id(o)) if id(o) in grads else np.zeros(o.data.shape)
                for o in node.outs
            ]
            node.back(gouts, grads)
        out: dict[Tensor, Array] = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            p.grad = g
            out[p] = g
        return out


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accumulate(grads: dict[int, Array], t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    cur = grads.get(key)
    grads[key] = g.copy() if cur is None else cur + g


def _make_out(op: str, value: Array, inputs: Sequence[Tensor], back) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericFailure(f"op '{op}' produced non-finite values")
    rg = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = rg
    out.grad = None
    tape = _active_tape()
    if rg and tape is not None:
        tape._nodes.append(_Node(op, tuple(inputs), (out,), back))
    return out


def _shapes(*ts: Tensor) -> str:
    return " vs ".join(str(t.data.shape) for t in ts)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {_shapes(a, b)}")
    value = a.data @ b.data

    def back(gouts, grads):
        g = gouts[0]
        _accumulate(grads, a, g @ b.data.T)
        _accumulate(grads, b, a.data.T @ g)

    return _make_out("matmul", value, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"add shape mismatch: {_shapes(a, b)}")

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0])
        _accumulate(grads, b, gouts[0])

    return _make_out("add", a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"sub shape mismatch: {_shapes(a, b)}")

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0])
        _accumulate(grads, b, -gouts[0])

    return _make_out("sub", a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one side may be a scalar tensor."""
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ContractViolation(f"mul shape mismatch: {_shapes(a, b)}")

    def back(gouts, grads):
        g = gouts[0]
        ga = g * b.data
        gb = g * a.data
        if a.data.size == 1 and g.shape != a.data.shape:
            ga = np.sum(ga).reshape(a.data.shape)
        if b.data.size == 1 and g.shape != b.data.shape:
            gb = np.sum(gb).reshape(b.data.shape)
        _accumulate(grads, a, ga)
        _accumulate(grads, b, gb)

    return _make_out("mul", a.data * b.data, (a, b), back)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0] * c)

    return _make_out("scalar_mul", a.data * c, (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ContractViolation(f"reshape {a.data.shape} -> {shape} changes size")
    old = a.data.shape

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0].reshape(old))

    return _make_out("reshape", a.data.reshape(shape), (a,), back)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ContractViolation(f"permute axes {axes} invalid for shape {a.data.shape}")
    inv = tuple(np.argsort(axes))

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0].transpose(inv))

    return _make_out("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractViolation(f"transpose expects a matrix, got {a.data.shape}")
    return permute(a, (1, 0))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractViolation("concat of zero tensors")
    nd = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ContractViolation(f"concat rank mismatch: {_shapes(*parts)}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(gouts, grads):
        g = gouts[0]
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * nd
            idx[axis] = slice(lo, hi)
            _accumulate(grads, p, g[tuple(idx)])

    return _make_out("concat", np.concatenate([p.data for p in parts], axis=axis), parts, back)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of concat along the same axis."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != a.data.shape[axis]:
        raise ContractViolation(
            f"split sizes {sizes} do not cover axis {axis} of {a.data.shape}"
        )
    offsets = np.cumsum([0] + sizes)
    pieces = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(lo, hi)
        pieces.append(np.ascontiguousarray(a.data[tuple(idx)]))

    outs = []
    for piece in pieces:
        if not np.all(np.isfinite(piece)):
            raise NumericFailure("op 'split' produced non-finite values")
        o = Tensor.__new__(Tensor)
        o.data = piece
        o.requires_grad = a.requires_grad
        o.grad = None
        outs.append(o)

    def back(gouts, grads):
        _accumulate(grads, a, np.concatenate(gouts, axis=axis))

    tape = _active_tape()
    if a.requires_grad and tape is not None:
        tape._nodes.append(_Node("split", (a,), tuple(outs), back))
    return outs


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(gouts, grads):
        g = gouts[0]
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accumulate(grads, a, y * (g - dot))

    return _make_out("softmax", y, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def back(gouts, grads):
        g = gouts[0]
        _accumulate(grads, a, g - np.exp(y) * np.sum(g, axis=axis, keepdims=True))

    return _make_out("log_softmax", y, (a,), back)


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Parameter-free normalization along one axis (affine terms are composed
    from mul/add by the caller)."""
    x = a.data
    n = x.shape[axis]
    mu = np.mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(gouts, grads):
        g = gouts[0]
        gmean = np.mean(g, axis=axis, keepdims=True)
        proj = np.mean(g * xhat, axis=axis, keepdims=True)
        _accumulate(grads, a, inv * (g - gmean - xhat * proj))

    return _make_out("layer_norm", xhat, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0] * y * (1.0 - y))

    return _make_out("sigmoid", y, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0] * (1.0 - y * y))

    return _make_out("tanh", y, (a,), back)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def back(gouts, grads):
        _accumulate(grads, a, gouts[0] * (a.data > 0.0))

    return _make_out("relu", y, (a,), back)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ContractViolation(f"mean_pool axis {axis} invalid for {a.data.shape}")
    axis = axis % a.data.ndim
    n = a.data.shape[axis]

    def back(gouts, grads):
        g = np.expand_dims(gouts[0], axis) / n
        _accumulate(grads, a, np.broadcast_to(g, a.data.shape))

    return _make_out("mean_pool", np.mean(a.data, axis=axis), (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(gouts, grads):
        _accumulate(grads, a, np.full(a.data.shape, float(gouts[0])))

    return _make_out("sum", np.asarray(np.sum(a.data)), (a,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ContractViolation(f"embedding table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractViolation("embedding id out of range")

    def back(gouts, grads):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, gouts[0])
        _accumulate(grads, table, g)

    return _make_out("embedding", table.data[ids], (table,), back)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Negative log-likelihood of already-normalized probabilities.

    A (K,) vector with an int target gives -log p[target]; an (N, K) matrix
    with N int targets gives the mean of the per-row values.
    """
    p = probs.data
    if p.ndim == 1:
        t = int(targets)
        if not (0 <= t < p.shape[0]):
            raise ContractViolation(f"cross_entropy target {t} out of range {p.shape}")
        picked = p[t]
        value = -np.log(picked)

        def back(gouts, grads):
            g = np.zeros_like(p)
            g[t] = -float(gouts[0]) / picked
            _accumulate(grads, probs, g)

        return _make_out("cross_entropy", np.asarray(value), (probs,), back)
    if p.ndim == 2:
        t = np.asarray(targets, dtype=np.int64)
        if t.shape != (p.shape[0],):
            raise ContractViolation(
                f"cross_entropy targets shape {t.shape} vs probs {p.shape}"
            )
        rows = np.arange(p.shape[0])
        picked = p[rows, t]
        value = -np.mean(np.log(picked))

        def back(gouts, grads):
            g = np.zeros_like(p)
            g[rows, t] = -float(gouts[0]) / (picked * p.shape[0])
            _accumulate(grads, probs, g)

        return _make_out("cross_entropy", np.asarray(value), (probs,), back)
    raise ContractViolation(f"cross_entropy expects 1-D or 2-D probs, got {p.shape}")


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "reshape": reshape,
    "permute": permute,
    "transpose": transpose,
    "concat": concat,
    "split": split,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "mean_pool": mean_pool,
    "sum": sum_all,
    "embedding": embedding_lookup,
    "cross_entropy": cross_entropy,
}


def apply(op: str, inputs, **kwargs):
    """Dispatch an op by name. `inputs` is the tensor argument list."""
    fn = _OPS.get(op)
    if fn is None:
        raise ContractViolation(f"unknown op '{op}' (known: {sorted(_OPS)})")
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def custom_node(op: str, inputs: Sequence[Tensor], value: Array, back) -> Tensor:
    """Register an externally computed op (used by the CTC loss).

    `back(gout: Array) -> list[Optional[Array]]` returns one gradient per
    input, aligned with `inputs`.
    """

    def back_adapter(gouts, grads):
        gs = back(gouts[0])
        for t, g in zip(inputs, gs):
            if g is not None:
                _accumulate(grads, t, g)

    return _make_out(op, value, inputs, back_adapter)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f` must be scalar-valued and deterministic; the relative error at a
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    `coords` optionally restricts the check to a subset of flat indices.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractViolation(f"grad_check eps {eps} outside [1e-7, 1e-3]")
    x = Tensor(x.data.copy(), requires_grad=True)
    v1 = f(x).data.copy()
    v2 = f(x).data.copy()
    if v1.size != 1:
        raise ContractViolation(f"grad_check target must be scalar, got {v1.shape}")
    if not np.array_equal(v1, v2):
        raise DeterminismError("grad_check: two evaluations of f disagree")

    with Tape() as tape:
        y = f(x)
    analytic = tape.backward(y, [x])[x].reshape(-1)

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        keep = flat[i]
        flat[i] = keep + eps
        up = float(f(x).data)
        flat[i] = keep - eps
        dn = float(f(x).data)
        flat[i] = keep
        numeric = (up - dn) / (2.0 * eps)
        a = float(analytic[i])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > worst:
            worst = err
    return worst
