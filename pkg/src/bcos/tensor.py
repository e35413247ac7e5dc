"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Only the primitives required by B-cos networks are provided.  Every tensor
created by a primitive records its parents and a vector-Jacobian closure; the
creation counter doubles as the tape order, so a backward pass simply visits
the reachable nodes in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (ones for scalars) to every leaf requiring grad.

        Leaf ``.grad`` values are reset on each call rather than accumulated.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("grad must be given for non-scalar outputs", self.shape)
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed grad shape {grad.shape} != output shape {self.shape}",
                             grad.shape, self.shape)

        nodes = _reachable(self)
        for n in nodes:
            if not n._parents:
                n.grad = np.zeros_like(n.data)
        grads = {self._id: grad}
        for node in reversed(nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return pow(self, p)
    def __matmul__(self, o): return matmul(self, o)

    def sum(self, axis=None, keepdims=False): return reduce(self, axis, "sum", keepdims)
    def mean(self, axis=None, keepdims=False): return reduce(self, axis, "mean", keepdims)
    def max(self, axis=None, keepdims=False): return reduce(self, axis, "max", keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def abs(self): return absolute(self)
    def sqrt(self): return sqrt(self)


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result_dtype(a: Tensor, b: Tensor):
    # python scalars must not promote float32 tensors to float64
    if a.data.ndim == 0 and a.op == "leaf" and not a.requires_grad:
        return b.dtype
    if b.data.ndim == 0 and b.op == "leaf" and not b.requires_grad:
        return a.dtype
    return np.result_type(a.dtype, b.dtype)


def _binary(a, b, fwd, vjp_a, vjp_b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
                         a.shape, b.shape) from None
    dt = _result_dtype(a, b)
    ad, bd = a.data.astype(dt, copy=False), b.data.astype(dt, copy=False)
    out = fwd(ad, bd)

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, ad, bd, out), a.shape).astype(a.dtype, copy=False) if a.requires_grad else None
        gb = _unbroadcast(vjp_b(g, ad, bd, out), b.shape).astype(b.dtype, copy=False) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * o / y, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max of two tensors; ties route the gradient to ``a``."""
    return _binary(a, b, np.maximum,
                   lambda g, x, y, o: g * (x >= y),
                   lambda g, x, y, o: g * (x < y), "max-pair")


def _unary(a, fwd, vjp_fn, op) -> Tensor:
    a = as_tensor(a)
    out = fwd(a.data)

    def vjp(g):
        return (vjp_fn(g, a.data, out).astype(a.dtype, copy=False),)

    return _make(out, (a,), vjp, op)


def pow(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent.

    For ``p < 1`` the derivative at ``a == 0`` is taken as 0 instead of inf.
    """
    p = float(p)

    def vjp(g, x, o):
        if p == 1.0:
            return g
        if p < 1.0:
            safe = np.where(x == 0, 1, x)
            return np.where(x == 0, 0, g * p * safe ** (p - 1))
        return g * p * x ** (p - 1)

    return _unary(a, lambda x: x ** np.asarray(p, dtype=x.dtype), vjp, "pow")


def sqrt(a) -> Tensor:
    def vjp(g, x, o):
        # zero gradient at sqrt(0) keeps the backward pass finite
        safe = np.where(o == 0, 1, o)
        return np.where(o == 0, 0, g * 0.5 / safe)

    return _unary(a, np.sqrt, vjp, "sqrt")


def absolute(a) -> Tensor:
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x), "abs")


def sign(a) -> Tensor:
    return _unary(a, np.sign, lambda g, x, o: np.zeros_like(g), "sign")


def sigmoid(a) -> Tensor:
    def fwd(x):
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)

    return _unary(a, fwd, lambda g, x, o: g * o * (1 - o), "sigmoid")


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0), lambda g, x, o: g * (x > 0), "relu")


def elementwise(op_kind: str, a, b=None, p: float | None = None) -> Tensor:
    """Dispatch by name; ``p`` is the exponent for ``pow``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div, "max-pair": maximum}
    unary = {"sqrt": sqrt, "abs": absolute, "sign": sign, "sigmoid": sigmoid, "relu": relu}
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    if op_kind == "pow":
        return pow(a, p)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def detach(x) -> Tensor:
    """Same values, no gradient path."""
    x = as_tensor(x)
    return Tensor(x.data)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}", a.shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor", (ndim,))
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis``.

    ``max`` routes the gradient to the first maximal element along the axis.
    """
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))

    if kind in ("sum", "mean"):
        out = x.data.sum(axis=axes, keepdims=True)
        n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
        if kind == "mean":
            out = out / np.asarray(n, dtype=x.dtype)

        def vjp(g):
            g = g.reshape(kept_shape)
            if kind == "mean":
                g = g / np.asarray(n, dtype=x.dtype)
            return (np.broadcast_to(g, x.shape).copy(),)

    elif kind == "max":
        # move reduced axes last and flatten them so argmax picks the first index
        rest = [i for i in range(x.ndim) if i not in axes]
        perm = rest + list(axes)
        moved = np.transpose(x.data, perm)
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].reshape(kept_shape)

        def vjp(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            return (np.transpose(gflat.reshape(moved.shape), np.argsort(perm)),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")

    if not keepdims:
        out = out.reshape(tuple(d for i, d in enumerate(x.shape) if i not in axes))
    return _make(np.ascontiguousarray(out), (x,), vjp, f"reduce-{kind}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), vjp, "matmul")


def output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_geometry(shape, k, stride, padding, op):
    if len(shape) != 4:
        raise ShapeError(f"{op}: expected [N,C,H,W] input, got {shape}", shape)
    if stride < 1 or padding < 0:
        raise ShapeError(f"{op}: invalid stride={stride} padding={padding}", shape)
    h, w = shape[2] + 2 * padding, shape[3] + 2 * padding
    if k > h or k > w:
        raise ShapeError(f"{op}: kernel {k}x{k} larger than padded input {h}x{w}", shape, (k, k))


def _pad_cf(x: np.ndarray, padding: int) -> np.ndarray:
    """[N, C, H, W] -> zero-padded channel-first copy [C, N, H+2p, W+2p]."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    return xp


def _window(i, j, stride, ho, wo):
    return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride))


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Patch matrix [C*k*k, N*H'*W'] built from k*k strided slice copies."""
    n, c, h, w = x.shape
    ho, wo = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    xp = _pad_cf(x, padding)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[_window(i, j, stride, ho, wo)]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(dcols: np.ndarray, in_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_im2col``; ``dcols`` has shape [C, k, k, N, H', W']."""
    n, c, h, w = in_shape
    ho, wo = dcols.shape[4], dcols.shape[5]
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[_window(i, j, stride, ho, wo)] += dcols[:, i, j]
    out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2d cross-correlation via im2col + matmul."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [O,C,k,k], got {kernel.shape}", kernel.shape)
    _check_geometry(x.shape, kernel.shape[2], stride, padding, "conv2d")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects "
                         f"{kernel.shape[1]}", x.shape, kernel.shape)
    n, c = x.shape[:2]
    o, _, k, _ = kernel.shape
    dt = np.result_type(x.dtype, kernel.dtype)
    kmat = kernel.data.astype(dt, copy=False).reshape(o, c * k * k)
    cols, ho, wo = _im2col(x.data.astype(dt, copy=False), k, stride, padding)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def vjp(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gk = None
        if x.requires_grad:
            dcols = (kmat.T @ gt).reshape(c, k, k, n, ho, wo)
            gx = _col2im(dcols, x.shape, k, stride, padding).astype(x.dtype, copy=False)
        if kernel.requires_grad:
            gk = (gt @ cols.T).reshape(kernel.shape).astype(kernel.dtype, copy=False)
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), vjp, "conv2d")


def sumpool2d(x, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Sum over each k x k window; same geometry as ``conv2d``."""
    x = as_tensor(x)
    _check_geometry(x.shape, k, stride, padding, "sumpool2d")
    n, c, h, w = x.shape
    ho, wo = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    xp = _pad_cf(x.data, padding)
    out = np.zeros((c, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[_window(i, j, stride, ho, wo)]

    def vjp(g):
        gt = g.transpose(1, 0, 2, 3)
        dcols = np.broadcast_to(gt[:, None, None], (c, k, k, n, ho, wo))
        return (_col2im(dcols, x.shape, k, stride, padding),)

    return _make(np.ascontiguousarray(out.transpose(1, 0, 2, 3)), (x,), vjp, "sumpool2d")


def parameters_requiring_grad(params: Iterable[Tensor], flag: bool):
    """Context manager toggling ``requires_grad`` on ``params``."""
    return _RequiresGrad(list(params), flag)


class _RequiresGrad:
    def __init__(self, params, flag):
        self.params, self.flag = params, flag

    def __enter__(self):
        self.prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = self.flag
        return self

    def __exit__(self, *exc):
        for p, f in zip(self.params, self.prev):
            p.requires_grad = f
