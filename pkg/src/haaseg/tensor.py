"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; calling ``backward()`` on a scalar loss replays the recorded
operations in exact reverse creation order, accumulating gradients into
every ``requires_grad`` tensor that fed the loss. All data is contiguous
row-major float64. A tensor and the graph hanging off it belong to a
single thread; independent graphs may live on different threads.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "matmul",
    "einsum",
    "relu",
    "sigmoid",
    "log",
    "softplus",
    "sqrt",
    "reciprocal",
    "clamp",
    "softmax_lastdim",
    "tsum",
    "expand",
    "reshape",
    "permute",
    "take_rows",
    "conv2d",
    "avg_pool2d",
    "bilinear_upsample",
    "channel_norm",
    "finite_diff_check",
    "watch_kinks",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_seq_counter = itertools.count()

# When not None, relu/clamp record how close their inputs come to the
# nonsmooth point. Finite differencing is only trustworthy with a margin
# from kinks, so the gradient-check harness inspects this.
_kink_log: Optional[list] = None


class watch_kinks:
    """Context manager collecting each relu/clamp call's distance to its kink."""

    def __enter__(self) -> list:
        global _kink_log
        self._prev = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc) -> None:
        global _kink_log
        _kink_log = self._prev


class Tensor:
    """N-dimensional float64 array participating in a differentiation graph.

    Leaf tensors are created directly from data; interior tensors are
    produced by the operations in this module, which attach the parents
    and a backward closure. ``grad`` stays ``None`` until a backward pass
    reaches the tensor. Data is treated as immutable once the tensor has
    been consumed by an operation; only ``grad`` is written afterwards.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            # keep row-major layout without flattening 0-d scalars
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate grads of every requires_grad tensor reachable from self.

        The receiver must be a scalar (one element). Nodes are replayed in
        exact reverse creation order; gradients sum when a tensor feeds
        several consumers.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self._accumulate(np.ones_like(self.data))
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # Operator sugar; the module-level functions carry the real contracts.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return self.scale(-1.0)

    def scale(self, c: float) -> "Tensor":
        c = float(c)
        out = _make(self.data * c, (self,))
        if out.requires_grad:

            def bw(g):
                if self.requires_grad:
                    self._accumulate(g * c)

            out._backward = bw
        return out

    def shift(self, c: float) -> "Tensor":
        c = float(c)
        out = _make(self.data + c, (self,))
        if out.requires_grad:

            def bw(g):
                if self.requires_grad:
                    self._accumulate(g)

            out._backward = bw
        return out

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        return permute(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axes, keepdims)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...]) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents if rg else ())


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _make(a.data + b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _make(a.data - b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _make(a.data * b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] by b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = _make(a.data @ b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        out._backward = bw
    return out


# np.einsum with optimize=False walks a generic C loop; the contraction
# patterns on the training path are plain (batched) matrix products, so
# dispatch those to BLAS. Keys cover forward specs and the specs their
# gradient rule generates.
_EINSUM_FAST = {
    "oc,chw->who": lambda w, x: np.ascontiguousarray(
        (w @ x.reshape(x.shape[0], -1)).reshape(w.shape[0], *x.shape[1:]).transpose(2, 1, 0)
    ),
    "who,chw->oc": lambda g, x: g.transpose(2, 1, 0).reshape(g.shape[2], -1)
    @ x.reshape(x.shape[0], -1).T,
    "who,oc->chw": lambda g, w: (
        w.T @ g.transpose(2, 1, 0).reshape(g.shape[2], -1)
    ).reshape(w.shape[1], g.shape[1], g.shape[0]),
    "bld,bmd->blm": lambda q, k: q @ k.transpose(0, 2, 1),
    "blm,bld->bmd": lambda g, q: g.transpose(0, 2, 1) @ q,
    "blm,bmd->bld": lambda a, v: a @ v,
    "bld,blm->bmd": lambda g, a: a.transpose(0, 2, 1) @ g,
    "nd,md->nm": lambda q, k: q @ k.T,
    "nm,nd->md": lambda g, q: g.T @ q,
    "nm,md->nd": lambda a, v: a @ v,
    "nd,nm->md": lambda g, a: a.T @ g,
}


def _einsum_exec(spec: str, *arrays: np.ndarray) -> np.ndarray:
    fast = _EINSUM_FAST.get(spec)
    if fast is not None:
        return fast(*arrays)
    return np.einsum(spec, *arrays)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable einsum for explicit subscripts without diagonals.

    The gradient of each operand is itself an einsum with the output
    subscript swapped in, which is valid as long as every index of an
    operand also appears in the output or another operand (checked).
    """
    if "->" not in subscripts or "." in subscripts:
        raise ValueError(f"einsum needs explicit subscripts, got {subscripts!r}")
    lhs, out_sub = subscripts.split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(
            f"einsum {subscripts!r} expects {len(in_subs)} operands, got {len(operands)}"
        )
    for i, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum operand {i} has repeated index in {subscripts!r}")
        visible = set(out_sub).union(*(set(o) for j, o in enumerate(in_subs) if j != i))
        if not set(s) <= visible:
            raise ValueError(
                f"einsum {subscripts!r}: operand {i} sums an index no gradient rule covers"
            )
    out = _make(_einsum_exec(subscripts, *(t.data for t in operands)), operands)
    if out.requires_grad:

        def bw(g):
            for i, t in enumerate(operands):
                if not t.requires_grad:
                    continue
                others = [out_sub] + [o for j, o in enumerate(in_subs) if j != i]
                args = [g] + [o.data for j, o in enumerate(operands) if j != i]
                spec = ",".join(others) + "->" + in_subs[i]
                t._accumulate(_einsum_exec(spec, *args))

        out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    if _kink_log is not None:
        _kink_log.append(float(np.min(np.abs(x.data))))
    out = _make(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(g * (x.data > 0.0))

        out._backward = bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = _make(y, (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(g * y * (1.0 - y))

        out._backward = bw
    return out


def log(x: Tensor) -> Tensor:
    out = _make(np.log(x.data), (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(g / x.data)

        out._backward = bw
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow for large |x|."""
    d = x.data
    y = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    out = _make(y, (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                s = np.empty_like(d)
                pos = d >= 0
                s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
                e = np.exp(d[~pos])
                s[~pos] = e / (1.0 + e)
                x._accumulate(g * s)

        out._backward = bw
    return out


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = _make(y, (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(g / (2.0 * y))

        out._backward = bw
    return out


def reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    out = _make(y, (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(-g * y * y)

        out._backward = bw
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient is passed through strictly inside."""
    if _kink_log is not None:
        _kink_log.append(
            float(np.min(np.minimum(np.abs(x.data - lo), np.abs(x.data - hi))))
        )
    out = _make(np.clip(x.data, lo, hi), (x,))
    if out.requires_grad:
        inside = (x.data > lo) & (x.data < hi)

        def bw(g):
            if x.requires_grad:
                x._accumulate(g * inside)

        out._backward = bw
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    a = e / np.sum(e, axis=-1, keepdims=True)
    out = _make(a, (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                inner = np.sum(a * g, axis=-1, keepdims=True)
                x._accumulate(a * (g - inner))

        out._backward = bw
    return out


def tsum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum over all elements (axes=None) or over the given axes."""
    if axes is not None and not isinstance(axes, tuple):
        axes = (axes,)
    y = np.sum(x.data, axis=axes, keepdims=keepdims)
    out = _make(np.asarray(y), (x,))
    if out.requires_grad:

        def bw(g):
            if not x.requires_grad:
                return
            if axes is None:
                x._accumulate(np.broadcast_to(g, x.data.shape))
                return
            gk = g if keepdims else np.expand_dims(g, axes)
            x._accumulate(np.broadcast_to(gk, x.data.shape))

        out._backward = bw
    return out


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast size-1 axes up to ``shape`` (rank must already match)."""
    shape = tuple(shape)
    if len(shape) != x.data.ndim:
        raise ShapeError(f"expand rank mismatch: {x.data.shape} -> {shape}")
    for a, (have, want) in enumerate(zip(x.data.shape, shape)):
        if have != want and have != 1:
            raise ShapeError(f"expand cannot map axis {a}: {x.data.shape} -> {shape}")
    bcast_axes = tuple(
        a for a, (have, want) in enumerate(zip(x.data.shape, shape)) if have == 1 and want != 1
    )
    out = _make(np.broadcast_to(x.data, shape).copy(), (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(np.sum(g, axis=bcast_axes, keepdims=True) if bcast_axes else g)

        out._backward = bw
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _make(x.data.reshape(tuple(shape)), (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(g.reshape(x.data.shape))

        out._backward = bw
    return out


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Reorder axes; ``axes`` must be a permutation of range(ndim)."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {x.data.shape}")
    inv = np.argsort(axes)
    out = _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                x._accumulate(np.transpose(g, inv))

        out._backward = bw
    return out


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of x along axis 0 with an integer index array.

    Output shape is ``idx.shape + x.shape[1:]``; the backward pass
    scatter-adds, so repeated indices accumulate.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("take_rows needs an integer index array")
    out = _make(x.data[idx], (x,))
    if out.requires_grad:

        def bw(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.add.at(gx, idx, g)
                x._accumulate(gx)

        out._backward = bw
    return out


def _out_extent(size: int, k: int, stride: int, padding: int, opname: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"{opname}: window k={k}, stride={stride}, padding={padding} does not "
            f"tile extent {size} into an integral output"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of x [C,H,W] with kernel [O,C,k,k] and zero padding.

    Gradients flow to the input, the kernel, and the bias. Output extents
    must come out integral for the given stride/padding.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects x[C,H,W] and kernel[O,C,k,k], got {x.data.shape} "
            f"and {kernel.data.shape}"
        )
    C, H, W = x.data.shape
    O, C2, kh, kw = kernel.data.shape
    if C2 != C or kh != kw:
        raise ShapeError(
            f"conv2d kernel {kernel.data.shape} incompatible with input {x.data.shape}"
        )
    k, s, p = kh, int(stride), int(padding)
    if k < 1 or s < 1 or p < 0:
        raise ShapeError(f"conv2d needs k>=1, stride>=1, padding>=0; got {k},{s},{p}")
    Ho = _out_extent(H, k, s, p, "conv2d")
    Wo = _out_extent(W, k, s, p, "conv2d")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((C, k, k, Ho * Wo))
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj, :] = xp[
                :, ki : ki + s * (Ho - 1) + 1 : s, kj : kj + s * (Wo - 1) + 1 : s
            ].reshape(C, -1)
    mat = cols.reshape(C * k * k, Ho * Wo)
    w2 = kernel.data.reshape(O, -1)
    y = (w2 @ mat).reshape(O, Ho, Wo)
    if bias is not None:
        if bias.data.shape != (O,):
            raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({O},)")
        y = y + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(y, parents)
    if out.requires_grad:

        def bw(g):
            g2 = g.reshape(O, -1)
            if kernel.requires_grad:
                kernel._accumulate((g2 @ mat.T).reshape(kernel.data.shape))
            if bias is not None and bias.requires_grad:
                bias._accumulate(g2.sum(axis=1))
            if x.requires_grad:
                dmat = (w2.T @ g2).reshape(C, k, k, Ho, Wo)
                dxp = np.zeros((C, H + 2 * p, W + 2 * p))
                for ki in range(k):
                    for kj in range(k):
                        dxp[
                            :,
                            ki : ki + s * (Ho - 1) + 1 : s,
                            kj : kj + s * (Wo - 1) + 1 : s,
                        ] += dmat[:, ki, kj]
                x._accumulate(dxp[:, p : p + H, p : p + W] if p else dxp)

        out._backward = bw
    return out


def avg_pool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Mean over k-by-k windows; zero-padded cells are left out of the count."""
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool2d expects x[C,H,W], got {x.data.shape}")
    C, H, W = x.data.shape
    k, s, p = int(k), int(stride), int(padding)
    Ho = _out_extent(H, k, s, p, "avg_pool2d")
    Wo = _out_extent(W, k, s, p, "avg_pool2d")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    valid = np.pad(np.ones((H, W)), ((p, p), (p, p))) if p else np.ones((H, W))
    sums = np.zeros((C, Ho, Wo))
    counts = np.zeros((Ho, Wo))
    for ki in range(k):
        for kj in range(k):
            sl = np.s_[ki : ki + s * (Ho - 1) + 1 : s, kj : kj + s * (Wo - 1) + 1 : s]
            sums += xp[(np.s_[:],) + sl]
            counts += valid[sl]
    y = sums / counts
    out = _make(y, (x,))
    if out.requires_grad:

        def bw(g):
            if not x.requires_grad:
                return
            gn = g / counts
            dxp = np.zeros((C, H + 2 * p, W + 2 * p))
            for ki in range(k):
                for kj in range(k):
                    dxp[
                        :,
                        ki : ki + s * (Ho - 1) + 1 : s,
                        kj : kj + s * (Wo - 1) + 1 : s,
                    ] += gn
            x._accumulate(dxp[:, p : p + H, p : p + W] if p else dxp)

        out._backward = bw
    return out


def _interp_coords(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Corner-aligned: first/last output samples hit first/last source samples.
    if src == 1 or dst == 1:
        return np.zeros(dst, dtype=np.intp), np.zeros(dst, dtype=np.intp), np.zeros(dst)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.minimum(pos.astype(np.intp), src - 2)
    t = pos - i0
    return i0, i0 + 1, t


def _interp_axis1(x: Tensor, src: int, dst: int) -> Tensor:
    # Interpolate along axis 1 of [A, L, B] in the x0 + t*(x1-x0) form so a
    # constant signal is reproduced bit-exactly.
    i0, i1, t = _interp_coords(src, dst)
    xs = permute(x, (1, 0, 2))
    x0 = take_rows(xs, i0)
    x1 = take_rows(xs, i1)
    tt = expand(Tensor(t.reshape(dst, 1, 1)), x0.shape)
    y = add(x0, mul(tt, sub(x1, x0)))
    return permute(y, (1, 0, 2))


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling of x [C,H,W] by an integer factor."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects x[C,H,W], got {x.data.shape}")
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"bilinear_upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    C, H, W = x.data.shape
    y = _interp_axis1(x, H, factor * H)
    y = permute(y, (0, 2, 1))
    y = _interp_axis1(y, W, factor * W)
    return permute(y, (0, 2, 1))


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel of x [C,H,W] over its spatial extent.

    Plays the role of batch norm at batch size one: statistics are taken
    over H*W per channel, then gamma/beta scale and shift.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"channel_norm expects x[C,H,W], got {x.data.shape}")
    C, H, W = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(
            f"channel_norm needs gamma/beta of shape ({C},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    n = float(H * W)
    mu = tsum(x, (1, 2), keepdims=True).scale(1.0 / n)
    xc = sub(x, expand(mu, x.shape))
    var = tsum(mul(xc, xc), (1, 2), keepdims=True).scale(1.0 / n)
    inv_std = reciprocal(sqrt(var.shift(eps)))
    y = mul(xc, expand(inv_std, x.shape))
    g3 = expand(reshape(gamma, (C, 1, 1)), x.shape)
    b3 = expand(reshape(beta, (C, 1, 1)), x.shape)
    return add(mul(y, g3), b3)


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between f's analytic gradient at x and central differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    coordinate. ``f`` must be scalar-valued, built from the taped operations,
    and smooth within eps of x (keep relu/clamp inputs away from their kinks).
    """
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs x.requires_grad=True")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs scalar f, got shape {out.data.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).data.item()
        flat[i] = orig - eps
        fm = f(x).data.item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
