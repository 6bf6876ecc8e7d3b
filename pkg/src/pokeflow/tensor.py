"""Dense n-d arrays with a dynamic reverse-mode differentiation graph.

Values are numpy arrays (float32 for training, float64 for verification
runs); every op records a local gradient closure, and ``backward`` walks
the graph in reverse topological order. The graph is rebuilt on every
forward pass; there is no fusion and no higher-order differentiation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NumericError(FloatingPointError):
    """Non-finite values encountered where finite values are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values encountered")


def _shape_err(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} vs {tuple(b)}")


class Tensor:
    """A value node in the differentiation graph.

    ``data`` is always a contiguous numpy float array; ``grad`` is filled
    by :meth:`backward` for every ``requires_grad`` node reached from the
    loss. Tensors are treated as immutable once created (optimizers
    mutate leaf ``data`` in place between graph builds, never inside one).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None] | None) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.dtype)
        data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._result(data, (self, other), "add", bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accum(-g)
        return Tensor._result(-self.data, (self,), "neg", bw)

    def __sub__(self, other):
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other):
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(data, (self, other), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data * other.data), other.shape))

        return Tensor._result(data, (self, other), "div", bw)

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("pow: only scalar exponents supported")
        data = self.data ** p

        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._result(data, (self,), "pow", bw)

    def abs(self):
        data = np.abs(self.data)

        def bw(g):
            self._accum(g * np.sign(self.data))

        return Tensor._result(data, (self,), "abs", bw)

    # -- elementwise nonlinearities ----------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def bw(g):
            self._accum(g * data)

        return Tensor._result(data, (self,), "exp", bw)

    def log(self):
        data = np.log(self.data)

        def bw(g):
            self._accum(g / self.data)

        return Tensor._result(data, (self,), "log", bw)

    def tanh(self):
        data = np.tanh(self.data)

        def bw(g):
            self._accum(g * (1.0 - data * data))

        return Tensor._result(data, (self,), "tanh", bw)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            self._accum(g * data * (1.0 - data))

        return Tensor._result(data, (self,), "sigmoid", bw)

    def elu(self, alpha: float = 1.0):
        neg = self.data < 0
        data = np.where(neg, alpha * np.expm1(np.minimum(self.data, 0.0)), self.data)

        def bw(g):
            self._accum(g * np.where(neg, data + alpha, 1.0))

        return Tensor._result(data.astype(self.dtype), (self,), "elu", bw)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            self._accum(_spread(g, self.shape, axis, keepdims))

        return Tensor._result(np.asarray(data, dtype=self.dtype), (self,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False):
        data = self.data.mean(axis=axis, keepdims=keepdims)
        scale = self.size / max(np.asarray(data).size, 1)

        def bw(g):
            self._accum(_spread(g, self.shape, axis, keepdims) / scale)

        return Tensor._result(np.asarray(data, dtype=self.dtype), (self,), "mean", bw)

    # -- shape manipulation ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def bw(g):
            self._accum(g.reshape(self.shape))

        return Tensor._result(data, (self,), "reshape", bw)

    def __getitem__(self, idx):
        data = self.data[idx]
        fancy = _is_fancy_index(idx)

        def bw(g):
            full = np.zeros_like(self.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            self._accum(full)

        return Tensor._result(np.ascontiguousarray(data), (self,), "slice", bw)

    def permute_channels(self, perm: Sequence[int]):
        """Reorder entries along the last (channel) axis."""
        perm = np.asarray(perm, dtype=np.int64)
        c = self.shape[-1]
        if sorted(perm.tolist()) != list(range(c)):
            raise ShapeError(f"permute_channels: {perm.tolist()} is not a permutation of 0..{c - 1}")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(c)
        data = self.data[..., perm]

        def bw(g):
            self._accum(g[..., inv])

        return Tensor._result(np.ascontiguousarray(data), (self,), "permute_channels", bw)

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        data = self.data.transpose(axes)

        def bw(g):
            self._accum(g.transpose(inv))

        return Tensor._result(np.ascontiguousarray(data), (self,), "transpose", bw)

    # -- linear algebra -----------------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = _lift(other, self.dtype)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError("matmul: only 2-d operands supported")
        if self.shape[1] != other.shape[0]:
            raise _shape_err("matmul", self.shape, other.shape)
        data = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor._result(data, (self, other), "matmul", bw)

    __matmul__ = matmul

    # -- backward ------------------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Fills ``grad`` on every requires_grad node reachable from this
        tensor. Raises on non-scalar losses.
        """
        if self.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- free-function aliases and multi-input ops --------------------------------------------


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _is_fancy_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _spread(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is None:
        g = g.reshape((1,) * len(shape))
    elif not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
                s != b for i, (s, b) in enumerate(zip(t.shape, base)) if i != axis % len(base)):
            raise _shape_err("concat", base, t.shape)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accum(g[tuple(idx)])

    return Tensor._result(data, tensors, "concat", bw)


def exp(x: Tensor) -> Tensor:
    return x.exp()


def log(x: Tensor) -> Tensor:
    return x.log()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    return x.elu(alpha)


# -- 2-d convolution -----------------------------------------------------------------------
#
# Layout: activations (N, H, W, C), kernels (KH, KW, Cin, Cout). The kernel
# loop runs over the KH*KW offsets with one GEMM each; padding is applied
# once up front. ``xp`` always denotes the padded input.


def _conv_out_hw(H, W, KH, KW, stride, pad):
    OH = (H + 2 * pad - KH) // stride + 1
    OW = (W + 2 * pad - KW) // stride + 1
    return OH, OW


def _conv_fwd(xp: np.ndarray, w: np.ndarray, stride: int, OH: int, OW: int) -> np.ndarray:
    # one GEMM per kernel offset keeps peak memory at a single-offset slice
    N = xp.shape[0]
    KH, KW, Cin, Cout = w.shape
    y = np.zeros((N * OH * OW, Cout), dtype=xp.dtype)
    for u in range(KH):
        for v in range(KW):
            xs = xp[:, u:u + stride * OH:stride, v:v + stride * OW:stride, :]
            y += np.ascontiguousarray(xs).reshape(-1, Cin) @ w[u, v]
    return y.reshape(N, OH, OW, Cout)


def _conv_dx(gy: np.ndarray, w: np.ndarray, xp_shape, stride: int) -> np.ndarray:
    N, OH, OW, Cout = gy.shape
    KH, KW, Cin, _ = w.shape
    dxp = np.zeros(xp_shape, dtype=gy.dtype)
    gflat = gy.reshape(-1, Cout)
    for u in range(KH):
        for v in range(KW):
            dxp[:, u:u + stride * OH:stride, v:v + stride * OW:stride, :] += \
                (gflat @ w[u, v].T).reshape(N, OH, OW, Cin)
    return dxp


def _conv_dw(xp: np.ndarray, gy: np.ndarray, KH: int, KW: int, stride: int) -> np.ndarray:
    N, OH, OW, Cout = gy.shape
    Cin = xp.shape[3]
    dw = np.zeros((KH, KW, Cin, Cout), dtype=gy.dtype)
    gflat = gy.reshape(-1, Cout)
    for u in range(KH):
        for v in range(KW):
            xs = xp[:, u:u + stride * OH:stride, v:v + stride * OW:stride, :]
            dw[u, v] = np.ascontiguousarray(xs).reshape(-1, Cin).T @ gflat
    return dw


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, activations (N,H,W,Cin), kernel (KH,KW,Cin,Cout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise _shape_err("conv2d", x.shape, w.shape)
    N, H, W, Cin = x.shape
    KH, KW, _, Cout = w.shape
    OH, OW = _conv_out_hw(H, W, KH, KW, stride, padding)
    if OH <= 0 or OW <= 0:
        raise _shape_err("conv2d", x.shape, w.shape)
    xp = _pad_hw(x.data, padding)
    y = _conv_fwd(xp, w.data, stride, OH, OW)
    if b is not None:
        y += b.data

    def bw(g):
        if x.requires_grad:
            dxp = _conv_dx(g, w.data, xp.shape, stride)
            if padding:
                dxp = dxp[:, padding:padding + H, padding:padding + W, :]
            x._accum(dxp)
        if w.requires_grad:
            w._accum(_conv_dw(xp, g, KH, KW, stride))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(y, parents, "conv2d", bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an (N, H, W, C) tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: need 4-d input, got {x.shape}")
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        n, h2, w2, c = g.shape
        x._accum(g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    return Tensor._result(data, (x,), "upsample2x", bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, padding: int = 1,
                     output_padding: int = 1) -> Tensor:
    """Transposed (upsampling) convolution; kernel (KH,KW,Cin,Cout).

    Output height is (H-1)*stride - 2*padding + KH + output_padding; the
    default arguments double the spatial extent with a 3x3 kernel.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise _shape_err("conv_transpose2d", x.shape, w.shape)
    N, H, W, Cin = x.shape
    KH, KW, _, Cout = w.shape
    FH = (H - 1) * stride + KH
    FW = (W - 1) * stride + KW
    OH = FH - 2 * padding + output_padding
    OW = FW - 2 * padding + output_padding
    if OH <= 0 or OW <= 0 or output_padding > padding:
        raise _shape_err("conv_transpose2d", x.shape, w.shape)
    wt = np.ascontiguousarray(w.data.transpose(0, 1, 3, 2))  # (KH,KW,Cout,Cin)
    yp = _conv_dx(x.data, wt, (N, FH, FW, Cout), stride)
    y = np.ascontiguousarray(yp[:, padding:padding + OH, padding:padding + OW, :])
    if b is not None:
        y += b.data

    def bw(g):
        gp = np.zeros((N, FH, FW, Cout), dtype=g.dtype)
        gp[:, padding:padding + OH, padding:padding + OW, :] = g
        if x.requires_grad:
            x._accum(_conv_fwd(gp, wt, stride, H, W))
        if w.requires_grad:
            dwt = _conv_dw(gp, x.data, KH, KW, stride)  # (KH,KW,Cout,Cin)
            w._accum(np.ascontiguousarray(dwt.transpose(0, 1, 3, 2)))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(y, parents, "conv_transpose2d", bw)


# -- gradient utilities ----------------------------------------------------------------------


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Backward pass returning one gradient array per parameter.

    Parameters not reached by the graph get zero gradients.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


class GradCheckReport:
    def __init__(self, per_param: list[float]):
        self.per_param = per_param
        self.max_rel_error = max(per_param) if per_param else 0.0

    def __repr__(self) -> str:
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e})"


def grad_check(fn: Callable[..., Tensor], points: Sequence[Tensor],
               eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*points)`` to central differences.

    ``fn`` must return a scalar Tensor. Checks every entry of every
    requires_grad point; use float64 points for meaningful tolerances.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    points = list(points)
    loss = fn(*points)
    analytic = gradients(loss, points)
    per_param = []
    for p, ga in zip(points, analytic):
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*points).item()
            flat[i] = orig - eps
            fm = fn(*points).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * eps)
        ga = ga.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(num)), 1e-6)
        per_param.append(float(np.max(np.abs(ga - num) / denom)))
    return GradCheckReport(per_param)
