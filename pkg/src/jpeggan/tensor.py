"""Dense NCHW tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation records its parents and a
backward closure on the output tensor.  Backward closures are themselves
written in terms of these same operations, so gradients can be
differentiated again (``grad(..., create_graph=True)``) — the gradient
penalty used in adversarial training needs exactly that.

Execution is single-threaded and serial; given the same seed and op
sequence, results are bit-identical.  Tensors are immutable once created
except for the owner-held ``grad`` buffer on leaves (and in-place parameter
updates performed by an optimizer between graph builds).

Shapes must match exactly for binary elementwise ops; the only implicit
mixing allowed is scalar-with-tensor.  ``expand`` exists as the explicit
escape hatch where a broadcast is genuinely wanted (bias addition).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "tensor",
    "zeros",
    "ones",
    "grad",
    "backward",
    "gradient_check",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs."""


class GraphError(RuntimeError):
    """Backward was asked for something the recorded graph cannot provide."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dt) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dt)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dt):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dt)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def _grad_mode(flag: bool):
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def no_grad():
    """Context manager: ops inside record nothing on the tape."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    # One cheap reduction; only on suspicion do the exact elementwise scan.
    # A native-dtype sum can overflow on legitimate inputs, so a non-finite
    # screen is a suspicion, not a verdict.
    if data.dtype.kind != "f":
        return
    s = data.sum() if data.size else 0.0
    if not np.isfinite(s):
        if not np.isfinite(data).all():
            raise NonFiniteError(f"op '{op}' produced a non-finite value")


class Tensor:
    """A dense array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (
            np.dtype(np.float32),
            np.dtype(np.float64),
        ):
            arr = data  # float arrays keep their precision
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bw: Callable | None = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scalar_mul(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return scalar_mul(self, 1.0 / other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axes=None, keepdims=False):
        return sum_axes(self, axes, keepdims) if axes is not None else sum_all(self)

    def mean(self, axes=None, keepdims=False):
        return mean_axes(self, axes, keepdims) if axes is not None else mean_all(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], bw, check: bool = True) -> Tensor:
    # `check=False` is reserved for ops that cannot map finite inputs to a
    # non-finite output (pure data movement, or range-bounded elementwise).
    if check:
        _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._bw = None
    out._op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c) -> Tensor:
    c = float(c)
    return _result(a.data + c, "add_scalar", (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (mul(g, b), mul(g, a)))


def scalar_mul(a: Tensor, c) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scalar_mul", (a,), lambda g: (scalar_mul(g, c),))


def pow_const(a: Tensor, p) -> Tensor:
    p = float(p)

    def bw(g):
        return (scalar_mul(mul(g, pow_const(a, p - 1.0)), p),)

    return _result(a.data ** p, "pow_const", (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    return pow_const(a, 0.5)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)

    def bw(g):
        return (mul(g, Tensor(mask)),)

    return _result(np.maximum(a.data, 0.0), "relu", (a,), bw, check=False)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)

    def bw(g):
        return (mul(g, Tensor(factor)),)

    # |output| <= |input| for alpha in [0, 1], so finiteness is inherited
    return _result(np.where(a.data > 0, a.data, alpha * a.data), "leaky_relu", (a,), bw, check=False)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        return (mul(g, Tensor(sign)),)

    return _result(np.abs(a.data), "abs", (a,), bw, check=False)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, "tanh", (a,), None, check=False)

    def bw(g):
        return (mul(g, add_scalar(scalar_mul(mul(out, out), -1.0), 1.0)),)

    out._bw = bw if out.requires_grad else None
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is inside."""
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def bw(g):
        return (mul(g, Tensor(mask)),)

    return _result(np.clip(a.data, lo, hi), "clamp", (a,), bw, check=False)


def round_ste(a: Tensor) -> Tensor:
    """Round half away from zero; the gradient passes straight through."""
    y = np.floor(np.abs(a.data) + 0.5) * np.sign(a.data)
    return _result(y, "round_ste", (a,), lambda g: (g,), check=False)


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bw(g):
        return (reshape(g, old),)

    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _result(data, "reshape", (a,), bw, check=False)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (permute(g, inv),)

    # a transposed view; anything needing contiguity copies on demand
    return _result(a.data.transpose(axes), "permute", (a,), bw, check=False)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose2d needs a matrix")
    return permute(a, (1, 0))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of `a` to `shape`.

    The backward reduces over every broadcast axis, which keeps the public
    elementwise ops free of implicit broadcasting.
    """
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    added = len(shape) - a.ndim
    reduced = tuple(range(added)) + tuple(
        i + added for i, d in enumerate(a.shape) if d == 1 and shape[i + added] != 1
    )
    old = a.shape

    def bw(g):
        s = sum_axes(g, reduced, keepdims=False) if reduced else g
        return (reshape(s, old),)

    return _result(data, "expand", (a,), bw, check=False)


def sum_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    if axes is None:
        return sum_all(a)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    kept = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    old = a.shape

    def bw(g):
        gk = g if keepdims else reshape(g, kept)
        return (expand(gk, old),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), "sum_axes", (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    old = a.shape
    n = a.size

    def bw(g):
        return (expand(reshape(g, (1,) * len(old)) if old else g, old),)

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    return scalar_mul(sum_all(a), 1.0 / a.size)


def mean_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    n = 1
    for ax in axes:
        n *= a.shape[ax % a.ndim]
    return scalar_mul(sum_axes(a, axes, keepdims), 1.0 / n)


def mean(a: Tensor) -> Tensor:
    return mean_all(a)


def l1_norm(a: Tensor) -> Tensor:
    return sum_all(abs_(a))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise ShapeError("concat: rank mismatch")
        for i, (d0, d1) in enumerate(zip(tensors[0].shape, t.shape)):
            if i != axis and d0 != d1:
                raise ShapeError("concat: non-axis extents differ")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1]))
            for i in range(len(sizes))
        )

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        "concat",
        tuple(tensors),
        bw,
        check=False,
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range on axis {axis}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    full = a.shape

    def bw(g):
        return (embed_axis(g, axis, start, full),)

    return _result(a.data[idx], "slice_axis", (a,), bw, check=False)


def embed_axis(a: Tensor, axis: int, start: int, full_shape) -> Tensor:
    """Place `a` into zeros of `full_shape` at offset `start` along `axis`."""
    axis = axis % a.ndim
    full_shape = tuple(full_shape)
    stop = start + a.shape[axis]
    out = np.zeros(full_shape, dtype=a.data.dtype)
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    out[idx] = a.data

    def bw(g):
        return (slice_axis(g, axis, start, stop),)

    return _result(out, "embed_axis", (a,), bw, check=False)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")

    def bw(g):
        return (matmul(g, transpose2d(b)), matmul(transpose2d(a), g))

    return _result(a.data @ b.data, "matmul", (a, b), bw)


# -- spatial ops on NCHW ----------------------------------------------------


def pad2d(a: Tensor, pt: int, pb: int, pl: int, pr: int) -> Tensor:
    """Zero padding of the two trailing (spatial) axes."""
    if a.ndim != 4:
        raise ShapeError("pad2d expects NCHW")
    if min(pt, pb, pl, pr) < 0:
        raise ShapeError("negative pad")

    def bw(g):
        return (crop2d(g, pt, pb, pl, pr),)

    data = np.pad(a.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return _result(data, "pad2d", (a,), bw, check=False)


def crop2d(a: Tensor, pt: int, pb: int, pl: int, pr: int) -> Tensor:
    if a.ndim != 4:
        raise ShapeError("crop2d expects NCHW")
    H, W = a.shape[2], a.shape[3]
    if min(pt, pb, pl, pr) < 0 or pt + pb >= H or pl + pr >= W:
        raise ShapeError("crop out of range")

    def bw(g):
        return (pad2d(g, pt, pb, pl, pr),)

    data = a.data[:, :, pt : H - pb, pl : W - pr]
    return _result(data, "crop2d", (a,), bw, check=False)


def im2col(a: Tensor, kh: int, kw: int, sh: int = 1, sw: int = 1, ph: int = 0, pw: int = 0) -> Tensor:
    """Extract sliding (kh, kw) patches: NCHW -> (N, OH*OW, C*kh*kw).

    Patch rows are flattened in (C, kh, kw) order, matching how a
    (O, C, kh, kw) kernel flattens to (O, C*kh*kw). Optional symmetric
    zero padding (ph, pw) is applied before windowing.
    """
    if a.ndim != 4:
        raise ShapeError("im2col expects NCHW")
    if ph < 0 or pw < 0:
        raise ShapeError("negative pad")
    N, C, H, W = a.shape
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ShapeError("kernel larger than input")
    OH = (Hp - kh) // sh + 1
    OW = (Wp - kw) // sw + 1
    x = np.pad(a.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else a.data
    sN, sC, sH, sW = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(N, OH, OW, C, kh, kw),
        strides=(sN, sH * sh, sW * sw, sC, sH, sW),
        writeable=False,
    )
    cols = win.reshape(N, OH * OW, C * kh * kw)

    def bw(g):
        full = col2im(g, (N, C, Hp, Wp), kh, kw, sh, sw)
        return (crop2d(full, ph, ph, pw, pw) if ph or pw else full,)

    # the reshape of the strided window is itself the copy
    return _result(cols, "im2col", (a,), bw, check=False)


def col2im(cols: Tensor, img_shape, kh: int, kw: int, sh: int = 1, sw: int = 1) -> Tensor:
    """Adjoint of im2col: scatter-add patch rows back onto the image grid."""
    N, C, H, W = (int(v) for v in img_shape)
    OH = (H - kh) // sh + 1
    OW = (W - kw) // sw + 1
    if cols.shape != (N, OH * OW, C * kh * kw):
        raise ShapeError(f"col2im: got {cols.shape}, wanted {(N, OH * OW, C * kh * kw)}")
    g = cols.data.reshape(N, OH, OW, C, kh, kw)
    out = np.zeros((N, C, H, W), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw] += g[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)

    def bw(gg):
        return (im2col(gg, kh, kw, sh, sw),)

    return _result(out, "col2im", (cols,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW with an OIHW kernel.

    Lowered to one GEMM over im2col patches. The projection is a single tape
    node whose backward is composed of differentiable ops, so second
    derivatives (gradient-of-gradient) stay exact.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    N, C, H, W = x.shape
    O, I, kh, kw = w.shape
    if I != C:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {I}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    L, K = OH * OW, C * kh * kw
    cols = im2col(x, kh, kw, stride, stride, padding, padding)  # (N, L, K)

    flat = cols.data.reshape(N * L, K)
    out = flat @ w.data.reshape(O, K).T
    if b is not None:
        out += b.data
    out = out.reshape(N, OH, OW, O).transpose(0, 3, 1, 2)

    def bw(g):
        gf = reshape(permute(g, (0, 2, 3, 1)), (N * L, O))
        d_cols = reshape(matmul(gf, reshape(w, (O, K))), (N, L, K))
        d_w = reshape(
            transpose2d(matmul(transpose2d(reshape(cols, (N * L, K))), gf)),
            (O, C, kh, kw),
        )
        if b is None:
            return d_cols, d_w
        return d_cols, d_w, sum_axes(gf, 0)

    parents = (cols, w) if b is None else (cols, w, b)
    return _result(out, "conv2d", parents, bw)


def avg_pool2d(a: Tensor, kh: int, kw: int) -> Tensor:
    """Non-overlapping block-mean pooling; extents must divide evenly."""
    if a.ndim != 4:
        raise ShapeError("avg_pool2d expects NCHW")
    N, C, H, W = a.shape
    if H % kh or W % kw:
        raise ShapeError(f"pool {kh}x{kw} does not tile {H}x{W}")
    data = a.data.reshape(N, C, H // kh, kh, W // kw, kw).mean(axis=(3, 5))

    def bw(g):
        return (scalar_mul(upsample_repeat2d(g, kh, kw), 1.0 / (kh * kw)),)

    return _result(data, "avg_pool2d", (a,), bw)


def upsample_repeat2d(a: Tensor, kh: int, kw: int) -> Tensor:
    """Nearest-neighbor upsampling: each pixel becomes a kh x kw block."""
    if a.ndim != 4:
        raise ShapeError("upsample expects NCHW")
    data = np.repeat(np.repeat(a.data, kh, axis=2), kw, axis=3)

    def bw(g):
        return (scalar_mul(avg_pool2d(g, kh, kw), float(kh * kw)),)

    return _result(data, "upsample_repeat2d", (a,), bw, check=False)


# -- autodiff drivers -------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _walk(output: Tensor, create_graph: bool, consume: bool) -> dict[int, Tensor]:
    if output.size != 1:
        raise GraphError("backward needs a scalar loss")
    if output._bw is None and not output.requires_grad:
        raise GraphError("loss is not part of the recorded graph")
    order = _toposort(output)
    grads: dict[int, Tensor] = {
        id(output): Tensor(np.ones(output.shape, dtype=output.data.dtype))
    }
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._bw is None:
                continue
            parent_grads = node._bw(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    if consume:
        for node in order:
            if node._bw is not None:
                node._bw = None
                node._parents = ()
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` for every requires-grad leaf.

    The walked portion of the tape is consumed afterwards.
    """
    order = _toposort(loss)
    grads = _walk(loss, create_graph=False, consume=False)
    for node in order:
        if node.requires_grad and node._bw is None and id(node) in grads:
            g = grads[id(node)].data
            node.grad = g.copy() if node.grad is None else node.grad + g
    for node in order:
        if node._bw is not None:
            node._bw = None
            node._parents = ()


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Return d(output)/d(input) for each input, as tensors.

    With ``create_graph=True`` the returned gradients carry their own tape,
    so they can be differentiated again.  The forward graph is left intact.
    """
    inputs = list(inputs)
    grads = _walk(output, create_graph=create_graph, consume=False)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise GraphError("an input does not influence the output")
            g = Tensor(np.zeros(t.shape, dtype=t.data.dtype))
        out.append(g if create_graph else g.detach())
    return out


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |a - n| / max(1e-8, |a| + |n|).  Intended
    for 64-bit tensors; rounding ops have no meaningful finite difference and
    are expected to fail this check.
    """
    x0 = Tensor(x.data.astype(np.float64), requires_grad=True)
    y = f(x0)
    if y.size != 1:
        raise GraphError("gradient_check needs a scalar-valued f")
    analytic = grad(y, [x0])[0].data
    numeric = np.zeros_like(x0.data)
    flat = x0.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f(Tensor(x0.data)).item()
            flat[i] = keep - eps
            lo = f(Tensor(x0.data)).item()
            flat[i] = keep
            nflat[i] = (hi - lo) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
