"""Dense tensors with reverse-mode automatic differentiation.

Small tape-based autodiff core: each operation produces a new Tensor that
remembers its parents and a backward closure. Calling ``backward()`` on a
scalar result walks the tape in reverse topological order and accumulates
gradients into every tensor reached.

Conventions:
  * image-like tensors are laid out (N, C, H, W), row-major
  * runtime precision is float32; verification runs use float64 tensors
  * forward evaluation is deterministic for fixed inputs on one machine
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "absolute",
    "leaky_relu",
    "matmul_batched",
    "reshape",
    "transpose",
    "concat",
    "sum_reduce",
    "mean_all",
    "conv2d",
    "conv_transpose2d",
    "conv3d",
    "max_pool2d",
    "global_mean_pool",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense multi-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Build an op-result tensor. Tape is attached only when grad is
        enabled and some parent participates in differentiation."""
        out = cls(data)
        if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Constant copy of this tensor, cut off from the tape."""
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        ``seed`` defaults to ones (for a scalar loss this is d loss/d loss).
        Gradients accumulate into ``.grad`` of every tensor on the tape.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
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

        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the full op set lives at module level.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul_batched(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor._make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return Tensor._make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return Tensor._make(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return Tensor._make(data, (a,), backward)


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; pass ``eps`` to guard against log(0)."""
    data = np.log(a.data + eps) if eps else np.log(a.data)

    def backward(g):
        _accumulate(a, g / (a.data + eps) if eps else g / a.data)

    return Tensor._make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for overflow safety
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return Tensor._make(data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return Tensor._make(data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = a.data >= 0
    data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        _accumulate(a, np.where(mask, g, slope * g))

    return Tensor._make(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return Tensor._make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise ValueError("concat of empty sequence")
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return Tensor._make(data, parts, backward)


def sum_reduce(a: Tensor, axes: int | Sequence[int] | None = None,
               keepdims: bool = False) -> Tensor:
    if axes is not None and not isinstance(axes, tuple):
        axes = tuple(axes) if isinstance(axes, (list, set)) else (axes,)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor._make(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.mean()

    def backward(g):
        _accumulate(a, np.full(a.data.shape, g / n, dtype=a.data.dtype))

    return Tensor._make(np.asarray(data), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the two trailing axes; leading axes must agree."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul dim mismatch: {a.data.shape} x {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul leading dims differ: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution kernels (im2col + BLAS matmul)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        n0, c0, h0, w0 = x.shape
        xp = np.zeros((n0, c0, h0 + 2 * pad, w0 + 2 * pad), x.dtype)
        xp[:, :, pad:pad + h0, pad:pad + w0] = x
        x = xp
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False)
    cols = np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:hp - pad, pad:wp - pad]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2D cross-correlation over (N, C, H, W) input.

    Output spatial dims: floor((H + 2 pad - kH) / stride) + 1. Differentiable
    with respect to input, weight and bias.
    """
    n, c_in, h, w = x.data.shape
    c_out, c_w, kh, kw = weight.data.shape
    if c_in != c_w:
        raise ValueError(f"conv2d channel mismatch: input {c_in} vs weight {c_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel dims must be odd")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride >= 1 and padding >= 0 required")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w_mat = weight.data.reshape(c_out, -1)
    y = cols @ w_mat.T + bias.data
    # transpose view; downstream ops handle non-contiguous data
    data = y.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        _accumulate(bias, g_mat.sum(axis=0))
        _accumulate(weight, (g_mat.T @ cols).reshape(weight.data.shape))
        dcols = g_mat @ w_mat
        _accumulate(x, _col2im(dcols, x.data.shape, kh, kw, stride, padding))

    return Tensor._make(data, (x, weight, bias), backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution for upsampling, restricted to kernel == stride.

    weight: (C_in, C_out, k, k). Each input pixel expands to a k x k block, so
    output is (N, C_out, H*k, W*k) with no overlap between blocks.
    """
    n, c_in, h, w = x.data.shape
    c_w, c_out, kh, kw = weight.data.shape
    if c_in != c_w:
        raise ValueError(f"conv_transpose2d channel mismatch: {c_in} vs {c_w}")
    if kh != stride or kw != stride:
        raise ValueError("conv_transpose2d supports kernel == stride only")
    k = stride

    x_mat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c_in)
    w_mat = weight.data.reshape(c_in, c_out * k * k)
    y = x_mat @ w_mat  # (N*H*W, C_out*k*k)
    y = y.reshape(n, h, w, c_out, k, k).transpose(0, 3, 1, 4, 2, 5)
    data = np.ascontiguousarray(y).reshape(n, c_out, h * k, w * k) + bias.data[None, :, None, None]

    def backward(g):
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        g_blocks = g.reshape(n, c_out, h, k, w, k).transpose(0, 2, 4, 1, 3, 5)
        g_mat = np.ascontiguousarray(g_blocks).reshape(n * h * w, c_out * k * k)
        _accumulate(weight, (x_mat.T @ g_mat).reshape(weight.data.shape))
        dx = (g_mat @ w_mat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        _accumulate(x, np.ascontiguousarray(dx))

    return Tensor._make(data, (x, weight, bias), backward)


def _im2col3d(x: np.ndarray, kt: int, kh: int, kw: int, stride, pad):
    st, sh, sw = stride
    pt, ph, pw = pad
    if pt or ph or pw:
        n0, c0, t0, h0, w0 = x.shape
        xp = np.zeros((n0, c0, t0 + 2 * pt, h0 + 2 * ph, w0 + 2 * pw), x.dtype)
        xp[:, :, pt:pt + t0, ph:ph + h0, pw:pw + w0] = x
        x = xp
    n, c, t, h, w = x.shape
    ot = (t - kt) // st + 1
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s0, s1, s2, s3, s4 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kt, kh, kw, ot, oh, ow),
        (s0, s1, s2, s3, s4, s2 * st, s3 * sh, s4 * sw), writeable=False)
    cols = np.ascontiguousarray(view.transpose(0, 5, 6, 7, 1, 2, 3, 4))
    return cols.reshape(n * ot * oh * ow, c * kt * kh * kw), ot, oh, ow


def conv3d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: tuple[int, int, int] = (1, 1, 1),
           padding: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    """3D cross-correlation over (N, C, T, H, W) input; weight (C_out, C_in, kt, kh, kw)."""
    n, c_in, t, h, w = x.data.shape
    c_out, c_w, kt, kh, kw = weight.data.shape
    if c_in != c_w:
        raise ValueError(f"conv3d channel mismatch: {c_in} vs {c_w}")
    st, sh, sw = stride
    pt, ph, pw = padding

    cols, ot, oh, ow = _im2col3d(x.data, kt, kh, kw, stride, padding)
    w_mat = weight.data.reshape(c_out, -1)
    y = cols @ w_mat.T + bias.data
    data = y.reshape(n, ot, oh, ow, c_out).transpose(0, 4, 1, 2, 3)

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
        _accumulate(bias, g_mat.sum(axis=0))
        _accumulate(weight, (g_mat.T @ cols).reshape(weight.data.shape))
        dcols = g_mat @ w_mat
        tp, hp, wp = t + 2 * pt, h + 2 * ph, w + 2 * pw
        dx = np.zeros((n, c_in, tp, hp, wp), dtype=dcols.dtype)
        d = dcols.reshape(n, ot, oh, ow, c_in, kt, kh, kw).transpose(0, 4, 5, 6, 7, 1, 2, 3)
        for a in range(kt):
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, a:a + st * ot:st, i:i + sh * oh:sh, j:j + sw * ow:sw] += d[:, :, a, i, j]
        dx = dx[:, :, pt:tp - pt if pt else tp, ph:hp - ph if ph else hp, pw:wp - pw if pw else wp]
        _accumulate(x, dx)

    return Tensor._make(data, (x, weight, bias), backward)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling (kernel == stride).

    Gradient routes to the argmax position of each window; ties break to the
    first position in row-major scan order.
    """
    if stride is None:
        stride = kernel
    if kernel != stride:
        raise ValueError("max_pool2d supports kernel == stride only")
    n, c, h, w = x.data.shape
    if h % stride or w % stride:
        raise ValueError(f"max_pool2d: dims ({h},{w}) not divisible by stride {stride}")
    s = stride
    oh, ow = h // s, w // s
    blocks = x.data.reshape(n, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(blocks).reshape(n, c, oh, ow, s * s)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, np.ascontiguousarray(dx))

    return Tensor._make(np.ascontiguousarray(data), (x,), backward)


def global_mean_pool(x: Tensor) -> Tensor:
    """Mean over every axis except the two leading (N, C) axes."""
    axes = tuple(range(2, x.data.ndim))
    count = int(np.prod([x.data.shape[a] for a in axes]))
    data = x.data.mean(axis=axes)

    def backward(g):
        shape = g.shape + (1,) * len(axes)
        _accumulate(x, np.broadcast_to(g.reshape(shape) / count, x.data.shape).copy())

    return Tensor._make(data, (x,), backward)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named trainable tensors with deterministic (sorted) iteration order."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"missing parameter: {name}") from None

    def __setitem__(self, name: str, value: np.ndarray | Tensor) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._entries):
            yield name, self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.items())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.copy())
        return out


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
               step: float = 1e-6) -> float:
    """Compare analytic gradients of scalar ``f`` against central differences.

    Returns the max over all parameter elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Requires float64 parameters; finite differences are unreliable in float32.
    """
    if not (1e-7 <= step <= 1e-5):
        raise ValueError("grad_check step must lie in [1e-7, 1e-5]")
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params ({name} is {t.data.dtype})")

    params.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    out.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    worst = 0.0
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(params).data)
                flat[i] = orig - step
                fm = float(f(params).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("grad_check: non-finite perturbed value")
                num = (fp - fm) / (2.0 * step)
                rel = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
                worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

_CKPT_MAGIC = b"ARVO"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore) -> None:
    """Write parameters: magic, u32 version, u32 count, then per entry
    u32 name length, name bytes, u32 rank, u32 dims, little-endian f32 data.
    Entries are sorted by name."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(store)))
        for name, t in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            dims = t.data.shape
            fh.write(struct.pack("<I", len(dims)))
            if dims:
                fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    store = ParamStore()
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        store.add(name, data.astype(np.float32))
    return store
