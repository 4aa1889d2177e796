"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the spotting network needs are provided. Every op
records a closure that accumulates ``d loss / d input`` into its parents;
:meth:`Tensor.backward` replays them in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DegenerateRowError(ValueError):
    pass


_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every relu input evaluated in the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # ------------------------------------------------------------------ misc
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None, reverse_parents: bool = False) -> None:
        """Accumulate gradients of this tensor into every ancestor.

        ``reverse_parents`` only changes the traversal order (used to check
        that accumulation does not depend on it).
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self, reverse_parents)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return mul(sum_(self, axis, keepdims), 1.0 / n)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("init",)

    def __init__(self, name: str, data, init: str = "given"):
        super().__init__(data, requires_grad=True, name=name)
        self.init = init


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _toposort(root: Tensor, reverse_parents: bool) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        parents = reversed(node._parents) if reverse_parents else node._parents
        for p in parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: a._accumulate(_unbroadcast(g * c, a.shape)))
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    if _kink_log is not None:
        _kink_log.append(pos)
    return _make(np.where(pos, a.data, 0), (a,), lambda g: a._accumulate(g * pos))


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """``a`` where ``keep`` is true, ``value`` elsewhere; no gradient flows to filled slots."""
    keep = np.broadcast_to(keep, a.shape)
    return _make(np.where(keep, a.data, value), (a,), lambda g: a._accumulate(g * keep))


# ------------------------------------------------------------------ shaping


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(data, (a,), lambda g: a._accumulate(g.reshape(old)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv)))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat_lastdim: leading shapes differ: {[p.shape for p in parts]}")
    sizes = [p.shape[-1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=-1)):
            p._accumulate(gp)

    return _make(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[index]`` along the first axis; ``index`` may have any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.data[index], (a,), backward)


# ----------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` a matrix, broadcast over the leading axes of ``a``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return _make(a.data @ b.data, (a, b), backward)


def softmax_lastdim(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out slots get weight 0 and gradient 0."""
    x = a.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(mask, x.shape)
        if not keep.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every slot masked")
    z = np.where(keep, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z - m), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y.astype(x.dtype, copy=False), (a,), backward)


def l2_norm_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    n = np.maximum(np.sqrt((a.data**2).sum(axis=-1, keepdims=True)), eps)
    y = a.data / n

    def backward(g):
        a._accumulate((g - y * (g * y).sum(axis=-1, keepdims=True)) / n)

    return _make(y, (a,), backward)


def norm_lastdim(a: Tensor) -> Tensor:
    """Euclidean norm along the last axis (subgradient 0 at the origin)."""
    n = np.sqrt((a.data**2).sum(axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        a._accumulate(np.where((n > 0)[..., None], a.data * (g / safe)[..., None], 0.0))

    return _make(n, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - xhat * gx))

    return _make(xhat, (a,), backward)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    Returns 0 when every weight is 0.
    """
    z = logits.data
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy_logits: logits {z.shape} vs targets {targets.shape}")
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    nll = lse - z[rows, targets]
    loss = float((w * nll).sum() / total) if total > 0 else 0.0

    def backward(g):
        if total <= 0:
            return
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        a = p * (w / total)[:, None]
        logits._accumulate((g * a).astype(z.dtype, copy=False))

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ------------------------------------------------------------------ vision


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on an (H, W, C_in) map.

    ``w`` has shape (3, 3, C_in, C_out). A stride of 2 equals a stride-1
    convolution followed by taking every second row and column.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = (cols @ wmat).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(w.shape))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(ho, wo, 3, 3, cin)
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gxp[di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[:, :, di, dj]
            x._accumulate(gxp[1:-1, 1:-1])

    return _make(out, (x, w), backward)


def bilinear_sample(fmap: Tensor, uv: np.ndarray) -> Tensor:
    """Bilinear lookup of an (H, W, C) map at continuous cell coordinates.

    ``uv[:, 0]`` is the column and ``uv[:, 1]`` the row, both measured so
    that integer values hit cell centers. Points outside the lattice are
    clamped to its edge.
    """
    h, w, c = fmap.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear_sample: map {fmap.shape} must be at least 2x2")
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u = np.clip(uv[:, 0], 0, w - 1)
    v = np.clip(uv[:, 1], 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), w - 2)
    v0 = np.minimum(np.floor(v).astype(int), h - 2)
    fu, fv = u - u0, v - v0
    rows = np.stack([v0, v0, v0 + 1, v0 + 1], axis=1)
    cols = np.stack([u0, u0 + 1, u0, u0 + 1], axis=1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1).astype(fmap.dtype)
    out = (fmap.data[rows, cols] * wts[..., None]).sum(axis=1)

    def backward(g):
        full = np.zeros_like(fmap.data)
        np.add.at(full, (rows, cols), wts[..., None] * g[:, None, :])
        fmap._accumulate(full)

    return _make(out, (fmap,), backward)


# ---------------------------------------------------------------------- mlp


def mlp_apply(params: Mapping[str, Tensor] | Sequence[Tensor], x: Tensor) -> Tensor:
    """Two linear layers with a relu between them, over the last axis of ``x``."""
    if isinstance(params, Mapping):
        w1, b1, w2, b2 = params["w1"], params["b1"], params["w2"], params["b2"]
    else:
        w1, b1, w2, b2 = params
    return relu(x @ w1 + b1) @ w2 + b2


# ----------------------------------------------------------- gradient check


def gradient_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    atol: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Up to ``n_coords`` random coordinates per parameter are probed. A
    coordinate whose +/- eps perturbation flips any relu input sign straddles
    a kink and is skipped. Relative error is ``|a - n| / max(|a|, |n|, atol)``;
    ``atol`` sits above the central-difference rounding floor (about
    machine epsilon times the loss over ``eps``), so exactly-zero gradients
    such as a bias that softmax shift-invariance cancels do not register.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size) if flat.size <= n_coords else rng.choice(flat.size, n_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with record_kinks() as kp:
                fp = float(f().data)
            flat[i] = orig - eps
            with record_kinks() as km:
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {p.name}[{i}]")
            if any(not np.array_equal(x, y) for x, y in zip(kp, km)):
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------- checkpoints


def save_parameters(params: Mapping[str, np.ndarray | Tensor], path: str | Path) -> None:
    """Named tensors: per tensor (name length, name, rank, dims) as u32 LE, then f32 payload."""
    chunks = []
    for name in params:
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_parameters(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    out: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
    return out
