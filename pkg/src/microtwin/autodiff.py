"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: every operation that touches a tensor requiring
gradients records its inputs and a vector-Jacobian closure on the output
tensor. ``backward`` on a scalar loss then walks the recorded graph once in
reverse topological order. The operation set is intentionally small: exactly
what the excursion-set model, its losses and the convolutional discriminator
need. There is no control-flow differentiation, no higher-order derivatives
and no implicit dtype promotion (everything is float64).

Graphs are not shared between threads; concurrent use is safe as long as each
thread builds its own tensors.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(ValueError):
    """Contract violation in the autodiff engine (shapes, non-scalar loss...)."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` is populated by :func:`backward` for tensors created with
    ``requires_grad=True``; it always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()

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
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad or self._parents else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars and ndarrays are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self, leaves=None):
        backward(self, leaves=leaves)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(x, requires_grad=False)


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple, vjps: tuple) -> Tensor:
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = parents
        out._vjps = vjps
    return out


def backward(loss: Tensor, leaves=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``loss`` must be scalar. Leaves listed in ``leaves`` that do not
    participate in the graph receive a zero gradient instead of ``None``.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward expects a scalar loss, got shape {loss.shape}")

    # reverse topological order over the recorded graph
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        for parent, vjp in zip(node._parents, node._vjps):
            if vjp is None or not (parent.requires_grad or parent._parents):
                continue
            contrib = vjp(g)
            acc = grads.get(id(parent))
            if acc is None:
                # always own a fresh writable buffer; vjp outputs may alias g,
                # be views, or be numpy scalars
                grads[id(parent)] = np.array(contrib, dtype=np.float64)
            else:
                np.add(acc, contrib, out=acc)

    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = np.asarray(g.sum(axis=tuple(range(extra))))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _make(data, (a, b), (lambda g: _unbroadcast(g * b.data, a.shape),
                                lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _make(data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), (lambda g: -g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), (lambda g: g * (2.0 * a.data),))


def sqrt_nonneg(a: Tensor) -> Tensor:
    """sqrt(max(a, 0)); gradient is 0 where a <= 0 (subgradient choice)."""
    root = np.sqrt(np.maximum(a.data, 0.0))

    def vjp(g):
        safe = np.where(root > 0.0, root, 1.0)
        return np.where(root > 0.0, g / (2.0 * safe), 0.0)

    return _make(root, (a,), (vjp,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), (lambda g: g * data,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), (lambda g: g * np.cos(a.data),))


def sinc(a: Tensor) -> Tensor:
    """sin(x)/x with the removable singularity filled: sinc(0) = 1."""
    data = np.sinc(a.data / np.pi)

    def vjp(g):
        x = a.data
        small = np.abs(x) < 1e-6
        safe = np.where(small, 1.0, x)
        d = np.where(small, -x / 3.0, (np.cos(safe) - data) / safe)
        return g * d

    return _make(data, (a,), (vjp,))


def pow_const_base(base: np.ndarray, expo: Tensor) -> Tensor:
    """base ** expo for a constant base >= 0 and a tensor exponent > 0.

    Entries with base == 0 evaluate to 0 and carry zero gradient, which is the
    correct limit of h**a for a > 0 as h -> 0.
    """
    base = np.asarray(base, dtype=np.float64)
    if np.any(base < 0):
        raise AutodiffError("pow_const_base requires a nonnegative base")
    positive = base > 0
    safe = np.where(positive, base, 1.0)
    data = np.where(positive, safe ** expo.data, 0.0)

    def vjp(g):
        d = np.where(positive, data * np.log(safe), 0.0)
        return _unbroadcast(g * d, expo.shape)

    return _make(data, (expo,), (vjp,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    data = np.maximum(a.data, floor)
    return _make(data, (a,), (lambda g: np.where(a.data > floor, g, 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)
    return _make(data, (a,), (lambda g: g * data * (1.0 - data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)
    return _make(data, (a,), (lambda g: g * _sigmoid_np(a.data),))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    data = np.where(a.data >= 0, a.data, alpha * a.data)
    return _make(data, (a,), (lambda g: np.where(a.data >= 0, g, alpha * g),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 (lambda g: np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,),
                 (lambda g: np.broadcast_to(g / n, a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,),
                 (lambda g: g.reshape(a.shape),))


def crop(a: Tensor, starts, sizes) -> Tensor:
    """Contiguous slice; the gradient is zero-embedded back into the input."""
    starts = tuple(int(s) for s in starts)
    sizes = tuple(int(s) for s in sizes)
    if len(starts) != a.ndim or len(sizes) != a.ndim:
        raise AutodiffError("crop expects one (start, size) per axis")
    sl = tuple(slice(s, s + n) for s, n in zip(starts, sizes))

    def vjp(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return full

    return _make(a.data[sl], (a,), (vjp,))


def pad_to(a: Tensor, shape) -> Tensor:
    """Zero-pad at the high end of every axis up to ``shape``."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(n < m for n, m in zip(shape, a.shape)):
        raise AutodiffError(f"cannot pad {a.shape} to {shape}")
    sl = tuple(slice(0, m) for m in a.shape)
    data = np.zeros(shape)
    data[sl] = a.data
    return _make(data, (a,), (lambda g: g[sl],))


def take(a: Tensor, flat_indices: np.ndarray, out_shape=None) -> Tensor:
    """Gather by flat index; duplicate indices accumulate in the gradient."""
    idx = np.asarray(flat_indices)
    data = a.data.reshape(-1)[idx]
    if out_shape is not None:
        data = data.reshape(out_shape)

    def vjp(g):
        full = np.zeros(a.size)
        np.add.at(full, idx.reshape(-1), g.reshape(-1))
        return full.reshape(a.shape)

    return _make(data, (a,), (vjp,))


def stack_last(tensors) -> Tensor:
    """Stack same-shape tensors along a new trailing axis."""
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=-1)
    vjps = tuple((lambda k: lambda g: g[..., k])(k) for k in range(len(tensors)))
    return _make(data, tuple(tensors), vjps)


def linear_map(matrix: np.ndarray, x: Tensor) -> Tensor:
    """Apply a constant matrix to a 1-D tensor: out = matrix @ x."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 1 or matrix.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise AutodiffError(f"linear_map shape mismatch: {matrix.shape} @ {x.shape}")
    return _make(matrix @ x.data, (x,), (lambda g: matrix.T @ g,))


# ---------------------------------------------------------------------------
# convolutions and Fourier-domain linear maps
# ---------------------------------------------------------------------------

def _embed_kernel_np(kernel: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Place a centered odd-sized kernel on a periodic grid (wrap layout)."""
    emb = np.zeros(shape)
    emb[tuple(slice(0, k) for k in kernel.shape)] = kernel
    for ax, k in enumerate(kernel.shape):
        emb = np.roll(emb, -((k - 1) // 2), axis=ax)
    return emb


def _extract_kernel_np(grid: np.ndarray, kshape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`_embed_kernel_np`."""
    for ax, k in enumerate(kshape):
        grid = np.roll(grid, (k - 1) // 2, axis=ax)
    return grid[tuple(slice(0, k) for k in kshape)]


def conv_circular_np(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Periodic convolution of a field with a centered kernel, via FFT.

    Shared by the autodiff op and the plain-array simulation path so both
    produce bit-identical results.
    """
    emb = _embed_kernel_np(kernel, field.shape)
    return np.fft.irfftn(np.fft.rfftn(field) * np.fft.rfftn(emb), s=field.shape,
                          axes=range(field.ndim))


def conv_circular(field: Tensor, kernel: Tensor) -> Tensor:
    """Circular (periodic) convolution, differentiable in both arguments.

    ``kernel`` is a centered array with odd extents not larger than the
    field's; it is wrapped onto the field's periodic grid. Semantically this
    is the direct double sum out(t) = sum_s kernel(s) * field(t - s) with all
    indices taken modulo the field extents.
    """
    if field.ndim != kernel.ndim:
        raise AutodiffError(
            f"conv_circular dimension mismatch: field {field.ndim}-d, kernel {kernel.ndim}-d")
    if any(k > n for k, n in zip(kernel.shape, field.shape)):
        raise AutodiffError(
            f"kernel {kernel.shape} larger than field {field.shape}")
    if any(k % 2 == 0 for k in kernel.shape):
        raise AutodiffError(f"kernel extents must be odd, got {kernel.shape}")

    shape = field.shape
    emb = _embed_kernel_np(kernel.data, shape)
    f_field = np.fft.rfftn(field.data)
    f_emb = np.fft.rfftn(emb)
    axes = tuple(range(len(shape)))
    data = np.fft.irfftn(f_field * f_emb, s=shape, axes=axes)

    def vjp_field(g):
        return np.fft.irfftn(np.fft.rfftn(g) * np.conj(f_emb), s=shape, axes=axes)

    def vjp_kernel(g):
        full = np.fft.irfftn(np.fft.rfftn(g) * np.conj(f_field), s=shape, axes=axes)
        return _extract_kernel_np(full, kernel.shape)

    return _make(data, (field, kernel), (vjp_field, vjp_kernel))


def cross_correlate(a: Tensor, b: Tensor) -> Tensor:
    """Circular cross-correlation out(t) = sum_s a(s) * b(s + t), same shape.

    Lags live in wrap layout: index t for t < N/2, index t + N for t < 0.
    Zero-pad the inputs first to obtain non-periodic (windowed) correlations.
    """
    if a.shape != b.shape:
        raise AutodiffError(f"cross_correlate shape mismatch: {a.shape} vs {b.shape}")
    shape = a.shape
    fa = np.fft.rfftn(a.data)
    fb = np.fft.rfftn(b.data)
    axes = tuple(range(len(shape)))
    data = np.fft.irfftn(np.conj(fa) * fb, s=shape, axes=axes)

    def vjp_a(g):
        return np.fft.irfftn(np.conj(np.fft.rfftn(g)) * fb, s=shape, axes=axes)

    def vjp_b(g):
        return np.fft.irfftn(fa * np.fft.rfftn(g), s=shape, axes=axes)

    return _make(data, (a, b), (vjp_a, vjp_b))


def dft_sym(a: Tensor) -> Tensor:
    """Real part of the forward DFT.

    For symmetric inputs (x(t) = x(-t mod N)) this IS the full transform. The
    map is linear with a symmetric cosine matrix, so it is its own adjoint.
    """
    data = np.fft.fftn(a.data).real
    return _make(data, (a,), (lambda g: np.fft.fftn(g).real,))


def idft_sym(a: Tensor) -> Tensor:
    """Real part of the inverse DFT; adjoint of itself (see dft_sym)."""
    data = np.fft.ifftn(a.data).real
    return _make(data, (a,), (lambda g: np.fft.ifftn(g).real,))


def conv2d_strided(x: Tensor, weights: Tensor, stride: int) -> Tensor:
    """Valid 2-d convolution of an HxWxC input with kxkxCxN filters.

    Output spatial extents are floor((H - k) / stride) + 1 per axis.
    """
    if stride < 1:
        raise AutodiffError(f"stride must be >= 1, got {stride}")
    if x.ndim != 3 or weights.ndim != 4:
        raise AutodiffError("conv2d_strided expects HxWxC input and kxkxCxN weights")
    h, w, c = x.shape
    k1, k2, cw, n = weights.shape
    if cw != c:
        raise AutodiffError(f"channel mismatch: input has {c}, weights expect {cw}")
    if k1 > h or k2 > w:
        raise AutodiffError(f"kernel {(k1, k2)} larger than input {(h, w)}")

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (k1, k2), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (Ho, Wo, C, k1, k2)
    data = np.einsum("xyckl,klcn->xyn", windows, weights.data, optimize=True)
    ho, wo = data.shape[:2]

    def vjp_x(g):
        gx = np.zeros(x.shape)
        for ki in range(k1):
            for kj in range(k2):
                gx[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += \
                    np.einsum("xyn,cn->xyc", g, weights.data[ki, kj], optimize=True)
        return gx

    def vjp_w(g):
        return np.einsum("xyckl,xyn->klcn", windows, g, optimize=True)

    return _make(data, (x, weights), (vjp_x, vjp_w))
