"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by EDSR and FNO are provided. Every forward call
records a node on a dynamic tape; ``backward`` walks the tape in reverse
topological order and accumulates gradients into ``Tensor.grad``.

Computation is float64 throughout.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ChannelNotDivisible,
    GraphConsumed,
    ModeTruncationTooLarge,
    NonScalarRoot,
    ShapeMismatch,
)


class Node:
    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """Dense float64 array with an optional gradient and a producing node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn, name) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = Node(inputs, backward_fn, name) if out.requires_grad else None
    return out


@dataclass
class ComplexPair:
    """Complex tensor represented by separate real and imaginary parts."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeMismatch(f"real/imag shapes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def to_complex(self):
        return self.re.data + 1j * self.im.data

    def __add__(self, other: "ComplexPair") -> "ComplexPair":
        return ComplexPair(add(self.re, other.re), add(self.im, other.im))


# ----------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    The root is marked consumed; a second call raises ``GraphConsumed``.
    """
    if root.size != 1:
        raise NonScalarRoot(f"backward() needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphConsumed("graph already consumed by a previous backward()")
    if not root.requires_grad:
        root._consumed = True
        return
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            # leaf
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    root._consumed = True


# ----------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        return scale(a, b)
    if np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


_relu_observers = []


def relu(x: Tensor) -> Tensor:
    for observe in _relu_observers:
        observe(x.data)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    # in-place arithmetic: activations are large and this runs every layer
    xd = x.data
    th = xd * xd
    th *= 0.044715
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def backward_fn(g):
        d = xd * xd
        d *= 3 * 0.044715
        d += 1.0
        d *= _GELU_C
        s = th * th
        np.subtract(1.0, s, out=s)
        s *= xd
        s *= d
        s += th
        s += 1.0
        s *= 0.5
        s *= g
        return (s,)

    return _make(out, (x,), backward_fn, "gelu")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "gelu": gelu, "identity": identity}


def _fsum(a: np.ndarray) -> np.ndarray:
    # correctly rounded reduction: keeps finite-difference noise at half an ulp
    return np.array(math.fsum(a.ravel().tolist()))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(_fsum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        _fsum(x.data) / n, (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def weighted_sum(x: Tensor, w) -> Tensor:
    """``sum(x * w)`` for a constant array ``w``; handy for gradient checks."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeMismatch(f"weighted_sum: shapes {x.shape} and {w.shape} differ")
    return _make(_fsum(x.data * w), (x,), lambda g: (float(g) * w,), "weighted_sum")


# ----------------------------------------------------------------------------
# losses


def _target_array(pred: Tensor, target):
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"loss: prediction {pred.shape} vs target {t.shape}")
    return t


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero difference is 0."""
    d = pred.data - _target_array(pred, target)
    n = d.size
    return _make(_fsum(np.abs(d)) / n, (pred,), lambda g: (float(g) * np.sign(d) / n,), "l1_loss")


def mse_loss(pred: Tensor, target) -> Tensor:
    d = pred.data - _target_array(pred, target)
    n = d.size
    return _make(_fsum(d * d) / n, (pred,), lambda g: (float(g) * 2.0 * d / n,), "mse_loss")


LOSSES = {"l1": l1_loss, "mse": mse_loss}


# ----------------------------------------------------------------------------
# convolution and pixel shuffle


def _im2col(xt, kh, kw):
    """N x Hp x Wp x C (channels last) -> (N*H'*W') x (C*kh*kw) patch matrix."""
    n, hp, wp, c = xt.shape
    cols = sliding_window_view(xt, (kh, kw), axis=(1, 2))  # N, H', W', C, kh, kw
    # (kh, kw, C) column order keeps each copied run contiguous
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * (hp - kh + 1) * (wp - kw + 1), kh * kw * c)


def _pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    # 1x1 kernel: a channel matmul in NCHW layout, no patch extraction
    n, c, h, w = x.shape
    o = weight.shape[0]
    wmat = weight.data.reshape(o, c)
    xf = x.data.reshape(n, c, h * w)
    out = np.matmul(wmat, xf)
    if bias is not None:
        out += bias.data[:, None]

    def backward_fn(g):
        gf = g.reshape(n, o, h * w)
        gx = np.matmul(wmat.T, gf).reshape(n, c, h, w) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("nop,ncp->oc", gf, xf, optimize=True).reshape(o, c, 1, 1)
        gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(n, o, h, w), inputs, backward_fn, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding and stride 1 (N x C x H x W layout).

    Internally channels-last; patch matrices are used where the output has at
    least as many channels as the input, per-offset products otherwise.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w_ = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {c2}")
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({o},)")
    p = int(padding)
    out_h, out_w = h + 2 * p - kh + 1, w_ + 2 * p - kw + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    if kh == kw == 1 and p == 0:
        return _pointwise_conv(x, weight, bias)
    xt = x.data.transpose(0, 2, 3, 1)
    if p:
        xt = np.pad(xt, ((0, 0), (p, p), (p, p), (0, 0)))
    xt = np.ascontiguousarray(xt)
    wd = weight.data
    wmat = wd.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    wide = o >= c
    if wide:
        cols = _im2col(xt, kh, kw)
        out = (cols @ wmat.T).reshape(n, out_h, out_w, o)
    else:
        cols = None
        out = np.zeros((n, out_h, out_w, o))
        for i in range(kh):
            for j in range(kw):
                out += xt[:, i : i + out_h, j : j + out_w, :] @ wd[:, :, i, j].T
    if bias is not None:
        out += bias.data
    data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward_fn(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N, H', W', O
        g2 = gt.reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            q = kh - 1 - p
            if not wide and q >= 0 and kh == kw:
                # transposed convolution: correlate padded grad with flipped kernel
                gp = np.pad(gt, ((0, 0), (q, q), (q, q), (0, 0))) if q else gt
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
                gxt = (_im2col(gp, kh, kw) @ wflip.T).reshape(n, h, w_, c)
            else:
                gc = (g2 @ wmat).reshape(n, out_h, out_w, kh, kw, c)
                gxp = np.zeros((n, h + 2 * p, w_ + 2 * p, c))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + out_h, j : j + out_w, :] += gc[:, :, :, i, j, :]
                gxt = gxp[:, p : p + h, p : p + w_, :]
            gx = np.ascontiguousarray(gxt.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            if cols is not None:
                gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            else:
                gw = np.empty_like(wd)
                for i in range(kh):
                    for j in range(kw):
                        patch = xt[:, i : i + out_h, j : j + out_w, :]
                        gw[:, :, i, j] = np.tensordot(gt, patch, axes=([0, 1, 2], [0, 1, 2]))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, inputs, backward_fn, "conv2d")


def _shuffle(a, r):
    n, crr, h, w = a.shape
    c = crr // (r * r)
    return a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(a, r):
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """out[c, r*h + a, r*w + b] = in[c*r*r + a*r + b, h, w]."""
    if x.ndim != 4:
        raise ShapeMismatch(f"pixel_shuffle expects N x C x H x W, got {x.shape}")
    if x.shape[1] % (r * r):
        raise ChannelNotDivisible(f"{x.shape[1]} channels not divisible by r^2 = {r * r}")
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"pixel_unshuffle expects N x C x H x W, got {x.shape}")
    if x.shape[2] % r or x.shape[3] % r:
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} not divisible by {r}")
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


# ----------------------------------------------------------------------------
# spectral ops
#
# A ComplexPair is produced by packing (re, im) into one tape node of shape
# (2, ...) and unpacking it, so multi-output ops fit the single-output tape.


def _unpack(packed: Tensor) -> ComplexPair:
    def part(i):
        def backward_fn(g):
            full = np.zeros_like(packed.data)
            full[i] = g
            return (full,)

        return _make(packed.data[i], (packed,), backward_fn, "unpack")

    return ComplexPair(part(0), part(1))


def rfft2(x: Tensor) -> ComplexPair:
    """Unnormalized real 2D DFT over the last two axes: ... x H x (W//2 + 1)."""
    if x.ndim < 2:
        raise ShapeMismatch(f"rfft2 needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    spec = np.fft.rfft2(x.data)

    def backward_fn(g):
        # adjoint of x -> (Re X, Im X): Re(sum_k G_k e^{+i theta}) over the half spectrum
        gc = g[0] + 1j * g[1]
        full = np.zeros(gc.shape[:-1] + (w,), dtype=np.complex128)
        full[..., : gc.shape[-1]] = gc
        return (np.fft.ifft2(full).real * (h * w),)

    packed = _make(np.stack([spec.real, spec.imag]), (x,), backward_fn, "rfft2")
    return _unpack(packed)


def _hermitian_weights(w, wh):
    """Multiplicity of each half-spectrum column in a length-w real signal."""
    m = np.full(wh, 2.0)
    m[0] = 1.0
    if w % 2 == 0:
        m[-1] = 1.0
    return m


def irfft2(z: ComplexPair, h: int, w: int) -> Tensor:
    """Inverse of ``rfft2`` with 1/(H*W) normalization, target size (h, w)."""
    wh = w // 2 + 1
    if z.shape[-2:] != (h, wh):
        raise ShapeMismatch(f"irfft2: spectrum {z.shape[-2:]} does not match target ({h}, {w})")
    data = np.fft.irfft2(z.to_complex(), s=(h, w))
    mult = _hermitian_weights(w, wh)

    def backward_fn(g):
        # x = (1/HW) sum_k m_k Re(Z_k e^{i theta}); dRe = m Re(F), dIm = m Im(F), F = fft2(g)/HW
        f = np.fft.rfft2(g) / (h * w)
        return f.real * mult, f.imag * mult

    return _make(data, (z.re, z.im), backward_fn, "irfft2")


def spectral_mix(modes: ComplexPair, weights: ComplexPair, rows: str = "low") -> ComplexPair:
    """Per-mode complex channel mixing on a truncated block of the spectrum.

    ``modes`` is ``... x C x H x Wh``, ``weights`` is ``C x O x m1 x m2``. The
    retained block is columns ``[0, m2)`` and rows ``[0, m1)`` (``rows="low"``)
    or ``[H - m1, H)`` (``rows="high"``). Output has shape ``... x O x H x Wh``
    with zeros outside the retained block.
    """
    if modes.re.ndim < 3 or weights.re.ndim != 4:
        raise ShapeMismatch(f"spectral_mix: bad shapes {modes.shape}, {weights.shape}")
    *lead, c, h, wh = modes.shape
    c2, o, m1, m2 = weights.shape
    if c != c2:
        raise ShapeMismatch(f"spectral_mix: {c} input channels, weights expect {c2}")
    if m1 > h or m2 > wh:
        raise ModeTruncationTooLarge(f"modes ({m1}, {m2}) exceed spectrum ({h}, {wh})")
    rsl = slice(0, m1) if rows == "low" else slice(h - m1, h)
    zin = modes.to_complex()[..., rsl, :m2]
    wc = weights.to_complex()
    out = np.zeros(tuple(lead) + (o, h, wh), dtype=np.complex128)
    out[..., rsl, :m2] = np.einsum("...cxy,coxy->...oxy", zin, wc)

    def backward_fn(g):
        gblock = g[0][..., rsl, :m2] + 1j * g[1][..., rsl, :m2]
        gin = np.zeros(tuple(lead) + (c, h, wh), dtype=np.complex128)
        gin[..., rsl, :m2] = np.einsum("...oxy,coxy->...cxy", gblock, np.conj(wc))
        lead_axes = "".join("abdefg"[: len(lead)])
        gw = np.einsum(f"{lead_axes}cxy,{lead_axes}oxy->coxy", np.conj(zin), gblock)
        return gin.real, gin.imag, gw.real, gw.imag

    packed = _make(
        np.stack([out.real, out.imag]),
        (modes.re, modes.im, weights.re, weights.im),
        backward_fn,
        "spectral_mix",
    )
    return _unpack(packed)


@functools.lru_cache(maxsize=32)
def _dft_factors(h, w, m1, m2):
    """Truncated DFT matrices for the low+high row blocks and first m2 columns."""
    rows = np.r_[np.arange(m1), np.arange(h - m1, h)]
    e1 = np.exp(-2j * np.pi * np.outer(rows, np.arange(h)) / h)  # 2m1 x H
    e2 = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(m2)) / w)  # W x m2
    mult = _hermitian_weights(w, w // 2 + 1)[:m2]
    out = (e1, e2, np.ascontiguousarray(np.conj(e2).T * mult[:, None]), mult)
    for a in out:
        a.flags.writeable = False
    return out


def _real_times_complex(x2d, m):
    # contiguous real/imag copies keep both products on the BLAS path
    return (x2d @ np.ascontiguousarray(m.real)) + 1j * (x2d @ np.ascontiguousarray(m.imag))


def _complex_times_complex_real(a, b):
    """Re(a @ b) via two real products."""
    real = np.ascontiguousarray
    return real(a.real) @ real(b.real) - real(a.imag) @ real(b.imag)


def spectral_conv(z: Tensor, low: ComplexPair, high: ComplexPair) -> Tensor:
    """Fused irfft2(spectral_mix(rfft2 z, low) + spectral_mix(rfft2 z, high)).

    Only the retained modes are ever formed, using truncated DFT matrices, so
    cost scales with the number of modes rather than the full spectrum. The
    result equals the composition of the three primitive ops (tested).
    """
    if z.ndim != 4 or low.re.ndim != 4:
        raise ShapeMismatch(f"spectral_conv: bad shapes {z.shape}, {low.shape}")
    n, c, h, w = z.shape
    c2, o, m1, m2 = low.shape
    if high.shape != low.shape:
        raise ShapeMismatch(f"spectral_conv: low {low.shape} and high {high.shape} differ")
    if c != c2:
        raise ShapeMismatch(f"spectral_conv: {c} input channels, weights expect {c2}")
    if 2 * m1 > h or m2 > w // 2 + 1:
        raise ModeTruncationTooLarge(f"modes ({m1}, {m2}) do not fit a {h} x {w} grid")
    e1, e2, g2, mult = _dft_factors(h, w, m1, m2)
    # modes laid out as (k2, k1) so both transforms are plain 2-D matmuls
    a = _real_times_complex(z.data.reshape(-1, w), e2).reshape(n, c, h, m2)
    b = (a.transpose(0, 1, 3, 2).reshape(-1, h) @ e1.T).reshape(n, c, m2, 2 * m1)
    wc = np.concatenate([low.to_complex(), high.to_complex()], axis=2)  # C, O, 2m1, m2
    wq = wc.transpose(3, 2, 0, 1)  # m2, 2m1, C, O
    bq = b.transpose(2, 3, 0, 1)  # m2, 2m1, N, C
    yq = np.matmul(bq, wq)  # m2, 2m1, N, O
    p_ = (yq.transpose(2, 3, 0, 1).reshape(-1, 2 * m1) @ np.conj(e1)).reshape(n, o, m2, h)
    pt = p_.transpose(0, 1, 3, 2).reshape(-1, m2)
    # g2 = conj(e2)^T scaled by the hermitian multiplicity: the inverse transform
    data = _complex_times_complex_real(pt, g2).reshape(n, o, h, w) / (h * w)

    def backward_fn(g):
        q = _real_times_complex(g.reshape(-1, w), e2 * mult).reshape(n, o, h, m2)
        gy = (q.transpose(0, 1, 3, 2).reshape(-1, h) @ e1.T).reshape(n, o, m2, 2 * m1) / (h * w)
        gyq = gy.transpose(2, 3, 0, 1)  # m2, 2m1, N, O
        gbq = np.matmul(gyq, np.conj(wq).swapaxes(-1, -2))  # m2, 2m1, N, C
        gwq = np.matmul(np.conj(bq).swapaxes(-1, -2), gyq)  # m2, 2m1, C, O
        gz = None
        if z.requires_grad:
            r = (gbq.transpose(2, 3, 0, 1).reshape(-1, 2 * m1) @ np.conj(e1)).reshape(n, c, m2, h)
            rt = r.transpose(0, 1, 3, 2).reshape(-1, m2)
            gz = _complex_times_complex_real(rt, np.conj(e2).T).reshape(n, c, h, w)
        gw = gwq.transpose(2, 3, 1, 0)  # C, O, 2m1, m2
        gl, gh = gw[:, :, :m1], gw[:, :, m1:]
        return gz, gl.real, gl.imag, gh.real, gh.imag

    return _make(data, (z, low.re, low.im, high.re, high.im), backward_fn, "spectral_conv")


# ----------------------------------------------------------------------------
# gradient checking


def numeric_grad(f, x: Tensor, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (flat ``indices`` only)."""
    base = np.array(x.data, dtype=np.float64)
    flat_idx = np.arange(base.size) if indices is None else np.asarray(indices)
    out = np.zeros(flat_idx.size)
    for k, i in enumerate(flat_idx):
        probe = base.copy().reshape(-1)
        probe[i] = base.reshape(-1)[i] + eps
        fp = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] = base.reshape(-1)[i] - eps
        fm = f(Tensor(probe.reshape(base.shape))).item()
        out[k] = (fp - fm) / (2 * eps)
    return out


def grad_check(f, x, eps: float = 1e-5, indices=None) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x = as_tensor(x)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    y = f(leaf)
    backward(y)
    analytic = np.zeros(leaf.size) if leaf.grad is None else leaf.grad.reshape(-1)
    if indices is not None:
        analytic = analytic[np.asarray(indices)]
    numeric = numeric_grad(f, x, eps, indices)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


class record_relu_margin:
    """Context manager recording min |input| over every ReLU evaluated inside it.

    Finite differences are only valid away from the ReLU kink, so gradient
    checks on ReLU networks use this to reject draws that sit on a kink.
    """

    def __enter__(self):
        self.margin = np.inf
        _relu_observers.append(self._observe)
        return self

    def _observe(self, data):
        self.margin = min(self.margin, float(np.min(np.abs(data))))

    def __exit__(self, *exc):
        _relu_observers.remove(self._observe)
        return False
