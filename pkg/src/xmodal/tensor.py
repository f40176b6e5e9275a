"""Minimal reverse-mode autodiff over dense numpy arrays.

Supports exactly the operations the waveform GAN architectures need:
affine maps, strided 1-D (transposed) convolution, elementwise
nonlinearities, reductions, gathers, and an FFT power spectrum for the
differentiable MFCC path. Compute precision is float32 by default;
float64 is used for finite-difference gradient checks.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """Node in the computation tape.

    `data` is a dense row-major numpy array. Gradients accumulate into
    `grad` (same shape) during `backward()`. Non-leaf nodes are created
    by the op functions below and carry a closure propagating their
    adjoint to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_valid(self):
        """Contract check: all values finite."""
        return bool(np.all(np.isfinite(self.data)))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        return mul(self, powi(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other, self.dtype), powi(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powi(self, p)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Param(Tensor):
    """Trainable leaf tensor with persistent optimizer / SN state.

    `adam_m` / `adam_v` are the Adam moments; `sn_u` is the persistent
    power-iteration vector, allocated only when spectral normalization
    is enabled for this parameter.
    """

    __slots__ = ("name", "adam_m", "adam_v", "sn_u")

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.sn_u = None

    def zero_grad(self):
        self.grad = None


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


_grad_enabled = True


class no_grad:
    """Context manager suppressing tape construction (inference forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(data, parents, backward):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  parents=tuple(p for p in parents if p.requires_grad),
                  backward=backward if req else None)


# -- elementwise / arithmetic -------------------------------------------


def add(a, b):
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def neg(a):
    def bwd(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bwd)


def mul(a, b):
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def powi(a, p):
    out_data = a.data ** p

    def bwd(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    def bwd(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def log_floored(a, floor):
    """log(max(a, floor)); zero gradient below the floor."""
    clipped = np.maximum(a.data, floor)
    mask = a.data > floor

    def bwd(g):
        a._accumulate(g * mask / clipped)

    return _make(np.log(clipped), (a,), bwd)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def absolute(a):
    def bwd(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def leaky_relu(a, alpha=0.2):
    out_data = np.maximum(a.data, alpha * a.data)

    def bwd(g):
        slope = np.where(a.data >= 0, g.dtype.type(1.0), g.dtype.type(alpha))
        a._accumulate(g * slope)

    return _make(out_data, (a,), bwd)


def relu(a):
    mask = (a.data > 0).astype(a.dtype)

    def bwd(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bwd)


# -- shape / indexing ----------------------------------------------------


def reshape(a, shape):
    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tuple(tensors), bwd)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out_data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate((np.broadcast_to(g, a.shape) / scale).astype(a.dtype))

    return _make(out_data, (a,), bwd)


def transpose2d(a):
    def bwd(g):
        a._accumulate(g.T)

    return _make(a.data.T, (a,), bwd)


def matmul(a, b):
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def embed_rows(table, ids):
    """Row lookup table[ids]; gradient scatters into the taken rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _make(out_data, (table,), bwd)


def time_gather(a, idx):
    """out[b, t, c] = a[b, idx[b, t], c]; adjoint scatter-adds."""
    b_ix = np.arange(a.shape[0])[:, None]
    out_data = a.data[b_ix, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (b_ix, idx), g)
        a._accumulate(ga)

    return _make(out_data, (a,), bwd)


def frame_signal(a, frame_len, hop):
    """Slice (B, L) into overlapping frames (B, F, frame_len), no padding."""
    B, L = a.shape
    n_frames = 1 + (L - frame_len) // hop
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(frame_len)[None, :]
    out_data = a.data[:, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        for f in range(n_frames):
            ga[:, starts[f]:starts[f] + frame_len] += g[:, f]
        a._accumulate(ga)

    return _make(out_data, (a,), bwd)


def power_spectrum(frames, n_fft):
    """|rfft(frames)|^2 along the last axis; exact adjoint via ifft."""
    F = np.fft.rfft(frames.data, n=n_fft, axis=-1)

    def bwd(g):
        # dL/dx_t = sum_k Re(conj-free g_k * e^{+i 2pi k t / n})
        h = np.zeros(frames.shape[:-1] + (n_fft,), dtype=np.complex128)
        h[..., : n_fft // 2 + 1] = 2.0 * F * g
        gx = np.real(np.fft.ifft(h, axis=-1)) * n_fft
        frames._accumulate(gx[..., : frames.shape[-1]].astype(frames.dtype))

    return _make((F.real ** 2 + F.imag ** 2).astype(frames.dtype),
                 (frames,), bwd)


def batch_norm(x, gamma_rows, beta_rows, mean, inv_std, train):
    """Fused batch normalization with per-sample scale/shift rows.

    x: (B, L, C); gamma_rows / beta_rows: (B, C). `mean` / `inv_std` are
    plain (C,) arrays: batch statistics in train mode (their dependence on
    x is differentiated via the standard closed form), running statistics
    (constants) in infer mode.
    """
    B, Lx, C = x.shape
    xhat = (x.data - mean) * inv_std
    out_data = xhat * gamma_rows.data[:, None, :] + beta_rows.data[:, None, :]

    def bwd(g):
        if beta_rows.requires_grad:
            beta_rows._accumulate(g.sum(axis=1))
        if gamma_rows.requires_grad:
            gamma_rows._accumulate((g * xhat).sum(axis=1))
        if x.requires_grad:
            dxhat = g * gamma_rows.data[:, None, :]
            if train:
                m1 = dxhat.mean(axis=(0, 1))
                m2 = (dxhat * xhat).mean(axis=(0, 1))
                gx = (dxhat - m1 - xhat * m2) * inv_std
            else:
                gx = dxhat * inv_std
            x._accumulate(gx)

    return _make(out_data, (x, gamma_rows, beta_rows), bwd)


# -- 1-D convolution ------------------------------------------------------


def _same_pad(kernel, stride):
    total = kernel - stride
    left = total // 2
    return left, total - left


def _im2col(xp, kernel, stride, n_out):
    """Windows of padded (B, Lp, C) as a (B, n_out, kernel, C) view."""
    B, Lp, C = xp.shape
    sB, sL, sC = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(B, n_out, kernel, C),
        strides=(sB, sL * stride, sL, sC), writeable=False)


def conv1d(x, w, stride):
    """Strided cross-correlation, symmetric 'same' zero padding.

    x: (B, L, Cin), w: (k, Cin, Cout) -> (B, L // stride, Cout).
    Requires L divisible by stride.
    """
    B, L, Cin = x.shape
    k, wCin, Cout = w.shape
    if wCin != Cin:
        raise ValueError(f"conv1d channel mismatch: {Cin} vs {wCin}")
    if L % stride != 0:
        raise ValueError(f"conv1d length {L} not divisible by stride {stride}")
    n_out = L // stride
    pl, pr = _same_pad(k, stride)
    xp = np.pad(x.data, ((0, 0), (pl, pr), (0, 0)))
    cols = np.ascontiguousarray(_im2col(xp, k, stride, n_out))
    cols2 = cols.reshape(B * n_out, k * Cin)
    out_data = (cols2 @ w.data.reshape(k * Cin, Cout)).reshape(B, n_out, Cout)

    def bwd(g):
        g2 = g.reshape(B * n_out, Cout)
        if w.requires_grad:
            w._accumulate((cols2.T @ g2).reshape(k, Cin, Cout))
        if x.requires_grad:
            x._accumulate(_phase_upsample(g, w.data, stride, pl))

    return _make(out_data, (x, w), bwd)


_PHASE_PLANS: dict = {}


def _phase_plan(k, stride, pl):
    """Tap layout for phase-decomposed transposed convolution.

    Output index t = stride*m + r receives x[m + shift_r - q] * w[stride*q
    + r2_r]; stacking the phases turns the whole op into one matmul whose
    (m, r) output order interleaves directly into the t axis.
    """
    key = (k, stride, pl)
    plan = _PHASE_PLANS.get(key)
    if plan is not None:
        return plan
    a, b = divmod(pl, stride)
    entries = []  # (u, i, r) : cols tap u and kernel tap i feeding phase r
    lo, hi = 0, 0
    per_phase = []
    for r in range(stride):
        r2 = (r + b) % stride
        shift = a + (r + b) // stride
        n_taps = (k - 1 - r2) // stride + 1
        per_phase.append((r2, shift, n_taps))
        lo = min(lo, shift - (n_taps - 1))
        hi = max(hi, shift)
    width = hi - lo + 1
    for r, (r2, shift, n_taps) in enumerate(per_phase):
        for q in range(n_taps):
            entries.append((shift - q - lo, stride * q + r2, r))
    plan = (width, -lo, hi, tuple(entries))
    _PHASE_PLANS[key] = plan
    return plan


def _phase_upsample(v, w, stride, pl):
    """v: (B, L, A), w: (k, C, A) -> (B, L * stride, C), summing
    v[b, m, a] * w[i, c, a] into index stride * m + i - pl.
    """
    B, L, A = v.shape
    k, C, _ = w.shape
    width, pad_l, pad_r, entries = _phase_plan(k, stride, pl)
    vp = np.pad(v, ((0, 0), (pad_l, pad_r), (0, 0)))
    cols = np.ascontiguousarray(_im2col(vp, width, 1, L))
    wall = np.zeros((width, A, stride, C), dtype=v.dtype)
    for u, i, r in entries:
        wall[u, :, r, :] = w[i].T
    out = cols.reshape(B * L, width * A) @ wall.reshape(width * A, stride * C)
    return out.reshape(B, L * stride, C)


def conv1d_transpose(x, w, stride):
    """Upsampling adjoint of conv1d under the same padding convention.

    x: (B, L, Cin), w: (k, Cout, Cin) -> (B, L * stride, Cout).
    For matching shapes, <conv1d(a, w'), b> == <a, conv1d_transpose(b, w)>
    with w'[i, c, d] = w[i, d, c].
    """
    B, L, Cin = x.shape
    k, Cout, wCin = w.shape
    if wCin != Cin:
        raise ValueError(f"conv1d_transpose channel mismatch: {Cin} vs {wCin}")
    L_out = L * stride
    pl, pr = _same_pad(k, stride)
    out_data = _phase_upsample(x.data, w.data, stride, pl)

    def bwd(g):
        gp = np.pad(g, ((0, 0), (pl, pr), (0, 0)))
        cols = np.ascontiguousarray(_im2col(gp, k, stride, L))
        cols2 = cols.reshape(B * L, k * Cout)
        if x.requires_grad:
            gx = cols2 @ w.data.reshape(k * Cout, Cin)
            x._accumulate(gx.reshape(B, L, Cin))
        if w.requires_grad:
            gw = cols2.T @ x.data.reshape(B * L, Cin)
            w._accumulate(gw.reshape(k, Cout, Cin))

    return _make(out_data, (x, w), bwd)


def phase_shuffle(x, n, rng):
    """Per-sample uniform time shift in [-n, n] with boundary reflection."""
    B, L, _ = x.shape
    if n >= L:
        raise ValueError(f"phase_shuffle n={n} must be < length {L}")
    if n == 0:
        return x
    shifts = rng.integers(-n, n + 1, size=B)
    t = np.arange(L)
    idx = np.empty((B, L), dtype=np.int64)
    for b, s in enumerate(shifts):
        src = t + s
        src = np.where(src < 0, -src, src)
        src = np.where(src >= L, 2 * (L - 1) - src, src)
        idx[b] = src
    return time_gather(x, idx)


# -- gradient checking ----------------------------------------------------


def grad_check(loss_fn, params, probe_count=50, h=1e-5, rng=None):
    """Max relative error between reverse-mode and central differences.

    `loss_fn` rebuilds and returns the scalar loss Tensor from current
    parameter values. Parameters must be float64 for meaningful results.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for _ in range(probe_count):
        pi = int(rng.integers(len(params)))
        p = params[pi]
        ci = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + h
        lp = float(loss_fn().data)
        flat[ci] = orig - h
        lm = float(loss_fn().data)
        flat[ci] = orig
        numeric = (lp - lm) / (2 * h)
        a = analytic[pi].reshape(-1)[ci]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
