"""Network building blocks: dense / conv layers, conditional batch norm,
embeddings, and spectral normalization with persistent power-iteration state.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Param, Tensor

INIT_STD = 0.02
BN_EPS = 1e-5
SN_EPS = 1e-12
LEAKY_ALPHA = 0.2


def _init(rng, shape, dtype):
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


def _to_2d(a, out_axis):
    """View array as (output_dim, rest) for spectral normalization."""
    moved = np.moveaxis(a, out_axis, 0)
    return moved.reshape(a.shape[out_axis], -1), moved.shape


def spectral_sigma(param: Param, out_axis: int, n_power_iters: int = 1,
                   eps: float = SN_EPS, tol: float = 1e-6,
                   max_iters: int = 400):
    """Power-iteration estimate of the top singular value.

    Runs at least `n_power_iters` iterations (0 freezes the state), then
    continues until the sigma estimate is stationary within `tol`;
    carrying the vector across calls in `sn_u` makes the continuation
    cheap once converged. Updates are treated as constant for gradients;
    sigma returns as an in-graph scalar Tensor so W / sigma stays
    differentiable.
    """
    w2, moved_shape = _to_2d(param.data, out_axis)
    out_dim = w2.shape[0]
    if param.sn_u is None:
        u = np.ones(out_dim, dtype=param.dtype)
        param.sn_u = u / np.linalg.norm(u)
    u = param.sn_u
    if n_power_iters > 0:
        sig_prev = -1.0
        for it in range(max(n_power_iters, max_iters)):
            v = w2.T @ u
            nv = np.linalg.norm(v)
            v = v / max(nv, eps)
            u = w2 @ v
            nu = np.linalg.norm(u)
            u = u / max(nu, eps)
            if it + 1 >= n_power_iters:
                if abs(nu - sig_prev) <= tol * max(nu, eps):
                    break
                sig_prev = nu
    param.sn_u = u.astype(param.dtype)
    v = w2.T @ u
    nv = np.linalg.norm(v)
    v = v / max(nv, eps)
    # sigma = u^T W v, expressed as sum(W * outer(u, v)) in W's own layout
    outer = np.outer(u, v).reshape(moved_shape)
    outer = np.moveaxis(outer, 0, out_axis).astype(param.dtype)
    sigma = T.tsum(T.mul(param, Tensor(outer)))
    return sigma + eps


def estimate_top_sv(w, out_axis=-1):
    """Offline reference: top singular value by numpy SVD (oracle path)."""
    w2, _ = _to_2d(np.asarray(w, dtype=np.float64), out_axis)
    return float(np.linalg.svd(w2, compute_uv=False)[0])


def _sigma_from_state(param, out_axis, eps=SN_EPS, tol=1e-6, max_iters=400):
    """Sigma estimate the next forward pass would divide by (converging
    power iteration from the persistent sn_u, state left untouched)."""
    w2, _ = _to_2d(param.data.astype(np.float64), out_axis)
    u = param.sn_u
    if u is None:
        u = np.ones(w2.shape[0])
        u = u / np.linalg.norm(u)
    sig_prev = -1.0
    for _ in range(max_iters):
        v = w2.T @ u
        v = v / max(np.linalg.norm(v), eps)
        u = w2 @ v
        nu = np.linalg.norm(u)
        u = u / max(nu, eps)
        if abs(nu - sig_prev) <= tol * max(nu, eps):
            break
        sig_prev = nu
    v = w2.T @ u
    v = v / max(np.linalg.norm(v), eps)
    return float(u @ w2 @ v) + eps


class Layer:
    def params(self):
        return [v for v in vars(self).values() if isinstance(v, Param)]


class Dense(Layer):
    """Affine map (B, n_in) -> (B, n_out), optional spectral normalization."""

    def __init__(self, n_in, n_out, rng, name="dense", spectral_norm=False,
                 dtype=np.float32):
        self.w = Param(_init(rng, (n_in, n_out), dtype), name=f"{name}.w")
        self.b = Param(np.zeros(n_out, dtype=dtype), name=f"{name}.b")
        self.spectral_norm = spectral_norm
        self.sn_axis = 1

    def forward(self, x, n_power_iters=1):
        w = self.w
        if self.spectral_norm:
            w = T.mul(self.w, spectral_sigma(self.w, 1, n_power_iters) ** -1.0)
        return T.matmul(x, w) + self.b

    def effective_weight(self):
        if not self.spectral_norm:
            return self.w.data
        return self.w.data / _sigma_from_state(self.w, 1)


class Conv1d(Layer):
    """Strided conv (B, L, Cin) -> (B, L/s, Cout), 'same' zero padding."""

    def __init__(self, kernel, c_in, c_out, stride, rng, name="conv",
                 spectral_norm=False, dtype=np.float32):
        self.w = Param(_init(rng, (kernel, c_in, c_out), dtype),
                       name=f"{name}.w")
        self.b = Param(np.zeros(c_out, dtype=dtype), name=f"{name}.b")
        self.stride = stride
        self.spectral_norm = spectral_norm
        self.sn_axis = 2

    def forward(self, x, n_power_iters=1):
        w = self.w
        if self.spectral_norm:
            w = T.mul(self.w, spectral_sigma(self.w, 2, n_power_iters) ** -1.0)
        return T.conv1d(x, w, self.stride) + self.b

    def effective_weight(self):
        if not self.spectral_norm:
            return self.w.data
        return self.w.data / _sigma_from_state(self.w, 2)


class ConvTranspose1d(Layer):
    """Strided transposed conv (B, L, Cin) -> (B, L*s, Cout)."""

    def __init__(self, kernel, c_in, c_out, stride, rng, name="upconv",
                 spectral_norm=False, dtype=np.float32):
        self.w = Param(_init(rng, (kernel, c_out, c_in), dtype),
                       name=f"{name}.w")
        self.b = Param(np.zeros(c_out, dtype=dtype), name=f"{name}.b")
        self.stride = stride
        self.spectral_norm = spectral_norm
        self.sn_axis = 1

    def forward(self, x, n_power_iters=1):
        w = self.w
        if self.spectral_norm:
            w = T.mul(self.w, spectral_sigma(self.w, 1, n_power_iters) ** -1.0)
        return T.conv1d_transpose(x, w, self.stride) + self.b

    def effective_weight(self):
        if not self.spectral_norm:
            return self.w.data
        return self.w.data / _sigma_from_state(self.w, 1)


class CondBatchNorm(Layer):
    """Batch norm over (batch, time) with class-selected scale/shift.

    With n_classes=1 and zero ids this is plain batch normalization.
    Running statistics are updated in train mode and used in infer mode.
    """

    def __init__(self, n_classes, channels, name="cbn", eps=BN_EPS,
                 momentum=0.9, dtype=np.float32):
        self.gamma = Param(np.ones((n_classes, channels), dtype=dtype),
                           name=f"{name}.gamma")
        self.beta = Param(np.zeros((n_classes, channels), dtype=dtype),
                          name=f"{name}.beta")
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, class_ids, train):
        B, L, C = x.shape
        if train:
            if B * L < 2:
                raise ValueError("batch norm needs B*L >= 2 in train mode")
            mu = x.data.mean(axis=(0, 1))
            var = x.data.var(axis=(0, 1))
            m = self.momentum
            self.running_mean = (m * self.running_mean
                                 + (1 - m) * mu).astype(x.dtype)
            self.running_var = (m * self.running_var
                                + (1 - m) * var).astype(x.dtype)
        else:
            mu = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (B,))
        g = T.embed_rows(self.gamma, ids)
        b = T.embed_rows(self.beta, ids)
        return T.batch_norm(x, g, b, mu.astype(x.dtype),
                            inv_std.astype(x.dtype), train)


class Embedding(Layer):
    """Lookup table (K, d); gradient accumulates into taken rows only."""

    def __init__(self, n_classes, dim, rng, name="embed", dtype=np.float32):
        self.table = Param(_init(rng, (n_classes, dim), dtype),
                           name=f"{name}.table")

    def forward(self, ids):
        return T.embed_rows(self.table, np.asarray(ids, dtype=np.int64))
