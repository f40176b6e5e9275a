"""Differentiable MFCC pipeline.

Framing (1024/256, Hann, no padding) -> power spectrum -> 80-bin mel
filterbank (80-7600 Hz) -> floored log -> orthonormal DCT-II, keeping
coefficients 0..12. On 8192-sample clips this yields 29 frames x 13
coefficients = a 377-dim flat feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    frame_len: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 80.0
    fmax: float = 7600.0
    n_coeffs: int = 13
    log_floor: float = 1e-6

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop

    def flat_dim(self, n_samples: int) -> int:
        return self.n_frames(n_samples) * self.n_coeffs


@dataclass
class MfccFeature:
    """Per-clip MFCC matrix and its row-major flattening."""

    frames: np.ndarray  # (F, C)
    flat: np.ndarray    # (F * C,)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular mel filters, (n_fft/2 + 1, n_mels)."""
    n_bins = cfg.frame_len // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.frame_len
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax),
                                   cfg.n_mels + 2))
    lo, ctr, hi = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[:, None] - lo[None, :]) / (ctr - lo)[None, :]
    down = (hi[None, :] - freqs[:, None]) / (hi - ctr)[None, :]
    return np.maximum(0.0, np.minimum(up, down))


def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II basis, (n_in, n_out), for right-multiplication."""
    n = np.arange(n_in)[:, None]
    m = np.arange(n_out)[None, :]
    d = np.sqrt(2.0 / n_in) * np.cos(np.pi * (n + 0.5) * m / n_in)
    d[:, 0] *= 1.0 / np.sqrt(2.0)
    return d


class MfccExtractor:
    """Caches the window / filterbank / DCT constants for one config."""

    def __init__(self, cfg: MfccConfig = MfccConfig(), dtype=np.float32):
        self.cfg = cfg
        n = cfg.frame_len
        self.window = (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
                       ).astype(dtype)
        self.mel = mel_filterbank(cfg).astype(dtype)
        self.dct = dct_matrix(cfg.n_mels, cfg.n_coeffs).astype(dtype)

    def forward(self, waves: Tensor) -> Tensor:
        """Differentiable batch MFCC: (B, L) -> (B, F * n_coeffs)."""
        cfg = self.cfg
        B, L = waves.shape
        if L < cfg.frame_len:
            raise ValueError(f"clip length {L} shorter than one frame")
        n_frames = cfg.n_frames(L)
        frames = T.frame_signal(waves, cfg.frame_len, cfg.hop)
        frames = T.mul(frames, Tensor(self.window[None, None, :]))
        power = T.power_spectrum(frames, cfg.frame_len)
        flat = T.reshape(power, (B * n_frames, cfg.frame_len // 2 + 1))
        mel_e = T.matmul(flat, Tensor(self.mel))
        log_mel = T.log_floored(mel_e, cfg.log_floor)
        coeffs = T.matmul(log_mel, Tensor(self.dct))
        return T.reshape(coeffs, (B, n_frames * cfg.n_coeffs))

    def batch(self, waves: np.ndarray) -> np.ndarray:
        """Plain-numpy batch MFCC, same path as `forward`."""
        return self.forward(Tensor(np.asarray(waves))).data

    def single(self, wave: np.ndarray) -> MfccFeature:
        flat = self.batch(np.asarray(wave)[None, :])[0]
        return MfccFeature(frames=flat.reshape(-1, self.cfg.n_coeffs),
                           flat=flat)
