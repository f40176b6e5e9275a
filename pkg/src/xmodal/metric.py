"""The learned audio metric: a triplet-trained embedding concatenated with
scaled MFCCs, plus the pairwise-distance statistics used to standardize
the metric-preservation loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .mfcc import MfccConfig, MfccExtractor
from .networks import AudioEmbeddingNet
from .optim import Adam, OptimizerConfig


@dataclass
class MetricStats:
    """Mean / population std of all unordered-pair L2 distances."""

    mu: float
    sigma: float
    n_pairs: int


@dataclass
class TripletConfig:
    margin: float = 1.0
    batch_size: int = 64
    epochs: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    """All unordered-pair L2 distances of rows, in (i < j) order."""
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    iu = np.triu_indices(len(x), 1)
    return np.sqrt(np.maximum(d2[iu], 0.0))


def pairwise_stats(features: np.ndarray) -> MetricStats:
    """Mean / population sigma over all unordered-pair distances."""
    features = np.asarray(features)
    if len(features) < 3:
        raise ValueError("need at least 3 samples")
    d = pairwise_distances(features)
    sigma = float(d.std())
    if sigma == 0.0:
        raise ValueError("degenerate dataset: all pairwise distances equal")
    return MetricStats(mu=float(d.mean()), sigma=sigma, n_pairs=len(d))


def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin) for single vectors."""
    a, p, n = (np.asarray(v, dtype=np.float64)
               for v in (anchor, positive, negative))
    d_ap = ((a - p) ** 2).sum()
    d_an = ((a - n) ** 2).sum()
    return float(max(0.0, d_ap - d_an + margin))


def _valid_triplets(labels: np.ndarray):
    """Index arrays (a, p, n) of all batch-all triplets."""
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    eye = np.eye(n, dtype=bool)
    pos = same & ~eye
    a_idx, p_idx, n_idx = [], [], []
    for a in range(n):
        ps = np.nonzero(pos[a])[0]
        ns = np.nonzero(~same[a])[0]
        if len(ps) == 0 or len(ns) == 0:
            continue
        pp, nn = np.meshgrid(ps, ns, indexing="ij")
        a_idx.append(np.full(pp.size, a))
        p_idx.append(pp.ravel())
        n_idx.append(nn.ravel())
    if not a_idx:
        return None
    return (np.concatenate(a_idx), np.concatenate(p_idx),
            np.concatenate(n_idx))


def batch_all_triplet_loss(embeddings: Tensor, labels: np.ndarray,
                           margin: float) -> Tensor:
    """Mean hinge over all valid triplets with nonzero loss."""
    trip = _valid_triplets(labels)
    if trip is None:
        raise ValueError("batch has no valid triplets")
    a, p, n = trip
    B = embeddings.shape[0]
    gram = T.matmul(embeddings, T.transpose2d(embeddings))
    sq = T.reshape(T.tsum(embeddings ** 2.0, axis=1), (B, 1))
    d2 = sq + T.transpose2d(sq) - 2.0 * gram          # (B, B) squared dists
    d2f = T.reshape(d2, (B * B, 1))
    vals = (T.embed_rows(d2f, a * B + p) - T.embed_rows(d2f, a * B + n)
            + margin)
    hinged = T.relu(vals)
    n_active = int(np.count_nonzero(hinged.data > 0))
    if n_active == 0:
        return Tensor(np.zeros((), dtype=embeddings.dtype))
    return T.tsum(hinged) * (1.0 / n_active)


def train_audio_embedding(waves: np.ndarray, families: np.ndarray,
                          channel_mult: int, d_out: int, cfg: TripletConfig,
                          opt_cfg: OptimizerConfig | None = None):
    """Train the audio embedding with batch-all triplet mining.

    Returns (net, per-step loss trace).
    """
    if len(np.unique(families)) < 2:
        raise ValueError("need at least 2 families")
    rng = np.random.default_rng(cfg.seed)
    net = AudioEmbeddingNet(channel_mult, d_out, rng)
    opt = Adam(net.params(), opt_cfg or OptimizerConfig())
    trace = []
    n = len(waves)
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng([cfg.seed, 7, epoch])
        perm = erng.permutation(n)
        for s in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x = Tensor(waves[idx][:, :, None])
            emb = net.forward(x, train=True)
            loss = batch_all_triplet_loss(emb, families[idx], cfg.margin)
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
                opt.step(epoch)
            trace.append(float(loss.data))
    return net, trace


def compute_norm_factors(waves: np.ndarray, psi: AudioEmbeddingNet,
                         mfcc: MfccExtractor):
    """Reciprocal max pairwise distances under psi and under flat MFCC."""
    if len(waves) < 2:
        raise ValueError("need at least 2 clips")
    emb = psi.embed(waves)
    mf = mfcc.batch(waves)
    d_psi = pairwise_distances(emb).max()
    d_mf = pairwise_distances(mf).max()
    if d_psi == 0.0 or d_mf == 0.0:
        raise ValueError("all clips identical under the metric")
    return 1.0 / float(d_psi), 1.0 / float(d_mf)


class AudioMetric:
    """The composite feature map: [lambda1 * psi(y) ; lambda2 * MFCC(y)]."""

    def __init__(self, psi: AudioEmbeddingNet, lambda1: float, lambda2: float,
                 mfcc_cfg: MfccConfig = MfccConfig(), dtype=np.float32):
        self.psi = psi
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.mfcc = MfccExtractor(mfcc_cfg, dtype=dtype)

    @property
    def dim(self):
        return self.psi.d_out + self.mfcc.cfg.flat_dim(8192)

    def features_graph(self, waves: Tensor) -> Tensor:
        """Differentiable features for a (B, L) batch (psi runs in infer
        mode; gradients flow to the waveform, psi weights stay frozen)."""
        emb = self.psi.forward(T.reshape(waves, (*waves.shape, 1)),
                               train=False)
        mf = self.mfcc.forward(waves)
        return T.concat([emb * self.lambda1, mf * self.lambda2], axis=1)

    def features_np(self, waves: np.ndarray, batch=128) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(waves), batch):
                out.append(self.features_graph(
                    Tensor(np.asarray(waves[s:s + batch]))).data)
        return np.concatenate(out)
