"""Evaluation metrics: inception score, Frechet distance, pairwise
distance correlation, silhouette value with metric-space label
assignment, and a cluster-coverage diversity diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .networks import Classifier
from .optim import Adam, OptimizerConfig
from .metric import AudioMetric, pairwise_distances
from .gantrain import translate


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise ValueError("cov shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")


@dataclass
class EvalReport:
    fid_pitch: float
    fid_family: float
    is_pitch: float
    is_family: float
    pearson_pc: float
    silhouette_sv: float
    cluster_coverage: float
    n_translated: int
    n_real: int
    config_hash: str

    def to_dict(self):
        return asdict(self)


def gaussian_moments(features: np.ndarray) -> GaussianMoments:
    """Mean and population covariance of feature rows."""
    x = np.asarray(features, dtype=np.float64)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / len(x)
    return GaussianMoments(mu, (cov + cov.T) / 2)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianMoments, b: GaussianMoments, reg: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2))."""
    if len(a.mean) != len(b.mean):
        raise ValueError("moment dimension mismatch")
    d = len(a.mean)
    ca = a.cov + reg * np.eye(d)
    cb = b.cov + reg * np.eye(d)
    ra = _psd_sqrt(ca)
    inner = ra @ cb @ ra
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)


def inception_score(class_probs: np.ndarray, n_splits: int = 1) -> float:
    """Mean over splits of exp(mean KL(p(y|x) || split marginal))."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or len(p) < n_splits or n_splits < 1:
        raise ValueError("need an (n, K) matrix with n >= n_splits")
    if (p < -1e-9).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("rows must be probability vectors")
    scores = []
    for chunk in np.array_split(p, n_splits):
        marginal = chunk.mean(axis=0)
        logs = np.where(chunk > 0,
                        np.log(np.where(chunk > 0, chunk, 1.0))
                        - np.log(marginal), 0.0)
        kl = (chunk * logs).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores))


def default_is_splits(n: int) -> int:
    return 10 if n >= 500 else 1


def pearson_pc(src_vecs: np.ndarray, feat_vecs: np.ndarray) -> float:
    """Pearson r between the two spaces' unordered pairwise distances."""
    if len(src_vecs) != len(feat_vecs):
        raise ValueError("sample count mismatch")
    if len(src_vecs) < 3:
        raise ValueError("need at least 3 samples")
    dx = pairwise_distances(src_vecs)
    dy = pairwise_distances(feat_vecs)
    sx, sy = dx.std(), dy.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance in a distance vector")
    return float(((dx - dx.mean()) * (dy - dy.mean())).mean() / (sx * sy))


def family_centroids(real_feats: np.ndarray, families: np.ndarray):
    """Per-family mean features, ordered by ascending family id."""
    fams = np.unique(families)
    cents = np.stack([real_feats[families == f].mean(axis=0) for f in fams])
    return fams, cents


def assign_labels(trans_feats: np.ndarray, real_feats: np.ndarray,
                  families: np.ndarray, mode: str = "centroid") -> np.ndarray:
    """Family id of the nearest centroid (or nearest real clip when
    mode='nearest'); distance ties resolve to the lowest family id."""
    trans_feats = np.asarray(trans_feats, dtype=np.float64)
    real_feats = np.asarray(real_feats, dtype=np.float64)
    families = np.asarray(families)
    if mode == "centroid":
        fams, cents = family_centroids(real_feats, families)
        d2 = ((trans_feats[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        return fams[np.argmin(d2, axis=1)]
    if mode == "nearest":
        order = np.argsort(families, kind="stable")
        refs, labs = real_feats[order], families[order]
        d2 = ((trans_feats[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
        return labs[np.argmin(d2, axis=1)]
    raise ValueError(f"unknown assignment mode {mode!r}")


def silhouette_value(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette (b - a) / max(a, b); singletons score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    # direct differences (blockwise): the Gram-matrix shortcut loses
    # precision to cancellation for near-duplicate rows
    n = len(x)
    dist = np.empty((n, n))
    block = max(1, int(2e7) // max(x.size, 1))
    for s in range(0, n, block):
        diff = x[s:s + block, None, :] - x[None, :, :]
        dist[s:s + block] = np.sqrt((diff * diff).sum(axis=2))
    members = {lab: np.nonzero(labels == lab)[0] for lab in uniq}
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = members[labels[i]]
        if len(own) == 1:
            continue
        a = dist[i, own].sum() / (len(own) - 1)
        b = min(dist[i, members[lab]].mean()
                for lab in uniq if lab != labels[i])
        s[i] = (b - a) / max(a, b)
    return float(s.mean())


def cluster_coverage(assigned: np.ndarray, family_ids) -> float:
    """Fraction of families receiving at least ceil(1% of n) assignments."""
    assigned = np.asarray(assigned)
    family_ids = np.asarray(family_ids)
    if len(assigned) == 0:
        return 0.0
    need = math.ceil(0.01 * len(assigned))
    counts = np.array([(assigned == f).sum() for f in family_ids])
    return float((counts >= need).mean())


def train_classifier(waves: np.ndarray, labels: np.ndarray, n_classes: int,
                     channel_mult: int, epochs: int = 6, batch_size: int = 64,
                     seed: int = 0, opt_cfg: OptimizerConfig | None = None,
                     heldout: tuple | None = None):
    """Cross-entropy training of the shared trunk + softmax head.

    Returns (classifier, heldout accuracy or None).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least 2 classes")
    net = Classifier(channel_mult, n_classes, np.random.default_rng(seed))
    opt = Adam(net.params(), opt_cfg or OptimizerConfig())
    n = len(waves)
    eye = np.eye(n_classes, dtype=np.float32)
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, 5, epoch]).permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            idx = perm[s:s + batch_size]
            x = Tensor(waves[idx][:, :, None])
            logits, _ = net.logits(x, train=True)
            shifted = logits - logits.data.max(axis=1, keepdims=True)
            lse = T.log(T.tsum(T.exp(shifted), axis=1, keepdims=True))
            logp = shifted - lse
            loss = -T.tmean(T.tsum(logp * Tensor(eye[labels[idx]]), axis=1))
            opt.zero_grad()
            loss.backward()
            opt.step(epoch)
    acc = None
    if heldout is not None:
        hw, hl = heldout
        _, probs = net.features_and_probs(hw)
        acc = float((probs.argmax(axis=1) == np.asarray(hl)).mean())
    return net, acc


def penultimate_features(net: Classifier, waves: np.ndarray) -> np.ndarray:
    feats, _ = net.features_and_probs(waves)
    return feats


def evaluate(gen, src_test: np.ndarray, real_waves: np.ndarray,
             real_families: np.ndarray, real_pitches: np.ndarray,
             metric: AudioMetric, cls_family: Classifier,
             cls_pitch: Classifier, seed: int, n_translate: int | None = None,
             assign_mode: str = "centroid", config_hash: str = ""):
    """Translate a held-out source set and score it against real clips.

    Returns (EvalReport, extras dict with the feature matrices and the
    assigned labels for export).
    """
    if n_translate is None:
        n_translate = len(src_test)
    z = np.asarray(src_test[:n_translate], dtype=np.float64)
    pitches = np.random.default_rng([seed, 31]).integers(
        0, gen.n_pitch_classes, len(z))
    trans = translate(gen, z, pitches)

    phi_t = metric.features_np(trans)
    phi_r = metric.features_np(real_waves)

    feats_tf, probs_tf = cls_family.features_and_probs(trans)
    feats_rf, _ = cls_family.features_and_probs(real_waves)
    feats_tp, probs_tp = cls_pitch.features_and_probs(trans)
    feats_rp, _ = cls_pitch.features_and_probs(real_waves)

    fid_family = fid(gaussian_moments(feats_rf), gaussian_moments(feats_tf))
    fid_pitch = fid(gaussian_moments(feats_rp), gaussian_moments(feats_tp))
    splits = default_is_splits(len(trans))
    is_family = inception_score(probs_tf, splits)
    is_pitch = inception_score(probs_tp, splits)
    pc = pearson_pc(z, phi_t)

    assigned = assign_labels(phi_t, phi_r, real_families, assign_mode)
    fam_ids = np.unique(real_families)
    coverage = cluster_coverage(assigned, fam_ids)
    if len(np.unique(assigned)) >= 2:
        sv = silhouette_value(z, assigned)
    else:
        sv = 0.0  # total collapse: cohesion/separation undefined

    report = EvalReport(
        fid_pitch=fid_pitch, fid_family=fid_family,
        is_pitch=is_pitch, is_family=is_family,
        pearson_pc=pc, silhouette_sv=sv, cluster_coverage=coverage,
        n_translated=len(trans), n_real=len(real_waves),
        config_hash=config_hash)
    extras = {"translated_waves": trans, "translated_features": phi_t,
              "real_features": phi_r, "assigned": assigned,
              "pitches": pitches, "source_vectors": z}
    return report, extras
