"""Pairwise-distance utilities, triplet losses, and the composite metric."""

import numpy as np
import pytest
import scipy.spatial.distance

from xmodal import tensor as T
from xmodal.dataforge import synth_tone
from xmodal.metric import (AudioMetric, MetricStats, TripletConfig,
                           batch_all_triplet_loss, compute_norm_factors,
                           pairwise_distances, pairwise_stats, triplet_loss,
                           train_audio_embedding)
from xmodal.networks import AudioEmbeddingNet
from xmodal.tensor import Tensor


class TestPairwise:
    def test_matches_scipy_pdist(self, rng):
        x = rng.normal(size=(20, 7))
        ref = scipy.spatial.distance.pdist(x)
        assert np.allclose(pairwise_distances(x), ref, atol=1e-10)

    def test_stats_population_sigma(self, rng):
        x = rng.normal(size=(10, 3))
        d = scipy.spatial.distance.pdist(x)
        st = pairwise_stats(x)
        assert st.n_pairs == 45
        assert st.mu == pytest.approx(d.mean(), abs=1e-12)
        assert st.sigma == pytest.approx(d.std(ddof=0), abs=1e-12)

    def test_stats_rejects_degenerate(self):
        with pytest.raises(ValueError):
            pairwise_stats(np.zeros((5, 3)))
        with pytest.raises(ValueError):
            pairwise_stats(np.zeros((2, 3)))


class TestTripletLoss:
    def test_hand_values(self):
        a = np.array([0.0, 0.0])
        p = np.array([1.0, 0.0])   # d_ap^2 = 1
        n = np.array([0.0, 3.0])   # d_an^2 = 9
        assert triplet_loss(a, p, n, margin=1.0) == 0.0
        assert triplet_loss(a, p, n, margin=9.0) == pytest.approx(1.0)
        # swap p and n: 9 - 1 + 1 = 9
        assert triplet_loss(a, n, p, margin=1.0) == pytest.approx(9.0)

    def test_batch_all_vs_brute_force(self, rng):
        emb = rng.normal(size=(12, 5))
        labels = rng.integers(0, 3, size=12)
        margin = 0.7
        losses = []
        for a in range(12):
            for p in range(12):
                for n in range(12):
                    if a == p or labels[a] != labels[p]:
                        continue
                    if labels[a] == labels[n]:
                        continue
                    losses.append(triplet_loss(emb[a], emb[p], emb[n], margin))
        active = [v for v in losses if v > 0]
        ref = sum(active) / len(active)
        got = batch_all_triplet_loss(Tensor(emb), labels, margin)
        assert float(got.data) == pytest.approx(ref, rel=1e-9)

    def test_all_inactive_gives_zero(self):
        emb = np.array([[0.0], [0.1], [100.0], [100.1]])
        labels = np.array([0, 0, 1, 1])
        got = batch_all_triplet_loss(Tensor(emb), labels, margin=1.0)
        assert float(got.data) == 0.0

    def test_single_class_raises(self):
        with pytest.raises(ValueError):
            batch_all_triplet_loss(Tensor(np.zeros((4, 2))),
                                   np.zeros(4, dtype=int), 1.0)

    def test_gradient(self, rng):
        emb0 = rng.normal(size=(8, 4))
        labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])

        def f(flat):
            e = Tensor(flat.reshape(8, 4), requires_grad=True)
            loss = batch_all_triplet_loss(e, labels, 5.0)
            loss.backward()
            return float(loss.data), e.grad.reshape(-1)

        val, grad = f(emb0.reshape(-1))
        eps = 1e-6
        for i in rng.choice(32, size=12, replace=False):
            xp = emb0.reshape(-1).copy()
            xp[i] += eps
            xm = emb0.reshape(-1).copy()
            xm[i] -= eps
            num = (f(xp)[0] - f(xm)[0]) / (2 * eps)
            assert abs(num - grad[i]) <= 1e-5 * max(1.0, abs(num))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TripletConfig(margin=0.0)


@pytest.fixture(scope="module")
def tiny_corpus():
    waves, fams = [], []
    for fam in range(2):
        for i in range(8):
            waves.append(synth_tone(fam * 3, 40 + i, 100 + i))
            fams.append(fam)
    return np.stack(waves), np.array(fams)


@pytest.fixture(scope="module")
def metric():
    rng = np.random.default_rng(0)
    psi = AudioEmbeddingNet(2, 128, rng)
    return AudioMetric(psi, lambda1=0.5, lambda2=0.25)


@pytest.fixture(scope="module")
def waves():
    return np.stack([synth_tone(f, 44 + f, 10 + f) for f in range(4)])


class TestTraining:
    def test_loss_decreases(self, tiny_corpus):
        waves, fams = tiny_corpus
        cfg = TripletConfig(margin=1.0, batch_size=16, epochs=4, seed=0)
        net, trace = train_audio_embedding(waves, fams, 2, 16, cfg)
        assert trace[-1] < trace[0]

    def test_single_family_raises(self, tiny_corpus):
        waves, fams = tiny_corpus
        with pytest.raises(ValueError):
            train_audio_embedding(waves, np.zeros_like(fams), 2, 16,
                                  TripletConfig())


class TestAudioMetric:
    def test_dim_505(self, metric):
        assert metric.psi.d_out == 128
        assert metric.dim == 128 + 377 == 505

    def test_feature_layout(self, metric, waves):
        feats = metric.features_np(waves)
        assert feats.shape == (4, 505)
        emb = metric.psi.embed(waves)
        mf = metric.mfcc.batch(waves)
        assert np.allclose(feats[:, :128], 0.5 * emb, atol=1e-6)
        assert np.allclose(feats[:, 128:], 0.25 * mf, atol=1e-6)

    def test_np_matches_graph(self, metric, waves):
        feats = metric.features_np(waves, batch=3)
        with T.no_grad():
            full = metric.features_graph(Tensor(waves)).data
        assert np.allclose(feats, full, atol=1e-6)

    def test_norm_factors_bound_max_distance(self, metric, waves):
        l1, l2 = compute_norm_factors(waves, metric.psi, metric.mfcc)
        scaled = AudioMetric(metric.psi, l1, l2)
        emb = scaled.features_np(waves)
        d_psi = pairwise_distances(emb[:, :128]).max()
        d_mf = pairwise_distances(emb[:, 128:]).max()
        assert d_psi == pytest.approx(1.0, abs=1e-6)
        assert d_mf == pytest.approx(1.0, abs=1e-6)

    def test_norm_factors_reject_identical(self, metric, waves):
        same = np.repeat(waves[:1], 3, axis=0)
        with pytest.raises(ValueError):
            compute_norm_factors(same, metric.psi, metric.mfcc)
