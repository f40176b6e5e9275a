"""Network architectures: waveform generator, projection discriminator,
feature-space auxiliary discriminator, audio embedding net, and the
classifier trunk used by the evaluation metrics.

All nets share the 25-tap / stride [4,4,4,4,2] 1-D conv skeleton; the
channel multiplier c scales width (reference scale c=64, desk scale c=8).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import layers as L
from .tensor import Tensor, Param

KERNEL = 25
STRIDES = (4, 4, 4, 4, 2)
CLIP_LEN = 8192
SEED_LEN = CLIP_LEN // int(np.prod(STRIDES))  # 16


class Net:
    """Base: parameter collection and flat named-array state for persistence."""

    def __init__(self):
        self._layers: dict[str, object] = {}

    def _add(self, name, layer):
        self._layers[name] = layer
        return layer

    def params(self) -> list[Param]:
        out = []
        for layer in self._layers.values():
            out.extend(layer.params())
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array: weights, Adam moments, SN vectors, BN stats."""
        out = {}
        for lname, layer in self._layers.items():
            for attr, val in vars(layer).items():
                key = f"{lname}.{attr}"
                if isinstance(val, Param):
                    out[key] = val.data
                    out[key + ".adam_m"] = val.adam_m
                    out[key + ".adam_v"] = val.adam_v
                    if val.sn_u is not None:
                        out[key + ".sn_u"] = val.sn_u
                elif isinstance(val, np.ndarray):
                    out[key] = val
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for lname, layer in self._layers.items():
            for attr, val in list(vars(layer).items()):
                key = f"{lname}.{attr}"
                if isinstance(val, Param):
                    val.data[...] = arrays[key]
                    val.adam_m[...] = arrays[key + ".adam_m"]
                    val.adam_v[...] = arrays[key + ".adam_v"]
                    if key + ".sn_u" in arrays:
                        val.sn_u = arrays[key + ".sn_u"].copy()
                elif isinstance(val, np.ndarray):
                    val[...] = arrays[key]


def l2_normalize(x, eps=1e-12):
    """Row-normalize (B, d) to unit L2 norm."""
    sq = T.tsum(x ** 2.0, axis=1, keepdims=True)
    return x * (T.sqrt(sq + eps) ** -1.0)


class DownConvTrunk(Net):
    """Five Conv1d / BN / LeakyReLU blocks: (B, 8192, 1) -> (B, 16, 16c).

    Phase shuffle (when n > 0) and spectral normalization are enabled for
    the discriminator variant and disabled for the embedding/classifier
    variant.
    """

    def __init__(self, channel_mult, rng, spectral_norm=False,
                 phase_shuffle_n=0, name="trunk", dtype=np.float32):
        super().__init__()
        c = channel_mult
        self.phase_shuffle_n = phase_shuffle_n
        widths = [c, 2 * c, 4 * c, 8 * c, 16 * c]
        c_in = 1
        self.blocks = []
        for i, (w, s) in enumerate(zip(widths, STRIDES)):
            conv = self._add(f"{name}.conv{i}", L.Conv1d(
                KERNEL, c_in, w, s, rng, name=f"{name}.conv{i}",
                spectral_norm=spectral_norm, dtype=dtype))
            bn = self._add(f"{name}.bn{i}", L.CondBatchNorm(
                1, w, name=f"{name}.bn{i}", dtype=dtype))
            self.blocks.append((conv, bn))
            c_in = w
        self.out_width = 16 * c

    def forward(self, x, train, rng=None, n_power_iters=1):
        for conv, bn in self.blocks:
            x = conv.forward(x, n_power_iters)
            x = bn.forward(x, 0, train)
            x = T.leaky_relu(x, L.LEAKY_ALPHA)
            if self.phase_shuffle_n > 0 and train:
                x = T.phase_shuffle(x, self.phase_shuffle_n, rng)
        return x


class Generator(Net):
    """Dense seed + five transposed-conv blocks with pitch-conditional BN.

    (B, d_src) + pitch ids -> (B, 8192, 1) in [-1, 1] (tanh head).
    """

    def __init__(self, d_src, channel_mult, n_pitch_classes, rng,
                 dtype=np.float32):
        super().__init__()
        c = channel_mult
        self.d_src = d_src
        self.n_pitch_classes = n_pitch_classes
        self.seed_width = 32 * c
        self.dense = self._add("dense", L.Dense(
            d_src, SEED_LEN * self.seed_width, rng, name="g.dense",
            dtype=dtype))
        self.bn0 = self._add("bn0", L.CondBatchNorm(
            n_pitch_classes, self.seed_width, name="g.bn0", dtype=dtype))
        widths = [16 * c, 8 * c, 4 * c, 2 * c, 1]
        c_in = self.seed_width
        self.blocks = []
        for i, (w, s) in enumerate(zip(widths, STRIDES)):
            up = self._add(f"up{i}", L.ConvTranspose1d(
                KERNEL, c_in, w, s, rng, name=f"g.up{i}", dtype=dtype))
            bn = self._add(f"bn{i + 1}", L.CondBatchNorm(
                n_pitch_classes, w, name=f"g.bn{i + 1}", dtype=dtype))
            self.blocks.append((up, bn))
            c_in = w
        self.n_blocks = len(self.blocks)

    def forward(self, z, pitch_ids, train):
        B = z.shape[0]
        h = self.dense.forward(z)
        h = T.reshape(h, (B, SEED_LEN, self.seed_width))
        h = self.bn0.forward(h, pitch_ids, train)
        h = T.leaky_relu(h, L.LEAKY_ALPHA)
        for i, (up, bn) in enumerate(self.blocks):
            h = up.forward(h)
            h = bn.forward(h, pitch_ids, train)
            if i < self.n_blocks - 1:
                h = T.leaky_relu(h, L.LEAKY_ALPHA)
            else:
                h = T.tanh(h)
        return h


class Discriminator(Net):
    """Spectrally normalized conv critic with pitch projection head.

    score = dense(x) + <embed(pitch), x>, x = time-summed trunk features.
    """

    def __init__(self, channel_mult, n_pitch_classes, rng,
                 phase_shuffle_n=2, dtype=np.float32):
        super().__init__()
        self.trunk = DownConvTrunk(channel_mult, rng, spectral_norm=True,
                                   phase_shuffle_n=phase_shuffle_n,
                                   name="d.trunk", dtype=dtype)
        self._layers.update(self.trunk._layers)
        self.head = self._add("head", L.Dense(
            self.trunk.out_width, 1, rng, name="d.head", spectral_norm=True,
            dtype=dtype))
        self.proj = self._add("proj", L.Embedding(
            n_pitch_classes, self.trunk.out_width, rng, name="d.proj",
            dtype=dtype))
        self.feature_width = self.trunk.out_width

    def forward(self, wave, pitch_ids, train, rng=None, n_power_iters=1):
        h = self.trunk.forward(wave, train, rng, n_power_iters)
        x = T.tsum(h, axis=1)                        # (B, 16c)
        out = self.head.forward(x, n_power_iters)    # (B, 1)
        emb = T.embed_rows(self.proj.table,
                           np.asarray(pitch_ids, dtype=np.int64))
        proj = T.tsum(T.mul(emb, x), axis=1, keepdims=True)
        return out + proj

    def sn_layers(self):
        return [l for l in self._layers.values()
                if getattr(l, "spectral_norm", False)]


class AuxDiscriminator(Net):
    """Feature-space critic: five spectrally normalized dense layers."""

    HIDDEN = (128, 64, 32, 16)

    def __init__(self, input_dim, rng, dtype=np.float32):
        super().__init__()
        self.input_dim = input_dim
        dims = [input_dim, *self.HIDDEN, 1]
        self.denses = []
        for i in range(len(dims) - 1):
            d = self._add(f"fc{i}", L.Dense(
                dims[i], dims[i + 1], rng, name=f"d2.fc{i}",
                spectral_norm=True, dtype=dtype))
            self.denses.append(d)

    def forward(self, feats, n_power_iters=1):
        h = feats
        for i, d in enumerate(self.denses):
            h = d.forward(h, n_power_iters)
            if i < len(self.denses) - 1:
                h = T.leaky_relu(h, L.LEAKY_ALPHA)
        return h

    def sn_layers(self):
        return list(self.denses)


class AudioEmbeddingNet(Net):
    """Trunk + dense + L2 normalization: (B, 8192, 1) -> unit (B, d_out)."""

    def __init__(self, channel_mult, d_out, rng, dtype=np.float32):
        super().__init__()
        self.d_out = d_out
        self.trunk = DownConvTrunk(channel_mult, rng, name="psi.trunk",
                                   dtype=dtype)
        self._layers.update(self.trunk._layers)
        self.head = self._add("head", L.Dense(
            self.trunk.out_width, d_out, rng, name="psi.head", dtype=dtype))

    def forward(self, wave, train):
        h = self.trunk.forward(wave, train)
        x = T.tmean(h, axis=1)
        return l2_normalize(self.head.forward(x))

    def embed(self, waves: np.ndarray, batch=128) -> np.ndarray:
        """Inference embeddings for an (n, L) clip matrix."""
        out = []
        with T.no_grad():
            for s in range(0, len(waves), batch):
                x = Tensor(waves[s:s + batch, :, None])
                out.append(self.forward(x, train=False).data)
        return np.concatenate(out)


class Classifier(Net):
    """Trunk + softmax head over K classes; exposes penultimate features."""

    def __init__(self, channel_mult, n_classes, rng, dtype=np.float32):
        super().__init__()
        self.n_classes = n_classes
        self.trunk = DownConvTrunk(channel_mult, rng, name="cls.trunk",
                                   dtype=dtype)
        self._layers.update(self.trunk._layers)
        self.head = self._add("head", L.Dense(
            self.trunk.out_width, n_classes, rng, name="cls.head",
            dtype=dtype))
        self.feature_width = self.trunk.out_width

    def logits(self, wave, train):
        h = self.trunk.forward(wave, train)
        feats = T.tmean(h, axis=1)
        return self.head.forward(feats), feats

    def features_and_probs(self, waves: np.ndarray, batch=128):
        """Inference penultimate features and softmax rows for (n, L) clips."""
        fs, ps = [], []
        with T.no_grad():
            for s in range(0, len(waves), batch):
                x = Tensor(waves[s:s + batch, :, None])
                logits, feats = self.logits(x, train=False)
                z = logits.data - logits.data.max(axis=1, keepdims=True)
                e = np.exp(z)
                ps.append(e / e.sum(axis=1, keepdims=True))
                fs.append(feats.data)
        return np.concatenate(fs), np.concatenate(ps)
