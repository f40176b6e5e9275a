"""Audio corpus handling: WAV ingest with contract checks, manifest files,
procedural tone synthesis, clustered source embeddings, and deterministic
batch iteration.
"""

from __future__ import annotations

import wave as wavemod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
CLIP_LEN = 8192

MANIFEST_FIELDS = ("source", "family", "pitch", "source_type", "split")


@dataclass(frozen=True)
class ManifestEntry:
    source: str       # wav path, or "synth:<family>:<pitch>:<seed>"
    family: int
    pitch: int
    source_type: str  # acoustic | electronic | synthetic
    split: str        # train | test


def validate_waveform(samples: np.ndarray, clip_len: int = CLIP_LEN):
    samples = np.asarray(samples)
    if samples.ndim != 1 or samples.shape[0] != clip_len:
        raise ValueError(f"waveform must be 1-D of length {clip_len}")
    if not np.all(np.isfinite(samples)):
        raise ValueError("waveform contains non-finite samples")
    if np.abs(samples).max(initial=0.0) > 1.0:
        raise ValueError("waveform samples must lie in [-1, 1]")


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    """16-bit PCM mono WAV."""
    ints = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0),
                   -32768, 32767).astype("<i2")
    with wavemod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(ints.tobytes())


def load_wav(path, clip_len: int = CLIP_LEN,
             sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Load a 16-bit mono PCM WAV, keep the first `clip_len` samples."""
    with wavemod.open(str(path), "rb") as f:
        if f.getframerate() != sample_rate:
            raise ValueError(f"{path}: sample rate {f.getframerate()}, "
                             f"need {sample_rate}")
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: need mono audio")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: need 16-bit PCM")
        if f.getnframes() < clip_len:
            raise ValueError(f"{path}: only {f.getnframes()} samples, "
                             f"need at least {clip_len}")
        raw = f.readframes(clip_len)
    ints = np.frombuffer(raw, dtype="<i2")
    return (ints.astype(np.float32) / 32768.0)


# -- manifests -------------------------------------------------------------


def write_manifest(path, entries: list[ManifestEntry]):
    lines = ["#" + "\t".join(MANIFEST_FIELDS)]
    for e in entries:
        lines.append(f"{e.source}\t{e.family}\t{e.pitch}\t"
                     f"{e.source_type}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        src, fam, pitch, stype, split = line.split("\t")
        entries.append(ManifestEntry(src, int(fam), int(pitch), stype, split))
    if not entries:
        raise ValueError(f"empty manifest: {path}")
    return entries


def filter_dataset(entries: list[ManifestEntry], pitch_min: int = 24,
                   pitch_max: int = 84,
                   allowed_sources=("acoustic",)) -> list[ManifestEntry]:
    """Keep allowed-source entries with pitch in [pitch_min, pitch_max]."""
    kept = [e for e in entries
            if e.source_type in allowed_sources
            and pitch_min <= e.pitch <= pitch_max]
    if not kept:
        raise ValueError("filter removed every manifest entry")
    return kept


# -- synthesis ---------------------------------------------------------------

# (harmonic ratio, relative amplitude, extra decay rate 1/s) per family
_FAMILY_PROFILES = {
    0: [(1.0, 1.0, 0.0)],
    1: [(h, 1.0 / h, 0.0) for h in range(1, 9)],
    2: [(h, 1.0 / h, 0.0) for h in range(1, 16, 2)],
    3: [(1.0, 1.0, 0.0), (2.76, 0.6, 3.0), (5.40, 0.35, 6.0)],
}
_BASE_DECAY = 3.0  # 1/s exponential envelope
_PEAK = 0.9
_DETUNE = 0.005


def n_families() -> int:
    return len(_FAMILY_PROFILES)


def synth_tone(family: int, pitch: int, seed: int,
               clip_len: int = CLIP_LEN,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Additive tone for (family, pitch); seed controls detune and phases."""
    if family not in _FAMILY_PROFILES:
        raise ValueError(f"unknown family {family}")
    if not (0 <= pitch < 128):
        raise ValueError(f"pitch {pitch} out of MIDI range")
    rng = np.random.default_rng([seed, family, pitch])
    f0 = 440.0 * 2.0 ** ((pitch - 69) / 12.0)
    f0 *= 1.0 + _DETUNE * rng.uniform(-1.0, 1.0)
    t = np.arange(clip_len) / sample_rate
    out = np.zeros(clip_len, dtype=np.float64)
    for ratio, amp, extra_decay in _FAMILY_PROFILES[family]:
        f = f0 * ratio
        if f >= sample_rate / 2:
            continue
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += (amp * np.exp(-(_BASE_DECAY + extra_decay) * t)
                * np.sin(2.0 * np.pi * f * t + phase))
    peak = np.abs(out).max()
    if peak > 0:
        out *= _PEAK / peak
    return out.astype(np.float32)


def clip_from_entry(entry: ManifestEntry, base_dir=None,
                    clip_len: int = CLIP_LEN) -> np.ndarray:
    if entry.source.startswith("synth:"):
        _, fam, pitch, seed = entry.source.split(":")
        return synth_tone(int(fam), int(pitch), int(seed), clip_len)
    path = Path(entry.source)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return load_wav(path, clip_len)


def synthetic_manifest(n_fam: int, pitch_min: int, pitch_max: int,
                       per_family: int, split: str, seed: int,
                       ) -> list[ManifestEntry]:
    """Deterministic synthetic corpus plan: pitches cycle over the range."""
    pitches = np.arange(pitch_min, pitch_max + 1)
    entries = []
    for fam in range(n_fam):
        for i in range(per_family):
            pitch = int(pitches[i % len(pitches)])
            clip_seed = seed * 1_000_003 + fam * 10_007 + i
            entries.append(ManifestEntry(f"synth:{fam}:{pitch}:{clip_seed}",
                                         fam, pitch, "synthetic", split))
    return entries


class AudioDataset:
    """In-memory clip matrix with labels, loaded from a manifest."""

    def __init__(self, entries: list[ManifestEntry], base_dir=None,
                 clip_len: int = CLIP_LEN):
        self.entries = list(entries)
        self.waves = np.stack([clip_from_entry(e, base_dir, clip_len)
                               for e in entries])
        self.families = np.array([e.family for e in entries], dtype=np.int64)
        self.pitches = np.array([e.pitch for e in entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)


# -- source embeddings -------------------------------------------------------


def gen_source_embeddings(n: int, d: int, n_clusters: int, noise_std: float,
                          seed: int):
    """Unit-norm vectors around `n_clusters` random unit centers.

    Returns (vectors (n, d), latent cluster labels (n,)); the labels are
    for test assertions only and are never shown to training.
    """
    if n_clusters > n:
        raise ValueError("need n >= n_clusters")
    if d < n_clusters:
        raise ValueError("need d >= n_clusters")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, n_clusters, size=n)
    vecs = centers[labels] + noise_std * rng.standard_normal((n, d))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs.astype(np.float32), labels


# -- batching ---------------------------------------------------------------


def batch_indices(n: int, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch shuffle; drops the last partial batch."""
    if batch_size > n:
        raise ValueError("batch_size exceeds dataset size")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield perm[start:start + batch_size]
