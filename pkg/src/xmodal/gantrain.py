"""Adversarial training loop: waveform critic plus optional feature-space
critic, with the metric-preservation term on the generator.

Every random draw comes from a stateless stream keyed by (seed, tag,
step, substep), so a resumed run continues the exact sequence a fresh
run would have produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import layers as L
from .tensor import Tensor, no_grad
from .networks import Generator, Discriminator, AuxDiscriminator, CLIP_LEN
from .optim import Adam, OptimizerConfig
from .metric import AudioMetric, MetricStats
from .losses import metric_loss, loss_g_total, loss_d_total
from .checkpoint import save_checkpoint, load_checkpoint

PRESETS = {
    "baseline": {"lambda_metric": 0.0, "use_aux_disc": False},
    "geo": {"use_aux_disc": False},
    "geo+aux": {"use_aux_disc": True},
}

# rng stream tags
_REAL, _SRC_D, _PITCH_D, _SHUF_D = 11, 12, 13, 14
_SRC_G, _PITCH_G, _SHUF_G = 21, 22, 23


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d_src: int = 64
    channel_mult: int = 8
    n_pitch_classes: int = 13
    lambda_metric: float = 10.0
    use_aux_disc: bool = False
    n_critic: int = 5
    batch_size: int = 64
    g_steps: int = 2000
    seed: int = 7
    phase_shuffle: int = 2
    log_every: int = 10
    checkpoint_every: int = 500
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.lambda_metric < 0:
            raise ValueError("lambda_metric must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def use_metric_loss(self) -> bool:
        return self.lambda_metric > 0


def preset_config(name: str, **kwargs) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    merged = {**kwargs, **PRESETS[name]}
    return TrainConfig(**merged)


def build_generator(cfg: TrainConfig) -> Generator:
    rng = np.random.default_rng([cfg.seed, 1])
    return Generator(cfg.d_src, cfg.channel_mult, cfg.n_pitch_classes, rng)


def build_discriminator(cfg: TrainConfig) -> Discriminator:
    rng = np.random.default_rng([cfg.seed, 2])
    net = Discriminator(cfg.channel_mult, cfg.n_pitch_classes, rng,
                        phase_shuffle_n=cfg.phase_shuffle)
    warmup_spectral_norm(net)
    return net


def build_aux_discriminator(cfg: TrainConfig, input_dim: int):
    rng = np.random.default_rng([cfg.seed, 3])
    net = AuxDiscriminator(input_dim, rng)
    warmup_spectral_norm(net)
    return net


def warmup_spectral_norm(net, iters=60):
    """Converge the persistent power-iteration vectors at init so the
    normalized weights respect the Lipschitz bound from the first step."""
    with no_grad():
        for layer in net.sn_layers():
            L.spectral_sigma(layer.w, layer.sn_axis, iters)


def sn_audit(nets) -> float:
    """Max top singular value over all effective discriminator weights."""
    worst = 0.0
    for net in nets:
        if net is None:
            continue
        for layer in net.sn_layers():
            sv = L.estimate_top_sv(layer.effective_weight(), layer.sn_axis)
            worst = max(worst, sv)
    return worst


def translate(gen: Generator, src_vecs: np.ndarray, pitch_ids: np.ndarray,
              batch: int = 128) -> np.ndarray:
    """Deterministic infer-mode forward: (n, d_src) -> (n, 8192)."""
    pitch_ids = np.asarray(pitch_ids, dtype=np.int64)
    if pitch_ids.min() < 0 or pitch_ids.max() >= gen.n_pitch_classes:
        raise ValueError("pitch id out of configured range")
    out = []
    with no_grad():
        for s in range(0, len(src_vecs), batch):
            z = Tensor(np.asarray(src_vecs[s:s + batch], dtype=np.float32))
            w = gen.forward(z, pitch_ids[s:s + batch], train=False)
            out.append(w.data[:, :, 0])
    return np.concatenate(out)


@dataclass
class TrainState:
    cfg: TrainConfig
    gen: Generator
    disc: Discriminator
    aux: AuxDiscriminator | None
    opt_g: Adam
    opt_d: Adam
    step: int = 0
    d_update_count: int = 0
    g_update_count: int = 0


def init_state(cfg: TrainConfig, metric_dim: int | None = None) -> TrainState:
    gen = build_generator(cfg)
    disc = build_discriminator(cfg)
    aux = None
    d_params = disc.params()
    if cfg.use_aux_disc:
        if metric_dim is None:
            raise ValueError("aux discriminator needs the metric dimension")
        aux = build_aux_discriminator(cfg, metric_dim)
        d_params = d_params + aux.params()
    return TrainState(cfg=cfg, gen=gen, disc=disc, aux=aux,
                      opt_g=Adam(gen.params(), cfg.optimizer),
                      opt_d=Adam(d_params, cfg.optimizer))


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for prefix, net in (("g", state.gen), ("d1", state.disc),
                        ("d2", state.aux)):
        if net is None:
            continue
        for name, arr in net.named_arrays().items():
            arrays[f"{prefix}/{name}"] = arr
    return arrays


def save_state(path, state: TrainState, config_hash: str = "",
               extra: dict | None = None):
    manifest = {
        "kind": "gan",
        "config_hash": config_hash,
        "step": state.step,
        "d_update_count": state.d_update_count,
        "g_update_count": state.g_update_count,
        "opt_g_t": state.opt_g.t,
        "opt_d_t": state.opt_d.t,
        "d_src": state.cfg.d_src,
        "channel_mult": state.cfg.channel_mult,
        "n_pitch_classes": state.cfg.n_pitch_classes,
        "use_aux_disc": state.cfg.use_aux_disc,
        "lambda_metric": state.cfg.lambda_metric,
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(path, manifest, state_arrays(state))


def load_state(path, cfg: TrainConfig, metric_dim: int | None = None,
               expect_hash: str | None = None):
    manifest, arrays = load_checkpoint(path)
    if expect_hash is not None and manifest.get("config_hash") != expect_hash:
        raise ValueError("checkpoint config_hash does not match the config; "
                         "pass allow_hash_mismatch to override")
    state = init_state(cfg, metric_dim)
    for prefix, net in (("g", state.gen), ("d1", state.disc),
                        ("d2", state.aux)):
        if net is None:
            continue
        sub = {name[len(prefix) + 1:]: arr for name, arr in arrays.items()
               if name.startswith(prefix + "/")}
        net.load_arrays(sub)
    state.step = int(manifest["step"])
    state.d_update_count = int(manifest["d_update_count"])
    state.g_update_count = int(manifest["g_update_count"])
    state.opt_g.t = int(manifest["opt_g_t"])
    state.opt_d.t = int(manifest["opt_d_t"])
    return manifest, state


def _stream(seed, tag, step, sub=0):
    return np.random.default_rng([seed, tag, step, sub])


def _check_finite(name, value, state, dump_path):
    if np.isfinite(value):
        return
    if dump_path is not None:
        save_state(dump_path, state, extra={"aborted_on": name,
                                            "bad_value": repr(value)})
    raise TrainingDiverged(
        f"non-finite {name} ({value}) at step {state.step}"
        + (f"; state dumped to {dump_path}" if dump_path else ""))


def train_gan(state: TrainState, waves: np.ndarray, pitch_ids: np.ndarray,
              src_vecs: np.ndarray, metric: AudioMetric | None,
              stats_x: MetricStats | None, stats_y: MetricStats | None,
              n_steps: int | None = None, log_path=None,
              checkpoint_path=None, config_hash: str = "",
              log_hook=None) -> list[dict]:
    """Run outer iterations (n_critic D updates, then one G update).

    waves: (n, 8192) real clips; pitch_ids: their class labels;
    src_vecs: (m, d_src) source embeddings. Returns the log records.
    """
    cfg = state.cfg
    if cfg.use_metric_loss or cfg.use_aux_disc:
        if metric is None or stats_x is None or stats_y is None:
            raise ValueError("metric artifacts required for this preset")
    if metric is not None:
        for p in metric.psi.params():
            p.requires_grad = False
    B = cfg.batch_size
    n, m = len(waves), len(src_vecs)
    end_step = cfg.g_steps if n_steps is None else state.step + n_steps
    dump = str(checkpoint_path) + ".diverged" if checkpoint_path else None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    records = []
    try:
        while state.step < end_step:
            step = state.step
            # one "epoch" = one pass of D updates over the real clips
            epoch = step * cfg.n_critic * B / n
            d_losses = []
            for j in range(cfg.n_critic):
                ridx = _stream(cfg.seed, _REAL, step, j).integers(0, n, B)
                zidx = _stream(cfg.seed, _SRC_D, step, j).integers(0, m, B)
                fpitch = _stream(cfg.seed, _PITCH_D, step, j).integers(
                    0, cfg.n_pitch_classes, B)
                shuf = _stream(cfg.seed, _SHUF_D, step, j)
                real = waves[ridx][:, :, None]
                z = Tensor(src_vecs[zidx].astype(np.float32))
                with no_grad():
                    fake = state.gen.forward(z, fpitch, train=True).data
                d_real = state.disc.forward(Tensor(real), pitch_ids[ridx],
                                            train=True, rng=shuf)
                d_fake = state.disc.forward(Tensor(fake), fpitch,
                                            train=True, rng=shuf)
                d2_real = d2_fake = None
                if cfg.use_aux_disc:
                    phi_real = metric.features_np(real[:, :, 0])
                    phi_fake = metric.features_np(fake[:, :, 0])
                    d2_real = state.aux.forward(Tensor(phi_real))
                    d2_fake = state.aux.forward(Tensor(phi_fake))
                loss_d = loss_d_total(d_real, d_fake, d2_real, d2_fake,
                                      cfg.use_aux_disc)
                state.opt_d.zero_grad()
                loss_d.backward()
                state.opt_d.step(epoch)
                state.d_update_count += 1
                val = float(loss_d.data)
                _check_finite("d_loss", val, state, dump)
                d_losses.append(val)

            zidx = _stream(cfg.seed, _SRC_G, step).integers(0, m, B)
            fpitch = _stream(cfg.seed, _PITCH_G, step).integers(
                0, cfg.n_pitch_classes, B)
            shuf = _stream(cfg.seed, _SHUF_G, step)
            zbatch = src_vecs[zidx].astype(np.float32)
            fake = state.gen.forward(Tensor(zbatch), fpitch, train=True)
            d1_fake = state.disc.forward(fake, fpitch, train=True, rng=shuf)
            d2_fake = None
            m_term = None
            m_val = 0.0
            if cfg.use_metric_loss or cfg.use_aux_disc:
                feats = metric.features_graph(
                    T.reshape(fake, (B, CLIP_LEN)))
                if cfg.use_metric_loss:
                    m_term = metric_loss(zbatch, feats, stats_x, stats_y)
                    m_val = float(m_term.data)
                if cfg.use_aux_disc:
                    d2_fake = state.aux.forward(feats)
            loss_g = loss_g_total(d1_fake, d2_fake, m_term,
                                  cfg.lambda_metric, cfg.use_aux_disc)
            state.opt_g.zero_grad()
            loss_g.backward()
            state.opt_g.step(epoch)
            state.g_update_count += 1
            state.step += 1
            g_val = float(loss_g.data)
            _check_finite("g_loss", g_val, state, dump)
            _check_finite("metric_loss", m_val, state, dump)

            if state.step % cfg.log_every == 0 or state.step == end_step:
                rec = {"step": state.step,
                       "lr": state.opt_g.lr_at(epoch),
                       "d_loss": float(np.mean(d_losses)),
                       "g_loss": g_val,
                       "metric_loss": m_val,
                       "sn_max": sn_audit([state.disc, state.aux])}
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if log_hook is not None:
                    log_hook(rec)
            if checkpoint_path and (state.step % cfg.checkpoint_every == 0
                                    or state.step == end_step):
                save_state(checkpoint_path, state, config_hash)
    finally:
        if log_fh is not None:
            log_fh.close()
    return records
