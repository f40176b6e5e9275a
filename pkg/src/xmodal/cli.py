"""Command-line pipeline: data generation, metric and classifier
training, GAN training presets, translation, and evaluation.

All stages live under one workspace directory:

    <out-dir>/data/        WAV corpus, manifest, source embeddings
    <out-dir>/artifacts/   checkpoints, metric sidecar, training logs
    <out-dir>/eval_<preset>/   report and CSV exports
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataforge as df
from .config import load_config, require_keys, config_hash
from .checkpoint import (save_checkpoint, load_checkpoint, save_sidecar,
                         load_sidecar, CheckpointError)
from .optim import OptimizerConfig
from .networks import AudioEmbeddingNet, Classifier
from .metric import (TripletConfig, train_audio_embedding,
                     compute_norm_factors, pairwise_stats, AudioMetric,
                     MetricStats)
from . import gantrain
from .gantrain import TrainConfig, PRESETS
from . import evalsuite


def _slug(preset: str) -> str:
    return preset.replace("+", "_")


def _workspace(args):
    return Path(args.out_dir)


def _opt_config(cfg) -> OptimizerConfig:
    return OptimizerConfig(lr0=cfg["lr"], beta1=cfg["beta1"],
                           beta2=cfg["beta2"],
                           decay_rate=cfg["lr_decay_rate"],
                           decay_steps=cfg["lr_decay_epochs"])


def _load_datasets(ws: Path):
    data = ws / "data"
    manifest = data / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus at {manifest}; run gen-data")
    entries = df.read_manifest(manifest)
    train = df.AudioDataset([e for e in entries if e.split == "train"],
                            base_dir=data)
    test = df.AudioDataset([e for e in entries if e.split == "test"],
                           base_dir=data)
    src_train = np.load(data / "src_train.npy")
    src_test = np.load(data / "src_test.npy")
    return train, test, src_train, src_test


def cmd_gen_data(cfg, args):
    require_keys(cfg, "gen-data")
    ws = _workspace(args)
    data = ws / "data"
    if data.exists() and any(data.iterdir()):
        if not args.force:
            raise FileExistsError(f"{data} exists; pass --force to overwrite")
    wav_dir = data / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, per_fam in (("train", cfg["clips_per_family_train"]),
                           ("test", cfg["clips_per_family_test"])):
        plan = df.synthetic_manifest(cfg["n_families"], cfg["pitch_min"],
                                     cfg["pitch_max"], per_fam, split,
                                     cfg["seed"])
        for i, entry in enumerate(plan):
            wave = df.clip_from_entry(entry)
            rel = f"wav/{split}_f{entry.family}_{i:04d}_p{entry.pitch}.wav"
            df.write_wav(data / rel, wave)
            entries.append(df.ManifestEntry(rel, entry.family, entry.pitch,
                                            entry.source_type, split))
    entries = df.filter_dataset(entries, cfg["pitch_min"], cfg["pitch_max"],
                                allowed_sources=("synthetic",))
    df.write_manifest(data / "manifest.tsv", entries)
    for name, n in (("src_train", cfg["src_train"]),
                    ("src_test", cfg["src_test"])):
        vecs, _ = df.gen_source_embeddings(
            n, cfg["src_dim"], cfg["src_clusters"], cfg["src_noise_std"],
            cfg["seed"] if name == "src_train" else cfg["seed"] + 1)
        np.save(data / f"{name}.npy", vecs)
    print(f"wrote {len(entries)} clips and source embeddings to {data}")


def cmd_train_metric(cfg, args):
    require_keys(cfg, "train-metric")
    ws = _workspace(args)
    train, _, src_train, _ = _load_datasets(ws)
    art = ws / "artifacts"
    art.mkdir(parents=True, exist_ok=True)
    tcfg = TripletConfig(margin=cfg["triplet_margin"],
                         batch_size=cfg["metric_batch_size"],
                         epochs=cfg["triplet_epochs"], seed=cfg["seed"])
    psi, trace = train_audio_embedding(train.waves, train.families,
                                       cfg["channel_mult"], cfg["psi_dim"],
                                       tcfg, _opt_config(cfg))
    chash = config_hash(cfg)
    save_checkpoint(art / "psi.ckpt",
                    {"kind": "psi", "channel_mult": cfg["channel_mult"],
                     "d_out": cfg["psi_dim"], "config_hash": chash},
                    psi.named_arrays())
    from .mfcc import MfccExtractor
    lam1, lam2 = compute_norm_factors(train.waves, psi, MfccExtractor())
    metric = AudioMetric(psi, lam1, lam2)
    stats_x = pairwise_stats(src_train)
    stats_y = pairwise_stats(metric.features_np(train.waves))
    save_sidecar(art / "metric.json", {
        "lambda1": lam1, "lambda2": lam2,
        "stats_x": vars(stats_x), "stats_y": vars(stats_y),
        "config_hash": chash, "psi_checkpoint": "psi.ckpt",
        "psi_dim": cfg["psi_dim"], "final_triplet_loss": trace[-1],
    })
    print(f"psi trained ({len(trace)} steps, last loss {trace[-1]:.4f}); "
          f"lambda1={lam1:.6g} lambda2={lam2:.6g}")


def load_metric_artifacts(art: Path):
    """Rebuild the audio metric from the sidecar; never recomputes it."""
    side = load_sidecar(art / "metric.json")
    manifest, arrays = load_checkpoint(art / side["psi_checkpoint"])
    psi = AudioEmbeddingNet(manifest["channel_mult"], manifest["d_out"],
                            np.random.default_rng(0))
    psi.load_arrays(arrays)
    metric = AudioMetric(psi, side["lambda1"], side["lambda2"])
    stats_x = MetricStats(**side["stats_x"])
    stats_y = MetricStats(**side["stats_y"])
    return metric, stats_x, stats_y, side


def cmd_train_classifiers(cfg, args):
    require_keys(cfg, "train-classifiers")
    ws = _workspace(args)
    train, test, _, _ = _load_datasets(ws)
    art = ws / "artifacts"
    art.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    jobs = (("family", train.families, test.families,
             int(train.families.max()) + 1),
            ("pitch", train.pitches - cfg["pitch_min"],
             test.pitches - cfg["pitch_min"],
             cfg["pitch_max"] - cfg["pitch_min"] + 1))
    for label, ytr, yte, k in jobs:
        net, acc = evalsuite.train_classifier(
            train.waves, ytr, k, cfg["channel_mult"],
            epochs=cfg["classifier_epochs"], batch_size=cfg["batch_size"],
            seed=cfg["seed"], opt_cfg=_opt_config(cfg),
            heldout=(test.waves, yte))
        save_checkpoint(art / f"cls_{label}.ckpt",
                        {"kind": "classifier", "label": label,
                         "n_classes": k, "channel_mult": cfg["channel_mult"],
                         "config_hash": chash, "heldout_accuracy": acc},
                        net.named_arrays())
        print(f"{label} classifier: held-out accuracy {acc:.3f}")


def load_classifier(path):
    manifest, arrays = load_checkpoint(path)
    net = Classifier(manifest["channel_mult"], manifest["n_classes"],
                     np.random.default_rng(0))
    net.load_arrays(arrays)
    return net, manifest


def _train_config(cfg, preset: str) -> TrainConfig:
    return gantrain.preset_config(
        preset,
        d_src=cfg["src_dim"], channel_mult=cfg["channel_mult"],
        n_pitch_classes=cfg["pitch_max"] - cfg["pitch_min"] + 1,
        lambda_metric=cfg["lambda_metric"], n_critic=cfg["n_critic"],
        batch_size=cfg["batch_size"], g_steps=cfg["g_steps"],
        seed=cfg["seed"], phase_shuffle=cfg["phase_shuffle"],
        log_every=cfg["log_every"], checkpoint_every=cfg["checkpoint_every"],
        optimizer=_opt_config(cfg))


def cmd_train_gan(cfg, args):
    require_keys(cfg, "train-gan")
    ws = _workspace(args)
    train, _, src_train, _ = _load_datasets(ws)
    art = ws / "artifacts"
    art.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(cfg, args.preset)
    chash = config_hash(cfg)
    metric = stats_x = stats_y = None
    if tcfg.use_metric_loss or tcfg.use_aux_disc:
        metric, stats_x, stats_y, _ = load_metric_artifacts(art)
    ckpt = art / f"gan_{_slug(args.preset)}.ckpt"
    log = art / f"train_{_slug(args.preset)}.jsonl"
    if args.resume and ckpt.exists():
        dim = metric.dim if metric is not None else None
        _, state = gantrain.load_state(ckpt, tcfg, dim, expect_hash=chash)
        print(f"resuming {args.preset} at step {state.step}")
    else:
        state = gantrain.init_state(
            tcfg, metric.dim if metric is not None else None)
        log.unlink(missing_ok=True)
    pitch_ids = train.pitches - cfg["pitch_min"]
    records = gantrain.train_gan(
        state, train.waves, pitch_ids, src_train, metric, stats_x, stats_y,
        log_path=log, checkpoint_path=ckpt, config_hash=chash,
        log_hook=None if args.quiet else _print_record)
    if records:
        last = records[-1]
        print(f"{args.preset}: step {last['step']} "
              f"d_loss {last['d_loss']:.3f} g_loss {last['g_loss']:.3f}")


def _print_record(rec):
    print(f"step {rec['step']:5d} lr {rec['lr']:.2e} "
          f"d {rec['d_loss']:.3f} g {rec['g_loss']:.3f} "
          f"metric {rec['metric_loss']:.3f} sn {rec['sn_max']:.3f}",
          flush=True)


def _load_generator(ckpt_path, cfg):
    manifest, arrays = load_checkpoint(ckpt_path)
    tcfg = TrainConfig(
        d_src=manifest["d_src"], channel_mult=manifest["channel_mult"],
        n_pitch_classes=manifest["n_pitch_classes"],
        lambda_metric=manifest["lambda_metric"],
        use_aux_disc=manifest["use_aux_disc"], seed=cfg["seed"])
    gen = gantrain.build_generator(tcfg)
    sub = {k[2:]: v for k, v in arrays.items() if k.startswith("g/")}
    gen.load_arrays(sub)
    return gen, manifest


def cmd_translate(cfg, args):
    require_keys(cfg, "translate")
    gen, _ = _load_generator(args.checkpoint, cfg)
    src = np.load(args.source)
    if args.count is not None:
        src = src[:args.count]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = cfg["pitch_max"] - cfg["pitch_min"] + 1
    if args.pitch is not None:
        if not (cfg["pitch_min"] <= args.pitch <= cfg["pitch_max"]):
            raise ValueError(f"--pitch outside [{cfg['pitch_min']}, "
                             f"{cfg['pitch_max']}]")
        pitch_ids = np.full(len(src), args.pitch - cfg["pitch_min"])
    else:
        pitch_ids = np.random.default_rng([cfg["seed"], 31]).integers(
            0, k, len(src))
    waves = gantrain.translate(gen, src, pitch_ids)
    for i, wave in enumerate(waves):
        midi = int(pitch_ids[i]) + cfg["pitch_min"]
        df.write_wav(out / f"trans_{i:04d}_p{midi}.wav", wave)
    print(f"wrote {len(waves)} translations to {out}")


def _write_feature_csv(path, vectors, assigned):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "assigned_family"]
                        + [f"f{i}" for i in range(vectors.shape[1])])
        for i, (fam, row) in enumerate(zip(assigned, vectors)):
            writer.writerow([i, int(fam)] + [repr(float(v)) for v in row])


def cmd_evaluate(cfg, args):
    require_keys(cfg, "evaluate")
    ws = _workspace(args)
    art = ws / "artifacts"
    _, test, _, src_test = _load_datasets(ws)
    ckpt = Path(args.checkpoint) if args.checkpoint else (
        art / f"gan_{_slug(args.preset)}.ckpt")
    gen, gman = _load_generator(ckpt, cfg)
    metric, _, _, _ = load_metric_artifacts(art)
    cls_family, _ = load_classifier(art / "cls_family.ckpt")
    cls_pitch, _ = load_classifier(art / "cls_pitch.ckpt")
    report, extras = evalsuite.evaluate(
        gen, src_test, test.waves, test.families,
        test.pitches - cfg["pitch_min"], metric, cls_family, cls_pitch,
        seed=cfg["seed"], n_translate=cfg["eval_translations"],
        assign_mode=cfg["assign_mode"],
        config_hash=gman.get("config_hash", ""))
    out = ws / f"eval_{_slug(args.preset)}"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_feature_csv(out / "translated_features.csv",
                       extras["translated_features"], extras["assigned"])
    _write_feature_csv(out / "source_embeddings.csv",
                       extras["source_vectors"], extras["assigned"])
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return report


def build_parser():
    parser = argparse.ArgumentParser(
        prog="xmodal",
        description="Distance-preserving embedding-to-audio translation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override config seed")
        p.add_argument("--out-dir", default="workspace",
                       help="workspace directory")

    p = sub.add_parser("gen-data", help="materialize the synthetic corpus")
    common(p)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing data directory")

    p = sub.add_parser("train-metric", help="train the audio metric")
    common(p)

    p = sub.add_parser("train-classifiers",
                       help="train the evaluation classifiers")
    common(p)

    p = sub.add_parser("train-gan", help="adversarial training")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("translate", help="translate source embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help=".npy source vectors")
    p.add_argument("--pitch", type=int, default=None,
                   help="fixed MIDI pitch (default: seeded uniform)")
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("evaluate", help="score a trained generator")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="geo+aux")
    p.add_argument("--checkpoint", default=None)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-metric": cmd_train_metric,
    "train-classifiers": cmd_train_classifiers,
    "train-gan": cmd_train_gan,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides)
        _COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, FileExistsError, ValueError,
            CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
