"""Command-line pipeline: gen-data -> render-cwt -> train-vae -> train-classifier -> evaluate -> report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import cwt, datagen, metrics
from .classifier import (AttentionClassifier, ClassifierArch, ClassifierError, ClassifierHyper, Variant,
                         encoder_block_features, predict_proba, train_classifier, variant_features)
from .config import RunConfig, config_from_dict, load_config
from .datagen import ConfigError, Label
from .vae import VAE, VaeArch, evaluate_loss, freeze, train_vae

log = logging.getLogger("trafficqc")

DATASETS = ("positive", "negative", "mixed")
VAE_FOR = {"positive": "positive", "negative": "negative"}


class PipelineError(Exception):
    category = "runtime"
    exit_code = 1


class PrerequisiteError(PipelineError):
    category = "prerequisite"
    exit_code = 3


class Layout:
    """File locations inside an experiment directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.json")
    data = property(lambda self: self.root / "data")
    cache = property(lambda self: self.root / "cwt")
    images = property(lambda self: self.root / "images")
    checkpoints = property(lambda self: self.root / "checkpoints")
    logs = property(lambda self: self.root / "logs")
    results = property(lambda self: self.root / "results")

    def dataset_csv(self, name):
        return self.data / f"{name}.csv"

    def cache_stem(self, name):
        return self.cache / name

    def vae_ckpt(self, which):
        return self.checkpoints / f"vae_{which}.ckpt"

    def clf_tag(self, variant: Variant, seed: int):
        return f"{variant.value}_s{seed}"

    def clf_ckpt(self, variant, seed):
        return self.checkpoints / f"classifier_{self.clf_tag(variant, seed)}.ckpt"

    def metrics_csv(self, variant, seed):
        return self.results / f"metrics_{self.clf_tag(variant, seed)}.csv"

    def roc_csv(self, variant, seed):
        return self.results / f"roc_{self.clf_tag(variant, seed)}.csv"


def _require(path: Path, command: str):
    if not path.exists():
        raise PrerequisiteError(f"missing {path}; run `trafficqc {command}` first")


class CsvLog:
    """List-like sink that appends each row to a CSV file as it arrives."""

    def __init__(self, path: Path, fieldnames):
        self.path, self.fieldnames, self.rows = path, list(fieldnames), []
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.fieldnames)

    def append(self, row: dict):
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, self.fieldnames, extrasaction="ignore", lineterminator="\n").writerow(
                {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
            )


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, lay: Layout, args):
    lay.data.mkdir(parents=True, exist_ok=True)
    cfg.dump(lay.config)
    sets = datagen.build_datasets(cfg.data)
    for name in DATASETS:
        datagen.write_days_csv(lay.dataset_csv(name), sets[name])
        log.info("wrote %d days to %s", len(sets[name]), lay.dataset_csv(name))


def cmd_render_cwt(cfg: RunConfig, lay: Layout, args):
    lay.cache.mkdir(parents=True, exist_ok=True)
    for name in DATASETS:
        _require(lay.dataset_csv(name), "gen-data")
    for name in DATASETS:
        days = datagen.read_days_csv(lay.dataset_csv(name))
        values = np.array([d.values for d in days]).reshape(len(days), datagen.N_INTERVALS)
        images, lo, hi = cwt.render_batch(values, cfg.cwt.dt, cfg.cwt.prefactor)
        ckpt_io.save_scalograms(lay.cache_stem(name), images, lo, hi, [d.key for d in days],
                                [d.label.value for d in days], {"prefactor": cfg.cwt.prefactor, "dt": cfg.cwt.dt})
        if args.dump_pgm:
            lay.images.mkdir(parents=True, exist_ok=True)
            for i in range(min(args.dump_pgm, len(days))):
                s, d = days[i].key
                cwt.write_pgm(lay.images / f"{name}_{s}_{d}.pgm", images[i])
        log.info("rendered %d scalograms for %s", len(days), name)


def _load_images(lay: Layout, name: str):
    _require(lay.cache_stem(name).with_suffix(".f32"), "render-cwt")
    return ckpt_io.load_scalograms(lay.cache_stem(name))


def cmd_train_vae(cfg: RunConfig, lay: Layout, args):
    which = args.which
    images, _ = _load_images(lay, which)
    lay.checkpoints.mkdir(parents=True, exist_ok=True)
    lay.logs.mkdir(parents=True, exist_ok=True)
    arch = VaeArch()
    untrained = VAE(arch, seed=cfg.seeds.vae)
    sink = CsvLog(lay.logs / f"vae_{which}.csv", ["epoch", "split", "loss", "mse"])
    result = train_vae(images, cfg.vae, seed=cfg.seeds.vae, split_seed=cfg.seeds.split, arch=arch, log_rows=sink)

    _, va, _ = datagen.split_indices(images.shape[0], cfg.seeds.split)
    val = torch.from_numpy(images[va]).unsqueeze(1)
    _, mse_before = evaluate_loss(untrained, val, cfg.vae.alpha)
    _, mse_after = evaluate_loss(result.model, val, cfg.vae.alpha)
    summary = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
               "val_mse_untrained": mse_before, "val_mse_trained": mse_after,
               "epochs_run": max(r["epoch"] for r in sink.rows)}
    ckpt_io.save_checkpoint(
        ckpt_io.Checkpoint("vae", {"dataset": which, **arch.to_dict()}, ckpt_io.state_arrays(result.model),
                           {"hyper": vars(cfg.vae), "seed": cfg.seeds.vae, "split_seed": cfg.seeds.split}, summary),
        lay.vae_ckpt(which),
    )
    if args.dump_recon:
        lay.images.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            x = val[: args.dump_recon]
            recon = result.model.decode(result.model.encode(x)[0])
        for i in range(x.shape[0]):
            side = np.concatenate([x[i, 0].numpy(), recon[i, 0].numpy()], axis=1)
            cwt.write_pgm(lay.images / f"recon_{which}_{i}.pgm", side)
    log.info("VAE(%s): best epoch %d, val MSE %.5f (untrained %.5f)", which, result.best_epoch, mse_after, mse_before)


def load_vae(path: Path) -> VAE:
    ck = ckpt_io.load_checkpoint(path, expected_kind="vae")
    model = VAE(VaeArch.from_dict(ck.architecture))
    ckpt_io.load_state_arrays(model, ck.arrays)
    return freeze(model)


def load_classifier(path: Path) -> AttentionClassifier:
    ck = ckpt_io.load_checkpoint(path, expected_kind="classifier")
    model = AttentionClassifier(ClassifierArch.from_dict(ck.architecture))
    ckpt_io.load_state_arrays(model, ck.arrays)
    model.eval()
    return model


def _encoders_for(variant: Variant, lay: Layout):
    paths = {}
    if variant.uses_positive:
        paths["positive"] = lay.vae_ckpt("positive")
    if variant.uses_negative:
        paths["negative"] = lay.vae_ckpt("negative")
    for which, p in paths.items():
        _require(p, f"train-vae --which {which}")
    return paths


def _mixed_features(variant: Variant, lay: Layout, enc_paths: dict, idx: np.ndarray | None = None):
    images, index = _load_images(lay, "mixed")
    labels = np.array([lab == Label.FAULTY.value for lab in index["labels"]], dtype=np.int64)
    if idx is not None:
        images, labels = images[idx], labels[idx]
    feats = {}
    for which, p in enc_paths.items():
        feats[which] = encoder_block_features(load_vae(p), images)
    del images
    return variant_features(variant, feats.get("positive"), feats.get("negative")), labels


def cmd_train_classifier(cfg: RunConfig, lay: Layout, args):
    variant = Variant(args.variant or cfg.classifier.variant)
    seed = cfg.seeds.classifier if args.seed is None else args.seed
    enc_paths = _encoders_for(variant, lay)
    hashes_before = {w: ckpt_io.file_sha256(p) for w, p in enc_paths.items()}
    _load_images(lay, "mixed")  # prerequisite check before the expensive part

    feats, labels = _mixed_features(variant, lay, enc_paths)
    tr, va, _ = datagen.split_indices(labels.shape[0], cfg.seeds.split)
    tr_t, va_t = torch.as_tensor(tr), torch.as_tensor(va)
    block_dims = tuple(VaeArch().block_dims())
    arch = ClassifierArch(variant, block_dims, cfg.classifier.d_model, cfg.classifier.hidden, cfg.classifier.dropout)
    hyper = ClassifierHyper(cfg.classifier.lr, cfg.classifier.batch_size, cfg.classifier.epochs,
                            cfg.classifier.d_model, cfg.classifier.hidden, cfg.classifier.dropout)
    lay.checkpoints.mkdir(parents=True, exist_ok=True)
    lay.logs.mkdir(parents=True, exist_ok=True)
    sink = CsvLog(lay.logs / f"classifier_{lay.clf_tag(variant, seed)}.csv", ["epoch", "split", "loss", "accuracy"])
    train_f = [f[tr_t] for f in feats]
    val_f = [f[va_t] for f in feats]
    del feats
    result = train_classifier(train_f, labels[tr], val_f, labels[va], arch, hyper, seed=seed, log_rows=sink)

    hashes_after = {w: ckpt_io.file_sha256(p) for w, p in enc_paths.items()}
    if hashes_after != hashes_before:
        raise PipelineError("encoder checkpoint changed during classifier training")
    ckpt_io.save_checkpoint(
        ckpt_io.Checkpoint("classifier", arch.to_dict(), ckpt_io.state_arrays(result.model),
                           {"hyper": vars(hyper), "seed": seed, "split_seed": cfg.seeds.split,
                            "encoder_sha256": hashes_before},
                           {"best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy}),
        lay.clf_ckpt(variant, seed),
    )
    log.info("classifier %s seed %d: best epoch %d, val acc %.4f", variant.value, seed, result.best_epoch,
             result.best_val_accuracy)


def _evaluate_one(cfg: RunConfig, lay: Layout, variant: Variant, seed: int):
    path = lay.clf_ckpt(variant, seed)
    _require(path, f"train-classifier --variant {variant.value} --seed {seed}")
    clf = load_classifier(path)
    enc_paths = _encoders_for(variant, lay)
    images, index = _load_images(lay, "mixed")
    _, _, te = datagen.split_indices(len(index["labels"]), cfg.seeds.split)
    feats, labels = _mixed_features(variant, lay, enc_paths, te)
    scores = predict_proba(clf, feats)
    counts = metrics.confusion(scores, labels)
    m = metrics.metrics(counts)
    roc = metrics.roc_auc(scores, labels)
    backbone = {"p": "Encoder(P)", "n": "Encoder(N)"}.get(variant.value, "Encoder(P)+Encoder(N)")
    head = "Self-Attention + MLP" if variant.attention else "MLP"
    lay.results.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(lay.metrics_csv(variant, seed),
                              [metrics.metrics_row(variant.label, backbone, head, seed, counts, m, roc.auc)])
    metrics.write_roc_csv(lay.roc_csv(variant, seed), roc)
    log.info("%s seed %d: accuracy %.4f auc %.4f", variant.label, seed, m.accuracy, roc.auc)


def cmd_evaluate(cfg: RunConfig, lay: Layout, args):
    if args.all:
        found = sorted(lay.checkpoints.glob("classifier_*_s*.ckpt"))
        if not found:
            raise PrerequisiteError(f"no classifier checkpoints in {lay.checkpoints}; run `trafficqc train-classifier` first")
        for p in found:
            tag = p.stem[len("classifier_"):]
            v, s = tag.rsplit("_s", 1)
            _evaluate_one(cfg, lay, Variant(v), int(s))
        return
    variant = Variant(args.variant or cfg.classifier.variant)
    seed = cfg.seeds.classifier if args.seed is None else args.seed
    _evaluate_one(cfg, lay, variant, seed)


_VARIANT_ORDER = [v.value for v in Variant]


def cmd_report(cfg: RunConfig, lay: Layout, args):
    files = sorted(lay.results.glob("metrics_*_s*.csv")) if lay.results.exists() else []
    if not files:
        raise PrerequisiteError(f"no metrics in {lay.results}; run `trafficqc evaluate` first")
    rows = [r for f in files for r in metrics.read_metrics_csv(f)]
    by_label = {Variant(v).label: v for v in _VARIANT_ORDER}
    rows.sort(key=lambda r: (_VARIANT_ORDER.index(by_label[r["model"]]), int(r["seed"])))
    out = list(rows)
    for label in by_label:
        group = [r for r in rows if r["model"] == label]
        if not group:
            continue
        mean = {k: group[0][k] for k in ("model", "backbone", "classifier")}
        mean["seed"] = "mean"
        for k in ("precision", "recall", "f1_score", "accuracy", "auc"):
            mean[k] = repr(float(np.mean([float(r[k]) for r in group])))
        for k in ("tp", "fp", "tn", "fn"):
            mean[k] = ""
        out.append(mean)
    metrics.write_metrics_csv(lay.results / "report.csv", out)
    log.info("report with %d rows written to %s", len(out), lay.results / "report.csv")


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficqc", description=__doc__)
    parser.add_argument("--config", type=Path, help="run configuration JSON (defaults if omitted)")
    parser.add_argument("--out", type=Path, help="experiment directory (overrides output_dir in the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write positive/negative/mixed dataset CSVs")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("render-cwt", help="cache 64x64 scalograms for every dataset")
    p.add_argument("--dump-pgm", type=int, default=0, metavar="N", help="also write the first N images as PGM")
    p.set_defaults(func=cmd_render_cwt)
    p = sub.add_parser("train-vae", help="train VAE(P) or VAE(N)")
    p.add_argument("--which", choices=("positive", "negative"), required=True)
    p.add_argument("--dump-recon", type=int, default=0, metavar="N",
                   help="write N side-by-side input/reconstruction PGMs from the validation split")
    p.set_defaults(func=cmd_train_vae)
    p = sub.add_parser("train-classifier", help="train a classifier head on frozen encoders")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_classifier)
    p = sub.add_parser("evaluate", help="test-split metrics and ROC for a trained classifier")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--seed", type=int)
    p.add_argument("--all", action="store_true", help="evaluate every classifier checkpoint present")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("report", help="aggregate all metrics into results/report.csv")
    p.set_defaults(func=cmd_report)
    return parser


def resolve_config(args) -> tuple[RunConfig, Layout]:
    """An explicit --config wins; otherwise reuse the experiment's config.json, else defaults."""
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        cfg = load_config(args.config)
        root = args.out if args.out is not None else args.config.parent / cfg.output_dir
        return cfg, Layout(root)
    cfg = config_from_dict({})
    root = args.out if args.out is not None else Path.cwd() / cfg.output_dir
    if (root / "config.json").exists():
        cfg = load_config(root / "config.json")
    return cfg, Layout(root)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handler = None
    try:
        cfg, lay = resolve_config(args)
        lay.root.mkdir(parents=True, exist_ok=True)
        lay.logs.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(lay.logs / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        logging.getLogger().addHandler(handler)
        logging.getLogger("trafficqc").setLevel(logging.INFO)
        log.info("command %s in %s", args.command, lay.root)
        args.func(cfg, lay, args)
    except ConfigError as exc:
        print(f"trafficqc: error[config]: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"trafficqc: error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except ckpt_io.CheckpointError as exc:
        print(f"trafficqc: error[checkpoint]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    except ClassifierError as exc:
        print(f"trafficqc: error[classifier]: {exc}", file=sys.stderr)
        return 5
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
