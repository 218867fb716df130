"""Command line entry point: ``tnad train | score | evaluate | inspect``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import mpo
from .config import IMAGE, ConfigError, ExperimentConfig, InputChangedError, load_config
from .data import (DataFormatError, Standardizer, load_image_dataset, preprocess_images, read_idx,
                   read_tabular_csv)
from .evaluation import run_odds, run_one_class_image, split_normals, summarize, write_results, write_roc
from .training import TrainingDiverged, train

log = logging.getLogger("tnad")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

OUT_DIR_ENV = "TNAD_OUT_DIR"
DEFAULT_OUT_DIR = "tnad-out"

MODEL_FILE = "model.tnad"
HISTORY_FILE = "history.log"
MANIFEST_FILE = "manifest.cfg"
SCALER_FILE = "scaler.csv"


class UsageError(Exception):
    pass


def _parse_seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out is not None:
        return args.out
    if cfg is not None and cfg.out_dir is not None:
        return cfg.out_dir
    return Path(os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR))


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seeds:
        cfg.seeds = args.seeds
    missing = [str(p) for p in cfg.input_paths().values() if not Path(p).is_file()]
    if missing:
        raise UsageError("dataset file not found: " + ", ".join(missing))
    cfg.verify_hashes()
    return cfg


def _tabular_training_rows(cfg: ExperimentConfig, seed: int):
    ds = read_tabular_csv(cfg.data, cfg.label_column)
    cfg = cfg.resolve(ds.n_features)
    train_idx, _ = split_normals(len(ds.normals), seed)
    scaler = Standardizer.fit(ds.normals[train_idx])
    return cfg, scaler.apply(ds.normals[train_idx]), scaler


def _image_training_rows(cfg: ExperimentConfig):
    ds = load_image_dataset(cfg.train_images, cfg.train_labels)
    inliers = ds.images[ds.labels == cfg.inlier_class]
    if len(inliers) == 0:
        raise DataFormatError(f"no training images of class {cfg.inlier_class}")
    X = preprocess_images(inliers)
    return cfg.resolve(X.shape[1]), X


def _progress(rec):
    log.debug(rec.line())


def train_one(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    """Train one model and write model, history, manifest (and scaler for tabular data) into ``out``."""
    scaler = None
    if cfg.dataset == IMAGE:
        cfg, X = _image_training_rows(cfg)
    else:
        cfg, X, scaler = _tabular_training_rows(cfg, seed)
    log.info("training %s: N=%d p=%d b=%d S=%d, %d rows, seed %d", cfg.name, cfg.n_sites, cfg.phys_dim,
             cfg.bond_dim, cfg.spacing, len(X), seed)
    model, history = train(X, cfg.shape(), cfg.embedding_spec(), cfg.train_config(seed), progress=_progress)
    out.mkdir(parents=True, exist_ok=True)
    mpo.save(model, out / MODEL_FILE)
    history.write(out / HISTORY_FILE)
    # the configured seed, not a retry's, so the split and any retries replay identically
    (out / MANIFEST_FILE).write_text(cfg.to_text(seed=seed))
    if scaler is not None:
        scaler.to_csv(out / SCALER_FILE)
    if history.clamped:
        log.warning("%d zero-norm samples were clamped during training", history.clamped)
    return out


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, cfg)
    for seed in cfg.seeds:
        target = out if len(cfg.seeds) == 1 else out / f"seed{seed}"
        train_one(cfg, seed, target)
        print(f"wrote {target / MODEL_FILE}")
    return EXIT_OK


def _read_score_inputs(path: Path, n_sites: int, scaler_path) -> np.ndarray:
    name = path.name.removesuffix(".gz")
    if "idx" in name or name.endswith("-ubyte"):
        X = preprocess_images(read_idx(path))
    else:
        X = read_tabular_csv(path, require_label=False).features
    if X.shape[1] != n_sites:
        raise DataFormatError(f"model has N={n_sites} sites but the data has {X.shape[1]} features")
    if scaler_path is not None:
        scaler = Standardizer.from_csv(scaler_path)
        if scaler.mean.shape[0] != n_sites:
            raise DataFormatError(f"scaler has {scaler.mean.shape[0]} features but the model has N={n_sites}")
        X = scaler.apply(X)
    return X


def cmd_score(args) -> int:
    if not args.model.is_file():
        raise UsageError(f"model file not found: {args.model}")
    if not args.data.is_file():
        raise UsageError(f"data file not found: {args.data}")
    model = mpo.load(args.model)
    if model.embedding is None:
        raise DataFormatError("model file records no embedding; cannot score raw features")
    scaler = args.scaler
    if scaler is None and (args.model.parent / SCALER_FILE).is_file():
        scaler = args.model.parent / SCALER_FILE
    X = _read_score_inputs(args.data, model.shape.n_sites, scaler)
    scores = mpo.score(model, X)
    out = sys.stdout
    out.write("index,decision_log\n")
    for i, s in enumerate(scores):
        out.write(f"{i},{float(s)!r}\n")
    return EXIT_OK


def evaluate_seed(cfg: ExperimentConfig, seed: int):
    """One protocol trial; returns a RunResult or the divergence message."""
    try:
        if cfg.dataset == IMAGE:
            tr = load_image_dataset(cfg.train_images, cfg.train_labels)
            te = load_image_dataset(cfg.test_images, cfg.test_labels)
            cfg = cfg.resolve(preprocess_images(tr.images[:1]).shape[1])
            r = run_one_class_image(tr.images, tr.labels, te.images, te.labels, cfg.inlier_class, cfg.shape(),
                                    cfg.embedding_spec(), cfg.train_config(seed), dataset=cfg.name,
                                    progress=_progress)
        else:
            ds = read_tabular_csv(cfg.data, cfg.label_column)
            ds.name = cfg.name or ds.name
            cfg = cfg.resolve(ds.n_features)
            r = run_odds(ds, cfg.shape(), cfg.embedding_spec(), cfg.train_config(seed), progress=_progress)
    except TrainingDiverged as exc:
        return str(exc)
    r.model = r.history = None  # keep worker results small
    return r


def cmd_evaluate(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, cfg)
    jobs = max(1, args.jobs)
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(evaluate_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        outcomes = [evaluate_seed(cfg, s) for s in cfg.seeds]

    results, failures = [], []
    for seed, o in zip(cfg.seeds, outcomes):
        if isinstance(o, str):
            failures.append((seed, o))
            log.warning("seed %d failed: %s", seed, o)
        else:
            results.append(o)
            print(f"seed {seed}: AUROC {o.auroc:.4f} ({o.wall_seconds:.1f}s)")
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / "results.csv", results)
    if args.roc:
        for r in results:
            write_roc(out / f"roc_seed{r.seed}.csv", r.scores, r.labels)
    if not results:
        print(f"all {len(failures)} trials failed:", file=sys.stderr)
        for seed, msg in failures:
            print(f"  seed {seed}: {msg}", file=sys.stderr)
        return EXIT_DIVERGED
    mean, se = summarize([r.auroc for r in results])
    summary = f"{cfg.name}: AUROC {mean:.4f} +- {se:.4f} over {len(results)} trials"
    if failures:
        summary += f" ({len(failures)} failed trials excluded: seeds {', '.join(str(s) for s, _ in failures)})"
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not args.model.is_file():
        raise UsageError(f"model file not found: {args.model}")
    model = mpo.load(args.model)
    s = model.shape
    emb = model.embedding
    flog = mpo.fnorm_log(model)
    print(f"format      {mpo.FORMAT_MAGIC.decode()} v{mpo.FORMAT_VERSION}")
    print(f"sites N     {s.n_sites}")
    print(f"phys dim p  {s.phys_dim}")
    print(f"bond dim b  {s.bond_dim}")
    print(f"spacing S   {s.spacing}")
    print(f"outputs q   {s.n_outputs} (dim W = {float(s.output_dim):.4g})")
    print(f"embedding   {emb.kind + ' p=' + str(emb.phys_dim) if emb else 'none'}")
    print(f"parameters  {sum(c.size for c in model.cores)}")
    print(f"log ||P||_F^2  {flog:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tnad", description="Tensor-network one-class anomaly detection.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, help=f"output directory (default: config out_dir, ${OUT_DIR_ENV}, ./{DEFAULT_OUT_DIR})")
    p.add_argument("--seeds", type=_parse_seeds, help="override the config's seed list, e.g. 1,2,3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="print index,decision_log for each sample")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="CSV (label column optional) or IDX images")
    p.add_argument("--scaler", type=Path, help=f"standardization stats (default: {SCALER_FILE} beside the model)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="run the one-class protocol for every seed and report AUROC")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--seeds", type=_parse_seeds)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--roc", action="store_true", help="also write per-seed ROC points")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print a model file's header")
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tnad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, mpo.ModelFormatError, InputChangedError) as exc:
        print(f"tnad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"tnad: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
