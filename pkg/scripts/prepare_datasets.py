#!/usr/bin/env python3
"""Convert raw dataset sources into the files the presets expect.

Outputs (under --out, default ./data):
    wine.csv, glass.csv, thyroid.csv     label column: 0 normal, 1 anomalous
    mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz

Sources:
    wine      scikit-learn's bundled copy of UCI Wine (always available)
    glass     UCI glass.data            (--glass PATH)
    thyroid   ODDS thyroid.mat or UCI ann-train.data   (--thyroid PATH)
    mnist     directory holding the four original IDX files   (--mnist-dir PATH)

See docs/datasets.md for where to obtain each file.
"""

import argparse
import gzip
import shutil
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from tnad.data import read_idx, write_tabular_csv  # noqa: E402

GLASS_COLUMNS = ["RI", "Na", "Mg", "Al", "Si", "K", "Ca", "Ba", "Fe"]
THYROID_COLUMNS = ["age", "TSH", "T3", "TT4", "T4U", "FTI"]


def wine(out: Path, seed: int = 0):
    from sklearn.datasets import load_wine

    d = load_wine()
    X, y = d.data, d.target
    normal = np.flatnonzero(y != 0)
    # ODDS keeps 10 of the 59 class-1 wines as outliers
    outliers = np.sort(np.random.default_rng(seed).choice(np.flatnonzero(y == 0), 10, replace=False))
    idx = np.r_[normal, outliers]
    labels = np.r_[np.zeros(len(normal), int), np.ones(len(outliers), int)]
    write_tabular_csv(out / "wine.csv", X[idx], labels, [c.replace("/", "_") for c in d.feature_names])
    print(f"wine: {len(normal)} normal, {len(outliers)} anomalous")


def glass(src: Path, out: Path):
    raw = np.loadtxt(src, delimiter=",")
    X, kind = raw[:, 1:10], raw[:, 10].astype(int)
    labels = (kind == 6).astype(int)  # tableware
    write_tabular_csv(out / "glass.csv", X, labels, GLASS_COLUMNS)
    print(f"glass: {int((labels == 0).sum())} normal, {int(labels.sum())} anomalous")


def thyroid(src: Path, out: Path):
    if src.suffix == ".mat":
        from scipy.io import loadmat

        m = loadmat(src)
        X, labels = m["X"].astype(float), m["y"].ravel().astype(int)
    else:
        raw = np.loadtxt(src)
        X = raw[:, [0, 16, 17, 18, 19, 20]]
        labels = (raw[:, 21].astype(int) == 1).astype(int)  # hyperfunction
    write_tabular_csv(out / "thyroid.csv", X, labels, THYROID_COLUMNS)
    print(f"thyroid: {int((labels == 0).sum())} normal, {int(labels.sum())} anomalous")


def mnist(src: Path, out: Path):
    dest = out / "mnist"
    dest.mkdir(parents=True, exist_ok=True)
    for stem in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]:
        candidates = [src / stem, src / (stem + ".gz"), src / stem.replace("-idx", ".idx")]
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            raise SystemExit(f"missing {stem} under {src}")
        read_idx(found)  # validate before copying
        target = dest / (stem + ".gz")
        if found.suffix == ".gz":
            shutil.copyfile(found, target)
        else:
            with open(found, "rb") as fi, gzip.open(target, "wb") as fo:
                shutil.copyfileobj(fi, fo)
    print(f"mnist: IDX files written to {dest}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("data"))
    ap.add_argument("--glass", type=Path)
    ap.add_argument("--thyroid", type=Path)
    ap.add_argument("--mnist-dir", type=Path)
    ap.add_argument("--skip-wine", action="store_true")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    if not args.skip_wine:
        wine(args.out)
    if args.glass:
        glass(args.glass, args.out)
    if args.thyroid:
        thyroid(args.thyroid, args.out)
    if args.mnist_dir:
        mnist(args.mnist_dir, args.out)


if __name__ == "__main__":
    main()
