"""Experiment configuration: a flat ``key = value`` file with ``#`` comments.

Relative paths are resolved against the directory holding the config file.
A resolved config (every ``auto`` replaced by its value) is written next to
each trained model as a manifest, and can be fed back in unchanged.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .embedding import TRIG, EmbeddingSpec
from .mpo import MpoShape
from .training import TrainConfig

log = logging.getLogger(__name__)

AUTO = "auto"
DIM_W_RANGE = (1e4, 1e12)
TABULAR = "tabular"
IMAGE = "image"


class ConfigError(ValueError):
    """Invalid configuration; names the offending field."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"config field {key!r}: {reason}")
        self.key = key
        self.reason = reason


class InputChangedError(ValueError):
    """An input file differs from the hash recorded in a manifest."""


def auto_spacing(n_sites: int) -> int:
    return n_sites // 25 + 1


def auto_phys_dim(n_sites: int, spacing: int, embedding: str, max_p: int = 64) -> int:
    """Smallest p with the output dimension p**q inside ``DIM_W_RANGE``.

    The trigonometric embedding only exists for even p.
    """
    q = (n_sites - 1) // spacing + 1
    lo, hi = DIM_W_RANGE
    step = 2 if EmbeddingSpec(embedding, 2).kind == TRIG else 1
    for p in range(2, max_p + 1, step):
        logdim = q * math.log10(p)
        if logdim > math.log10(hi):
            break
        if logdim >= math.log10(lo):
            return p
    raise ConfigError("phys_dim", f"no p gives {lo:g} <= p^{q} <= {hi:g} for N={n_sites}, S={spacing}")


def unit_fnorm_stddev(shape: MpoShape) -> float:
    """Core entry stddev at which a random MPO has expected squared F-norm 1.

    For i.i.d. N(0, s^2) entries, E||P||_F^2 = s^(2N) p^(N+q) b^(N-1).
    """
    n, p, b, q = shape.n_sites, shape.phys_dim, shape.bond_dim, shape.n_outputs
    return math.exp(-((n + q) * math.log(p) + (n - 1) * math.log(b)) / (2 * n))


def git_blob_hash(path) -> str:
    """SHA-1 of a file framed the way git hashes blobs."""
    data = Path(path).read_bytes()
    h = hashlib.sha1(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _int(key, v):
    try:
        return int(v)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {v!r}") from None


def _float(key, v):
    try:
        return float(v)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {v!r}") from None


def _int_or_auto(key, v):
    return None if v == AUTO else _int(key, v)


def _seeds(key, v):
    out = [_int(key, s.strip()) for s in v.split(",") if s.strip()]
    if not out:
        raise ConfigError(key, "at least one seed is required")
    return out


_PATH_KEYS = ("data", "train_images", "train_labels", "test_images", "test_labels", "out_dir")
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class ExperimentConfig:
    dataset: str = TABULAR
    name: str = ""
    data: Optional[Path] = None
    label_column: str = "label"
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    inlier_class: Optional[int] = None
    embedding: str = TRIG
    n_sites: Optional[int] = None
    phys_dim: Optional[int] = None
    bond_dim: int = 5
    spacing: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    out_dir: Optional[Path] = None
    hashes: dict = field(default_factory=dict)
    source: Optional[Path] = None

    # ------------------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        if self.dataset not in (TABULAR, IMAGE):
            raise ConfigError("dataset", f"must be {TABULAR!r} or {IMAGE!r}, got {self.dataset!r}")
        try:
            self.embedding = EmbeddingSpec(self.embedding, 2).kind
        except ValueError as exc:
            raise ConfigError("embedding", str(exc)) from None
        if self.dataset == TABULAR and self.data is None:
            raise ConfigError("data", "tabular experiments need a data path")
        if self.dataset == IMAGE:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, key) is None:
                    raise ConfigError(key, "image experiments need all four IDX paths")
            if self.inlier_class is None:
                raise ConfigError("inlier_class", "image experiments need an inlier class")
        if self.bond_dim < 1:
            raise ConfigError("bond_dim", "must be positive")
        for key in ("n_sites", "phys_dim", "spacing"):
            v = getattr(self, key)
            if v is not None and v < 1:
                raise ConfigError(key, "must be positive")
        if self.phys_dim is not None and self.embedding == TRIG and self.phys_dim % 2:
            raise ConfigError("phys_dim", "the trigonometric embedding needs an even dimension")
        return self

    def resolve(self, n_features: int) -> "ExperimentConfig":
        """Fill in ``auto`` fields given the feature count of the data."""
        n = self.n_sites if self.n_sites is not None else n_features
        if n != n_features:
            raise ConfigError("n_sites", f"config says N={n} but the data has {n_features} features")
        s = self.spacing
        if s is None:
            s = auto_spacing(n)
            log.info("auto spacing: S = N // 25 + 1 = %d", s)
        p = self.phys_dim
        if p is None:
            p = auto_phys_dim(n, s, self.embedding)
            log.info("auto physical dimension: p = %d (dim W = %d^%d = %.3g)", p, p, (n - 1) // s + 1,
                     float(p) ** ((n - 1) // s + 1))
        return replace(self, n_sites=n, spacing=s, phys_dim=p)

    @property
    def resolved(self) -> bool:
        return None not in (self.n_sites, self.phys_dim, self.spacing)

    def shape(self) -> MpoShape:
        if not self.resolved:
            raise ConfigError("n_sites", "config has unresolved auto fields")
        return MpoShape(self.n_sites, self.phys_dim, self.bond_dim, self.spacing)

    def embedding_spec(self) -> EmbeddingSpec:
        return EmbeddingSpec(self.embedding, self.phys_dim)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def input_paths(self) -> dict:
        keys = ("data",) if self.dataset == TABULAR else ("train_images", "train_labels", "test_images", "test_labels")
        return {k: getattr(self, k) for k in keys}

    # ------------------------------------------------------------------
    def to_text(self, seed: Optional[int] = None, with_hashes: bool = True) -> str:
        """Serialize as a config file; paths are written absolute."""
        seeds = self.seeds if seed is None else [seed]
        lines = [f"dataset = {self.dataset}"]
        if self.name:
            lines.append(f"name = {self.name}")
        for key, path in self.input_paths().items():
            lines.append(f"{key} = {Path(path).resolve()}")
        if self.dataset == TABULAR:
            lines.append(f"label_column = {self.label_column}")
        else:
            lines.append(f"inlier_class = {self.inlier_class}")
        lines.append(f"embedding = {self.embedding}")
        for key in ("n_sites", "phys_dim", "bond_dim", "spacing"):
            v = getattr(self, key)
            lines.append(f"{key} = {AUTO if v is None else v}")
        for f in fields(TrainConfig):
            if f.name != "seed":
                lines.append(f"{f.name} = {getattr(self.train, f.name)!r}")
        lines.append("seeds = " + ",".join(str(s) for s in seeds))
        if with_hashes:
            for key, path in self.input_paths().items():
                lines.append(f"hash.{key} = {git_blob_hash(path)}")
        return "\n".join(lines) + "\n"

    def verify_hashes(self) -> None:
        """Raise if a recorded input hash no longer matches the file on disk."""
        paths = self.input_paths()
        for key, expected in self.hashes.items():
            if key not in paths:
                raise ConfigError(f"hash.{key}", "no such input")
            actual = git_blob_hash(paths[key])
            if actual != expected:
                raise InputChangedError(f"{paths[key]} has hash {actual}, manifest records {expected}")


def parse_config(text: str, base_dir=None, source=None) -> ExperimentConfig:
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    cfg = ExperimentConfig(source=source)
    train_kw = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not value:
            raise ConfigError(key, "empty value")
        if key in _PATH_KEYS:
            path = Path(value).expanduser()
            setattr(cfg, key, path if path.is_absolute() else base / path)
        elif key in ("dataset", "name", "label_column"):
            setattr(cfg, key, value)
        elif key == "embedding":
            cfg.embedding = value
        elif key == "inlier_class":
            cfg.inlier_class = _int(key, value)
        elif key in ("n_sites", "phys_dim", "spacing"):
            setattr(cfg, key, _int_or_auto(key, value))
        elif key == "bond_dim":
            cfg.bond_dim = _int(key, value)
        elif key in ("seeds", "seed"):
            cfg.seeds = _seeds(key, value)
        elif key.startswith("hash."):
            cfg.hashes[key[5:]] = value
        elif key in _TRAIN_KEYS:
            typ = type(getattr(TrainConfig, key))
            train_kw[key] = _int(key, value) if typ is int else _float(key, value)
        else:
            raise ConfigError(key, "unknown key")
    try:
        cfg.train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    cfg = parse_config(text, base_dir=path.parent, source=path)
    if not cfg.name:
        cfg.name = path.stem
    return cfg
