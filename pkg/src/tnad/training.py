"""Batch loss, its gradient, Adam, and the two-phase training loop."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .embedding import EmbeddingSpec, ProductState, embed_batch
from .mpo import MpoModel, MpoShape, build_decision, build_fnorm, init_mpo

log = logging.getLogger(__name__)

TARGET_LOG_NORM = 1.0
ZERO_CLAMP = -30.0


class SentinelError(ArithmeticError):
    """A sample was projected to exactly zero, so its log score is undefined."""

    def __init__(self, index: int):
        super().__init__(f"sample {index} has a zero projection (decision_log = -inf)")
        self.index = index


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, step: int, detail: str = "non-finite loss"):
        super().__init__(f"{detail} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("init", "shuffle", "split", ...) under one seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.4
    batch_size: int = 32
    cold_epochs: int = 20
    cold_lr: float = 2e-5
    main_epochs: int = 280
    main_lr: float = 2e-3
    decay_rate: float = 0.01
    init_stddev: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    retries: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.cold_lr <= 0 or self.main_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.cold_epochs < 0 or self.main_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.retries <= 3:
            raise ValueError("retries must be between 0 and 3")

    @property
    def epochs(self) -> int:
        return self.cold_epochs + self.main_epochs

    def learning_rate(self, epoch: int) -> float:
        if epoch < self.cold_epochs:
            return self.cold_lr
        return self.main_lr * math.exp(-self.decay_rate * (epoch - self.cold_epochs))


def _as_factors(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch if batch.ndim == 3 else batch[None]
    return np.stack([s.factors if isinstance(s, ProductState) else np.asarray(s) for s in batch])


@dataclass
class LossResult:
    loss: float
    decision_logs: np.ndarray
    fnorm_log: float
    grads: Optional[list] = None
    clamped: int = 0


def loss_and_grad(model: MpoModel, batch, alpha: float, with_grad: bool = True,
                  clamp_zero: bool = False) -> LossResult:
    """Mean squared deviation of the decision logs from 1 plus ``alpha * relu(log ||P||_F^2)``.

    With ``clamp_zero`` a sample projected to zero is scored as ``ZERO_CLAMP``
    and contributes no gradient; otherwise it raises :class:`SentinelError`.
    """
    factors = _as_factors(batch)
    if factors.shape[0] == 0:
        raise ValueError("batch is empty")
    n = factors.shape[0]

    tape_d, out_d, cores_d = build_decision(model, factors, requires_grad=with_grad)
    dlogs, zero = tape_d.log_value(out_d)
    clamped = int(zero.sum())
    if clamped:
        if not clamp_zero:
            raise SentinelError(int(np.flatnonzero(zero)[0]))
        dlogs = np.where(zero, ZERO_CLAMP, dlogs)

    tape_f, out_f, cores_f = build_fnorm(model, requires_grad=with_grad)
    flog, fzero = tape_f.log_value(out_f)
    penalty_active = (not fzero) and flog > 0.0
    loss = float(np.mean((dlogs - TARGET_LOG_NORM) ** 2) + (alpha * flog if penalty_active else 0.0))
    result = LossResult(loss, dlogs, flog, clamped=clamped)
    if not with_grad:
        return result

    seed = np.where(zero, 0.0, 2.0 * (dlogs - TARGET_LOG_NORM) / n)
    adj_d = tape_d.backward(out_d, seed)
    grads = [adj_d[i] for i in cores_d]
    if penalty_active and alpha != 0.0:
        adj_f = tape_f.backward(out_f, alpha)
        grads = [g + adj_f[i] for g, i in zip(grads, cores_f)]
    result.grads = grads
    return result


def batch_loss(model: MpoModel, batch, alpha: float):
    """``(loss, per-sample decision logs)`` for a non-empty batch of product states."""
    r = loss_and_grad(model, batch, alpha, with_grad=False)
    return r.loss, r.decision_logs


def loss_gradient(model: MpoModel, batch, alpha: float) -> list:
    """Gradient of ``batch_loss`` with respect to every core, by reverse traversal of the tape."""
    return loss_and_grad(model, batch, alpha).grads


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, model: MpoModel) -> "AdamState":
        return cls([np.zeros_like(c) for c in model.cores], [np.zeros_like(c) for c in model.cores], 0)


def adam_step(model: MpoModel, grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(model, state)``; inputs are not modified."""
    if len(grads) != len(model.cores):
        raise ValueError(f"expected {len(model.cores)} gradients, got {len(grads)}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    cores, ms, vs = [], [], []
    for core, g, m, v in zip(model.cores, grads, state.m, state.v):
        if g.shape != core.shape:
            raise ValueError(f"gradient shape {g.shape} does not match core shape {core.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        cores.append(core - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        ms.append(m)
        vs.append(v)
    return model.with_cores(cores), AdamState(ms, vs, t)


# --------------------------------------------------------------------------
# training loop

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mean_dlog: float
    fnorm_log: float
    lr: float

    def line(self) -> str:
        return (f"epoch {self.epoch} loss {self.loss:.10g} mean_dlog {self.mean_dlog:.10g} "
                f"fnorm_log {self.fnorm_log:.10g} lr {self.lr:.10g}")


@dataclass
class History:
    epochs: list = field(default_factory=list)
    clamped: int = 0
    seed: int = 0
    retries_used: int = 0

    def lines(self) -> list:
        return [r.line() for r in self.epochs]

    def write(self, path) -> None:
        with open(path, "w") as f:
            for line in self.lines():
                f.write(line + "\n")


def train(X, shape: MpoShape, spec: EmbeddingSpec, cfg: TrainConfig, progress=None):
    """Fit an MPO to the rows of ``X`` (all assumed normal).

    Runs ``cfg.cold_epochs`` at ``cfg.cold_lr`` then ``cfg.main_epochs`` with
    per-epoch exponential decay from ``cfg.main_lr``. If ``cfg.retries`` is
    positive, a diverged run restarts from a fresh seed derived from the
    configured one, at most that many times.

    Returns ``(model, history)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    bad = np.argwhere(~np.isfinite(X))
    if len(bad):
        raise ValueError(f"non-finite feature at row {bad[0][0]}, column {bad[0][1]}")
    if X.shape[1] != shape.n_sites:
        raise ValueError(f"samples have {X.shape[1]} features, model has {shape.n_sites} sites")
    if spec.phys_dim != shape.phys_dim:
        raise ValueError(f"embedding dimension {spec.phys_dim} != physical dimension {shape.phys_dim}")

    attempt = 0
    seed = cfg.seed
    while True:
        try:
            model, history = _train_once(X, shape, spec, replace(cfg, seed=seed), progress)
            history.retries_used = attempt
            return model, history
        except TrainingDiverged as exc:
            if attempt >= cfg.retries:
                raise
            attempt += 1
            seed = int(substream(cfg.seed, f"retry{attempt}").integers(2 ** 31))
            log.warning("%s; retrying with seed %d (%d/%d)", exc, seed, attempt, cfg.retries)


def _train_once(X, shape, spec, cfg: TrainConfig, progress):
    model = init_mpo(shape, cfg.init_stddev, substream(cfg.seed, "init"), spec)
    shuffle = substream(cfg.seed, "shuffle")
    state = AdamState.zeros_like(model)
    history = History(seed=cfg.seed)
    n = X.shape[0]

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = shuffle.permutation(n)
        losses, dsum = [], 0.0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            factors = embed_batch(X[idx], spec)
            r = loss_and_grad(model, factors, cfg.alpha, clamp_zero=True)
            if not math.isfinite(r.loss) or not all(np.all(np.isfinite(g)) for g in r.grads):
                raise TrainingDiverged(epoch, step)
            if r.clamped:
                history.clamped += r.clamped
                log.warning("epoch %d step %d: %d zero-norm samples clamped", epoch, step, r.clamped)
            model, state = adam_step(model, r.grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(r.loss)
            dsum += float(r.decision_logs.sum())
        flog, fzero = _fnorm(model)
        if fzero or not math.isfinite(flog):
            raise TrainingDiverged(epoch, len(losses), "non-finite F-norm")
        rec = EpochRecord(epoch, float(np.mean(losses)), dsum / n, flog, lr)
        history.epochs.append(rec)
        log.debug(rec.line())
        if progress is not None:
            progress(rec)
    return model, history


def _fnorm(model):
    tape, out, _ = build_fnorm(model)
    return tape.log_value(out)
