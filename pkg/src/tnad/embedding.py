"""Per-feature embeddings onto the unit sphere and the product-state feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRIG = "trigonometric"
FOURIER = "fourier"

_ALIASES = {"trig": TRIG, "trigonometric": TRIG, "fourier": FOURIER, "four": FOURIER}


def _finite(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("embedding input must be finite")
    return x


def _cospi_sinpi(t):
    """cos(pi t) and sin(pi t), exact at multiples of 1/2."""
    t = np.asarray(t, dtype=np.float64)
    n = np.round(2.0 * t)
    theta = np.pi * (t - 0.5 * n)
    s, c = np.sin(theta), np.cos(theta)
    quadrant = np.mod(n, 4.0).astype(np.int64)
    cos_out = np.choose(quadrant, [c, -s, -c, s])
    sin_out = np.choose(quadrant, [s, c, -s, -c])
    return cos_out, sin_out


def phi_trig(x, k: int) -> np.ndarray:
    """2k-dimensional trigonometric embedding.

    Component pairs are ``(cos(pi x / 2**j), sin(pi x / 2**j)) / sqrt(k)`` for
    ``j = 1..k``. Accepts scalar or array ``x``; the embedding axis is last.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    x = _finite(x)
    out = np.empty(x.shape + (2 * k,))
    for j in range(1, k + 1):
        c, s = _cospi_sinpi(x / 2.0 ** j)
        out[..., 2 * j - 2] = c
        out[..., 2 * j - 1] = s
    return out / np.sqrt(k)


def phi_four(x, p: int) -> np.ndarray:
    """p-dimensional "fourier" embedding.

    Component ``j`` is ``|sum_k exp(2 pi i k ((p-1) x / p - j / p))| / p``,
    summed directly over ``k = 0..p-1``.
    """
    if p < 2:
        raise ValueError(f"p must be at least 2, got {p}")
    x = _finite(x)
    shift = (p - 1) * x[..., None] / p - np.arange(p) / p
    k = np.arange(p)
    terms = np.exp(2j * np.pi * k * shift[..., None])
    return np.abs(terms.sum(axis=-1)) / p


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str
    phys_dim: int

    def __post_init__(self):
        kind = _ALIASES.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == TRIG and (self.phys_dim < 2 or self.phys_dim % 2):
            raise ValueError(f"trigonometric embedding needs an even physical dimension >= 2, got {self.phys_dim}")
        if kind == FOURIER and self.phys_dim < 2:
            raise ValueError(f"fourier embedding needs physical dimension >= 2, got {self.phys_dim}")

    def __call__(self, x) -> np.ndarray:
        if self.kind == TRIG:
            return phi_trig(x, self.phys_dim // 2)
        return phi_four(x, self.phys_dim)


@dataclass(frozen=True)
class ProductState:
    """Factored Phi(x): row i is phi(x_i). The p**N vector is never formed."""

    factors: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.factors.shape[0]

    def dense(self) -> np.ndarray:
        """Kronecker product of the factors; for small N only."""
        if self.factors.shape[1] ** self.n_sites > 2 ** 22:
            raise ValueError("product state too large to materialize")
        out = np.ones(1)
        for f in self.factors:
            out = np.kron(out, f)
        return out


def embed_sample(x, spec: EmbeddingSpec) -> ProductState:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 1:
        raise ValueError("cannot embed an empty sample")
    return ProductState(spec(x))


def embed_batch(X, spec: EmbeddingSpec) -> np.ndarray:
    """Embed rows of ``X`` (samples x N) into an array of shape (samples, N, p)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return spec(X)
