"""
Dense tensor contraction and log-magnitude rescaled arithmetic.

Tensors are plain float64 ``numpy`` arrays in row-major layout; a rank-0
array is a scalar. Every pairwise contraction is lowered to
transpose + reshape + matmul.

Several routines also accept a leading *batch* axis on either operand.  The
batch axis behaves like a hyperedge shared by both operands: it is never
summed over and always appears first in the result.  This lets one
contraction schedule run over a whole mini-batch of samples at once.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple, Union

import numpy as np

AxisPairs = Sequence[Tuple[int, int]]


class ShapeMismatchError(ValueError):
    """Raised when paired axes of a contraction disagree in size."""


class CostCounter:
    """Accumulates multiply-add counts of every contraction executed while active."""

    def __init__(self):
        self.multiply_adds = 0
        self.contractions = 0

    def add(self, n: int) -> None:
        self.multiply_adds += n
        self.contractions += 1


_active_counters: list[CostCounter] = []


@contextlib.contextmanager
def count_multiply_adds() -> Iterator[CostCounter]:
    """Count the multiply-adds actually issued to matmul inside the block."""
    counter = CostCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _normalize_pairs(rank_a: int, rank_b: int, axis_pairs: AxisPairs) -> tuple[list[int], list[int]]:
    axes_a, axes_b = [], []
    for ia, ib in axis_pairs:
        ia_n = ia + rank_a if ia < 0 else ia
        ib_n = ib + rank_b if ib < 0 else ib
        if not (0 <= ia_n < rank_a and 0 <= ib_n < rank_b):
            raise ShapeMismatchError(f"axis pair ({ia}, {ib}) out of range for ranks ({rank_a}, {rank_b})")
        axes_a.append(ia_n)
        axes_b.append(ib_n)
    if len(set(axes_a)) != len(axes_a) or len(set(axes_b)) != len(axes_b):
        raise ShapeMismatchError(f"axis appears twice in pairing {list(axis_pairs)}")
    return axes_a, axes_b


@dataclass(frozen=True)
class _Plan:
    """Permutations and reshapes lowering one contraction to a matmul."""

    perm_a: tuple
    perm_b: tuple
    mat_a: tuple
    mat_b: tuple
    out_shape: tuple
    m: int
    k: int
    n: int


def _plan(shape_a: tuple, shape_b: tuple, axis_pairs: AxisPairs, a_batched: bool, b_batched: bool) -> _Plan:
    off_a = int(a_batched)
    off_b = int(b_batched)
    core_a = shape_a[off_a:]
    core_b = shape_b[off_b:]
    axes_a, axes_b = _normalize_pairs(len(core_a), len(core_b), axis_pairs)
    for ia, ib in zip(axes_a, axes_b):
        if core_a[ia] != core_b[ib]:
            raise ShapeMismatchError(
                f"axis pair ({ia}, {ib}) has mismatched sizes {core_a[ia]} != {core_b[ib]}"
            )
    batch: tuple = ()
    if a_batched and b_batched:
        if shape_a[0] != shape_b[0]:
            raise ShapeMismatchError(f"batch sizes differ: {shape_a[0]} != {shape_b[0]}")
        batch = (shape_a[0],)
    elif a_batched:
        batch = (shape_a[0],)
    elif b_batched:
        batch = (shape_b[0],)

    free_a = [i for i in range(len(core_a)) if i not in axes_a]
    free_b = [i for i in range(len(core_b)) if i not in axes_b]
    m = math.prod(core_a[i] for i in free_a)
    k = math.prod(core_a[i] for i in axes_a)
    n = math.prod(core_b[i] for i in free_b)

    perm_a = tuple(range(off_a)) + tuple(off_a + i for i in free_a + axes_a)
    perm_b = tuple(range(off_b)) + tuple(off_b + i for i in axes_b + free_b)
    mat_a = shape_a[:off_a] + (m, k)
    mat_b = shape_b[:off_b] + (k, n)
    out_shape = batch + tuple(core_a[i] for i in free_a) + tuple(core_b[i] for i in free_b)
    return _Plan(perm_a, perm_b, mat_a, mat_b, out_shape, m, k, n)


def contraction_cost(shape_a: Sequence[int], shape_b: Sequence[int], axis_pairs: AxisPairs,
                     a_batched: bool = False, b_batched: bool = False) -> int:
    """Multiply-add count of a pairwise contraction read off its diagram.

    This is the product of the sizes of all distinct legs touching either
    node: every leg of ``a`` plus the unpaired legs of ``b`` (a shared batch
    leg counts once).
    """
    shape_a, shape_b = tuple(shape_a), tuple(shape_b)
    core_a = shape_a[int(a_batched):]
    core_b = shape_b[int(b_batched):]
    _, axes_b = _normalize_pairs(len(core_a), len(core_b), axis_pairs)
    batch = shape_a[0] if a_batched else (shape_b[0] if b_batched else 1)
    return batch * math.prod(core_a) * math.prod(d for i, d in enumerate(core_b) if i not in axes_b)


def contract_general(a: np.ndarray, b: np.ndarray, axis_pairs: AxisPairs,
                     a_batched: bool = False, b_batched: bool = False) -> np.ndarray:
    """Pairwise contraction where either operand may carry a leading batch axis.

    Axis indices in ``axis_pairs`` exclude the batch axis.
    """
    plan = _plan(a.shape, b.shape, axis_pairs, a_batched, b_batched)
    a2 = a.transpose(plan.perm_a).reshape(plan.mat_a)
    b2 = b.transpose(plan.perm_b).reshape(plan.mat_b)
    out = np.matmul(a2, b2)
    if _active_counters:
        work = out.size * plan.k
        for counter in _active_counters:
            counter.add(work)
    return out.reshape(plan.out_shape)


def contract(a: np.ndarray, b: np.ndarray, axis_pairs: AxisPairs) -> np.ndarray:
    """Sum over paired axes of ``a`` and ``b``.

    The result carries the unpaired axes of ``a`` followed by the unpaired
    axes of ``b``, each in their original order.

    >>> contract(np.eye(2), np.array([3.0, 4.0]), [(1, 0)])
    array([3., 4.])
    """
    return contract_general(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), axis_pairs)


def contract_vjp(a: np.ndarray, b: np.ndarray, axis_pairs: AxisPairs, adj_out: np.ndarray,
                 a_batched: bool = False, b_batched: bool = False,
                 need_a: bool = True, need_b: bool = True) -> tuple:
    """Adjoints of both operands of ``contract_general`` given the result adjoint.

    An unbatched operand contracted against a batched one receives the sum of
    its per-sample adjoints.
    """
    plan = _plan(a.shape, b.shape, axis_pairs, a_batched, b_batched)
    batched_out = a_batched or b_batched
    lead = plan.out_shape[:1] if batched_out else ()
    g2 = adj_out.reshape(lead + (plan.m, plan.n))
    adj_a = adj_b = None
    if need_a:
        b2 = b.transpose(plan.perm_b).reshape(plan.mat_b)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        if batched_out and not a_batched:
            ga = ga.sum(axis=0)
        permuted = tuple(a.shape[i] for i in plan.perm_a)
        adj_a = ga.reshape(permuted).transpose(np.argsort(plan.perm_a))
    if need_b:
        a2 = a.transpose(plan.perm_a).reshape(plan.mat_a)
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if batched_out and not b_batched:
            gb = gb.sum(axis=0)
        permuted = tuple(b.shape[i] for i in plan.perm_b)
        adj_b = gb.reshape(permuted).transpose(np.argsort(plan.perm_b))
    return adj_a, adj_b


Scalar = Union[float, np.ndarray]


@dataclass(frozen=True)
class ScaledTensor:
    """A tensor stored as ``mantissa * exp(log_scale)``.

    With ``batched=True`` the mantissa carries a leading batch axis and
    ``log_scale``/``zero`` are arrays with one entry per sample.
    """

    mantissa: np.ndarray
    log_scale: Scalar = 0.0
    zero: Union[bool, np.ndarray] = False
    batched: bool = False

    @property
    def value(self) -> np.ndarray:
        scale = np.exp(self.log_scale)
        if self.batched:
            scale = np.reshape(scale, (-1,) + (1,) * (self.mantissa.ndim - 1))
        return self.mantissa * scale

    @classmethod
    def from_array(cls, x, batched: bool = False) -> "ScaledTensor":
        x = np.asarray(x, dtype=np.float64)
        if batched:
            return cls(x, np.zeros(x.shape[0]), np.zeros(x.shape[0], dtype=bool), True)
        return cls(x)


def max_abs(x: np.ndarray, batched: bool = False) -> Scalar:
    if not batched:
        return float(np.max(np.abs(x))) if x.size else 0.0
    return np.abs(x).reshape(x.shape[0], -1).max(axis=1)


def renormalize(t: ScaledTensor) -> ScaledTensor:
    """Divide the mantissa by its largest-magnitude entry and absorb the factor into ``log_scale``."""
    m = max_abs(t.mantissa, t.batched)
    if not t.batched:
        if m == 0.0:
            return ScaledTensor(t.mantissa, 0.0, True)
        return ScaledTensor(t.mantissa / m, t.log_scale + math.log(m), False)
    zero = m == 0.0
    safe = np.where(zero, 1.0, m)
    mant = t.mantissa / safe.reshape((-1,) + (1,) * (t.mantissa.ndim - 1))
    log_scale = np.where(zero, 0.0, t.log_scale + np.log(safe))
    return ScaledTensor(mant, log_scale, zero, True)


def scaled_contract(a: ScaledTensor, b: ScaledTensor, axis_pairs: AxisPairs) -> ScaledTensor:
    """Contract mantissas, add log scales, renormalize."""
    raw = contract_general(a.mantissa, b.mantissa, axis_pairs, a.batched, b.batched)
    batched = a.batched or b.batched
    log_scale = np.add(a.log_scale, b.log_scale) if batched else a.log_scale + b.log_scale
    return renormalize(ScaledTensor(raw, log_scale, False, batched))
