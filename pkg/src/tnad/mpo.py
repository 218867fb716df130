"""
The spaced matrix product operator and its two contraction schedules.

Core ``i`` has axes ``(left, right, in[, out])``.  Boundary cores carry
size-1 bond axes, and an output leg sits on every ``spacing``-th site
starting from the first.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddingSpec, ProductState, FOURIER, TRIG
from .tape import GradTape

FORMAT_MAGIC = b"TNAD"
FORMAT_VERSION = 1
_EMBEDDING_CODES = {None: 0, TRIG: 1, FOURIER: 2}
_EMBEDDING_KINDS = {v: k for k, v in _EMBEDDING_CODES.items()}


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MpoShape:
    n_sites: int
    phys_dim: int
    bond_dim: int
    spacing: int

    def __post_init__(self):
        for name in ("n_sites", "phys_dim", "bond_dim", "spacing"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def n_outputs(self) -> int:
        return (self.n_sites - 1) // self.spacing + 1

    @property
    def output_sites(self) -> list[int]:
        """Zero-based indices of the sites carrying an output leg."""
        return list(range(0, self.n_sites, self.spacing))

    @property
    def output_dim(self) -> int:
        return self.phys_dim ** self.n_outputs

    def has_output(self, site: int) -> bool:
        return site % self.spacing == 0

    def core_shape(self, site: int) -> tuple:
        left = 1 if site == 0 else self.bond_dim
        right = 1 if site == self.n_sites - 1 else self.bond_dim
        shape = (left, right, self.phys_dim)
        return shape + (self.phys_dim,) if self.has_output(site) else shape


@dataclass
class MpoModel:
    shape: MpoShape
    cores: list
    embedding: Optional[EmbeddingSpec] = field(default=None)

    def __post_init__(self):
        if len(self.cores) != self.shape.n_sites:
            raise ValueError(f"expected {self.shape.n_sites} cores, got {len(self.cores)}")
        for i, core in enumerate(self.cores):
            if core.shape != self.shape.core_shape(i):
                raise ValueError(f"core {i} has shape {core.shape}, expected {self.shape.core_shape(i)}")

    def with_cores(self, cores) -> "MpoModel":
        return MpoModel(self.shape, list(cores), self.embedding)

    def scaled(self, c: float) -> "MpoModel":
        return self.with_cores([c * core for core in self.cores])


def init_mpo(shape: MpoShape, stddev: float, seed, embedding: Optional[EmbeddingSpec] = None) -> MpoModel:
    """Draw every core entry i.i.d. from N(0, stddev**2).

    ``seed`` is an integer or a ``numpy.random.Generator``.
    """
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cores = [rng.normal(0.0, stddev, size=shape.core_shape(i)) for i in range(shape.n_sites)]
    return MpoModel(shape, cores, embedding)


# --------------------------------------------------------------------------
# contraction schedules

class _Named:
    """A tape node with named axes."""

    __slots__ = ("node", "names")

    def __init__(self, node: int, names: list):
        self.node = node
        self.names = names


def _ncontract(tape: GradTape, a: _Named, b: _Named, pairs) -> _Named:
    axis_pairs = [(a.names.index(na), b.names.index(nb)) for na, nb in pairs]
    used_a = {na for na, _ in pairs}
    used_b = {nb for _, nb in pairs}
    free_a = [n for n in a.names if n not in used_a]
    free_b = [n for n in b.names if n not in used_b]
    free_b = [n + "*" if n in free_a else n for n in free_b]
    return _Named(tape.contract(a.node, b.node, axis_pairs), free_a + free_b)


def _core_names(shape: MpoShape, site: int) -> list:
    return ["l", "r", "in", "out"] if shape.has_output(site) else ["l", "r", "in"]


def _zigzag(tape: GradTape, chain: list) -> int:
    """Contract a chain with its own copy, leg by leg; returns the scalar node.

    Each element has named axes ``l`` and ``r`` plus any of ``in``/``out``,
    which are paired with the copy's matching legs.
    """
    def vertical(names):
        return [(n, n) for n in names if n in ("out", "in")]

    first = chain[0]
    env = _ncontract(tape, first, first, [("l", "l")] + vertical(first.names))
    for t in chain[1:]:
        x = _ncontract(tape, env, t, [("r", "l")])
        env = _ncontract(tape, x, t, [("r*", "l")] + vertical(t.names))
    return env.node


def _segments(shape: MpoShape) -> list:
    starts = shape.output_sites
    ends = starts[1:] + [shape.n_sites]
    return list(zip(starts, ends))


def _decision_network(tape: GradTape, core_nodes: list, factor_nodes: list, shape: MpoShape,
                      schedule: str = "right_to_left") -> int:
    vert = []
    for i in range(shape.n_sites):
        names = _core_names(shape, i)
        core = _Named(core_nodes[i], names)
        factor = _Named(factor_nodes[i], ["in"])
        vert.append(_ncontract(tape, core, factor, [("in", "in")]))

    chain = []
    for start, end in _segments(shape):
        if schedule == "right_to_left":
            if end - start == 1:
                chain.append(vert[start])
                continue
            acc = vert[end - 1]
            for site in range(end - 2, start, -1):
                acc = _ncontract(tape, vert[site], acc, [("r", "l")])
                acc.names = ["l", "r"]
            seg = _ncontract(tape, vert[start], acc, [("r", "l")])
            seg.names = ["l", "out", "r"]
        elif schedule == "left_to_right":
            seg = vert[start]
            for site in range(start + 1, end):
                seg = _ncontract(tape, seg, vert[site], [("r", "l")])
                seg.names = [n.rstrip("*") for n in seg.names]
        else:
            raise ValueError(f"unknown schedule {schedule!r}")
        chain.append(seg)
    return _zigzag(tape, chain)


def _fnorm_network(tape: GradTape, core_nodes: list, shape: MpoShape) -> int:
    chain = [_Named(core_nodes[i], _core_names(shape, i)) for i in range(shape.n_sites)]
    return _zigzag(tape, chain)


def _check_factors(model: MpoModel, factors: np.ndarray):
    n, p = model.shape.n_sites, model.shape.phys_dim
    if factors.shape[-2:] != (n, p):
        raise ValueError(f"product state has shape {factors.shape[-2:]}, model expects ({n}, {p})")


def build_decision(model: MpoModel, factors: np.ndarray, requires_grad: bool = False,
                   schedule: str = "right_to_left"):
    """Record log ||P Phi(x)||^2 for a batch of product states on a fresh tape.

    ``factors`` has shape (batch, N, p). Returns ``(tape, output_node, core_nodes)``.
    """
    factors = np.asarray(factors, dtype=np.float64)
    _check_factors(model, factors)
    tape = GradTape()
    core_nodes = [tape.leaf(c, requires_grad=requires_grad, name=f"core{i}") for i, c in enumerate(model.cores)]
    factor_nodes = [tape.leaf(factors[:, i, :], batched=True) for i in range(model.shape.n_sites)]
    out = _decision_network(tape, core_nodes, factor_nodes, model.shape, schedule)
    return tape, out, core_nodes


def build_fnorm(model: MpoModel, requires_grad: bool = False):
    """Record log ||P||_F^2 on a fresh tape. Returns ``(tape, output_node, core_nodes)``."""
    tape = GradTape()
    core_nodes = [tape.leaf(c, requires_grad=requires_grad, name=f"core{i}") for i, c in enumerate(model.cores)]
    out = _fnorm_network(tape, core_nodes, model.shape)
    return tape, out, core_nodes


def decision_logs(model: MpoModel, factors, return_zero: bool = False, schedule: str = "right_to_left"):
    """log ||P Phi(x)||^2 for a batch of product states (array of shape (batch, N, p)).

    Exactly-zero projections come back as ``-inf``; with ``return_zero`` a
    boolean mask marking them is returned alongside.
    """
    factors = np.asarray(factors, dtype=np.float64)
    if factors.ndim == 2:
        factors = factors[None]
    tape, out, _ = build_decision(model, factors, schedule=schedule)
    values, zero = tape.log_value(out)
    return (values, zero) if return_zero else values


def decision_log(model: MpoModel, state: ProductState, schedule: str = "right_to_left") -> float:
    """log ||P Phi(x)||^2 for one sample; larger means more normal. ``-inf`` if the projection vanishes."""
    factors = state.factors if isinstance(state, ProductState) else np.asarray(state)
    return float(decision_logs(model, factors[None], schedule=schedule)[0])


def score(model: MpoModel, X, batch_size: int = 256) -> np.ndarray:
    """Embed raw feature rows with the model's embedding and return their decision logs."""
    if model.embedding is None:
        raise ValueError("model carries no embedding; embed inputs and call decision_logs")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], batch_size):
        out[lo:lo + batch_size] = decision_logs(model, model.embedding(X[lo:lo + batch_size]))
    return out


def fnorm_log(model: MpoModel, return_zero: bool = False):
    """log ||P||_F^2 computed by a zig-zag sweep over the core/dual-core ladder."""
    tape, out, _ = build_fnorm(model)
    value, zero = tape.log_value(out)
    return (value, zero) if return_zero else value


# --------------------------------------------------------------------------
# dense oracle

def materialize_dense(model: MpoModel, max_input_dim: int = 2 ** 20) -> np.ndarray:
    """The full p**q x p**N matrix of P. Test oracle for small models only."""
    s = model.shape
    if s.phys_dim ** s.n_sites > max_input_dim:
        raise ValueError(f"p**N = {s.phys_dim ** s.n_sites} exceeds the {max_input_dim} guard")
    # acc axes: (open legs..., right bond), open legs listed in site order
    acc = np.ones((1,))
    open_legs = []
    for i, core in enumerate(model.cores):
        acc = np.tensordot(acc, core, axes=([acc.ndim - 1], [0]))
        # now (..., r, in[, out]); move r to the end
        tail = core.ndim - 1
        order = list(range(acc.ndim - tail)) + list(range(acc.ndim - tail + 1, acc.ndim)) + [acc.ndim - tail]
        acc = acc.transpose(order)
        open_legs.append(("in", i))
        if s.has_output(i):
            open_legs.append(("out", i))
    acc = acc[..., 0]
    outs = [k for k, leg in enumerate(open_legs) if leg[0] == "out"]
    ins = [k for k, leg in enumerate(open_legs) if leg[0] == "in"]
    return acc.transpose(outs + ins).reshape(s.phys_dim ** s.n_outputs, s.phys_dim ** s.n_sites)


# --------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<4sIIIIIII")
_CORE_HEAD = struct.Struct("<IIIII")


def dumps(model: MpoModel) -> bytes:
    s = model.shape
    emb = model.embedding
    parts = [_HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, s.n_sites, s.phys_dim, s.bond_dim, s.spacing,
                          _EMBEDDING_CODES[emb.kind if emb else None], emb.phys_dim if emb else 0)]
    for i, core in enumerate(model.cores):
        dims = core.shape if core.ndim == 4 else core.shape + (1,)
        parts.append(_CORE_HEAD.pack(i, *dims))
        parts.append(np.ascontiguousarray(core, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> MpoModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("model file truncated in header")
    magic, version, n, p, b, spacing, emb_code, emb_p = _HEADER.unpack_from(data, 0)
    if magic != FORMAT_MAGIC or version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version (magic {magic!r}, version {version})")
    try:
        shape = MpoShape(n, p, b, spacing)
        emb_kind = _EMBEDDING_KINDS[emb_code]
    except (ValueError, KeyError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    embedding = EmbeddingSpec(emb_kind, emb_p) if emb_kind else None
    offset = _HEADER.size
    cores = []
    for i in range(n):
        if offset + _CORE_HEAD.size > len(data):
            raise ModelFormatError(f"model file truncated at core {i}")
        site, *dims = _CORE_HEAD.unpack_from(data, offset)
        offset += _CORE_HEAD.size
        expected = shape.core_shape(i)
        if site != i or tuple(dims) != (expected + (1,))[:4]:
            raise ModelFormatError(f"core record {i} has site {site} and dims {dims}, expected {expected}")
        count = math.prod(dims)
        end = offset + 8 * count
        if end > len(data):
            raise ModelFormatError(f"model file truncated in core {i} entries")
        cores.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(expected))
        offset = end
    if offset != len(data):
        raise ModelFormatError("trailing bytes after last core")
    return MpoModel(shape, cores, embedding)


def save(model: MpoModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> MpoModel:
    return loads(Path(path).read_bytes())
