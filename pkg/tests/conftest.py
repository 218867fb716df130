"""Shared oracles and random-model helpers for the test suite."""

import string
from pathlib import Path

import numpy as np
import pytest

from tnad.mpo import MpoModel, MpoShape, decision_logs, fnorm_log, init_mpo

MAX_DENSE_ENTRIES = 2 ** 20


def dense_operator(model: MpoModel) -> np.ndarray:
    """P as a (p**q, p**N) matrix, built by one einsum over all cores.

    Independent of the library's contraction code: every leg gets a letter
    and numpy does the whole sum.
    """
    s = model.shape
    letters = iter(string.ascii_letters)
    bonds = [next(letters) for _ in range(s.n_sites + 1)]
    ins = [next(letters) for _ in range(s.n_sites)]
    outs = {i: next(letters) for i in s.output_sites}
    terms = []
    for i in range(s.n_sites):
        terms.append(bonds[i] + bonds[i + 1] + ins[i] + outs.get(i, ""))
    result = "".join(outs[i] for i in s.output_sites) + "".join(ins)
    P = np.einsum(",".join(terms) + "->" + result, *model.cores, optimize=True)
    return P.reshape(s.output_dim, s.phys_dim ** s.n_sites)


def kron_state(factors: np.ndarray) -> np.ndarray:
    """Dense product state from per-site factors, first site most significant."""
    out = np.ones(1)
    for f in factors:
        out = np.kron(out, f)
    return out


def dense_entries(shape: MpoShape) -> int:
    return shape.output_dim * shape.phys_dim ** shape.n_sites


def random_small_shape(rng, sites=(2, 8), phys=(2, 3), max_bond=4, max_spacing=3) -> MpoShape:
    """Random shape whose dense operator fits in memory; oversized draws are redrawn."""
    while True:
        n = int(rng.integers(sites[0], sites[1] + 1))
        shape = MpoShape(n, int(rng.choice(phys)), int(rng.integers(1, max_bond + 1)),
                         int(rng.integers(1, max_spacing + 1)))
        if dense_entries(shape) <= MAX_DENSE_ENTRIES:
            return shape


def random_factors(rng, batch, n_sites, phys_dim) -> np.ndarray:
    """Random unit-norm per-site vectors, shape (batch, N, p)."""
    f = rng.normal(size=(batch, n_sites, phys_dim))
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


def random_model(rng, shape: MpoShape, stddev=None) -> MpoModel:
    if stddev is None:
        stddev = float(rng.uniform(0.3, 1.0))
    return init_mpo(shape, stddev, rng)


def loss_oracle(model, factors, alpha):
    """The batch loss recomputed from the two network values."""
    d = decision_logs(model, factors)
    return float(np.mean((d - 1.0) ** 2) + alpha * max(0.0, fnorm_log(model)))


def finite_difference_grads(model, factors, alpha, h=1e-5):
    grads = []
    for i, core in enumerate(model.cores):
        g = np.empty_like(core)
        for idx in np.ndindex(core.shape):
            plus = [c.copy() for c in model.cores]
            minus = [c.copy() for c in model.cores]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (loss_oracle(model.with_cores(plus), factors, alpha)
                      - loss_oracle(model.with_cores(minus), factors, alpha)) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(got, ref):
    """Largest entrywise |got - ref| / max(|got|, |ref|); entries below 1e-6 of the largest are judged on that floor."""
    scale = max(float(np.max(np.abs(r))) for r in ref)
    worst = 0.0
    for g, r in zip(got, ref):
        denom = np.maximum(np.maximum(np.abs(g), np.abs(r)), 1e-6 * scale)
        worst = max(worst, float(np.max(np.abs(g - r) / denom)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def data_dir():
    path = Path(__file__).resolve().parents[1] / "data"
    if not (path / "wine.csv").exists():
        pytest.skip("prepared datasets not present; see docs/datasets.md")
    return path


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
