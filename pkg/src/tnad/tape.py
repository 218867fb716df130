"""
Reverse-mode differentiation of rescaled contraction networks.

A :class:`GradTape` records every binary contraction executed through it,
together with the factor its result was divided by.  The network value is
``mantissa * exp(log_scale)``; since the final ``log`` of that value does not
depend on which rescaling factors were chosen, each factor is treated as a
constant during the backward pass and contributes a plain division.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import AxisPairs, ScaledTensor, contract_general, contract_vjp, renormalize


@dataclass
class Node:
    value: ScaledTensor
    requires_grad: bool
    name: Optional[str] = None


@dataclass(frozen=True)
class Step:
    out: int
    a: int
    b: int
    axis_pairs: tuple
    divisor: object  # float, or per-sample array for batched results


class GradTape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.steps: list[Step] = []

    def leaf(self, array, batched: bool = False, requires_grad: bool = False, name: str | None = None) -> int:
        value = ScaledTensor.from_array(array, batched=batched)
        self.nodes.append(Node(value, requires_grad, name))
        return len(self.nodes) - 1

    def value(self, i: int) -> ScaledTensor:
        return self.nodes[i].value

    def contract(self, a: int, b: int, axis_pairs: AxisPairs) -> int:
        va, vb = self.nodes[a].value, self.nodes[b].value
        raw = contract_general(va.mantissa, vb.mantissa, axis_pairs, va.batched, vb.batched)
        batched = va.batched or vb.batched
        log_scale = np.add(va.log_scale, vb.log_scale) if batched else va.log_scale + vb.log_scale
        out = renormalize(ScaledTensor(raw, log_scale, False, batched))
        divisor = np.exp(out.log_scale - log_scale)
        if batched:
            divisor = np.where(out.zero, 1.0, divisor)
        elif out.zero:
            divisor = 1.0
        needs = self.nodes[a].requires_grad or self.nodes[b].requires_grad
        self.nodes.append(Node(out, needs))
        self.steps.append(Step(len(self.nodes) - 1, a, b, tuple(axis_pairs), divisor))
        return len(self.nodes) - 1

    def log_value(self, i: int):
        """Log of a size-one node and a flag marking non-positive results.

        Returns ``(log_value, zero)``; flagged entries hold ``-inf``.
        """
        v = self.nodes[i].value
        if v.batched:
            m = v.mantissa.reshape(v.mantissa.shape[0], -1)
            if m.shape[1] != 1:
                raise ValueError("log_value needs a node with one entry per sample")
            m = m[:, 0]
            bad = m <= 0.0
            out = np.full(m.shape, -np.inf)
            out[~bad] = np.log(m[~bad]) + np.asarray(v.log_scale)[~bad]
            return out, bad
        if v.mantissa.size != 1:
            raise ValueError("log_value needs a node with a single entry")
        m = float(v.mantissa.reshape(-1)[0])
        if m <= 0.0:
            return -np.inf, True
        return float(np.log(m) + v.log_scale), False

    def backward(self, i: int, seed) -> dict[int, np.ndarray]:
        """Adjoints of every gradient-requiring leaf for the objective ``sum(seed * log_value(i))``.

        ``seed`` is the derivative of the objective with respect to the log
        value (one entry per sample for batched outputs). Flagged zero results
        must carry a zero seed.
        """
        v = self.nodes[i].value
        m = v.mantissa
        seed = np.asarray(seed, dtype=np.float64)
        if v.batched:
            flat = m.reshape(m.shape[0], -1)[:, 0]
            safe = np.where(flat > 0.0, flat, 1.0)
            adj_final = (seed / safe).reshape(m.shape)
        else:
            flat = float(m.reshape(-1)[0])
            adj_final = np.full(m.shape, float(seed) / flat if flat > 0.0 else 0.0)

        adjoints: dict[int, np.ndarray] = {i: adj_final}
        for step in reversed(self.steps):
            adj = adjoints.pop(step.out, None)
            if adj is None:
                continue
            out_val = self.nodes[step.out].value
            if out_val.batched:
                adj_raw = adj / np.reshape(step.divisor, (-1,) + (1,) * (adj.ndim - 1))
            else:
                adj_raw = adj / step.divisor
            na, nb = self.nodes[step.a], self.nodes[step.b]
            ga, gb = contract_vjp(
                na.value.mantissa, nb.value.mantissa, step.axis_pairs, adj_raw,
                na.value.batched, nb.value.batched,
                need_a=na.requires_grad, need_b=nb.requires_grad,
            )
            if ga is not None:
                adjoints[step.a] = adjoints[step.a] + ga if step.a in adjoints else ga
            if gb is not None:
                adjoints[step.b] = adjoints[step.b] + gb if step.b in adjoints else gb

        produced = {s.out for s in self.steps}
        leaves = {}
        for idx, node in enumerate(self.nodes):
            if node.requires_grad and idx not in produced:
                grad = adjoints.get(idx)
                leaves[idx] = grad if grad is not None else np.zeros_like(node.value.mantissa)
        return leaves

    def replay(self) -> list[ScaledTensor]:
        """Re-execute the recorded steps from the leaf values and return every node value."""
        values = [n.value for n in self.nodes]
        replayed = list(values)
        for step in self.steps:
            va, vb = replayed[step.a], replayed[step.b]
            raw = contract_general(va.mantissa, vb.mantissa, step.axis_pairs, va.batched, vb.batched)
            batched = va.batched or vb.batched
            log_scale = np.add(va.log_scale, vb.log_scale) if batched else va.log_scale + vb.log_scale
            replayed[step.out] = renormalize(ScaledTensor(raw, log_scale, False, batched))
        return replayed
