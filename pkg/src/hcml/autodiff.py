"""Reverse-mode differentiation and the central-difference gradient oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GraphError(RuntimeError):
    """The recorded graph cannot be differentiated (cycle or non-scalar root)."""


@dataclass
class Tape:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list[Tensor]
    loss: Tensor

    def gradients(self) -> dict[int, np.ndarray]:
        return {id(n): n.grad for n in self.nodes if n.grad is not None}

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                pm = state.get(id(p))
                if pm == 1:
                    raise GraphError(f"cycle detected at {p!r}")
                if pm is None:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, zero_existing: bool = True) -> Tape:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Gradients add up across fan-out. With ``zero_existing`` the accumulators
    of reachable nodes are reset first, so repeated calls are idempotent.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([loss], loss)
    nodes = _topological(loss)
    if zero_existing:
        for n in nodes:
            n.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype).reshape(parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    for n in nodes:
        if n.grad is None:
            n.grad = np.zeros(n.shape, dtype=n.dtype)
    return Tape(nodes, loss)


# --------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    name: str
    step: float
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    diagnostic: str = ""
    instances: int = 1
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.diagnostic and all(
            math.isfinite(e) and e <= self.tol for e in self.max_rel_error.values())

    def merge(self, other: "GradCheckReport") -> None:
        for k, v in other.max_rel_error.items():
            self.max_rel_error[k] = max(self.max_rel_error.get(k, 0.0), v)
        if other.diagnostic and not self.diagnostic:
            self.diagnostic = other.diagnostic


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``param``."""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().data.item()
        flat[i] = orig - h
        fm = f().data.item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(param.shape)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               h: float = 1e-5, tol: float = 1e-4, name: str = "f") -> GradCheckReport:
    """Compare ``backward`` against central differences for each parameter.

    ``f`` must rebuild its graph on every call and read the parameters'
    ``data`` in place; parameters must be float64.
    """
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    report = GradCheckReport(name=name, step=h, tol=tol)
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name} is {p.dtype}")
        p.requires_grad = True
    loss = f()
    if not np.isfinite(loss.data).all():
        report.diagnostic = f"non-finite value {loss.data} from {name}"
        return report
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for k, p in params.items()}
    for k, p in params.items():
        numeric = numeric_gradient(f, p, h)
        if not np.isfinite(numeric).all():
            report.diagnostic = f"non-finite finite-difference gradient for {k}"
            report.max_rel_error[k] = float("inf")
            continue
        report.max_rel_error[k] = float(relative_error(analytic[k], numeric).max())
    return report


def format_reports(reports: Sequence[GradCheckReport]) -> str:
    lines = [f"{'op':<26}{'n':>4}{'max rel err':>14}{'step':>10}{'tol':>10}  status"]
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.diagnostic})" if r.diagnostic else ""
        lines.append(f"{r.name:<26}{r.instances:>4}{r.worst:>14.3e}{r.step:>10.0e}{r.tol:>10.0e}"
                     f"  {status}{extra}")
    return "\n".join(lines)
