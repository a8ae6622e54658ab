"""Prime motion block: channel reduction, cost volumes over adjacent frames,
and residual fusion back into the backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor, ShapeError

__all__ = [
    "CostVolumeParams", "LevelSpec", "PrimeMotionBlock", "build_pairs", "cost_volume",
    "fuse_residual", "kaiming_uniform", "soft_argmax_displacement",
]


@dataclass(frozen=True)
class CostVolumeParams:
    max_displacement: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.max_displacement < 0 or self.stride < 1:
            raise ValueError(f"invalid cost volume params d={self.max_displacement}, s={self.stride}")

    @property
    def channels(self) -> int:
        return (2 * (self.max_displacement // self.stride) + 1) ** 2


@dataclass(frozen=True)
class LevelSpec:
    level: int
    in_channels: int
    motion_channels: int
    beta: int = 4
    cost: CostVolumeParams = CostVolumeParams()

    def __post_init__(self):
        if self.in_channels % self.beta:
            raise ValueError(f"level {self.level}: {self.in_channels} channels not divisible by beta={self.beta}")

    @property
    def reduced_channels(self) -> int:
        return self.in_channels // self.beta

    @property
    def combined_channels(self) -> int:
        return self.cost.channels + self.reduced_channels


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_pairs(features: Tensor) -> tuple[Tensor, Tensor]:
    """Pair every frame with its successor, the last frame with itself.

    Returns ``(current, following)``, both with the input's shape, so that
    pair ``t`` is ``(current[:, :, t], following[:, :, t])``.
    """
    T = features.shape[2]
    nxt = list(range(1, T)) + [T - 1]
    return features, tn.take(features, nxt, axis=2)


def cost_volume(f_t: Tensor, f_next: Tensor, params: CostVolumeParams,
                eps: float = tn.COSINE_EPS) -> Tensor:
    """Cosine matching costs in a ``(2*floor(d/s)+1)^2`` displacement window.

    Accepts ``(C, H, W)`` operands (returns ``(M, H, W)``) or batched
    ``(B, C, T, H, W)`` operands (returns ``(B, M, T, H, W)``).
    """
    if f_t.shape != f_next.shape:
        raise ShapeError(f"cost_volume: dimension mismatch {f_t.shape} vs {f_next.shape}")
    if f_t.ndim == 3:
        C, H, W = f_t.shape
        a = tn.reshape(f_t, (1, C, 1, H, W))
        b = tn.reshape(f_next, (1, C, 1, H, W))
        out = cost_volume(a, b, params, eps)
        return tn.reshape(out, (params.channels, H, W))
    a = tn.normalize(f_t, axis=1, eps=eps)
    b = tn.normalize(f_next, axis=1, eps=eps)
    return tn.correlation(a, b, params.max_displacement, params.stride)


def soft_argmax_displacement(cost: Tensor, params: CostVolumeParams, temperature: float) -> Tensor:
    """Expected ``(dx, dy)`` under ``softmax(cost / temperature)`` over the window.

    ``cost`` is ``(B, M, T, H, W)``; the result is ``(B, 2, T, H, W)`` in pixels.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if cost.shape[1] != params.channels:
        raise ShapeError(f"expected {params.channels} cost channels, got {cost.shape[1]}")
    disp = np.array(tn.displacements(params.max_displacement, params.stride), dtype=cost.dtype)
    weights = Tensor(np.ascontiguousarray(disp[:, ::-1].T))     # rows (dx, dy)
    return tn.conv1x1x1(tn.softmax(tn.scale(cost, 1.0 / temperature), axis=1), weights)


def fuse_residual(features: Tensor, motion: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``Z = F + g(P)`` with ``g`` a 1x1x1 convolution."""
    gp = tn.conv1x1x1(motion, weight, bias)
    if gp.shape != features.shape:
        raise ShapeError(f"fuse_residual: extent mismatch {features.shape} vs {gp.shape}")
    return tn.add(features, gp)


class PrimeMotionBlock:
    """reduce (1x1x1) -> pairs -> cost volume -> concat -> 1x1x1 + affine + ReLU."""

    def __init__(self, spec: LevelSpec, rng: np.random.Generator, dtype=np.float32,
                 prefix: str = ""):
        self.spec = spec
        C, R, P, K = spec.in_channels, spec.reduced_channels, spec.motion_channels, spec.combined_channels
        self.params = {
            f"{prefix}reduce.w": Tensor(kaiming_uniform(rng, (R, C), C, dtype)),
            f"{prefix}reduce.b": Tensor(np.zeros(R, dtype)),
            f"{prefix}combine.w": Tensor(kaiming_uniform(rng, (P, K), K, dtype)),
            f"{prefix}combine.b": Tensor(np.zeros(P, dtype)),
            f"{prefix}combine.scale": Tensor(np.ones(P, dtype)),
            f"{prefix}combine.shift": Tensor(np.zeros(P, dtype)),
        }
        self.prefix = prefix

    def _p(self, key: str) -> Tensor:
        return self.params[self.prefix + key]

    def reduce(self, features: Tensor) -> Tensor:
        if features.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"level {self.spec.level}: expected {self.spec.in_channels} channels, got {features.shape}")
        return tn.conv1x1x1(features, self._p("reduce.w"), self._p("reduce.b"))

    def forward(self, features: Tensor, return_cost: bool = False):
        reduced = self.reduce(features)
        cur, nxt = build_pairs(reduced)
        cv = cost_volume(cur, nxt, self.spec.cost)
        combined = tn.concat_channels(cv, reduced)
        p = tn.conv1x1x1(combined, self._p("combine.w"), self._p("combine.b"))
        p = tn.relu(tn.channel_affine(p, self._p("combine.scale"), self._p("combine.shift")))
        return (p, cv) if return_cost else p

    __call__ = forward
