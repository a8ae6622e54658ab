"""Preliminary motion cues: a dense 5-layer flow estimator and the
frame-reconstruction objective that trains it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .motion_blocks import kaiming_uniform
from .tensor import Tensor

__all__ = [
    "CharbonnierParams", "FlowEstimator", "estimate_flow", "bilinear_warp",
    "photometric_loss", "smoothness_loss", "reconstruction_loss", "endpoint_error",
]


@dataclass(frozen=True)
class CharbonnierParams:
    alpha: float = 0.45
    eps: float = 1e-3

    def __post_init__(self):
        if not 0 < self.alpha < 1 or self.eps <= 0:
            raise ValueError(f"invalid Charbonnier params {self}")

    def rho(self, z):
        return (np.asarray(z, dtype=np.float64) ** 2 + self.eps ** 2) ** self.alpha


class FlowEstimator:
    """Five 3x3 convolutions with dense connectivity.

    Layer ``k`` sees the input concatenated with the outputs of layers
    ``0..k-1``. The last layer emits (U, V), has no activation and starts at
    zero so the initial warp is the identity.
    """

    n_layers = 5

    def __init__(self, in_channels: int, rng: np.random.Generator, growth: int = 16,
                 dtype=np.float32, prefix: str = ""):
        self.in_channels = in_channels
        self.growth = growth
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        c = in_channels
        for k in range(self.n_layers):
            out = growth if k < self.n_layers - 1 else 2
            if k < self.n_layers - 1:
                w = kaiming_uniform(rng, (out, c, 3, 3), 9 * c, dtype)
            else:
                w = np.zeros((out, c, 3, 3), dtype)
            self.params[f"{prefix}l{k}.w"] = Tensor(w)
            self.params[f"{prefix}l{k}.b"] = Tensor(np.zeros(out, dtype))
            c += growth

    def layer_in_channels(self, k: int) -> int:
        return self.in_channels + k * self.growth

    def forward(self, features: Tensor) -> Tensor:
        x = features
        for k in range(self.n_layers):
            y = tn.conv3x3_spatial(x, self.params[f"{self.prefix}l{k}.w"],
                                   self.params[f"{self.prefix}l{k}.b"])
            if k == self.n_layers - 1:
                return y
            x = tn.concat_channels(x, tn.relu(y))

    __call__ = forward


def estimate_flow(features: Tensor, estimator: FlowEstimator) -> Tensor:
    return estimator(features)


def bilinear_warp(source: Tensor, flow: Tensor):
    """Reconstruct frame t from ``source`` (frame t+1) along ``flow``; see
    :func:`hcml.tensor.bilinear_warp`."""
    return tn.bilinear_warp(source, flow)


def photometric_loss(target: Tensor, warped: Tensor, mask: np.ndarray,
                     cp: CharbonnierParams = CharbonnierParams()) -> Tensor:
    """Charbonnier error averaged over the valid (b, c, t, y, x) entries.

    Dividing by the valid count rather than the full extent means a flow
    cannot lower the loss by pushing samples off the image. An empty mask
    gives 0.
    """
    err = tn.charbonnier(tn.sub(target, warped), cp.alpha, cp.eps)
    m = np.broadcast_to(mask, err.shape).astype(err.dtype)
    count = float(m.sum())
    if count == 0:
        return tn.scale(tn.sum(tn.mul(err, Tensor(m))), 0.0)
    return tn.scale(tn.sum(tn.mul(err, Tensor(m))), 1.0 / count)


def _diff(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    return tn.sub(tn.take(x, np.arange(1, n), axis), tn.take(x, np.arange(n - 1), axis))


def smoothness_loss(flow: Tensor, cp: CharbonnierParams = CharbonnierParams()) -> Tensor:
    """Sum over (U, V) x (d/dx, d/dy) of the mean Charbonnier forward difference."""
    H, W = flow.shape[-2:]
    if H < 2 or W < 2:
        raise ValueError(f"smoothness needs H, W >= 2, got {H}x{W}")
    # equal counts per component, so 2 * mean over both channels == sum of the two means
    gx = tn.mean(tn.charbonnier(_diff(flow, 4), cp.alpha, cp.eps))
    gy = tn.mean(tn.charbonnier(_diff(flow, 3), cp.alpha, cp.eps))
    return tn.scale(tn.add(gx, gy), 2.0)


def reconstruction_loss(frames, flow: Tensor, cp: CharbonnierParams = CharbonnierParams(),
                        zeta: float = 0.02, parts: bool = False):
    """Photometric + zeta * smoothness, warping frame t+1 onto t for t < T-1.

    ``flow`` may carry T or T-1 frames; only the first T-1 are used.
    """
    frames = tn.as_tensor(frames)
    T = frames.shape[2]
    if T < 2:
        raise ValueError("reconstruction needs at least 2 frames")
    if flow.shape[2] == T:
        flow = tn.take(flow, np.arange(T - 1), axis=2)
    target = Tensor(frames.data[:, :, : T - 1]) if not frames.requires_grad else \
        tn.take(frames, np.arange(T - 1), axis=2)
    source = Tensor(frames.data[:, :, 1:]) if not frames.requires_grad else \
        tn.take(frames, np.arange(1, T), axis=2)
    warped, mask = tn.bilinear_warp(source, flow)
    photo = photometric_loss(target, warped, mask, cp)
    smooth = smoothness_loss(flow, cp)
    total = tn.add(photo, tn.scale(smooth, zeta))
    if parts:
        return total, photo, smooth
    return total


def endpoint_error(flow: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Mean Euclidean flow error over pixels where ``valid`` is nonzero."""
    d = np.sqrt(((np.asarray(flow) - np.asarray(gt)) ** 2).sum(axis=1, keepdims=True))
    v = np.broadcast_to(np.asarray(valid) > 0, d.shape)
    return float(d[v].mean()) if v.any() else float("nan")
