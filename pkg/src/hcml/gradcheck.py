"""Registry of differentiable ops and the randomized gradient-check suite.

Each entry builds a fresh random instance: a closure that recomputes a
scalar from float64 parameters, plus those parameters. Scalars are formed
as ``sum(out * R)`` with a fixed random ``R`` so every output entry matters.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import contrastive, flow_head, motion_blocks
from . import tensor as tn
from .autodiff import GradCheckReport, grad_check
from .tensor import Tensor

__all__ = ["REGISTRY", "register", "run_suite", "KINK_MARGIN"]

KINK_MARGIN = 1e-3

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]
REGISTRY: dict[str, Builder] = {}


def register(name: str):
    def deco(fn: Builder) -> Builder:
        if name in REGISTRY:
            raise ValueError(f"op {name!r} registered twice")
        REGISTRY[name] = fn
        return fn
    return deco


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _away_from_zero(rng, shape, margin=0.05) -> np.ndarray:
    """Normal samples pushed at least ``margin`` away from 0 (ReLU kink)."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _contract(build: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    R = Tensor(rng.standard_normal(build().shape))
    return lambda: tn.sum(tn.mul(build(), R))


# --------------------------------------------------------------------------
# tensor primitives


@register("linear")
def _linear(rng):
    x, w, b = _p(rng, 5, 4), _p(rng, 3, 4), _p(rng, 3)
    return _contract(lambda: tn.linear(x, w, b), rng), {"x": x, "w": w, "b": b}


@register("conv1x1x1")
def _conv1(rng):
    x, w, b = _p(rng, 2, 3, 2, 3, 3), _p(rng, 4, 3), _p(rng, 4)
    return _contract(lambda: tn.conv1x1x1(x, w, b), rng), {"x": x, "w": w, "b": b}


@register("conv3x3_spatial")
def _conv3(rng):
    stride = int(rng.integers(1, 3))
    C, O = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x, w, b = _p(rng, 1, C, 2, 5, 4), _p(rng, O, C, 3, 3), _p(rng, O)
    return _contract(lambda: tn.conv3x3_spatial(x, w, b, stride), rng), {"x": x, "w": w, "b": b}


@register("channel_affine")
def _affine(rng):
    x, s, t = _p(rng, 2, 3, 2, 2, 2), _p(rng, 3), _p(rng, 3)
    return _contract(lambda: tn.channel_affine(x, s, t), rng), {"x": x, "scale": s, "shift": t}


@register("relu")
def _relu(rng):
    x = Tensor(_away_from_zero(rng, (4, 6), KINK_MARGIN * 10))
    return _contract(lambda: tn.relu(x), rng), {"x": x}


@register("softmax")
def _softmax(rng):
    x = _p(rng, 3, 5, 2)
    return _contract(lambda: tn.softmax(x, axis=1), rng), {"x": x}


@register("normalize")
def _normalize(rng):
    x = _p(rng, 3, 4, 2)
    return _contract(lambda: tn.normalize(x, axis=1), rng), {"x": x}


@register("cosine_sim")
def _cosine(rng):
    u, v = _p(rng, 6), _p(rng, 6)
    return (lambda: tn.cosine_sim(u, v)), {"u": u, "v": v}


@register("cross_entropy")
def _xent(rng):
    logits = _p(rng, 6, 4, scale=2.0)
    labels = rng.integers(0, 4, 6)
    return (lambda: tn.cross_entropy(logits, labels)), {"logits": logits}


# --------------------------------------------------------------------------
# motion blocks and flow


@register("cost_volume")
def _cost_volume(rng):
    d, s = [(0, 1), (1, 1), (2, 1), (2, 2)][int(rng.integers(4))]
    a, b = _p(rng, 1, 3, 2, 4, 5), _p(rng, 1, 3, 2, 4, 5)
    params = motion_blocks.CostVolumeParams(d, s)
    return _contract(lambda: motion_blocks.cost_volume(a, b, params), rng), {"f_t": a, "f_next": b}


@register("soft_argmax_displacement")
def _soft_argmax(rng):
    params = motion_blocks.CostVolumeParams(1, 1)
    cost = Tensor(rng.uniform(-1, 1, (1, params.channels, 2, 3, 3)))
    return (_contract(lambda: motion_blocks.soft_argmax_displacement(cost, params, 0.5), rng),
            {"cost": cost})


@register("prime_motion_block")
def _pmb(rng):
    spec = motion_blocks.LevelSpec(0, in_channels=4, motion_channels=3, beta=2,
                                   cost=motion_blocks.CostVolumeParams(1, 1))
    block = motion_blocks.PrimeMotionBlock(spec, rng, np.float64)
    x = _p(rng, 1, 4, 3, 3, 3)
    params = {"x": x, **block.params}
    return _contract(lambda: block(x), rng), params


@register("fuse_residual")
def _fuse(rng):
    f, p, w, b = _p(rng, 1, 3, 2, 2, 2), _p(rng, 1, 2, 2, 2, 2), _p(rng, 3, 2), _p(rng, 3)
    return (_contract(lambda: motion_blocks.fuse_residual(f, p, w, b), rng),
            {"features": f, "motion": p, "w": w, "b": b})


def _off_grid_flow(rng, shape, amplitude=1.5) -> np.ndarray:
    """Random flow whose sample points stay clear of integer grid lines."""
    flow = rng.uniform(-amplitude, amplitude, shape)
    frac = flow - np.round(flow)
    bump = np.where(np.abs(frac) < 0.05, 0.1 * np.sign(frac + 1e-12), 0.0)
    return flow + bump


@register("bilinear_warp")
def _warp(rng):
    src = Tensor(rng.uniform(0, 1, (1, 2, 2, 5, 6)))
    flow = Tensor(_off_grid_flow(rng, (1, 2, 2, 5, 6)))
    return _contract(lambda: tn.bilinear_warp(src, flow)[0], rng), {"source": src, "flow": flow}


@register("charbonnier")
def _charb(rng):
    z = _p(rng, 4, 5, scale=0.3)
    return _contract(lambda: tn.charbonnier(z, 0.45, 1e-3), rng), {"z": z}


@register("photometric_loss")
def _photo(rng):
    target = Tensor(rng.uniform(0, 1, (2, 3, 2, 4, 4)))
    warped = Tensor(rng.uniform(0, 1, (2, 3, 2, 4, 4)))
    mask = (rng.uniform(size=(2, 1, 2, 4, 4)) > 0.2).astype(np.float64)
    return (lambda: flow_head.photometric_loss(target, warped, mask)), {"target": target, "warped": warped}


@register("smoothness_loss")
def _smooth(rng):
    flow = _p(rng, 2, 2, 2, 4, 5, scale=0.5)
    return (lambda: flow_head.smoothness_loss(flow)), {"flow": flow}


@register("reconstruction_loss")
def _recon(rng):
    frames = rng.uniform(0, 1, (1, 3, 2, 8, 8))
    flow = Tensor(_off_grid_flow(rng, (1, 2, 1, 8, 8), 1.0))
    return (lambda: flow_head.reconstruction_loss(frames, flow, zeta=0.1)), {"flow": flow}


@register("flow_estimator")
def _estimator(rng):
    est = flow_head.FlowEstimator(3, rng, growth=2, dtype=np.float64)
    # nonzero output layer so gradients reach the hidden layers
    for k in ("l4.w", "l4.b"):
        est.params[k].data[...] = rng.standard_normal(est.params[k].shape)
    x = _p(rng, 1, 3, 1, 4, 4)
    return _contract(lambda: est(x), rng), {"x": x, **est.params}


# --------------------------------------------------------------------------
# contrastive head


@register("info_nce")
def _nce(rng):
    preds, targets = _p(rng, 4, 5), _p(rng, 6, 5)
    positive = rng.integers(0, 6, 4)
    tau = float(rng.uniform(0.1, 1.0))
    return (lambda: contrastive.info_nce(preds, targets, positive, tau)), {"preds": preds, "targets": targets}


@register("predictor_mlp")
def _mlp(rng):
    mlp = contrastive.PredictorMLP(5, 3, 6, (1, 2), rng, np.float64)
    x = _p(rng, 4, 5)
    delta = int(rng.integers(1, 3))
    return _contract(lambda: mlp(x, delta), rng), {"x": x, **mlp.params}


def _kink_free(f: Callable[[], Tensor]) -> bool:
    """True when no ReLU input in the graph of ``f()`` lies within the kink margin."""
    out = f()
    seen, stack = set(), [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu" and np.any(np.abs(node._parents[0].data) < KINK_MARGIN):
            return False
        stack.extend(node._parents)
    return True


def run_suite(instances: int = 10, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
              names=None, max_tries: int = 50) -> list[GradCheckReport]:
    """Check every registered op on ``instances`` random draws; one merged report per op."""
    rng = np.random.default_rng(seed)
    reports = []
    for name in (names or REGISTRY):
        builder = REGISTRY[name]
        report = GradCheckReport(name=name, step=h, tol=tol)
        start = time.perf_counter()
        done = tries = 0
        while done < instances:
            tries += 1
            if tries > max_tries:
                report.diagnostic = f"only {done} kink-free instances in {max_tries} draws"
                break
            f, params = builder(rng)
            for p in params.values():
                p.requires_grad = True
            if not _kink_free(f):
                continue
            report.merge(grad_check(f, params, h=h, tol=tol, name=name))
            done += 1
        report.instances = done
        report.seconds = time.perf_counter() - start
        reports.append(report)
    return reports
