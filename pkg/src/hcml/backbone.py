"""Toy three-level video backbone and the full motion network built on it.

Levels (input ``(B, 3, T, H, W)``):

=====  =================================  ========================
level  layers                             output extent
=====  =================================  ========================
stem   conv 3->16                         (16, T, H, W)
0      2x conv 16->16                     (16, T, H, W)
1      conv 16->32 stride 2, conv 32->32  (32, T, H/2, W/2)
2      every 2nd frame, conv 32->64       (64, ceil(T/2), H/4, W/4)
       stride 2, conv 64->64
=====  =================================  ========================

Every convolution is followed by a per-channel affine and a ReLU. Pixels
are centred before the stem; stem weights belong to the level-0 group.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .contrastive import ContrastiveConfig, PredictorMLP
from .flow_head import FlowEstimator
from .motion_blocks import (CostVolumeParams, LevelSpec, PrimeMotionBlock, fuse_residual,
                            kaiming_uniform, soft_argmax_displacement)
from .tensor import Tensor

__all__ = ["NetworkConfig", "ToyBackbone", "MotionNetwork", "ForwardResult", "cross_entropy",
           "LEVELS"]

LEVELS = 3
MODES = ("baseline", "with_motion")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return tn.cross_entropy(logits, labels)


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 6
    channels: tuple[int, int, int] = (16, 32, 64)
    motion_channels: tuple[int, int, int] = (16, 16, 32)
    beta: tuple[int, int, int] = (1, 4, 4)
    max_displacement: tuple[int, int, int] = (1, 2, 2)
    cv_stride: tuple[int, int, int] = (1, 1, 1)
    flow_growth: int = 8
    match_temperature: float = 0.003
    predictor_hidden: int = 64
    steps: tuple[int, ...] = (1, 2, 3)

    @property
    def betas(self) -> tuple[int, ...]:
        return (self.beta,) * LEVELS if isinstance(self.beta, int) else tuple(self.beta)

    def level_spec(self, level: int) -> LevelSpec:
        return LevelSpec(level=level, in_channels=self.channels[level],
                         motion_channels=self.motion_channels[level], beta=self.betas[level],
                         cost=CostVolumeParams(self.max_displacement[level], self.cv_stride[level]))


class ToyBackbone:
    """Appearance stream: stem, three stages, pooled linear classifier."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c0, c1, c2 = cfg.channels
        self.params: dict[str, Tensor] = {}
        self.layers = {
            "stem": [("level0.stem", 3, c0, 1)],
            0: [("level0.conv0", c0, c0, 1), ("level0.conv1", c0, c0, 1)],
            1: [("level1.conv0", c0, c1, 2), ("level1.conv1", c1, c1, 1)],
            2: [("level2.conv0", c1, c2, 2), ("level2.conv1", c2, c2, 1)],
        }
        for layers in self.layers.values():
            for name, cin, cout, _ in layers:
                self.params[f"{name}.w"] = Tensor(kaiming_uniform(rng, (cout, cin, 3, 3), 9 * cin, dtype))
                self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype))
                self.params[f"{name}.scale"] = Tensor(np.ones(cout, dtype))
                self.params[f"{name}.shift"] = Tensor(np.zeros(cout, dtype))
        bound = 1.0 / np.sqrt(c2)
        self.params["head.w"] = Tensor(rng.uniform(-bound, bound, (cfg.num_classes, c2)).astype(dtype))
        self.params["head.b"] = Tensor(np.zeros(cfg.num_classes, dtype))

    @staticmethod
    def temporal_indices(T: int) -> np.ndarray:
        return np.arange(0, T, 2)

    def stem(self, clip: Tensor) -> Tensor:
        # pixels arrive in [0, 1]; centring them keeps early activations balanced
        centred = Tensor(clip.data - clip.dtype.type(0.5)) if not clip.requires_grad else \
            tn.add(clip, Tensor(np.full(clip.shape, -0.5, clip.dtype)))
        return self.stage("stem", centred)

    def stage(self, level, x: Tensor) -> Tensor:
        """Run stage ``level`` (0..2, or ``"stem"``); stage 0 expects the stem output."""
        if level == 2:
            x = tn.take(x, self.temporal_indices(x.shape[2]), axis=2)
        p = self.params
        for name, _, _, stride in self.layers[level]:
            x = tn.conv3x3_spatial(x, p[f"{name}.w"], p[f"{name}.b"], stride)
            x = tn.relu(tn.channel_affine(x, p[f"{name}.scale"], p[f"{name}.shift"]))
        return x

    def classify(self, top: Tensor) -> Tensor:
        pooled = tn.mean_axes(top, (2, 3, 4))
        return tn.linear(pooled, self.params["head.w"], self.params["head.b"])

    def level_shapes(self, clip_shape) -> list[tuple[int, int, int, int]]:
        """(C, T, H, W) of each tap for a clip of shape ``(B, 3, T, H, W)``."""
        _, _, T, H, W = clip_shape
        c0, c1, c2 = self.cfg.channels
        h1, w1 = -(-H // 2), -(-W // 2)
        return [(c0, T, H, W), (c1, T, h1, w1), (c2, -(-T // 2), -(-h1 // 2), -(-w1 // 2))]


@dataclass
class ForwardResult:
    stem: Tensor | None = None
    cues: Tensor | None = None                     # level-0 block output, input to the flow estimator
    features: list = field(default_factory=list)   # F^l
    fused: list = field(default_factory=list)      # Z^l
    motion: list = field(default_factory=list)     # P^l
    flow: Tensor | None = None
    logits: Tensor | None = None


class MotionNetwork:
    """Backbone with a prime motion block, residual fusion ``g^l`` and
    self-supervised heads at every level.

    At level 0 the block runs on the stem output and feeds the flow
    estimator; ``P^0`` is the block output plus a 1x1x1 embedding of the
    estimated flow. Levels 1 and 2 use the block output directly as ``P^l`` and
    carry a predictor MLP for the contrastive objective.
    """

    def __init__(self, cfg: NetworkConfig = NetworkConfig(), seed: int = 0,
                 motion: bool = True, dtype=np.float32):
        self.cfg = cfg
        self.motion = motion
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.backbone = ToyBackbone(cfg, rng, dtype)
        self.params: dict[str, Tensor] = dict(self.backbone.params)
        self.blocks: list[PrimeMotionBlock] = []
        self.predictors: dict[int, PredictorMLP] = {}
        self.flow_estimator: FlowEstimator | None = None
        if motion:
            for level in range(LEVELS):
                block = PrimeMotionBlock(cfg.level_spec(level), rng, dtype, prefix=f"level{level}.pmb.")
                self.blocks.append(block)
                self.params.update(block.params)
                P, C = cfg.motion_channels[level], cfg.channels[level]
                self.params[f"fuse.l{level}.w"] = Tensor(np.zeros((C, P), dtype))
                self.params[f"fuse.l{level}.b"] = Tensor(np.zeros(C, dtype))
            # the estimator also sees the 2-channel soft-argmax readout of the cost volume
            self.flow_estimator = FlowEstimator(cfg.motion_channels[0] + 2, rng, cfg.flow_growth, dtype,
                                                prefix="level0.flow.")
            self.params.update(self.flow_estimator.params)
            P0 = cfg.motion_channels[0]
            self.params["level0.embed.w"] = Tensor(kaiming_uniform(rng, (P0, 2), 2, dtype))
            self.params["level0.embed.b"] = Tensor(np.zeros(P0, dtype))
            for level in (1, 2):
                mlp = PredictorMLP(cfg.motion_channels[level] + cfg.motion_channels[level - 1],
                                   cfg.motion_channels[level - 1], cfg.predictor_hidden, cfg.steps,
                                   rng, dtype, prefix=f"level{level}.predictor.")
                self.predictors[level] = mlp
                self.params.update(mlp.params)
        for name, p in self.params.items():
            p.name = name

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, clip, mode: str = "with_motion", upto: int = LEVELS - 1,
                logits: bool = True) -> ForwardResult:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        use_motion = mode == "with_motion"
        if use_motion and not self.motion:
            raise ValueError("network was built without motion blocks")
        clip = tn.as_tensor(clip)
        if clip.ndim != 5 or clip.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, T, H, W) clip, got {clip.shape}")
        res = ForwardResult()
        x = res.stem = self.backbone.stem(clip)
        for level in range(upto + 1):
            f = self.backbone.stage(level, x)
            res.features.append(f)
            z = f
            if use_motion:
                if level == 0:
                    p = self.level0_motion(res)
                else:
                    p = self.blocks[level](f)
                res.motion.append(p)
                z = fuse_residual(f, p, self.params[f"fuse.l{level}.w"], self.params[f"fuse.l{level}.b"])
            res.fused.append(z)
            x = z
        if logits and upto == LEVELS - 1:
            res.logits = self.backbone.classify(x)
        return res

    def level0_motion(self, res: ForwardResult) -> Tensor:
        """Flow from the stem-level block, then ``P^0 = cues + embed(flow)``.

        The stem output is one conv deep, so its features still localize
        texture well enough for matching. Sets ``res.cues`` and ``res.flow``
        (the T-1 fields between real frame pairs).
        """
        cues, cv = self.blocks[0](res.stem, return_cost=True)
        prior = soft_argmax_displacement(cv, self.cfg.level_spec(0).cost, self.cfg.match_temperature)
        full = self.flow_estimator(tn.concat_channels(cues, prior))
        T = full.shape[2]
        res.cues = cues
        res.flow = tn.take(full, np.arange(max(T - 1, 1)), axis=2)
        return tn.add(cues, tn.conv1x1x1(full, self.params["level0.embed.w"], self.params["level0.embed.b"]))

    def aligned_lower(self, motion_lower: Tensor, level: int) -> Tensor:
        """Lower-level motion features sampled at the upper level's frame times."""
        if level == 2:
            return tn.take(motion_lower, ToyBackbone.temporal_indices(motion_lower.shape[2]), axis=2)
        return motion_lower
