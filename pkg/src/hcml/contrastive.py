"""Hierarchical contrastive objective.

Higher-level motion features, together with the current lower-level
features, predict the lower-level features ``delta`` steps ahead. Each
prediction is scored against every sampled ground-truth vector in the
batch: one positive plus spatial, temporal and easy negatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .motion_blocks import kaiming_uniform
from .tensor import Tensor, ShapeError

__all__ = [
    "ContrastiveConfig", "PredictorMLP", "ContrastiveBatch", "sample_sets", "predict_future",
    "info_nce", "positive_retrieval_accuracy", "contrastive_loss", "similarity_logits",
]


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    locations: int = 16
    steps: tuple[int, ...] = (1, 2, 3)
    hidden: int = 64

    def __post_init__(self):
        if self.temperature <= 0 or self.locations < 1 or not self.steps or min(self.steps) < 1:
            raise ValueError(f"invalid contrastive config {self}")


class PredictorMLP:
    """``f_delta(x) = W2[delta] . relu(W1 . x)`` with ``W1`` shared across steps."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int,
                 steps, rng: np.random.Generator, dtype=np.float32, prefix: str = ""):
        self.steps = tuple(steps)
        self.prefix = prefix
        self.in_channels, self.out_channels, self.hidden = in_channels, out_channels, hidden
        self.params = {f"{prefix}w1": Tensor(kaiming_uniform(rng, (hidden, in_channels), in_channels, dtype))}
        for d in self.steps:
            self.params[f"{prefix}w2.d{d}"] = Tensor(kaiming_uniform(rng, (out_channels, hidden), hidden, dtype))

    def hidden_layer(self, x: Tensor) -> Tensor:
        return tn.relu(tn.linear(x, self.params[f"{self.prefix}w1"]))

    def head(self, h: Tensor, delta: int) -> Tensor:
        if delta not in self.steps:
            raise ValueError(f"prediction step {delta} not in {self.steps}")
        return tn.linear(h, self.params[f"{self.prefix}w2.d{delta}"])

    def __call__(self, x: Tensor, delta: int) -> Tensor:
        return self.head(self.hidden_layer(x), delta)


@dataclass
class ContrastiveBatch:
    """Index structure for one level's contrastive loss.

    Targets are every sampled ground-truth vector ``(b, tau, m)``; target
    ``j`` sits at ``(tgt_b[j], tgt_t[j], tgt_k[j])`` and location slot ``k``
    of video ``b`` is the flat grid position ``locations[b, k]``.
    Prediction ``i`` comes from ``(pred_b, pred_t, pred_k)`` with step
    ``pred_delta`` and its positive is target ``positive[i]``.
    """

    B: int
    T: int
    N: int
    locations: np.ndarray
    tgt_b: np.ndarray
    tgt_t: np.ndarray
    tgt_k: np.ndarray
    pred_b: np.ndarray
    pred_t: np.ndarray
    pred_k: np.ndarray
    pred_delta: np.ndarray
    positive: np.ndarray

    @property
    def n_targets(self) -> int:
        return self.tgt_b.size

    def target_index(self, b, t, k):
        return (np.asarray(b) * self.T + np.asarray(t)) * self.N + np.asarray(k)

    def negatives(self, i: int) -> dict[str, np.ndarray]:
        """Spatial / temporal / easy negative target indices of prediction ``i``."""
        b, k, tpos = self.pred_b[i], self.pred_k[i], self.pred_t[i] + self.pred_delta[i]
        same_b = self.tgt_b == b
        spatial = same_b & (self.tgt_k != k)
        temporal = same_b & (self.tgt_k == k) & (self.tgt_t != tpos)
        easy = ~same_b
        return {"spatial": np.flatnonzero(spatial), "temporal": np.flatnonzero(temporal),
                "easy": np.flatnonzero(easy)}

    def negative_counts(self) -> dict[str, int]:
        counts = {k: len(v) for k, v in self.negatives(0).items()}
        return counts

    def check_counts(self) -> bool:
        """Every prediction has the expected negative-set sizes."""
        expect = {"spatial": (self.N - 1) * self.T, "temporal": self.T - 1,
                  "easy": (self.B - 1) * self.N * self.T}
        for i in range(self.positive.size):
            got = self.negatives(i)
            if {k: len(v) for k, v in got.items()} != expect:
                return False
            if self.positive[i] in np.concatenate(list(got.values())):
                return False
        return True


def sample_sets(features_shape, N: int, steps, seed=None) -> ContrastiveBatch:
    """Sample N locations per video and enumerate predictions and targets.

    ``features_shape`` is the ``(B, C, T, H, W)`` shape of the (time-aligned)
    lower-level features; ``seed`` is an int or a numpy Generator.
    """
    B, _, T, H, W = features_shape
    steps = tuple(steps)
    if N > H * W:
        raise ValueError(f"N={N} locations exceed the {H}x{W} grid")
    if max(steps) >= T:
        raise ValueError(f"prediction step {max(steps)} needs more than {T} frames")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    locations = np.stack([rng.choice(H * W, size=N, replace=False) for _ in range(B)])
    tb, tt, tk = np.meshgrid(np.arange(B), np.arange(T), np.arange(N), indexing="ij")
    tgt_b, tgt_t, tgt_k = tb.ravel(), tt.ravel(), tk.ravel()
    pb, pt, pk, pd = [], [], [], []
    for d in steps:
        b, t, k = np.meshgrid(np.arange(B), np.arange(T - d), np.arange(N), indexing="ij")
        pb.append(b.ravel()); pt.append(t.ravel()); pk.append(k.ravel())
        pd.append(np.full(b.size, d))
    pred_b, pred_t, pred_k, pred_d = (np.concatenate(a) for a in (pb, pt, pk, pd))
    batch = ContrastiveBatch(B, T, N, locations, tgt_b, tgt_t, tgt_k,
                             pred_b, pred_t, pred_k, pred_d, positive=np.empty(0, dtype=np.intp))
    batch.positive = batch.target_index(pred_b, pred_t + pred_d, pred_k)
    return batch


def _grid_map(hw: np.ndarray, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour mapping of flat positions from a fine grid to a coarser one."""
    H, W = src_hw
    h, w = dst_hw
    if H % h or W % w:
        raise ShapeError(f"grids {src_hw} and {dst_hw} are not aligned")
    y, x = np.divmod(hw, W)
    return (y // (H // h)) * w + x // (W // w)


def predict_future(upper: Tensor, lower: Tensor, mlp: PredictorMLP, delta: int,
                   b, t, hw) -> Tensor:
    """Predicted lower-level vectors at ``t + delta`` from ``[upper_t, lower_t]``.

    ``upper`` and ``lower`` share B and T; ``hw`` indexes the lower grid and
    is mapped onto the (coarser) upper grid by nearest neighbour.
    """
    if upper.shape[0] != lower.shape[0] or upper.shape[2] != lower.shape[2]:
        raise ShapeError(f"misaligned levels {upper.shape} vs {lower.shape}")
    up_hw = _grid_map(np.asarray(hw), lower.shape[3:], upper.shape[3:])
    x = tn.concat([tn.gather_vectors(upper, b, t, up_hw), tn.gather_vectors(lower, b, t, hw)], axis=1)
    return mlp(x, delta)


def similarity_logits(preds: Tensor, targets: Tensor, temperature: float) -> Tensor:
    sim = tn.matmul(tn.normalize(preds, axis=1), tn.transpose(tn.normalize(targets, axis=1), (1, 0)))
    return tn.scale(sim, 1.0 / temperature)


def info_nce(preds: Tensor, targets: Tensor, positive, temperature: float) -> Tensor:
    """Mean over predictions of -log softmax(sim / tau)[positive]; the
    candidate set of each prediction is every target row."""
    return tn.cross_entropy(similarity_logits(preds, targets, temperature), positive)


def positive_retrieval_accuracy(preds, targets, positive) -> float:
    """Fraction of predictions whose positive is the unique most similar target."""
    p = preds.data if isinstance(preds, Tensor) else np.asarray(preds)
    q = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    with tn.no_grad():
        sim = similarity_logits(Tensor(p), Tensor(q), 1.0).data
    positive = np.asarray(positive)
    pos_sim = sim[np.arange(len(positive)), positive]
    sim[np.arange(len(positive)), positive] = -np.inf
    return float((pos_sim > sim.max(axis=1)).mean())


def contrastive_loss(upper: Tensor, lower: Tensor, mlp: PredictorMLP, cfg: ContrastiveConfig,
                     rng, detach_lower: bool = True):
    """Loss, index batch and retrieval accuracy for one level.

    ``lower`` must already be time-aligned with ``upper``.
    """
    if detach_lower:
        lower = lower.detach()
    batch = sample_sets(lower.shape, cfg.locations, cfg.steps, rng)
    hw_t = batch.locations[batch.tgt_b, batch.tgt_k]
    targets = tn.gather_vectors(lower, batch.tgt_b, batch.tgt_t, hw_t)
    preds = []
    for d in cfg.steps:
        sel = batch.pred_delta == d
        b, t, k = batch.pred_b[sel], batch.pred_t[sel], batch.pred_k[sel]
        preds.append(predict_future(upper, lower, mlp, d, b, t, batch.locations[b, k]))
    preds = tn.concat(preds, axis=0)
    loss = info_nce(preds, targets, batch.positive, cfg.temperature)
    acc = positive_retrieval_accuracy(preds, targets, batch.positive)
    return loss, batch, acc
