"""Progressive self-supervised training, joint multi-task training and the
evaluation probes (efficacy score, cosine KNN, linear probe)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .autodiff import backward
from .backbone import LEVELS, MotionNetwork
from .contrastive import ContrastiveConfig, contrastive_loss
from .dataio import Checkpoint, SyntheticDataset, load_checkpoint, save_checkpoint
from .flow_head import CharbonnierParams, endpoint_error, reconstruction_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "LossWeights", "TrainConfig", "TrainState", "Trainer", "STAGES", "lr_at", "sgd_step",
    "total_loss", "efficacy_score", "knn_eval", "knn_predict", "linear_probe", "fit_linear",
    "LinearModel", "StageOrderError",
    "FrozenParameterError", "UndefinedScoreError", "METRIC_COLUMNS", "write_metrics_csv",
]

STAGES = ("recon", "level1", "level2", "joint")
PROGRESSIVE = STAGES[:3]
STAGE_PREFIX = {"recon": "level0.", "level1": "level1.", "level2": "level2."}

METRIC_COLUMNS = (
    "epoch", "stage", "lr", "total", "classification", "reconstruct", "photometric",
    "smoothness", "contrastive_l1", "contrastive_l2", "retrieval_l1", "retrieval_l2",
    "neg_spatial_l1", "neg_temporal_l1", "neg_easy_l1",
    "neg_spatial_l2", "neg_temporal_l2", "neg_easy_l2", "feature_std_l1", "feature_std_l2",
    "train_accuracy",
)


class StageOrderError(RuntimeError):
    """A stage was requested before the stages it depends on."""


class FrozenParameterError(AssertionError):
    """A parameter that should be frozen changed during a stage."""


class UndefinedScoreError(ValueError):
    """Efficacy score requested with acc_train <= acc_test."""


@dataclass(frozen=True)
class LossWeights:
    reconstruct: float = 15.0
    contrastive: tuple[float, float] = (0.25, 0.25)
    zeta: float = 0.02

    def __post_init__(self):
        if self.reconstruct < 0 or self.zeta < 0 or min(self.contrastive) < 0:
            raise ValueError(f"loss weights must be >= 0: {self}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    warmup_epochs: int = 5
    epochs: int = 30
    batch_size: int = 8
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"invalid train config {self}")


@dataclass
class TrainState:
    stage: str = ""
    epoch: int = 0
    completed: list[str] = field(default_factory=list)
    frozen: set[str] = field(default_factory=set)
    running: dict[str, float] = field(default_factory=dict)


def lr_at(epoch: int, step_fraction: float, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr``, then cosine decay to 0."""
    e = epoch + step_fraction
    if e < cfg.warmup_epochs:
        return cfg.lr * e / cfg.warmup_epochs
    progress = (e - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(max(progress, 0.0), 1.0)))


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> None:
    """In-place ``v = momentum * v + g; p = p - lr * v``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else momentum * v + g
        velocity[name] = v.astype(p.dtype, copy=False)
        p.data -= p.dtype.type(lr) * velocity[name]


def total_loss(classification, reconstruct, contrastive, weights: LossWeights):
    """``L_cls + lambda * L_rec + sum_l gamma_l * L_con^l`` for tensors or floats."""
    terms = [(1.0, classification), (weights.reconstruct, reconstruct)]
    terms += list(zip(weights.contrastive, contrastive))
    if all(not isinstance(t, Tensor) for _, t in terms):
        return float(sum(w * t for w, t in terms))
    acc = None
    for w, t in terms:
        if t is None or w == 0:
            continue
        t = tn.scale(t, w) if w != 1.0 else t
        acc = t if acc is None else tn.add(acc, t)
    return acc


def _param_bytes(params: dict[str, Tensor], names) -> dict[str, bytes]:
    return {n: params[n].data.tobytes() for n in names}


class Trainer:
    """Owns a :class:`MotionNetwork`, its optimizer state and the stage log."""

    def __init__(self, net: MotionNetwork, weights: LossWeights = LossWeights(),
                 contrastive: ContrastiveConfig = ContrastiveConfig(),
                 charbonnier: CharbonnierParams = CharbonnierParams(),
                 detach_targets: bool = True, seed: int = 0):
        self.net = net
        self.weights = weights
        self.contrastive = contrastive
        self.charbonnier = charbonnier
        self.detach_targets = detach_targets
        self.mode = "with_motion" if net.motion else "baseline"
        self.rng = np.random.default_rng(seed)
        self.state = TrainState()
        self.velocity: dict[str, np.ndarray] = {}
        self.history: list[dict] = []

    # -- stage bookkeeping ------------------------------------------------

    def trainable(self, stage: str) -> list[str]:
        if stage == "joint":
            return list(self.net.params)
        prefix = STAGE_PREFIX[stage]
        return [n for n in self.net.params if n.startswith(prefix)]

    def _check_order(self, stage: str) -> None:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if stage in PROGRESSIVE:
            if not self.net.motion:
                raise StageOrderError(f"stage {stage} needs motion blocks")
            need = PROGRESSIVE[: PROGRESSIVE.index(stage)]
            missing = [s for s in need if s not in self.state.completed]
            if missing:
                raise StageOrderError(f"stage {stage} requires completed stages {missing}")

    # -- losses -------------------------------------------------------------

    def stage_loss(self, stage: str, clip: np.ndarray, labels: np.ndarray):
        w = self.weights
        metrics: dict[str, float] = {}
        if stage == "recon":
            res = self.net.forward(clip, upto=0, logits=False)
        elif stage == "level1":
            res = self.net.forward(clip, upto=1, logits=False)
        elif stage == "level2":
            res = self.net.forward(clip, upto=2, logits=False)
        else:
            res = self.net.forward(clip, mode=self.mode)

        rec = cls = None
        con = [None, None]
        if res.flow is not None and (stage == "recon" or w.reconstruct > 0):
            rec, photo, smooth = reconstruction_loss(clip, res.flow, self.charbonnier, w.zeta, parts=True)
            metrics.update(reconstruct=rec.item(), photometric=photo.item(), smoothness=smooth.item())
        for level in (1, 2):
            active = stage == f"level{level}" or (
                stage == "joint" and self.net.motion and w.contrastive[level - 1] > 0)
            if not active:
                continue
            lower = self.net.aligned_lower(res.motion[level - 1], level)
            loss, batch, acc = contrastive_loss(res.motion[level], lower, self.net.predictors[level],
                                                self.contrastive, self.rng,
                                                detach_lower=self.detach_targets or stage != "joint")
            con[level - 1] = loss
            counts = batch.negative_counts()
            metrics.update({f"contrastive_l{level}": loss.item(), f"retrieval_l{level}": acc,
                            f"neg_spatial_l{level}": counts["spatial"],
                            f"neg_temporal_l{level}": counts["temporal"],
                            f"neg_easy_l{level}": counts["easy"],
                            # collapse diagnostic: mean per-channel spread of the predicted level
                            f"feature_std_l{level}": float(res.motion[level].data.std(axis=(0, 2, 3, 4)).mean())})
        if stage == "joint":
            cls = tn.cross_entropy(res.logits, labels)
            metrics["classification"] = cls.item()
            metrics["train_accuracy"] = float((res.logits.data.argmax(1) == labels).mean())
            total = total_loss(cls, rec, con, w)
        elif stage == "recon":
            total = rec
        else:
            total = con[int(stage[-1]) - 1]
        metrics["total"] = total.item()
        return total, metrics

    # -- training -----------------------------------------------------------

    def train_stage(self, stage: str, data: SyntheticDataset, cfg: TrainConfig,
                    start_epoch: int = 0, stop_epoch: int | None = None,
                    on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
        """Run ``stage`` for epochs ``[start_epoch, stop_epoch)`` (default: all).

        Parameters of completed progressive stages are verified byte-for-byte
        after every epoch; any change raises :class:`FrozenParameterError`.
        """
        self._check_order(stage)
        stop = cfg.epochs if stop_epoch is None else stop_epoch
        trainable = set(self.trainable(stage))
        frozen = set()
        if stage in PROGRESSIVE:
            frozen = {n for n in self.net.params if n.split(".")[0] in
                      {STAGE_PREFIX[s][:-1] for s in self.state.completed if s in PROGRESSIVE}}
            self.state.frozen |= frozen
        snapshot = _param_bytes(self.net.params, frozen)
        if start_epoch == 0:
            self.velocity = {}          # fresh momentum per stage; resumes keep theirs
        for name, p in self.net.params.items():
            p.requires_grad = name in trainable
        self.state.stage = stage
        n = len(data)
        steps = n // cfg.batch_size
        if steps == 0:
            raise ValueError(f"dataset of {n} clips is smaller than one batch")
        logs = []
        for epoch in range(start_epoch, stop):
            perm = self.rng.permutation(n)
            sums: dict[str, float] = {}
            for step in range(steps):
                idx = np.sort(perm[step * cfg.batch_size: (step + 1) * cfg.batch_size])
                clip, labels = data.clips[idx], data.labels[idx]
                lr = lr_at(epoch, step / steps, cfg)
                loss, metrics = self.stage_loss(stage, clip, labels)
                backward(loss)
                grads = {name: self.net.params[name].grad for name in trainable
                         if self.net.params[name].grad is not None}
                sgd_step(self.net.params, grads, lr, cfg.momentum, self.velocity)
                for name in trainable:
                    self.net.params[name].grad = None
                for k, v in metrics.items():
                    sums[k] = sums.get(k, 0.0) + v
            row = {k: v / steps for k, v in sums.items()}
            row.update(epoch=epoch, stage=stage, lr=lr_at(epoch, 0.0, cfg))
            for k in ("neg_spatial_l1", "neg_temporal_l1", "neg_easy_l1",
                      "neg_spatial_l2", "neg_temporal_l2", "neg_easy_l2"):
                if k in row:
                    row[k] = int(round(row[k]))
            if _param_bytes(self.net.params, frozen) != snapshot:
                changed = [k for k, v in _param_bytes(self.net.params, frozen).items() if v != snapshot[k]]
                raise FrozenParameterError(f"frozen parameters changed during {stage}: {changed[:5]}")
            self.state.epoch = epoch + 1
            self.state.running = {k: v for k, v in row.items() if isinstance(v, float)}
            logs.append(row)
            self.history.append(row)
            log.info("%s epoch %d: %s", stage, epoch,
                     ", ".join(f"{k}={v:.4g}" for k, v in row.items() if isinstance(v, float)))
            if on_epoch:
                on_epoch(row)
        for p in self.net.params.values():
            p.requires_grad = False
        if stop >= cfg.epochs and stage not in self.state.completed:
            self.state.completed.append(stage)
            self.state.epoch = 0
        return logs

    # -- evaluation --------------------------------------------------------------

    def _batches(self, clips: np.ndarray, batch_size: int = 16):
        for i in range(0, len(clips), batch_size):
            yield clips[i: i + batch_size]

    def predict_logits(self, clips: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return np.concatenate([self.net.forward(c, mode=self.mode).logits.data
                                   for c in self._batches(clips)])

    def accuracy(self, data: SyntheticDataset) -> float:
        return float((self.predict_logits(data.clips).argmax(1) == data.labels).mean())

    def motion_features(self, clips: np.ndarray, level: int) -> np.ndarray:
        """Globally average-pooled ``P^level`` per clip."""
        out = []
        with tn.no_grad():
            for c in self._batches(clips):
                res = self.net.forward(c, upto=level, logits=False)
                out.append(res.motion[level].data.mean(axis=(2, 3, 4)))
        return np.concatenate(out)

    def predict_flow(self, clips: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return np.concatenate([self.net.forward(c, upto=0, logits=False).flow.data
                                   for c in self._batches(clips)])

    def flow_epe(self, data: SyntheticDataset) -> float:
        flow = self.predict_flow(data.clips)[:, :, : data.flow.shape[2]]
        return endpoint_error(flow, data.flow, data.valid)

    def retrieval_accuracy(self, data: SyntheticDataset, level: int, batch_size: int,
                           seed: int = 0) -> tuple[float, dict]:
        """Held-out positive retrieval accuracy at ``level`` and the negative-set sizes."""
        rng = np.random.default_rng(seed)
        accs, counts = [], {}
        with tn.no_grad():
            for i in range(0, len(data) - batch_size + 1, batch_size):
                res = self.net.forward(data.clips[i: i + batch_size], upto=level, logits=False)
                lower = self.net.aligned_lower(res.motion[level - 1], level)
                _, batch, acc = contrastive_loss(res.motion[level], lower, self.net.predictors[level],
                                                 self.contrastive, rng)
                accs.append(acc)
                counts = batch.negative_counts()
                counts["candidates"] = batch.n_targets
        return float(np.mean(accs)), counts

    # -- persistence ---------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        params = {n: p.data for n, p in self.net.params.items()}
        params.update({f"velocity/{n}": v for n, v in self.velocity.items()})
        meta = {"epoch": self.state.epoch, "completed": list(self.state.completed),
                "frozen": sorted(self.state.frozen),
                "rng": self.rng.bit_generator.state}
        return Checkpoint(params, stage=self.state.stage, meta=meta)

    def restore(self, ckpt: Checkpoint) -> None:
        for name, arr in ckpt.params.items():
            if name.startswith("velocity/"):
                self.velocity[name[len("velocity/"):]] = arr.astype(np.float32)
            elif name in self.net.params:
                p = self.net.params[name]
                if p.shape != arr.shape:
                    raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.shape}")
                p.data = arr.astype(p.dtype).copy()
            else:
                raise ValueError(f"unknown parameter {name} in checkpoint")
        self.state.stage = ckpt.stage
        self.state.epoch = int(ckpt.meta.get("epoch", 0))
        self.state.completed = list(ckpt.meta.get("completed", []))
        self.state.frozen = set(ckpt.meta.get("frozen", []))
        if "rng" in ckpt.meta:
            self.rng.bit_generator.state = ckpt.meta["rng"]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(save_checkpoint(self.checkpoint()))

    def load(self, path) -> None:
        with open(path, "rb") as f:
            self.restore(load_checkpoint(f.read()))


def write_metrics_csv(rows: list[dict], path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        if not append or f.tell() == 0:
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# probes


def efficacy_score(acc_train: float, acc_test: float) -> float:
    """``acc_train / (acc_train - acc_test)``; accuracies in percent."""
    if acc_train <= acc_test:
        raise UndefinedScoreError(
            f"efficacy score undefined for acc_train={acc_train} <= acc_test={acc_test}")
    return acc_train / (acc_train - acc_test)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n < tn.COSINE_EPS, 0.0, x / np.where(n < tn.COSINE_EPS, 1.0, n))


def knn_predict(train_feats, train_labels, test_feats, k: int) -> np.ndarray:
    """Cosine top-k majority vote; ties go to the tied class whose best
    neighbour is most similar."""
    train_feats = np.asarray(train_feats, dtype=np.float64)
    test_feats = np.asarray(test_feats, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if len(train_feats) == 0:
        raise ValueError("knn needs a non-empty training set")
    if not 1 <= k <= len(train_feats):
        raise ValueError(f"k={k} outside [1, {len(train_feats)}]")
    sim = _unit_rows(test_feats) @ _unit_rows(train_feats).T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    preds = []
    for nbrs in order:
        labels = train_labels[nbrs]
        classes, votes = np.unique(labels, return_counts=True)
        tied = set(classes[votes == votes.max()])
        preds.append(next(lab for lab in labels if lab in tied))   # neighbours are sorted by similarity
    return np.array(preds, dtype=train_labels.dtype)


def knn_eval(train_feats, train_labels, test_feats, test_labels, k: int) -> float:
    """Cosine top-k majority vote accuracy, in percent."""
    pred = knn_predict(train_feats, train_labels, test_feats, k)
    return 100.0 * float((pred == np.asarray(test_labels)).mean())


@dataclass
class LinearModel:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def decision(self, feats) -> np.ndarray:
        x = (np.asarray(feats, dtype=np.float64) - self.mean) / self.std
        return x @ self.weight.T + self.bias


def fit_linear(feats, labels, num_classes: int, epochs: int = 200, lr: float = 0.1,
               seed: int = 0) -> LinearModel:
    """Full-batch SGD with momentum on one linear layer over standardised features."""
    X = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels)
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-8
    rng = np.random.default_rng(seed)
    W = Tensor(rng.normal(0, 0.01, (num_classes, X.shape[1])), requires_grad=True, name="probe.w")
    b = Tensor(np.zeros(num_classes), requires_grad=True, name="probe.b")
    params = {"probe.w": W, "probe.b": b}
    velocity: dict[str, np.ndarray] = {}
    x = Tensor((X - mu) / sd)
    for _ in range(epochs):
        loss = tn.cross_entropy(tn.linear(x, W, b), y)
        backward(loss)
        sgd_step(params, {"probe.w": W.grad, "probe.b": b.grad}, lr, 0.9, velocity)
    return LinearModel(W.data.copy(), b.data.copy(), mu, sd)


def linear_probe(train_feats, train_labels, test_feats, test_labels, epochs: int = 200,
                 lr: float = 0.1, num_classes: int | None = None, seed: int = 0) -> tuple[float, float]:
    """Train a linear probe on frozen features; returns (acc_train, acc_test) in percent."""
    ytr, yte = np.asarray(train_labels), np.asarray(test_labels)
    K = num_classes or int(max(ytr.max(), yte.max())) + 1
    model = fit_linear(train_feats, ytr, K, epochs, lr, seed)

    def acc(X, y):
        return 100.0 * float((model.decision(X).argmax(1) == y).mean())

    return acc(train_feats, ytr), acc(test_feats, yte)
