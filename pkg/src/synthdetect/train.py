"""One-class training: minibatch SGD with exponential learning-rate decay,
best-model checkpointing on validation improvement, and an early-stopping
gap criterion.

Every real training sample is regressed to the constant target (default 1).
The per-epoch validation metric is a real-retention proxy: the fraction of
real validation samples scoring above a provisional threshold placed at a
lower percentile of the training-pool scores. The early-stop rule compares
that metric against the same retention on a held-back half of the validation
pool (a test proxy that avoids touching the true test set).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bayes import (
    BayesianHead,
    Detector,
    VariationalPosterior,
    elbo,
    map_objective,
)
from .evaluate import select_threshold
from .model import FineToCoarseCnn
from .preprocess import DatasetSplit, DatasetError, channel_stats, center_crop, rgb_normalize
from .tensor import GradTape, Tensor, backward


class TrainingDivergedError(ArithmeticError):
    """The loss went non-finite; learning rate or data needs attention."""


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 0.1
    epochs: int = 50
    batch_size: int = 512
    improvement_threshold: float = 0.01
    early_stop_gap: float = 0.06
    seed: int = 0
    inference_mode: str = "map"  # map | variational
    alpha: float = 1e-2
    beta: float = 100.0
    dropout_rate: float = 0.5
    hidden: int = 512
    target: float = 1.0
    percentile: float = 5.0
    n_mc: int = 1
    metric_sample_cap: int = 512

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {self.decay}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch-norm constraint)")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.inference_mode not in ("map", "variational"):
            raise ValueError(f"unknown inference_mode {self.inference_mode!r}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay^(epoch/period): one full decay factor across the epoch
    budget, strictly decreasing epoch to epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    period = max(cfg.epochs, 1)
    return cfg.lr0 * cfg.decay ** (epoch / period)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float
    proxy_metric: float
    gap: float
    snapshot: bool


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    stop_reason: str = "completed"

    def to_csv(self) -> str:
        lines = ["epoch,lr,train_loss,val_metric,snapshot_flag"]
        for s in self.epochs:
            lines.append(",".join([
                str(s.epoch), repr(s.lr), repr(s.train_loss),
                repr(s.val_metric), "1" if s.snapshot else "0"]))
        return "\n".join(lines) + "\n"


def _preprocessed(records, size, stats) -> np.ndarray:
    return np.stack([rgb_normalize(center_crop(r.pixels, size), stats)
                     for r in records])


def _scores(cnn: FineToCoarseCnn, head: BayesianHead, batch: np.ndarray,
            weights=None, chunk: int = 256) -> np.ndarray:
    out = np.empty(batch.shape[0])
    for start in range(0, batch.shape[0], chunk):
        z = cnn.forward_features(Tensor(batch[start:start + chunk]), training=False)
        if weights is None:
            vals = head.forward(z, training=False)
        else:
            vals = head.forward_with(z, weights, training=False)
        out[start:start + z.shape[0]] = vals.data
    return out


def _retention(scores: np.ndarray, gamma: float) -> float:
    return float((scores > gamma).mean()) if scores.size else 0.0


def train(cnn: FineToCoarseCnn, head: BayesianHead, split: DatasetSplit,
          cfg: TrainConfig) -> tuple[Detector, TrainReport]:
    """Run the configured number of epochs and return the best-validation
    checkpoint as a ready-to-score Detector plus the per-epoch report."""
    if not split.train:
        raise DatasetError("training split is empty")
    if any(not r.is_real for r in split.train):
        raise DatasetError("training split contains anomalous samples")
    size = cnn.config.input_size
    stats = channel_stats([center_crop(r.pixels, size) for r in split.train])
    x_train = _preprocessed(split.train, size, stats)
    val_real_records = [r for r in split.validation if r.is_real]
    if cfg.epochs > 0 and not val_real_records:
        raise DatasetError("validation split has no real samples to monitor")
    x_val = (_preprocessed(val_real_records, size, stats)
             if val_real_records else np.empty((0, 3, size, size)))
    half = len(x_val) // 2
    x_metric, x_proxy = (x_val[:half], x_val[half:]) if half else (x_val, x_val)

    pick = np.random.default_rng([cfg.seed, 777])
    n_sub = min(cfg.metric_sample_cap, len(x_train))
    sub_idx = np.sort(pick.choice(len(x_train), size=n_sub, replace=False))
    x_sub = x_train[sub_idx]

    rng = np.random.default_rng(cfg.seed)
    targets_all = np.full(len(x_train), cfg.target)
    head_params = [p for _, p in head.parameters()]
    q = None
    if cfg.inference_mode == "variational":
        q = VariationalPosterior(head)
        trainable = [p for _, p in cnn.parameters()] + q.parameters()
        score_weights = q.means
    else:
        trainable = [p for _, p in cnn.parameters()] + head_params
        score_weights = None

    def snapshot_state(gamma):
        state = {"cnn": cnn.state_arrays(), "gamma": gamma}
        if q is None:
            state["head"] = {name: p.data.copy() for name, p in head.parameters()}
        else:
            state["head"] = {name: m.data.copy()
                             for (name, _), m in zip(head.parameters(), q.means)}
        return state

    report = TrainReport()
    best_state = snapshot_state(None)
    n = len(x_train)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(n)
        losses = []
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if idx.size < 2:
                    continue  # batch-norm cannot standardize a single sample
                xb = Tensor(x_train[idx])
                yb = targets_all[idx]
                # step on the objective in squared-error units (mean per sample,
                # scaled by 1/beta) so the learning rate keeps its meaning no
                # matter how sharp the noise precision is
                scale = 1.0 / (idx.size * cfg.beta)
                with GradTape() as tape:
                    z = cnn.forward_features(xb, training=True)
                    if q is None:
                        out = head.forward(z, training=True, rng=rng)
                        loss = map_objective(out, yb, head_params,
                                             cfg.alpha, cfg.beta) * scale
                    else:
                        bound = elbo(head, q, z, yb, cfg.alpha, cfg.beta,
                                     n_mc=cfg.n_mc, rng=rng, training=True,
                                     dropout_rng=rng)
                        loss = bound * -scale
                grads = backward(loss, tape)
                losses.append(loss.item())
                for p in trainable:
                    p.assign(p.data - lr * grads[p.uid])
        except FloatingPointError as err:
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} (lr={lr:.3e}): {err}") from err

        # provisional threshold: the configured percentile of training scores,
        # floored at half the target so retention reflects fit progress until
        # scores actually reach the target's neighborhood (an unanchored
        # percentile is maximized by an untrained model)
        gamma_e = max(select_threshold(_scores(cnn, head, x_sub, score_weights),
                                       cfg.percentile), 0.5 * cfg.target)
        metric = _retention(_scores(cnn, head, x_metric, score_weights), gamma_e)
        proxy = _retention(_scores(cnn, head, x_proxy, score_weights), gamma_e)
        gap = abs(proxy - metric)
        snap = metric >= report.best_metric + cfg.improvement_threshold
        if snap:
            report.best_metric = metric
            report.best_epoch = epoch
            best_state = snapshot_state(gamma_e)
        report.epochs.append(EpochStats(
            epoch=epoch, lr=lr, train_loss=float(np.mean(losses)) if losses else 0.0,
            val_metric=metric, proxy_metric=proxy, gap=gap, snapshot=snap))
        if gap > cfg.early_stop_gap:
            report.stop_reason = "early_stop"
            break

    cnn.load_state_arrays(best_state["cnn"])
    for name, p in head.parameters():
        p.assign(best_state["head"][name])
    gamma = (select_threshold(_scores(cnn, head, x_val), cfg.percentile)
             if len(x_val) else best_state["gamma"])
    detector = Detector(cnn=cnn, head=head, norm=stats, gamma=gamma,
                        mode=cfg.inference_mode, trained=True)
    return detector, report
