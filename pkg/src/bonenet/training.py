"""Loss, Adam, plateau schedule, the training loop, and MAE evaluation."""

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import checkpoint as ckpt_mod
from . import tensor as T
from .data import crop_flip_normalize
from .errors import (
    DivergedTraining,
    EmptyDataset,
    InvalidConfig,
    InvalidMetric,
    ShapeMismatch,
)
from .kernels import tune_allocator


@dataclass
class TrainConfig:
    epochs: int = 130
    batch_size: int = 32
    lr0: float = 3e-4
    lr_min: float = 1e-7
    plateau_factor: float = 0.8
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "l1"
    min_delta: float = 1e-4

    def validate(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig("plateau_factor must be in (0, 1)")
        if self.lr_min > self.lr0:
            raise InvalidConfig("lr_min must not exceed lr0")
        if self.loss not in ("l1", "l2"):
            raise InvalidConfig(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.patience < 1:
            raise InvalidConfig("epochs >= 1, batch_size >= 2, patience >= 1")
        return self

    def to_dict(self):
        return asdict(self)


def loss(pred, target, kind="l1"):
    """Mean absolute or mean squared error as a scalar tape node."""
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch(f"loss shapes {pred.data.shape} vs {target.data.shape}")
    diff = T.sub(pred, target)
    if kind == "l1":
        return T.reduce_mean(T.abs_(diff))
    if kind == "l2":
        return T.reduce_mean(T.mul(diff, diff))
    raise InvalidConfig(f"unknown loss {kind!r}")


class Adam:
    """Standard Adam with bias correction; one shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PlateauState:
    best_val: float = math.inf
    epochs_since_improve: int = 0
    current_lr: float = 3e-4


def plateau_step(state, val_metric, cfg):
    """Reduce-on-plateau: after ``patience`` epochs with no improvement the
    lr shrinks by ``plateau_factor``, floored at ``lr_min``."""
    if not math.isfinite(val_metric):
        raise InvalidMetric(f"validation metric {val_metric}")
    if val_metric < state.best_val - cfg.min_delta:
        return replace(state, best_val=val_metric, epochs_since_improve=0)
    count = state.epochs_since_improve + 1
    if count >= cfg.patience:
        new_lr = max(state.current_lr * cfg.plateau_factor, cfg.lr_min)
        return replace(state, epochs_since_improve=0, current_lr=new_lr)
    return replace(state, epochs_since_improve=count)


@dataclass
class MaeReport:
    overall: float
    n: int
    groups: dict = field(default_factory=dict)  # name -> (mae, count)

    def lines(self):
        out = [f"overall,{self.overall:.9g},{self.n}"]
        for name, (mae, count) in self.groups.items():
            out.append(f"{name},{mae:.9g},{count}")
        return out


def predict(model, dataset, batch_size=64):
    """Eval-mode predictions [n, 1] using the deterministic centre crop."""
    if len(dataset) == 0:
        raise EmptyDataset("nothing to predict")
    s = model.input_size
    resized = dataset.resized(s)
    preds = []
    with T.no_grad():
        for lo in range(0, len(dataset), batch_size):
            hi = min(lo + batch_size, len(dataset))
            x = np.stack([
                crop_flip_normalize(resized[i], s, "eval") for i in range(lo, hi)
            ])
            preds.append(model.forward(x, "eval").data)
    return np.concatenate(preds, axis=0)


def mae_report(preds, dataset, group_by="none"):
    errs = np.abs(preds[:, 0] - dataset.ages)
    report = MaeReport(float(np.mean(errs)), len(dataset))
    if group_by == "gender":
        for g in ("F", "M"):
            mask = np.array([x == g for x in dataset.genders])
            if mask.any():
                report.groups[g] = (float(np.mean(errs[mask])), int(mask.sum()))
    elif group_by == "region":
        report.groups[dataset.region] = (report.overall, report.n)
    elif group_by != "none":
        raise InvalidConfig(f"unknown group_by {group_by!r}")
    return report


def evaluate(model, dataset, group_by="none", batch_size=64):
    """Eval-mode MAE in years, optionally split by gender or region."""
    return mae_report(predict(model, dataset, batch_size), dataset, group_by)


@dataclass
class TrainResult:
    history: list  # (epoch, train_loss, val_mae, lr)
    checkpoint_bytes: bytes
    best_val_mae: float
    best_epoch: int
    final_lr: float

    def history_csv(self):
        lines = ["epoch,train_loss,val_mae,lr"]
        for epoch, tl, vm, lr in self.history:
            lines.append(f"{epoch},{tl:.9g},{vm:.9g},{lr:.9g}")
        return "\n".join(lines) + "\n"


def _epoch_batches(order, batch_size):
    chunks = [order[lo:lo + batch_size] for lo in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # batch norm needs >= 2 samples; fold the orphan into the last full batch
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(model, train_set, val_set, cfg, fingerprint=b"\x00" * 32):
    """Full training run; returns history plus the best-validation checkpoint.

    Deterministic in (cfg.seed, model seed): the shuffle and every sample's
    augmentation rng are derived from (seed, epoch, index).
    """
    cfg.validate()
    tune_allocator()
    n = len(train_set)
    if n == 0 or len(val_set) == 0:
        raise EmptyDataset("train and val sets must be non-empty")
    if cfg.batch_size > n:
        raise InvalidConfig(f"batch_size {cfg.batch_size} exceeds dataset size {n}")

    s = model.input_size
    resized = train_set.resized(s)
    targets = train_set.ages
    model.reseed_dropout(cfg.seed)

    adam = Adam(model.trainable_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    state = PlateauState(current_lr=cfg.lr0)
    all_params = model.named_parameters()

    history = []
    best_val = math.inf
    best_epoch = 0
    best_bytes = None
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(epoch, 0))
        )
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for chunk in _epoch_batches(order, cfg.batch_size):
            x = np.stack([
                crop_flip_normalize(
                    resized[i], s, "train",
                    np.random.default_rng(
                        np.random.SeedSequence(cfg.seed, spawn_key=(epoch, 1 + int(i)))
                    ),
                )
                for i in chunk
            ])
            y = T.Tensor(targets[chunk][:, None])
            pred = model.forward(x, "train")
            batch_loss = loss(pred, y, cfg.loss)
            val = batch_loss.item()
            if not math.isfinite(val):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            total_loss += val * len(chunk)
            for p in all_params.values():
                p.grad = None
            batch_loss.backward()
            adam.step(state.current_lr)

        train_loss = total_loss / n
        val_mae = evaluate(model, val_set).overall
        state = plateau_step(state, val_mae, cfg)
        history.append((epoch, train_loss, val_mae, state.current_lr))
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_bytes = ckpt_mod.save_bytes(
                ckpt_mod.model_state(model), fingerprint, epoch, state.current_lr
            )

    return TrainResult(history, best_bytes, best_val, best_epoch, state.current_lr)
