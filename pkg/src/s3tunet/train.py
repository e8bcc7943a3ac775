"""Training loop, Adam, the warm-up + cosine schedule, evaluation and prediction."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SamplePair
from .metrics import MetricReport, bce_dice_loss, dsc, metric_report
from .model import ModelConfig, S3TUNet, build, save_checkpoint
from .nn import Parameter
from .tensor import Tape


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 300
    warmup_epochs: int = 1
    min_lr_ratio: float = 1e-2
    seed: int = 0
    w_bce: float = 0.5
    w_dice: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 16
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2 for batch statistics, got {self.batch_size}")
        if not self.lr >= 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs < 0:
            problems.append(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    train_dsc: float
    val: dict | None
    wall_clock: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: S3TUNet
    log: list[TrainLogRecord]
    best_dsc: float
    best_epoch: int
    best_state: dict = field(repr=False)

    def log_dicts(self, include_wall_clock: bool = True) -> list[dict]:
        out = []
        for r in self.log:
            d = r.to_dict()
            if not include_wall_clock:
                d.pop("wall_clock")
            out.append(d)
        return out


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place. Parameter floors are enforced afterwards."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and state disagree in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        floor = getattr(p, "min_value", None)
        if floor is not None:
            np.maximum(p.data, floor, out=p.data)
    return state


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up from 0 to lr, then cosine decay to lr * min_lr_ratio at the last step."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.lr * step / warmup
    span = total - 1 - warmup
    frac = 1.0 if span <= 0 else min(1.0, (step - warmup) / span)
    floor = cfg.min_lr_ratio
    return cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------- loop

def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Index batches of one epoch. A trailing batch of one sample is dropped."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def predict_probs(model: S3TUNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode probabilities for an N x C x H x W stack."""
    model.eval()
    return np.concatenate([model(images[i:i + batch_size]).data
                           for i in range(0, len(images), batch_size)])


def evaluate(model, dataset: list[SamplePair], batch_size: int = 16) -> MetricReport:
    """Hard metrics of eval-mode predictions averaged over samples."""
    if not isinstance(model, S3TUNet):
        from .model import load_checkpoint
        model = load_checkpoint(model)
    if not dataset:
        raise ValueError("evaluate needs a nonempty dataset")
    images, masks = _stack(dataset)
    model.check_input(images)
    probs = predict_probs(model, images, batch_size)
    return metric_report(list(probs), list(masks), ids=[s.id for s in dataset])


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: list[SamplePair],
          val_set: list[SamplePair] | None = None, progress=None) -> TrainResult:
    """Seeded training; the returned model carries the best-validation-DSC weights."""
    if len(train_set) < 2:
        raise ValueError("training needs at least two samples")
    train_cfg.validate()
    seed = train_cfg.seed
    model = build(model_cfg, np.random.default_rng([seed, 0]))
    params = model.parameters()
    state = AdamState.zeros_like(params)
    x_all, y_all = _stack(train_set)
    model.check_input(x_all)
    val_set = val_set or []

    steps_per_epoch = len(batches(len(train_set), train_cfg.batch_size))
    log: list[TrainLogRecord] = []
    losses: list[float] = []
    best = (-1.0, -1, model.state_dict())
    step, lr = 0, 0.0
    if train_cfg.log_path:
        Path(train_cfg.log_path).write_text("")
    start = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        shuffle = np.random.default_rng([seed, 1, epoch])
        drop_rng = np.random.default_rng([seed, 2, epoch])
        model.train()
        epoch_losses, epoch_dsc = [], []
        for idx in batches(len(train_set), train_cfg.batch_size, shuffle):
            lr = lr_at(step, train_cfg, steps_per_epoch)
            x, y = x_all[idx], y_all[idx]
            with Tape() as tape:
                probs = model(x, drop_rng)
                loss = bce_dice_loss(probs, y, train_cfg.w_bce, train_cfg.w_dice)
            value = loss.item()
            losses.append(value)
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at epoch {epoch}, step {step}, lr {lr:.3e}; "
                    f"recent losses {losses[-10:]}"
                )
            grads = tape.backward(loss)
            adam_step(params, [grads[p] for p in params], state, lr,
                      train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            bad = [n for n, p in model.named_parameters() if not np.isfinite(p.data).all()]
            if bad:
                raise NumericalError(f"non-finite parameters {bad[:5]} after step {step}, lr {lr:.3e}")
            epoch_losses.append(value)
            epoch_dsc.append(np.mean([dsc(p, g) for p, g in zip(probs.data, y)]))
            step += 1

        val = evaluate(model, val_set, train_cfg.eval_batch_size) if val_set else None
        score = val.dsc if val is not None else float(np.mean(epoch_dsc))
        if score > best[0]:
            best = (score, epoch, model.state_dict())
            if train_cfg.checkpoint_path:
                save_checkpoint(model, train_cfg.checkpoint_path,
                                extra={"epoch": epoch, "step": step, "val_dsc": score})
        record = TrainLogRecord(
            epoch=epoch, step=step, loss=float(np.mean(epoch_losses)), lr=lr,
            train_dsc=float(np.mean(epoch_dsc)), val=val.to_dict() if val else None,
            wall_clock=time.perf_counter() - start,
        )
        log.append(record)
        if train_cfg.log_path:
            with open(train_cfg.log_path, "a") as fh:
                fh.write(json.dumps(record.to_dict()) + "\n")
        if progress is not None:
            progress(record)

    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model=model, log=log, best_dsc=best[0], best_epoch=best[1], best_state=best[2])


def predict(model, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(probability map, binary mask), both H x W, for one image already at input size."""
    if not isinstance(model, S3TUNet):
        from .model import load_checkpoint
        model = load_checkpoint(model)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    probs = predict_probs(model, arr[None])[0, 0]
    return probs, (probs >= 0.5).astype(np.float64)
