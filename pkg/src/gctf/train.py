"""Loss, AdamW, warmup+cosine schedule, training loop, metrics and McNemar."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Parameter, Tensor

VIOLENT, NON_VIOLENT = 0, 1


# ---------------------------------------------------------------------------
# schedule and optimiser


@dataclass
class Schedule:
    total_epochs: int = 55
    warmup_epochs: int = 5
    base_lr: float = 1e-4
    min_lr: float | None = None        # defaults to base_lr / 100

    def __post_init__(self):
        if self.min_lr is None:
            self.min_lr = self.base_lr / 100.0
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")


def lr_at(s: Schedule, epoch: float) -> float:
    """Linear warmup min_lr -> base_lr, then cosine base_lr -> min_lr."""
    if not 0 <= epoch <= s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    if epoch < s.warmup_epochs:
        return s.min_lr + (s.base_lr - s.min_lr) * epoch / s.warmup_epochs
    frac = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(p: Parameter) -> bool:
    """Norm scales, biases, gates, embeddings and the CLS token skip weight decay."""
    return p.ndim > 1 and "pos_" not in p.name


def opt_step(params: Sequence[Parameter], state: OptimState, lr: float,
             grads: Sequence[np.ndarray] | None = None) -> None:
    """AdamW: bias-corrected Adam step plus decay applied directly to weights."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        if not p.trainable:
            continue
        g = grads[i] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and decays(p):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# loss and metrics


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the leading axes."""
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    nll = T.logsumexp(logits, axis=-1) - T.tsum(logits * onehot, axis=-1)
    return T.mean(nll)


@dataclass
class EvalReport:
    top1: float                      # percent
    f1_violent: float
    f1_non_violent: float
    confusion: np.ndarray            # [true, predicted]
    loss: float = float("nan")
    predictions: np.ndarray | None = None
    n01: int | None = None
    n10: int | None = None

    @property
    def size(self) -> int:
        return int(self.confusion.sum())


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def classification_report(pred, labels, compare_to=None, loss: float = float("nan")) -> EvalReport:
    pred = np.asarray(pred, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if pred.size == 0:
        raise ValueError("empty evaluation set")
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (labels, pred), 1)
    f1 = [_f1(cm[c, c], cm[:, c].sum() - cm[c, c], cm[c, :].sum() - cm[c, c]) for c in (0, 1)]
    rep = EvalReport(100.0 * np.trace(cm) / cm.sum(), f1[0], f1[1], cm, loss, pred)
    if compare_to is not None:
        rep.n01, rep.n10 = disagreements(pred == labels, np.asarray(compare_to) == labels)
    return rep


def disagreements(correct_a, correct_b) -> tuple[int, int]:
    """(n01, n10): A wrong & B right, A right & B wrong."""
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    return int(np.sum(~a & b)), int(np.sum(a & ~b))


def predict(model, videos: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Logits for every clip, evaluated in fixed-order batches."""
    outs = []
    with T.no_grad():
        for i in range(0, len(videos), batch_size):
            outs.append(model.forward(videos[i:i + batch_size]).logits.data)
    logits = np.concatenate(outs, axis=0)
    return logits, logits.argmax(-1)


def evaluate(model, videos: np.ndarray, labels, batch_size: int = 8, compare_to=None) -> EvalReport:
    if len(videos) == 0:
        raise ValueError("empty evaluation set")
    logits, pred = predict(model, videos, batch_size)
    with T.no_grad():
        loss = cross_entropy(T.Tensor(logits), labels).item()
    return classification_report(pred, labels, compare_to, loss)


# ---------------------------------------------------------------------------
# McNemar


class McNemarResult(NamedTuple):
    p: float
    degenerate: bool = False          # no disagreements: p undefined, reported as 1


def mcnemar_exact(n01: int, n10: int) -> McNemarResult:
    """Two-sided exact McNemar test: twice the binomial(n, 1/2) lower tail.

    Computed with exact integers; the tail at min(n01, n10) includes that term
    once, and the doubled value is capped at 1.
    """
    if n01 < 0 or n10 < 0:
        raise ValueError("disagreement counts must be non-negative")
    n = n01 + n10
    if n == 0:
        return McNemarResult(1.0, True)
    k = min(n01, n10)
    if 2 * k == n:
        return McNemarResult(1.0)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    p = min(Fraction(1), Fraction(2 * tail, 2 ** n))
    return McNemarResult(float(p))


def format_p(p: float, sig: int = 3) -> str:
    return f"{p:.{sig}g}" if p >= 1e-3 else f"{p:.{sig - 1}e}"


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.loss = epoch, step, loss


@dataclass
class TrainConfig:
    epochs: int = 55
    warmup_epochs: int = 5
    lr: float = 1e-4
    min_lr: float = -1.0               # < 0 means lr / 100
    weight_decay: float = 0.05
    batch_size: int = 8
    seed: int = 0

    def schedule(self) -> Schedule:
        return Schedule(self.epochs, self.warmup_epochs, self.lr, None if self.min_lr < 0 else self.min_lr)


TRACE_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_acc", "f1_v", "f1_nv")


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    trace: list[dict]
    optim: OptimState


def train_loop(model, train_videos: np.ndarray, train_labels, val_videos: np.ndarray, val_labels,
               schedule: Schedule, seed: int = 0, batch_size: int = 8, weight_decay: float = 0.05,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch AdamW with per-step learning rate from ``schedule``.

    Keeps the parameters of the epoch with the best validation accuracy
    (ties go to the lower validation loss) and loads them back at the end.
    """
    rng = np.random.default_rng(seed)
    train_labels = np.asarray(train_labels, dtype=int)
    params = model.parameters()
    state = OptimState(weight_decay=weight_decay)
    n = len(train_videos)
    steps = math.ceil(n / batch_size)
    trace: list[dict] = []
    best = (-1.0, math.inf)
    best_state, best_epoch = model.state_dict(), -1
    for epoch in range(schedule.total_epochs):
        order = rng.permutation(n)
        losses, correct = 0.0, 0
        for i in range(steps):
            idx = order[i * batch_size:(i + 1) * batch_size]
            lr = lr_at(schedule, epoch + i / steps)
            model.zero_grad()
            try:
                out = model.forward(train_videos[idx])
                loss = cross_entropy(out.logits, train_labels[idx])
            except NonFiniteError:
                raise TrainingDiverged(epoch, epoch * steps + i, float("nan")) from None
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, epoch * steps + i, loss.item())
            T.backward(loss)
            opt_step(params, state, lr)
            losses += loss.item() * len(idx)
            correct += int(np.sum(out.classes == train_labels[idx]))
        rep = evaluate(model, val_videos, val_labels, batch_size)
        row = {"epoch": epoch, "lr": lr_at(schedule, epoch), "train_loss": losses / n,
               "train_acc": 100.0 * correct / n, "val_acc": rep.top1,
               "f1_v": rep.f1_violent, "f1_nv": rep.f1_non_violent}
        trace.append(row)
        if on_epoch:
            on_epoch(row)
        if (rep.top1, -rep.loss) > (best[0], -best[1]):
            best = (rep.top1, rep.loss)
            best_state, best_epoch = model.state_dict(), epoch
    model.zero_grad()
    model.load_state_dict(best_state)
    return TrainResult(best_state, best_epoch, trace, state)


def write_trace(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])
