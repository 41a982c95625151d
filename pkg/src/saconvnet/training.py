"""Mini-batch training: Adam, linear learning-rate decay, weighted cross-entropy."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, ContractError, InputError, TrainingError
from .nn import SAConvNet
from .tensor import GradTape, Tensor, clip, getitem, log, mul, record_op, tsum

logger = logging.getLogger(__name__)

CLASS_WEIGHTING = ("none", "inverse-frequency")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_max: float = 1e-2
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    class_weighting: str = "inverse-frequency"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.class_weighting not in CLASS_WEIGHTING:
            raise ConfigError(f"class_weighting must be one of {CLASS_WEIGHTING}, got {self.class_weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for ``epoch``, decaying linearly from lr_max (epoch 0) to lr_min (epoch == epochs)."""
    if not 0 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_max + (cfg.lr_min - cfg.lr_max) * epoch / cfg.epochs


def class_weights(labels: np.ndarray, scheme: str = "inverse-frequency") -> np.ndarray:
    """Per-class loss weights ``n_total / (2 n_c)``, or ones for ``"none"``."""
    labels = np.asarray(labels)
    counts = np.array([np.sum(labels == 0), np.sum(labels == 1)], dtype=np.float64)
    if np.any(counts == 0):
        raise TrainingError(
            f"training split has a single class (counts {counts.astype(int).tolist()}); "
            "class weights and the classification task are undefined"
        )
    if scheme == "none":
        return np.ones(2)
    return labels.size / (2.0 * counts)


PROB_FLOOR = 1e-12


def _check_loss_inputs(rows: Tensor, target, weights) -> tuple[np.ndarray, np.ndarray]:
    target = np.asarray(target)
    weights = np.asarray(weights, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] != target.shape[0]:
        raise InputError(f"pred {rows.shape} and target {target.shape} do not pair up")
    if not np.isin(target, np.arange(rows.shape[1])).all():
        raise InputError(f"target indices must lie in [0, {rows.shape[1]}), got {np.unique(target).tolist()}")
    return target.astype(np.int64), weights


def cross_entropy(pred: Tensor, target, weights) -> Tensor:
    """Weighted mean negative log-likelihood of the target class.

    ``-(1/B) sum_i w[y_i] log p[i, y_i]`` with probabilities clamped to
    ``[1e-12, 1]``.
    """
    target, weights = _check_loss_inputs(pred, target, weights)
    if np.any(np.abs(pred.data.sum(axis=1) - 1.0) > 1e-9):
        raise InputError("pred rows must be probability vectors summing to 1")
    b = target.shape[0]
    picked = clip(getitem(pred, (np.arange(b), target)), PROB_FLOOR, 1.0)
    return tsum(mul(log(picked), Tensor(weights[target] * (-1.0 / b), _copy=False)))


def cross_entropy_from_logits(logits: Tensor, target, weights) -> Tensor:
    """:func:`cross_entropy` of ``softmax(logits)`` as a single node.

    The value is identical. The backward pass is the unclamped
    ``w[y] (p - onehot) / B``, which differs only once a target
    probability has underflowed the clamp; there the composed form has a
    zero gradient and a saturated network could never recover.
    """
    target, weights = _check_loss_inputs(logits, target, weights)
    b = target.shape[0]
    rows = np.arange(b)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    scale = weights[target] / b
    value = -np.sum(scale * np.log(np.clip(p[rows, target], PROB_FLOOR, 1.0)))

    def backward(g):
        d = p.copy()
        d[rows, target] -= 1.0
        return (g * scale[:, None] * d,)

    return record_op(np.asarray(value), (logits,), backward)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig = TrainConfig()) -> None:
    """Bias-corrected Adam update, applied to ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: SAConvNet
    history: list[EpochRecord] = field(default_factory=list)
    class_weights: np.ndarray | None = None

    def log_lines(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.history)


def predict_proba(model: SAConvNet, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities, ``[N, num_classes]``."""
    x = np.asarray(x, dtype=np.float64)
    wts = model.weights()
    out = [model.forward(x[i : i + batch_size], weights=wts).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))


def train(
    model: SAConvNet,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train a copy of ``model`` on ``(x, y)``.

    Each epoch reshuffles with a generator seeded from ``cfg.seed``; the
    last batch may be short. Loss and accuracy in the log are running
    training-mode values (dropout active) averaged over samples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y) or len(y) == 0:
        raise InputError(f"need matching non-empty x and y, got {len(x)} and {len(y)}")
    weights = class_weights(y, cfg.class_weighting)

    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    trained = SAConvNet(model.config, model.params.copy())
    params = trained.params
    state = AdamState.zeros_like(params)
    result = TrainResult(trained, class_weights=weights)
    n = len(y)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape = GradTape()
            wts = trained.weights(tape)
            logits = trained.forward(x[idx], training=True, rng=dropout_rng, weights=wts, logits=True)
            loss = cross_entropy_from_logits(logits, y[idx], weights)
            grads = tape.backward(loss)
            adam_step(params, grads, state, lr, cfg)
            total_loss += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
        record = EpochRecord(epoch + 1, lr, total_loss / n, correct / n)
        if not math.isfinite(record.loss):
            raise TrainingError(f"loss became non-finite at epoch {record.epoch}")
        result.history.append(record)
        logger.debug("epoch %d lr=%.3g loss=%.4f acc=%.4f", record.epoch, lr, record.loss, record.train_accuracy)
        if on_epoch is not None:
            on_epoch(record)
    return result
