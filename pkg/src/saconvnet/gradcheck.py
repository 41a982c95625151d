"""Central finite-difference check of every parameter gradient.

The forward pass is split into stages (one per AAConv block, then the
highway/dense head). A parameter can only influence its own stage and the
ones after it, so the stage input is computed once and each perturbed loss
re-runs only the tail of the network. Nothing in the finite-difference
path uses the tape.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import ModelConfig, SAConvNet, block_forward, head_forward
from .tensor import GradTape, Tensor
from .training import cross_entropy_from_logits

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Relative-error denominators are floored at DEFAULT_FLOOR * max(1, |loss|).
# The central difference carries a few ulp(loss) / (2 eps) of rounding
# noise (~1e-10 at |loss| ~ 1, eps = 1e-5), so gradients below the floor
# are judged on an absolute scale instead.
DEFAULT_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    worst_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradcheckResult:
    params: list[ParamCheck]
    tolerance: float
    eps: float
    seconds: float = 0.0
    failures: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(p.worst_rel_error for p in self.params)

    def by_layer(self) -> dict[str, float]:
        """Worst relative error per layer (parameter name minus its last component)."""
        out: dict[str, float] = {}
        for p in self.params:
            layer = p.name.rsplit(".", 1)[0]
            if ".head" in layer:
                layer = layer.split(".head")[0]
            out[layer] = max(out.get(layer, 0.0), p.worst_rel_error)
        return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck_model(config: ModelConfig | None = None, seed: int = 0) -> SAConvNet:
    """A freshly initialised model with random output weights.

    The zero-initialised dense layer would make every upstream gradient
    exactly zero, which any backward pass trivially matches.
    """
    model = SAConvNet.create(config or ModelConfig(), seed=seed)
    w = model.params["dense.w"]
    limit = np.sqrt(6.0 / sum(w.shape))
    w[...] = np.random.default_rng([seed, 1]).uniform(-limit, limit, size=w.shape)
    return model


def gradcheck_sample(seed: int = 0, config: ModelConfig | None = None) -> tuple[np.ndarray, int]:
    """One z-scored synthetic day (the first planted extreme if any) and its label."""
    from .climate import synthetic_dataset

    cfg = config or ModelConfig()
    ds = synthetic_dataset(seed, 40, 3.0)
    i = int(np.argmax(ds.y)) if ds.y.any() else 0
    x = ds.x[i]
    if x.shape != (cfg.input_h, cfg.input_w, cfg.input_d):
        x = np.random.default_rng(seed).standard_normal((cfg.input_h, cfg.input_w, cfg.input_d))
    return x, int(ds.y[i])


def _stage_of(name: str, cfg: ModelConfig) -> int:
    if name.startswith("block"):
        return int(name.split(".")[0][len("block") :])
    return cfg.blocks


def gradcheck(
    model: SAConvNet,
    x: np.ndarray,
    label: int,
    tolerance: float = DEFAULT_TOLERANCE,
    eps: float = DEFAULT_EPS,
    floor: float = DEFAULT_FLOOR,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradcheckResult:
    """Compare tape gradients with central differences for every parameter entry.

    ``max_entries`` caps how many entries per tensor are checked (a seeded
    random subset); ``None`` checks them all. Dropout is inactive.
    """
    cfg = model.config
    started = time.perf_counter()
    xb = np.asarray(x, dtype=np.float64)[None]
    target = np.array([label])
    unit = np.ones(cfg.num_classes)

    tape = GradTape()
    loss = cross_entropy_from_logits(model.forward(xb, weights=model.weights(tape), logits=True), target, unit)
    base_loss = loss.item()
    analytic = tape.backward(loss)
    floor = floor * max(1.0, abs(base_loss))

    scratch = {k: v.copy() for k, v in model.params.items()}
    wts = {k: Tensor(v.view(), _copy=False) for k, v in scratch.items()}

    stage_inputs = [Tensor(xb)]
    for i in range(cfg.blocks):
        stage_inputs.append(block_forward(cfg, wts, i, stage_inputs[-1], False, None))

    def loss_from(stage: int) -> float:
        y = stage_inputs[stage]
        for i in range(stage, cfg.blocks):
            y = block_forward(cfg, wts, i, y, False, None)
        return cross_entropy_from_logits(head_forward(cfg, wts, y, logits=True), target, unit).item()

    rng = np.random.default_rng(seed)
    result = GradcheckResult([], tolerance, eps)
    for name, arr in scratch.items():
        stage = _stage_of(name, cfg)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_from(stage)
            flat[i] = orig - eps
            down = loss_from(stage)
            flat[i] = orig
            numeric[n] = (up - down) / (2.0 * eps)
        a = analytic[name].reshape(-1)[idx]
        err = rel_error(a, numeric, floor)
        k = int(np.argmax(err))
        check = ParamCheck(
            name,
            float(err[k]),
            tuple(int(v) for v in np.unravel_index(idx[k], arr.shape)),
            float(a[k]),
            float(numeric[k]),
            int(idx.size),
        )
        result.params.append(check)
        if not check.worst_rel_error < tolerance:
            result.failures.append(check)
        logger.info("%s: worst rel error %.3g over %d entries", name, check.worst_rel_error, check.checked)
    result.seconds = time.perf_counter() - started
    return result
