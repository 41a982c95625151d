"""Glue shared by the CLI and the experiment tests: run configs, data dirs, fit-and-score."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .climate import Dataset, DailyGridSeries, build_dataset, climatology, label_extremes, zscore_anomalies
from .errors import ConfigError, InputError
from .fileio import read_grid, read_labels_csv, read_series_csv
from .metrics import MetricsReport, evaluate_probs
from .nn import ModelConfig, SAConvNet
from .training import TrainConfig, TrainResult, predict_proba, train

SLP_FILE = "slp.grid"
GPH_FILE = "gph.grid"
PRECIP_GRID_FILE = "precip.grid"
PRECIP_FILE = "precip.csv"
TRUTH_FILE = "truth.csv"
LABELS_FILE = "labels.csv"


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run depends on besides the data and the seed."""

    model: Mapping = field(default_factory=dict)  # ModelConfig overrides
    train: TrainConfig = TrainConfig()
    clim_window: int = 15
    train_fraction: float = 0.8

    def model_config(self, arch: str) -> ModelConfig:
        return ModelConfig.for_arch(arch, **dict(self.model))

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "data": {"clim_window": self.clim_window, "train_fraction": self.train_fraction},
        }

    def digest(self, arch: str) -> str:
        blob = json.dumps({"arch": arch, **self.to_dict()}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        data = dict(d.get("data", {}))
        bad = set(data) - {"clim_window", "train_fraction"}
        if bad:
            raise ConfigError(f"unknown data config keys: {sorted(bad)}")
        model = dict(d.get("model", {}))
        ModelConfig.from_dict({**ModelConfig().to_dict(), **model})  # validate keys early
        return cls(
            model=model,
            train=TrainConfig.from_dict(d.get("train", {})),
            clim_window=int(data.get("clim_window", 15)),
            train_fraction=float(data.get("train_fraction", 0.8)),
        )


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON config ({exc})") from None
    return RunConfig.from_dict(raw)


@dataclass
class RawData:
    slp: DailyGridSeries
    gph: DailyGridSeries
    precip: np.ndarray | None
    labels: np.ndarray | None
    label_percentile: float | None
    files: dict[str, Path]


def read_data_dir(path) -> RawData:
    """Load ``slp.grid``, ``gph.grid`` and whichever of ``labels.csv`` / ``precip.csv`` exist."""
    root = Path(path)
    files = {}
    for name in (SLP_FILE, GPH_FILE):
        if not (root / name).is_file():
            raise FileNotFoundError(f"{root / name}: required grid file not found")
        files[name] = root / name
    slp, gph = read_grid(root / SLP_FILE), read_grid(root / GPH_FILE)
    precip = labels = pct = None
    if (root / PRECIP_FILE).is_file():
        files[PRECIP_FILE] = root / PRECIP_FILE
        pdates, precip = read_series_csv(root / PRECIP_FILE)
        _check_dates(pdates, slp.dates, PRECIP_FILE)
    if (root / LABELS_FILE).is_file():
        files[LABELS_FILE] = root / LABELS_FILE
        ldates, labels, pct = read_labels_csv(root / LABELS_FILE)
        _check_dates(ldates, slp.dates, LABELS_FILE)
    if precip is None and labels is None:
        raise FileNotFoundError(f"{root}: need {LABELS_FILE} or {PRECIP_FILE} for labels")
    return RawData(slp, gph, precip, labels, pct, files)


def _check_dates(dates: np.ndarray, ref: np.ndarray, name: str) -> None:
    if len(dates) != len(ref) or np.any(dates != ref):
        raise InputError(f"{name}: dates do not align with the grid files")


def anomaly_dataset(raw: RawData, labels: np.ndarray, run: RunConfig) -> Dataset:
    anoms = [zscore_anomalies(s, climatology(s, run.clim_window)) for s in (raw.slp, raw.gph)]
    return build_dataset(anoms, raw.slp.dates, labels, run.train_fraction)


def dataset_from_dir(raw: RawData, run: RunConfig, percentile: float | None = None) -> Dataset:
    """Anomaly dataset labelled from labels.csv, or from precip at ``percentile`` (default 0.95)."""
    if percentile is None and raw.labels is not None:
        ds = anomaly_dataset(raw, raw.labels, run)
        ds.meta["percentile"] = raw.label_percentile
        return ds
    if raw.precip is None:
        raise InputError("relabelling needs precip.csv in the data directory")
    m = 0.95 if percentile is None else percentile
    labels, threshold = label_extremes(raw.precip, m)
    ds = anomaly_dataset(raw, labels, run)
    ds.meta.update(percentile=m, threshold=threshold)
    return ds


def fit(dataset: Dataset, arch: str, run: RunConfig, seed: int, on_epoch=None) -> TrainResult:
    model = SAConvNet.create(run.model_config(arch), seed=seed)
    x, y = dataset.train
    return train(model, x, y, run.train_config(seed), on_epoch=on_epoch)


def score(model: SAConvNet, dataset: Dataset, split: str = "test") -> MetricsReport:
    if split == "test":
        x, y = dataset.test
    elif split == "train":
        x, y = dataset.train
    elif split == "all":
        x, y = dataset.x, dataset.y
    else:
        raise InputError(f"unknown split {split!r}")
    if len(y) == 0:
        raise InputError(f"{split} split is empty")
    return evaluate_probs(predict_proba(model, x), y, dataset.meta.get("percentile"))


def fit_and_score(dataset: Dataset, arch: str, run: RunConfig, seed: int) -> MetricsReport:
    return score(fit(dataset, arch, run, seed).model, dataset, "test")
