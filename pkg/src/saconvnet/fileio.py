"""On-disk formats: grid series, date/value CSVs, labels, checkpoints, manifests.

Binary files share one layout: a magic/version line, one line of JSON
header, then a little-endian payload. Writers go through a temp file and
``os.replace`` so a crash never leaves a half-written artifact.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .climate import DailyGridSeries, as_dates
from .errors import FormatVersionError, InputError
from .nn import ModelConfig, ModelParams, SAConvNet

GRID_MAGIC = "SACONVNET-GRID"
GRID_VERSION = 1
CKPT_MAGIC = "SACONVNET-CKPT"
CKPT_VERSION = 1


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_header(raw: bytes, magic: str, path) -> tuple[int, dict, bytes]:
    try:
        first, second, payload = raw.split(b"\n", 2)
        tag, version = first.decode().split(" ")
        header = json.loads(second)
    except ValueError as exc:
        raise InputError(f"{path}: not a {magic} file ({exc})") from None
    if tag != magic:
        raise InputError(f"{path}: expected {magic} header, found {tag!r}")
    return int(version), header, payload


# ---------------------------------------------------------------------------
# grid series
# ---------------------------------------------------------------------------


def grid_bytes(series: DailyGridSeries) -> bytes:
    header = {
        "format_version": GRID_VERSION,
        "variable": series.variable,
        "dims": [len(series.dates), len(series.lat), len(series.lon)],
        "lat": series.lat.tolist(),
        "lon": series.lon.tolist(),
        "dates": [str(d) for d in series.dates],
        "dtype": "<f4",
        "order": "date-major, row-major (date, lat, lon)",
    }
    payload = np.ascontiguousarray(series.data, dtype="<f4").tobytes()
    return f"{GRID_MAGIC} {GRID_VERSION}\n".encode() + json.dumps(header).encode() + b"\n" + payload


def write_grid(path, series: DailyGridSeries) -> Path:
    return atomic_write(path, grid_bytes(series))


def read_grid(path) -> DailyGridSeries:
    raw = Path(path).read_bytes()
    version, header, payload = _split_header(raw, GRID_MAGIC, path)
    if version != GRID_VERSION:
        raise FormatVersionError(f"{path}: grid format version {version} unsupported (expected {GRID_VERSION})")
    dims = header["dims"]
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise InputError(f"{path}: payload has {len(payload)} bytes, header dims {dims} need {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    return DailyGridSeries(as_dates(header["dates"]), data, header["lat"], header["lon"], header["variable"])


# ---------------------------------------------------------------------------
# CSVs
# ---------------------------------------------------------------------------


def _read_csv(path, required: tuple[str, ...]) -> list[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise InputError(f"{path}: missing column {col!r} (header: {','.join(header)})")
        return [(i + 2, row) for i, row in enumerate(reader)]


def read_series_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``date,value`` CSV -> (datetime64 dates, float values)."""
    dates, values = [], []
    for line, row in _read_csv(path, ("date", "value")):
        try:
            dates.append(np.datetime64(row["date"], "D"))
            values.append(float(row["value"]))
        except (TypeError, ValueError):
            raise InputError(f"{path}:{line}: malformed row {row!r}") from None
    return as_dates(dates), np.asarray(values, dtype=np.float64)


def series_csv(dates, values) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "value"])
    for d, v in zip(as_dates(dates), values):
        w.writerow([str(d), repr(float(v))])
    return buf.getvalue()


def labels_csv(dates, labels, m: float, threshold: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "label", "threshold_percentile", "threshold"])
    for d, lab in zip(as_dates(dates), labels):
        w.writerow([str(d), int(lab), repr(float(m)), repr(float(threshold))])
    return buf.getvalue()


def read_labels_csv(path) -> tuple[np.ndarray, np.ndarray, float | None]:
    """``date,label,threshold_percentile[,threshold]`` -> (dates, labels, percentile)."""
    dates, labels, pcts = [], [], set()
    for line, row in _read_csv(path, ("date", "label", "threshold_percentile")):
        try:
            dates.append(np.datetime64(row["date"], "D"))
            lab = int(row["label"])
            pcts.add(float(row["threshold_percentile"]))
        except (TypeError, ValueError):
            raise InputError(f"{path}:{line}: malformed row {row!r}") from None
        if lab not in (0, 1):
            raise InputError(f"{path}:{line}: label must be 0 or 1, got {lab}")
        labels.append(lab)
    if len(pcts) > 1:
        raise InputError(f"{path}: mixed threshold percentiles {sorted(pcts)}")
    return as_dates(dates), np.asarray(labels, dtype=np.int64), (pcts.pop() if pcts else None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: SAConvNet, meta: Mapping | None = None) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in model.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "tensors": index,
        "meta": dict(meta or {}),
    }
    return f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode() + json.dumps(header).encode() + b"\n" + b"".join(chunks)


def save_checkpoint(path, model: SAConvNet, meta: Mapping | None = None) -> Path:
    return atomic_write(path, checkpoint_bytes(model, meta))


def load_checkpoint(path) -> tuple[SAConvNet, dict]:
    raw = Path(path).read_bytes()
    version, header, payload = _split_header(raw, CKPT_MAGIC, path)
    if version != CKPT_VERSION or header.get("format_version") != CKPT_VERSION:
        raise FormatVersionError(f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    cfg = ModelConfig.from_dict(header["config"])
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise InputError(f"{path}: tensor {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(payload[start : start + n], dtype="<f8").reshape(entry["shape"]).copy()
    try:
        params = ModelParams(cfg, arrays)
    except ValueError as exc:
        raise FormatVersionError(f"{path}: tensors do not match the stored config: {exc}") from None
    return SAConvNet(cfg, params), header.get("meta", {})


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")
