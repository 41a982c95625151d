"""Daily grids to labelled samples.

Regional-mean precipitation is thresholded at a percentile to label
extreme days; SLP and 500-hPa GPH grids are turned into calendar-day
z-score anomalies and stacked into ``[lat, lon, 2]`` samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError

SIGMA_FLOOR = 1e-9
FEB28_KEY = 59
FEB29_KEY = 60
N_KEYS = 366

# NCEP/NCAR-R1 2.5 degree grid over the contiguous US and nearby waters
DEFAULT_LAT = np.arange(20.0, 55.0 + 1e-9, 2.5)
DEFAULT_LON = np.arange(-140.0, -55.0 + 1e-9, 2.5)
# Upper Mississippi + eastern Missouri watershed box
MIDWEST_LAT = (37.0, 48.0)
MIDWEST_LON = (-104.0, -86.0)


def as_dates(values) -> np.ndarray:
    return np.asarray(values, dtype="datetime64[D]")


@dataclass
class DailyGridSeries:
    """One variable on a fixed lat/lon grid, one field per date."""

    dates: np.ndarray  # datetime64[D], strictly increasing
    data: np.ndarray  # [n_dates, n_lat, n_lon]
    lat: np.ndarray
    lon: np.ndarray
    variable: str = "value"

    def __post_init__(self):
        self.dates = as_dates(self.dates)
        self.data = np.asarray(self.data, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        if self.dates.ndim != 1:
            raise InputError("dates must be one-dimensional")
        if np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise InputError("dates must be strictly increasing without duplicates")
        expected = (len(self.dates), len(self.lat), len(self.lon))
        if self.data.shape != expected:
            raise InputError(f"grid data shape {self.data.shape} does not match (dates, lat, lon) = {expected}")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


# ---------------------------------------------------------------------------
# percentile thresholds and labels
# ---------------------------------------------------------------------------


def percentile(x: Sequence[float], m: float) -> float:
    """Linear-interpolation percentile of ``x`` at fraction ``m``.

    Sorts ascending, sets ``k = m (n - 1)`` and interpolates between the
    zero-based neighbours ``floor(k)`` and ``ceil(k)``.
    """
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InputError("percentile of an empty array")
    if not 0.0 <= m <= 1.0:
        raise InputError(f"percentile fraction must lie in [0, 1], got {m}")
    s = np.sort(arr)
    k = m * (s.size - 1)
    f = math.floor(k)
    c = math.ceil(k)
    if f == c:
        return float(s[f])
    # the offset form is exact for equal neighbours; the clamp stops rounding
    # from stepping past s[c], which would break monotonicity in m
    return float(min(s[f] + (k - f) * (s[c] - s[f]), s[c]))


def regional_mean(series: DailyGridSeries, lat_range: tuple[float, float], lon_range: tuple[float, float]) -> np.ndarray:
    """Per-date mean over the cells whose coordinates fall inside the closed box."""
    lat_ok = (series.lat >= min(lat_range)) & (series.lat <= max(lat_range))
    lon_ok = (series.lon >= min(lon_range)) & (series.lon <= max(lon_range))
    if not lat_ok.any() or not lon_ok.any():
        raise InputError(f"box lat={lat_range} lon={lon_range} contains no grid cells")
    return series.data[:, lat_ok][:, :, lon_ok].mean(axis=(1, 2))


def label_extremes(precip: Sequence[float], m: float) -> tuple[np.ndarray, float]:
    """Label days strictly above the ``m`` percentile of ``precip``.

    Returns ``(labels, threshold)`` with labels as an int array of 0/1.
    """
    values = np.asarray(precip, dtype=np.float64)
    threshold = percentile(values, m)
    return (values > threshold).astype(np.int64), threshold


# ---------------------------------------------------------------------------
# calendar-day climatology and anomalies
# ---------------------------------------------------------------------------


def calendar_keys(dates) -> np.ndarray:
    """Leap-calendar day index 1..366 (Feb 29 = 60) with Feb 29 folded onto Feb 28."""
    d = as_dates(dates)
    years = d.astype("datetime64[Y]")
    doy0 = (d - years.astype("datetime64[D]")).astype(np.int64)
    year = years.astype(np.int64) + 1970
    leap = ((year % 4 == 0) & (year % 100 != 0)) | (year % 400 == 0)
    keys = np.where(~leap & (doy0 >= 59), doy0 + 2, doy0 + 1)
    keys[keys == FEB29_KEY] = FEB28_KEY
    return keys


@dataclass
class Climatology:
    """Per-cell, per-calendar-day mean and population standard deviation.

    Arrays are indexed ``[key - 1, lat, lon]`` for keys 1..366. The Feb 29
    slot repeats Feb 28. ``count`` is the number of samples behind each
    key; keys never observed have NaN statistics.
    """

    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray
    window: int = 0

    def lookup(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(keys) - 1
        if np.any(self.count[idx] == 0):
            missing = sorted(set((idx[self.count[idx] == 0] + 1).tolist()))
            raise InputError(f"climatology has no samples for calendar days {missing[:10]}")
        return self.mean[idx], self.std[idx]


def climatology(series: DailyGridSeries, window: int = 0) -> Climatology:
    """Calendar-day mean and population sd over all years.

    ``window`` pools samples from calendar days up to that many days away
    (circularly); 0 gives the strict per-day statistics. Short records
    need a window, since two or three samples per day make every z-score
    close to +-1.
    """
    if window < 0 or window > 182:
        raise InputError(f"climatology window must lie in [0, 182], got {window}")
    keys = calendar_keys(series.dates)
    n_lat, n_lon = series.grid_shape
    mean = np.full((N_KEYS, n_lat, n_lon), np.nan)
    std = np.full((N_KEYS, n_lat, n_lon), np.nan)
    count = np.zeros(N_KEYS, dtype=np.int64)
    present = np.unique(keys)
    targets = np.arange(1, N_KEYS + 1) if window else present
    for key in targets:
        if key == FEB29_KEY:
            continue
        if window:
            dist = np.abs(keys - key)
            dist = np.minimum(dist, N_KEYS - dist)
            sel = dist <= window
        else:
            sel = keys == key
        n = int(sel.sum())
        if n == 0:
            continue
        block = series.data[sel]
        mu = block.mean(axis=0)
        mean[key - 1] = mu
        std[key - 1] = np.sqrt(((block - mu) ** 2).mean(axis=0))
        count[key - 1] = n
    mean[FEB29_KEY - 1] = mean[FEB28_KEY - 1]
    std[FEB29_KEY - 1] = std[FEB28_KEY - 1]
    count[FEB29_KEY - 1] = count[FEB28_KEY - 1]
    return Climatology(mean, std, count, window)


def zscore_anomalies(series: DailyGridSeries, clim: Climatology) -> DailyGridSeries:
    """``(X - mu) / sigma`` per cell and day; cells with sigma < 1e-9 get 0."""
    mu, sigma = clim.lookup(calendar_keys(series.dates))
    flat = sigma < SIGMA_FLOOR
    z = (series.data - mu) / np.where(flat, 1.0, sigma)
    z[flat] = 0.0
    return DailyGridSeries(series.dates, z, series.lat, series.lon, f"{series.variable}_z")


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSample:
    date: np.datetime64
    anomalies: np.ndarray  # [lat, lon, 2]
    label: int


@dataclass
class Dataset:
    """Stacked samples in date order with a chronological train/test split."""

    dates: np.ndarray
    x: np.ndarray  # [N, lat, lon, channels]
    y: np.ndarray  # [N] int 0/1
    n_train: int
    variables: tuple[str, ...] = ("slp", "gph")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[GridSample]:
        for d, a, l in zip(self.dates, self.x, self.y):
            yield GridSample(d, a, int(l))

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[: self.n_train], self.y[: self.n_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.n_train :], self.y[self.n_train :]

    def class_counts(self) -> dict[str, dict[int, int]]:
        out = {}
        for name, (_, y) in (("train", self.train), ("test", self.test), ("all", (self.x, self.y))):
            out[name] = {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}
        return out

    def relabel(self, labels: np.ndarray) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != self.y.shape:
            raise InputError(f"label count {labels.shape} does not match dataset {self.y.shape}")
        return Dataset(self.dates, self.x, labels, self.n_train, self.variables, dict(self.meta))


def chronological_split(n: int, train_fraction: float = 0.8) -> int:
    """Number of leading (earliest) samples that go to training."""
    if not 0.0 < train_fraction < 1.0:
        raise InputError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    return int(math.floor(n * train_fraction + 1e-9))


def build_dataset(
    anomalies: Sequence[DailyGridSeries],
    label_dates,
    labels,
    train_fraction: float = 0.8,
) -> Dataset:
    """Stack per-variable anomaly grids into samples and split by date."""
    if not anomalies:
        raise InputError("need at least one anomaly series")
    ref = anomalies[0]
    for s in anomalies[1:]:
        if len(s.dates) != len(ref.dates) or np.any(s.dates != ref.dates):
            raise InputError(f"variable {s.variable!r} dates do not align with {ref.variable!r}")
        if s.grid_shape != ref.grid_shape:
            raise InputError(f"variable {s.variable!r} grid {s.grid_shape} differs from {ref.grid_shape}")
    label_dates = as_dates(label_dates)
    labels = np.asarray(labels, dtype=np.int64)
    if len(label_dates) != len(labels):
        raise InputError("label dates and labels differ in length")
    if len(label_dates) != len(ref.dates) or np.any(label_dates != ref.dates):
        raise InputError("label dates do not align with the grid dates")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    x = np.stack([s.data for s in anomalies], axis=-1)
    return Dataset(ref.dates.copy(), x, labels, chronological_split(len(labels), train_fraction), tuple(s.variable for s in anomalies))


def prepare_dataset(
    slp: DailyGridSeries,
    gph: DailyGridSeries,
    precip: Sequence[float],
    m: float = 0.95,
    clim_window: int = 0,
    train_fraction: float = 0.8,
) -> Dataset:
    """Raw grids + regional precipitation -> labelled anomaly dataset."""
    anoms = [zscore_anomalies(s, climatology(s, clim_window)) for s in (slp, gph)]
    labels, threshold = label_extremes(precip, m)
    ds = build_dataset(anoms, slp.dates, labels, train_fraction)
    ds.meta.update(threshold=threshold, percentile=m, clim_window=clim_window)
    return ds


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticData:
    slp: DailyGridSeries
    gph: DailyGridSeries
    precip_grid: DailyGridSeries
    precip: np.ndarray  # regional mean, mm/day
    extreme: np.ndarray  # planted ground-truth flags


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two trailing axes (reflect edges)."""
    radius = int(math.ceil(3 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = field
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        out = sum(w * np.take(padded, np.arange(i, i + n), axis=axis) for i, w in enumerate(taps))
    return out


def _blob(lat: np.ndarray, lon: np.ndarray, lat0: float, lon0: float, width: float) -> np.ndarray:
    d2 = (lat[:, None] - lat0) ** 2 + (lon[None, :] - lon0) ** 2
    return np.exp(-0.5 * d2 / width**2)


def synth_generate(
    seed: int,
    n_days: int,
    signal_strength: float,
    extreme_rate: float = 0.05,
    start: str = "1981-01-01",
) -> SyntheticData:
    """Deterministic synthetic SLP/GPH/precipitation record.

    Background anomalies are spatially smoothed Gaussian noise with unit
    variance. On planted extreme days (Bernoulli ``extreme_rate``) a
    trough-west / ridge-east dipole of amplitude ``signal_strength`` (in
    background standard deviations) is added to both variables, with its
    centre jittered by up to two grid cells, and regional precipitation is
    drawn from a heavy wet-day distribution. Raw fields carry a seasonal
    cycle so the climatology step has something to remove.
    """
    if n_days < 40:
        raise InputError(f"synth_generate needs n_days >= 40, got {n_days}")
    rng = np.random.default_rng(seed)
    dates = as_dates(start) + np.arange(n_days)
    lat, lon = DEFAULT_LAT, DEFAULT_LON
    extreme = rng.random(n_days) < extreme_rate

    def background() -> np.ndarray:
        z = _smooth(rng.standard_normal((n_days, lat.size, lon.size)), sigma=1.5)
        return z / z.std(axis=(1, 2), keepdims=True)

    slp_z, gph_z = background(), background()
    idx = np.flatnonzero(extreme)
    shifts = rng.integers(-2, 3, size=(idx.size, 2)) * 2.5
    for t, (dlat, dlon) in zip(idx, shifts):
        pattern = _blob(lat, lon, 40.0 + dlat, -110.0 + dlon, 5.0) - _blob(lat, lon, 42.0 + dlat, -85.0 + dlon, 5.0)
        slp_z[t] -= signal_strength * pattern
        gph_z[t] -= signal_strength * pattern

    phase = 2.0 * np.pi * (calendar_keys(dates) - 1) / N_KEYS
    season = np.cos(phase)[:, None, None]
    slp = 1013.0 + 4.0 * season + 6.0 * slp_z
    gph = 5700.0 - 80.0 * season + 60.0 * gph_z

    plat = np.arange(36.0, 49.0 + 1e-9, 1.0)
    plon = np.arange(-105.0, -85.0 + 1e-9, 1.0)
    intensity = np.where(
        extreme,
        20.0 + rng.gamma(2.0, 4.0, n_days),
        rng.gamma(0.8, 3.0, n_days),
    )
    texture = _smooth(rng.standard_normal((n_days, plat.size, plon.size)), sigma=2.0)
    texture /= texture.std(axis=(1, 2), keepdims=True)
    pgrid = np.maximum(intensity[:, None, None] * (1.0 + 0.2 * texture), 0.0)

    precip_grid = DailyGridSeries(dates, pgrid, plat, plon, "precip")
    return SyntheticData(
        slp=DailyGridSeries(dates, slp, lat, lon, "slp"),
        gph=DailyGridSeries(dates, gph, lat, lon, "gph"),
        precip_grid=precip_grid,
        precip=regional_mean(precip_grid, MIDWEST_LAT, MIDWEST_LON),
        extreme=extreme.astype(np.int64),
    )


def synthetic_dataset(
    seed: int,
    n_days: int,
    signal_strength: float,
    m: float = 0.95,
    clim_window: int = 15,
    train_fraction: float = 0.8,
) -> Dataset:
    """Synthetic record run through the full labelling/anomaly pipeline."""
    syn = synth_generate(seed, n_days, signal_strength)
    ds = prepare_dataset(syn.slp, syn.gph, syn.precip, m, clim_window, train_fraction)
    ds.meta.update(seed=seed, signal_strength=signal_strength)
    return ds
