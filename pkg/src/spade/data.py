"""
Series records, CSV ingestion, peak masks and sample windowing.

A record keeps the raw per-period arrays (demand, peak indicator ``d``,
per-period future covariates) and derives the model-facing views from them:

* ``past``   ``[P, T]``      demand history
* ``future`` ``[F, T, H]``   channel 0 is the peak indicator of the target
                             window of horizon ``h`` issued at time ``t``;
                             the rest are per-period covariates averaged over
                             that window
* ``target`` ``[T, H]``      demand summed over ``[t+lead, t+lead+span)``,
                             NaN when the window runs past the series end
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, SchemaError

Horizon = tuple[int, int]
DEFAULT_HORIZONS: tuple[Horizon, ...] = ((1, 1), (2, 1), (3, 1))

REQUIRED_COLUMNS = ("series_id", "timestamp", "demand", "peak_indicator")
FREQUENCIES = ("D", "W", "M")


def _check_horizons(horizons: Sequence[Horizon]) -> tuple[Horizon, ...]:
    out = tuple((int(lead), int(span)) for lead, span in horizons)
    if not out:
        raise ConfigError("horizon set is empty")
    for lead, span in out:
        if lead < 1 or span < 1:
            raise ConfigError(f"horizon (lead={lead}, span={span}) must have lead >= 1 and span >= 1")
    return out


def window_any(indicator: np.ndarray, horizons: Sequence[Horizon]) -> np.ndarray:
    """``[T, H]``: 1 where any period of the target window has indicator 1."""
    t_len = len(indicator)
    csum = np.concatenate([[0], np.cumsum(indicator > 0)])
    out = np.zeros((t_len, len(horizons)))
    t = np.arange(t_len)
    for h, (lead, span) in enumerate(horizons):
        lo = np.minimum(t + lead, t_len)
        hi = np.minimum(t + lead + span, t_len)
        out[:, h] = (csum[hi] - csum[lo]) > 0
    return out


def window_sum(values: np.ndarray, horizons: Sequence[Horizon]) -> np.ndarray:
    """``[T, H]`` sums over ``[t+lead, t+lead+span)``; NaN past the end."""
    t_len = len(values)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    out = np.full((t_len, len(horizons)), np.nan)
    for h, (lead, span) in enumerate(horizons):
        n = t_len - lead - span + 1
        if n > 0:
            out[:n, h] = csum[lead + span: lead + span + n] - csum[lead: lead + n]
    return out


def _window_mean(values: np.ndarray, horizons: Sequence[Horizon]) -> np.ndarray:
    """Mean of the in-range part of each target window, 0 if fully out of range."""
    t_len = len(values)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    out = np.zeros((t_len, len(horizons)))
    t = np.arange(t_len)
    for h, (lead, span) in enumerate(horizons):
        lo = np.minimum(t + lead, t_len)
        hi = np.minimum(t + lead + span, t_len)
        n = hi - lo
        out[:, h] = np.where(n > 0, (csum[hi] - csum[lo]) / np.maximum(n, 1), 0.0)
    return out


@dataclass
class SeriesRecord:
    series_id: str
    demand: np.ndarray
    peak: np.ndarray
    horizons: tuple[Horizon, ...] = DEFAULT_HORIZONS
    static: np.ndarray = field(default_factory=lambda: np.ones(1))
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    static_names: tuple[str, ...] = ()
    start: str = "2000-01-01"
    freq: str = "M"

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=np.float64)
        self.peak = np.asarray(self.peak, dtype=np.float64)
        self.static = np.atleast_1d(np.asarray(self.static, dtype=np.float64))
        self.horizons = _check_horizons(self.horizons)
        t_len = len(self.demand)
        if self.demand.ndim != 1 or self.peak.shape != (t_len,):
            raise DataError(f"{self.series_id}: demand {self.demand.shape} and peak "
                            f"{self.peak.shape} must be equal-length vectors")
        if not np.all(np.isfinite(self.demand)) or np.any(self.demand < 0):
            raise DataError(f"{self.series_id}: demand must be finite and non-negative")
        if not np.all(np.isin(self.peak, (0.0, 1.0))):
            raise DataError(f"{self.series_id}: peak indicator must be 0/1")
        if self.covariates is None:
            self.covariates = np.zeros((0, t_len))
        self.covariates = np.asarray(self.covariates, dtype=np.float64).reshape(-1, t_len)
        if not self.covariate_names:
            self.covariate_names = tuple(f"future_{i}" for i in range(len(self.covariates)))
        if not self.static_names:
            self.static_names = tuple(f"static_{i}" for i in range(len(self.static)))

    @property
    def length(self) -> int:
        return len(self.demand)

    @property
    def past(self) -> np.ndarray:
        return self.demand[None, :]

    @property
    def future(self) -> np.ndarray:
        channels = [window_any(self.peak, self.horizons)]
        channels += [_window_mean(c, self.horizons) for c in self.covariates]
        return np.stack(channels)

    @property
    def target(self) -> np.ndarray:
        return window_sum(self.demand, self.horizons)

    def timestamps(self) -> list[str]:
        return [d.isoformat() for d in date_range(self.start, self.length, self.freq)]

    def with_demand(self, demand, peak=None) -> "SeriesRecord":
        return replace(self, demand=np.asarray(demand, dtype=np.float64).copy(),
                       peak=self.peak.copy() if peak is None else np.asarray(peak, dtype=np.float64))

    def with_horizons(self, horizons) -> "SeriesRecord":
        return replace(self, horizons=_check_horizons(horizons))


@dataclass
class PeakMask:
    history_mask: np.ndarray
    horizon_mask: np.ndarray


def build_peak_mask(record: SeriesRecord) -> PeakMask:
    if getattr(record, "peak", None) is None:
        raise DataError(f"{record.series_id}: record has no peak indicator channel")
    return PeakMask(history_mask=record.peak.copy(), horizon_mask=record.future[0])


def forward_fill(past: np.ndarray, history_mask: np.ndarray) -> np.ndarray:
    """Replace masked steps with the latest earlier unmasked value (0 if none).

    Works on a vector ``[T]`` or a matrix ``[..., T]`` with time last.
    """
    past = np.asarray(past, dtype=np.float64)
    mask = np.asarray(history_mask) > 0
    if mask.shape[-1] != past.shape[-1]:
        raise DataError(f"forward_fill: mask length {mask.shape[-1]} != series length {past.shape[-1]}")
    t = np.arange(past.shape[-1])
    last = np.maximum.accumulate(np.where(mask, -1, t), axis=-1)
    filled = np.take_along_axis(past, np.broadcast_to(np.maximum(last, 0), past.shape), axis=-1)
    return np.where(np.broadcast_to(last < 0, past.shape), 0.0, filled)


# ---------------------------------------------------------------------------
# calendar helpers
# ---------------------------------------------------------------------------


def _add_months(d: date, n: int) -> date:
    m = d.month - 1 + n
    return date(d.year + m // 12, m % 12 + 1, 1)


def step_date(d: date, freq: str, n: int = 1) -> date:
    if freq == "D":
        return d + timedelta(days=n)
    if freq == "W":
        return d + timedelta(weeks=n)
    if freq == "M":
        return _add_months(d, n)
    raise ConfigError(f"unknown frequency {freq!r}; expected one of {FREQUENCIES}")


def date_range(start: str, periods: int, freq: str) -> list[date]:
    d0 = date.fromisoformat(start)
    if freq == "M" and d0.day != 1:
        raise DataError(f"monthly timestamps must fall on the first of the month, got {start}")
    return [step_date(d0, freq, i) for i in range(periods)]


def month_phase(start: str, periods: int, freq: str) -> np.ndarray:
    """Month-of-year collapsed to a scalar in [0, 1)."""
    return np.array([(d.month - 1) / 12.0 for d in date_range(start, periods, freq)])


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(records: Sequence[SeriesRecord], path: str | Path) -> None:
    """Write records in the ingestion schema (byte-stable for equal inputs)."""
    static_names = records[0].static_names if records else ()
    cov_names = records[0].covariate_names if records else ()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + list(static_names) + list(cov_names))
        for rec in records:
            if rec.static_names != static_names or rec.covariate_names != cov_names:
                raise DataError(f"{rec.series_id}: covariate columns differ from the first record")
            static = [repr(float(v)) for v in rec.static]
            for t, stamp in enumerate(rec.timestamps()):
                w.writerow([rec.series_id, stamp, repr(float(rec.demand[t])), int(rec.peak[t]), *static,
                            *(repr(float(c[t])) for c in rec.covariates)])


def _parse_float(value: str, column: str, line: int) -> float:
    try:
        out = float(value)
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} is not numeric: {value!r}") from None
    if not math.isfinite(out):
        raise SchemaError(f"line {line}: column {column!r} is not finite: {value!r}")
    return out


def load_csv(path: str | Path, horizons: Sequence[Horizon] = DEFAULT_HORIZONS, freq: str = "M",
             schema: dict[str, str] | None = None) -> list[SeriesRecord]:
    """Read one record per ``series_id``.

    ``schema`` maps canonical column names (``series_id``, ``timestamp``,
    ``demand``, ``peak_indicator``) to the names used in the file. Columns
    prefixed ``static_`` / ``future_`` become static features and per-period
    future covariates. Rows may come in any order; duplicate timestamps and
    gaps at the declared frequency are rejected.
    """
    if freq not in FREQUENCIES:
        raise ConfigError(f"unknown frequency {freq!r}; expected one of {FREQUENCIES}")
    names = {c: (schema or {}).get(c, c) for c in REQUIRED_COLUMNS}
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        for canon, col in names.items():
            if col not in header:
                raise SchemaError(f"missing column {col!r}" + (f" (for {canon})" if col != canon else ""))
        pos = {c: header.index(col) for c, col in names.items()}
        static_cols = [i for i, h in enumerate(header) if h.startswith("static_")]
        cov_cols = [i for i, h in enumerate(header) if h.startswith("future_")]
        rows: dict[str, list] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            sid = row[pos["series_id"]]
            try:
                stamp = date.fromisoformat(row[pos["timestamp"]])
            except ValueError:
                raise SchemaError(f"line {line}: bad ISO-8601 timestamp {row[pos['timestamp']]!r}") from None
            demand = _parse_float(row[pos["demand"]], names["demand"], line)
            peak = _parse_float(row[pos["peak_indicator"]], names["peak_indicator"], line)
            static = [_parse_float(row[i], header[i], line) for i in static_cols]
            cov = [_parse_float(row[i], header[i], line) for i in cov_cols]
            rows.setdefault(sid, []).append((stamp, demand, peak, static, cov))

    records = []
    for sid, items in rows.items():
        items.sort(key=lambda r: r[0])
        stamps = [r[0] for r in items]
        for a, b in zip(stamps, stamps[1:]):
            if a == b:
                raise DataError(f"{sid}: duplicate timestamp {a.isoformat()}")
            if step_date(a, freq) != b:
                raise DataError(f"{sid}: gap or irregular step between {a.isoformat()} and {b.isoformat()}")
        if freq == "M" and stamps[0].day != 1:
            raise DataError(f"{sid}: monthly timestamps must fall on the first of the month")
        records.append(SeriesRecord(
            series_id=sid,
            demand=np.array([r[1] for r in items]),
            peak=np.array([r[2] for r in items]),
            horizons=tuple(horizons),
            static=np.array(items[0][3]) if static_cols else np.ones(1),
            covariates=np.array([r[4] for r in items]).T if cov_cols else None,
            covariate_names=tuple(header[i] for i in cov_cols),
            static_names=tuple(header[i] for i in static_cols) if static_cols else ("static_bias",),
            start=stamps[0].isoformat(),
            freq=freq,
        ))
    return records


# ---------------------------------------------------------------------------
# synthesis + contamination
# ---------------------------------------------------------------------------


def synthesize_tourism_like(n_series: int, periods: int, seed: int = 0,
                            horizons: Sequence[Horizon] = DEFAULT_HORIZONS,
                            start: str = "1998-01-01") -> list[SeriesRecord]:
    """Monthly corpus shaped like the 555-series tourism benchmark.

    Each series is ``level * (1 + a*sin(2*pi*t/12 + phase)) * lognormal``
    with per-series level, amplitude, phase and noise scale.
    """
    if n_series < 1:
        raise ConfigError("n_series must be >= 1")
    if periods < 24:
        raise ConfigError("need at least 24 periods (two seasonal cycles)")
    rng = np.random.default_rng(seed)
    t = np.arange(periods)
    phase_cov = month_phase(start, periods, "M")
    width = len(str(n_series - 1))
    records = []
    for i in range(n_series):
        level = float(np.exp(rng.normal(5.0, 1.0)))
        amp = rng.uniform(0.2, 0.6)
        phase = rng.uniform(0.0, 2 * np.pi)
        sigma = rng.uniform(0.05, 0.15)
        season = 1.0 + amp * np.sin(2 * np.pi * t / 12.0 + phase)
        demand = level * season * np.exp(rng.normal(0.0, sigma, periods))
        records.append(SeriesRecord(
            series_id=f"S{i:0{width}d}",
            demand=demand,
            peak=np.zeros(periods),
            horizons=tuple(horizons),
            static=np.array([np.log(level) / 10.0]),
            static_names=("static_log_level",),
            covariates=phase_cov[None, :],
            covariate_names=("future_phase",),
            start=start,
            freq="M",
        ))
    return records


def contamination_count(rate: float, periods: int) -> int:
    return max(1, int(math.floor(rate * periods + 0.5)))


def contaminate(records: Sequence[SeriesRecord], rate: float, seed: int = 0
                ) -> tuple[list[SeriesRecord], dict[str, np.ndarray]]:
    """Inject nonnegative spikes ``|N(0, var_i)|`` at ``max(1, round(rate*T))`` points per series.

    Injected positions are marked as peaks (``d = 1``) in the returned
    records; the second value maps series id to the sorted positions.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"contamination rate must be in (0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    out, labels = [], {}
    for rec in records:
        if rec.length < 2:
            raise DataError(f"{rec.series_id}: need at least 2 observations to contaminate")
        n = contamination_count(rate, rec.length)
        pos = np.sort(rng.choice(rec.length, size=n, replace=False))
        sigma = float(np.std(rec.demand, ddof=1))
        noise = np.abs(rng.normal(0.0, 1.0, size=n)) * sigma
        demand = rec.demand.copy()
        demand[pos] += noise
        peak = rec.peak.copy()
        peak[pos] = 1.0
        out.append(rec.with_demand(demand, peak))
        labels[rec.series_id] = pos
    return out, labels


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


SPLITS = ("train", "eval", "all")


@dataclass
class SampleBatch:
    """Left-aligned stack of series with per-(t, h) sample weights.

    Shorter series are zero padded on the left, which matches the implicit
    zero padding of the causal encoder. ``target`` is demand divided by the
    per-series ``scale``; ``weight`` is 1 on the (t, h) pairs that count as
    samples for the requested split and 0 elsewhere (including padding and
    windows that run past the series end).
    """

    series_ids: list[str]
    past: np.ndarray            # [B, P, T]
    static: np.ndarray          # [B, S]
    future: np.ndarray          # [B, F, T, H]
    target: np.ndarray          # [B, T, H]  scaled, 0 where weight is 0
    weight: np.ndarray          # [B, T, H]
    history_mask: np.ndarray    # [B, T]
    scale: np.ndarray           # [B]
    offset: np.ndarray          # [B] padding added on the left
    horizons: tuple[Horizon, ...]

    @property
    def spans(self) -> np.ndarray:
        return np.array([s for _, s in self.horizons], dtype=np.float64)

    @property
    def horizon_mask(self) -> np.ndarray:
        return self.future[:, 0]

    def __len__(self) -> int:
        return len(self.series_ids)

    def take(self, idx) -> "SampleBatch":
        idx = np.asarray(idx)
        return SampleBatch(
            series_ids=[self.series_ids[i] for i in idx],
            past=self.past[idx], static=self.static[idx], future=self.future[idx],
            target=self.target[idx], weight=self.weight[idx], history_mask=self.history_mask[idx],
            scale=self.scale[idx], offset=self.offset[idx], horizons=self.horizons,
        )


def series_scale(record: SeriesRecord, end: int) -> float:
    """Mean non-peak demand before ``end``; 1 when that is not positive."""
    keep = record.peak[:end] == 0
    vals = record.demand[:end][keep] if keep.any() else record.demand[:end]
    s = float(vals.mean()) if len(vals) else 0.0
    return s if s > 0 else 1.0


def sample_weights(length: int, horizons: Sequence[Horizon], split: str,
                   context_length: int, holdout: int) -> np.ndarray:
    """``[T, H]`` 0/1 weights selecting the creation times of a split.

    * ``train`` - at least ``context_length`` observations seen and the
      target window ends before the final ``holdout`` periods
    * ``eval``  - the target window lies inside the final ``holdout`` periods
    * ``all``   - every window that fits in the series
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    t = np.arange(length)[:, None]
    lead = np.array([l for l, _ in horizons])[None, :]
    span = np.array([s for _, s in horizons])[None, :]
    end = t + lead + span
    ok = end <= length
    if split == "train":
        ok &= (t >= context_length - 1) & (end <= length - holdout)
    elif split == "eval":
        ok &= t + lead >= length - holdout
    return ok.astype(np.float64)


def make_batch(records: Sequence[SeriesRecord], split: str = "all", context_length: int = 1,
               holdout: int = 0) -> SampleBatch:
    if not records:
        raise DataError("no records to batch")
    horizons = records[0].horizons
    for r in records:
        if r.horizons != horizons:
            raise DataError(f"{r.series_id}: horizon set differs from {records[0].series_id}")
    t_max = max(r.length for r in records)
    b, h = len(records), len(horizons)
    p = records[0].past.shape[0]
    f = records[0].future.shape[0]
    past = np.zeros((b, p, t_max))
    future = np.zeros((b, f, t_max, h))
    target = np.zeros((b, t_max, h))
    weight = np.zeros((b, t_max, h))
    hist = np.zeros((b, t_max))
    scale = np.ones(b)
    offset = np.zeros(b, dtype=np.int64)
    static = np.stack([r.static for r in records])
    for i, r in enumerate(records):
        o = t_max - r.length
        offset[i] = o
        scale[i] = series_scale(r, r.length - holdout)
        past[i, :, o:] = r.past / scale[i]
        future[i, :, o:] = r.future
        w = sample_weights(r.length, horizons, split, context_length, holdout)
        y = r.target / scale[i]
        target[i, o:] = np.where(w > 0, y, 0.0)
        weight[i, o:] = w
        hist[i, o:] = r.peak
    return SampleBatch([r.series_id for r in records], past, static, future, target, weight,
                       hist, scale, offset, horizons)


def window(records: Sequence[SeriesRecord], context_length: int,
           horizon_set: Sequence[Horizon] | None = None, batch_size: int = 32,
           split: str = "train", holdout: int = 0,
           rng: np.random.Generator | None = None) -> Iterator[SampleBatch]:
    """Yield batches of at most ``batch_size`` whole series.

    Every series must be long enough for at least one sample
    (``context_length + max(lead + span) - 1 + holdout`` periods for
    training). Order is shuffled with ``rng`` when given.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    records = list(records)
    if horizon_set is not None:
        records = [r.with_horizons(horizon_set) for r in records]
    for r in records:
        need = context_length + max(l + s for l, s in r.horizons) - 1 + (holdout if split == "train" else 0)
        if r.length < need:
            raise DataError(f"{r.series_id}: {r.length} periods, need {need} for context "
                            f"{context_length}, horizons {r.horizons}, holdout {holdout}")
    full = make_batch(records, split, context_length, holdout) if records else None
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for lo in range(0, len(records), batch_size):
        yield full.take(order[lo: lo + batch_size])
