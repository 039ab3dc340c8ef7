"""
Weighted quantile loss over scoped (series, creation time, horizon) triples.

Scopes:

* overall   - every scored triple
* peak      - series with at least one peak, horizons whose target window
              contains a peak period
* post-peak - all series, horizons whose target window contains a period
              within ``W`` steps after a peak and no peak period itself
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import SeriesRecord, make_batch, window_any
from .errors import ConfigError, SpadeError, UndefinedMetricError
from .model import ForecastGrid, VariantFlag

log = logging.getLogger(__name__)

SCOPES = ("overall", "peak", "postpeak")
SCOPE_LABELS = {"overall": "Overall", "peak": "Peak", "postpeak": "PostPeak"}


@dataclass(frozen=True)
class MetricScope:
    series: str = "all"        # all | pe
    horizons: str = "all"      # all | pe | ppe
    window: int = 4

    def __post_init__(self):
        if self.series not in ("all", "pe") or self.horizons not in ("all", "pe", "ppe"):
            raise ConfigError(f"bad scope {self}")
        if self.window < 1:
            raise ConfigError(f"post-peak window must be >= 1, got {self.window}")

    @classmethod
    def named(cls, name: str, window: int = 4) -> "MetricScope":
        return {"overall": cls("all", "all", window), "peak": cls("pe", "pe", window),
                "postpeak": cls("all", "ppe", window)}[name]


@dataclass
class Targets:
    """Demand targets ``y[i, t, h]`` (NaN = not scored) plus peak indicators."""

    series_ids: list[str]
    y: np.ndarray
    peaks: np.ndarray
    horizons: tuple[tuple[int, int], ...]

    @classmethod
    def from_records(cls, records: Sequence[SeriesRecord], split: str = "eval", holdout: int = 12,
                     context_length: int = 1) -> "Targets":
        records = list(records)
        b = make_batch(records, split, context_length, holdout)
        y = np.zeros(b.target.shape)
        for i, rec in enumerate(records):  # unscaled, so exact forecasts score exactly 0
            y[i, b.offset[i]:] = np.nan_to_num(rec.target)
        return cls(list(b.series_ids), np.where(b.weight > 0, y, np.nan), b.history_mask.copy(), b.horizons)


def post_peak_periods(peaks: np.ndarray, window: int) -> np.ndarray:
    """1 at non-peak steps that follow a peak step by at most ``window`` steps."""
    peaks = np.asarray(peaks) > 0
    t_len = peaks.shape[-1]
    out = np.zeros(peaks.shape, dtype=bool)
    for lag in range(1, min(window, t_len - 1) + 1):
        out[..., lag:] |= peaks[..., :-lag]
    return out & ~peaks


def scope_mask(targets: Targets, scope: MetricScope) -> np.ndarray:
    mask = ~np.isnan(targets.y)
    if scope.series == "pe":
        mask &= (targets.peaks > 0).any(axis=1)[:, None, None]
    if scope.horizons != "all":
        pe = np.stack([window_any(p, targets.horizons) for p in targets.peaks]) > 0
        if scope.horizons == "pe":
            mask &= pe
        else:
            post = post_peak_periods(targets.peaks, scope.window)
            mask &= np.stack([window_any(p, targets.horizons) for p in post]) > 0
            mask &= ~pe
    return mask


def _aligned(targets: Targets, grid: ForecastGrid, q: float) -> np.ndarray:
    pred = grid[q]
    if pred.shape != targets.y.shape or list(grid.series_ids) != list(targets.series_ids):
        raise SpadeError(f"forecast grid {pred.shape} does not match targets {targets.y.shape}")
    return pred


def wql_terms(targets: Targets, grid: ForecastGrid, q: float, scope: MetricScope | None = None
              ) -> tuple[float, float]:
    """(numerator, denominator) of the WQL over a scope."""
    scope = scope or MetricScope()
    pred = _aligned(targets, grid, q)
    m = scope_mask(targets, scope)
    y = targets.y[m]
    d = y - pred[m]
    num = float(np.sum(q * np.maximum(d, 0.0) + (1.0 - q) * np.maximum(-d, 0.0)))
    return num, float(np.sum(y))


def wql(targets: Targets, grid: ForecastGrid, q: float, scope: MetricScope | None = None) -> float:
    scope = scope or MetricScope()
    num, den = wql_terms(targets, grid, q, scope)
    if not den > 0:
        raise UndefinedMetricError(f"WQL undefined: total demand in scope {scope} is {den}")
    return num / den


def wql_pe(targets: Targets, grid: ForecastGrid, q: float, window: int = 4) -> float:
    return wql(targets, grid, q, MetricScope("pe", "pe", window))


def wql_ppe(targets: Targets, grid: ForecastGrid, q: float, window: int = 4) -> float:
    return wql(targets, grid, q, MetricScope("all", "ppe", window))


def relative_wql(candidate: float, reference: float) -> float:
    if not reference > 0:
        raise ConfigError(f"reference WQL must be positive, got {reference}")
    return candidate / reference


def scoped_metrics(targets: Targets, grid: ForecastGrid, window: int = 4) -> dict[str, dict[str, float]]:
    """``{scope: {quantile: wql}}`` for the three standard scopes."""
    return {s: {f"{q:g}": wql(targets, grid, q, MetricScope.named(s, window)) for q in grid.quantiles}
            for s in SCOPES}


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    variants: list[str]
    seeds: list[int]
    quantiles: list[str]
    window: int
    cells: list[dict] = field(default_factory=list)
    reference: str = VariantFlag.ORIGINAL.value

    def values(self, variant: str, scope: str, q: str) -> np.ndarray:
        return np.array([c["value"] for c in self.cells
                         if c["variant"] == variant and c["scope"] == scope and c["quantile"] == q])

    def summary(self) -> dict:
        out = {}
        for v in self.variants:
            out[v] = {}
            for s in SCOPES:
                out[v][s] = {}
                for q in self.quantiles:
                    vals = self.values(v, s, q)
                    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                    out[v][s][q] = {"mean": float(np.mean(vals)), "ci95": 1.96 * sd / math.sqrt(len(vals)),
                                    "n": int(len(vals))}
        return out

    def diff(self) -> dict:
        """Percent difference of seed means against the reference variant."""
        summ = self.summary()
        ref = summ[self.reference]
        return {v: {s: {q: 100.0 * (summ[v][s][q]["mean"] - ref[s][q]["mean"]) / ref[s][q]["mean"]
                        for q in self.quantiles} for s in SCOPES} for v in self.variants}

    def to_dict(self) -> dict:
        return {"variants": self.variants, "seeds": self.seeds, "quantiles": self.quantiles,
                "window": self.window, "reference": self.reference, "cells": self.cells,
                "summary": self.summary(), "diff_percent": self.diff()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        others = [v for v in self.variants if v != self.reference]
        summ, diff = self.summary(), self.diff()
        head = ["", ""] + [f"Diff({v})" for v in others] + self.variants
        rows = [head]
        for s in SCOPES:
            for q in self.quantiles:
                label = f"P{round(float(q) * 100)} WQL"
                row = [SCOPE_LABELS[s], label]
                row += [f"{diff[v][s][q]:.3f}" for v in others]
                row += [f"{summ[v][s][q]['mean']:.4f}±{summ[v][s][q]['ci95']:.4f}" for v in self.variants]
                rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) if i > 1 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        footer = (f"mean ± 95% CI over {len(self.seeds)} seeds; Diff = % change of the mean vs "
                  f"{self.reference}; post-peak window {self.window}")
        return "\n".join(lines + ["", footer]) + "\n"


class AblationError(SpadeError):
    pass


def _run_cell(records, variant, seed, model_config, train_config, window):
    from dataclasses import replace

    from .training import train

    cfg = replace(train_config, seed=int(seed))
    model, report = train(records, variant, model_config, cfg, validate=False)
    grid = model.forecast(records, holdout=cfg.holdout)
    targets = Targets.from_records(records, "eval", cfg.holdout)
    return scoped_metrics(targets, grid, window), report.checksum


def ablation_grid(records: Sequence[SeriesRecord], variants: Sequence, seeds: Sequence[int],
                  model_config: ModelConfig, train_config: TrainConfig, window: int = 4,
                  jobs: int = 1) -> MetricReport:
    """Train every (variant, seed) cell and score it on the holdout window.

    All cells share the same hyperparameters; only the variant and the seed
    change. Raises :class:`AblationError` naming the failing cell.
    """
    if len(seeds) < 2:
        raise ConfigError("ablation needs at least 2 seeds for a confidence interval")
    if window < 1:
        raise ConfigError("post-peak window must be >= 1")
    variants = [VariantFlag.parse(v).value for v in variants]
    report = MetricReport(variants=variants, seeds=[int(s) for s in seeds],
                          quantiles=[f"{q:g}" for q in model_config.quantiles], window=window)
    if VariantFlag.ORIGINAL.value not in variants:
        report.reference = variants[0]
    cells = [(v, int(s)) for v in variants for s in seeds]
    records = list(records)

    def record(cell, result):
        metrics, checksum = result
        for scope, per_q in metrics.items():
            for q, value in per_q.items():
                report.cells.append({"variant": cell[0], "seed": cell[1], "scope": scope, "quantile": q,
                                     "value": value, "checksum": checksum})
        log.info("cell %s done: %s", cell, metrics)

    if jobs <= 1:
        for cell in cells:
            try:
                result = _run_cell(records, cell[0], cell[1], model_config, train_config, window)
            except Exception as exc:
                raise AblationError(f"cell variant={cell[0]} seed={cell[1]} failed: {exc}") from exc
            record(cell, result)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {cell: pool.submit(_run_cell, records, cell[0], cell[1], model_config,
                                         train_config, window) for cell in cells}
            for cell in cells:
                try:
                    result = futures[cell].result()
                except Exception as exc:
                    raise AblationError(f"cell variant={cell[0]} seed={cell[1]} failed: {exc}") from exc
                record(cell, result)
    return report
