"""Quantile loss, the multi-quantile training objective and the Adam training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import SampleBatch, SeriesRecord, window
from .errors import ConfigError, DataError, NumericError
from .model import SpadeModel, VariantFlag
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, pinball

log = logging.getLogger(__name__)


def quantile_loss(y: float, y_hat: float, q: float) -> float:
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile must be in (0, 1), got {q}")
    return q * max(y - y_hat, 0.0) + (1.0 - q) * max(y_hat - y, 0.0)


def objective(batch: SampleBatch, preds: Tensor, quantiles: Sequence[float]) -> Tensor:
    """Sum of quantile losses over (q, i, t, h), targets divided by span.

    ``preds`` is ``[B, T, H, Q]`` in per-period units; only (t, h) pairs with
    nonzero batch weight contribute.
    """
    expected = batch.target.shape + (len(quantiles),)
    if preds.shape != expected:
        raise DataError(f"forecast grid {list(preds.shape)} does not cover batch targets {list(expected)}")
    y = (batch.target / batch.spans)[..., None]
    w = batch.weight[..., None]
    return pinball(preds, y, np.asarray(quantiles, dtype=np.float64), w).sum()


@dataclass
class TrainReport:
    variant: str
    epoch_loss: list[float] = field(default_factory=list)
    validation_wql: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    checksum: str = ""
    config: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        """One JSON record per epoch followed by a summary record."""
        lines = [json.dumps({"epoch": i + 1, "loss": loss}) for i, loss in enumerate(self.epoch_loss)]
        lines.append(json.dumps({"summary": True, "variant": self.variant, "validation_wql": self.validation_wql,
                                 "seconds": self.seconds, "checksum": self.checksum,
                                 "config": self.config}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def train(records: Sequence[SeriesRecord], variant, model_config: ModelConfig,
          train_config: TrainConfig, validate: bool = True) -> tuple[SpadeModel, TrainReport]:
    """Fit a model with Adam on the training split of every series.

    The parameter init and the per-epoch shuffle both derive from
    ``train_config.seed``. Training samples are creation times whose target
    window ends before the last ``holdout`` periods; those periods are the
    validation window.
    """
    from .evaluation import Targets, wql  # local import: evaluation depends on training

    records = list(records)
    if not records:
        raise DataError("cannot train on an empty dataset")
    variant = VariantFlag.parse(variant)
    tc, mc = train_config, model_config
    model = SpadeModel(mc, variant, seed=tc.seed)
    rng = np.random.default_rng(tc.seed + 1)
    params = model.parameters()
    state = AdamState.for_params(params, lr=tc.learning_rate)
    report = TrainReport(variant=variant.value,
                         config={"model": asdict(mc), "train": asdict(tc)})
    start = time.perf_counter()
    full = next(window(records, mc.context_length, None, len(records), "train", tc.holdout))
    if full.weight.sum() == 0:
        raise DataError("no training samples: series too short for context/horizons/holdout")
    n_terms = full.weight.sum() * len(mc.quantiles)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(tc.epochs):
            total = 0.0
            order = rng.permutation(len(full))
            for lo in range(0, len(full), tc.batch_size):
                batch = full.take(order[lo: lo + tc.batch_size])
                if batch.weight.sum() == 0:
                    continue
                model.zero_grad()
                loss = objective(batch, model.forward(batch), mc.quantiles)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch + 1}, batch starting "
                                       f"{batch.series_ids[0]!r} (variant {variant.value}, lr {tc.learning_rate})")
                backward(loss)
                adam_step(params, [p.grad for p in params], state)
                bad = [p.name for p in params if not np.all(np.isfinite(p.data))]
                if bad:
                    raise NumericError(f"non-finite parameters {bad[:3]} after epoch {epoch + 1} update "
                                       f"(variant {variant.value}, lr {tc.learning_rate})")
                total += value
            report.epoch_loss.append(total / n_terms)
            log.info("%s epoch %d/%d loss %.5f", variant.value, epoch + 1, tc.epochs, report.epoch_loss[-1])
    if validate and tc.holdout > 0:
        grid = model.forecast(records, holdout=tc.holdout)
        targets = Targets.from_records(records, split="eval", holdout=tc.holdout)
        for q in mc.quantiles:
            report.validation_wql[f"{q:g}"] = wql(targets, grid, q)
    report.seconds = time.perf_counter() - start
    report.checksum = model.checksum()
    return model, report


Trainer = Callable[..., tuple[SpadeModel, TrainReport]]


def select_hyperparameters(records: Sequence[SeriesRecord], learning_rates: Sequence[float],
                           epochs: Sequence[int], model_config: ModelConfig, train_config: TrainConfig,
                           variant=VariantFlag.FULL, trainer: Trainer = train,
                           log_fn: Callable[[dict], None] | None = None) -> TrainConfig:
    """Grid search over learning rate x epochs on the validation window.

    Picks the lowest validation P50 + P90 WQL (all configured quantiles
    summed); ties go to fewer epochs, then the lower learning rate.
    """
    max_h = max(l + s - 1 for l, s in model_config.horizons)
    if train_config.holdout < max_h:
        raise DataError(f"validation window {train_config.holdout} is shorter than the longest "
                        f"horizon ({max_h} periods)")
    scored = []
    for lr in learning_rates:
        for ep in epochs:
            cfg = replace(train_config, learning_rate=float(lr), epochs=int(ep))
            _, report = trainer(records, variant, model_config, cfg)
            score = float(sum(report.validation_wql.values()))
            entry = {"learning_rate": cfg.learning_rate, "epochs": cfg.epochs, "score": score}
            if log_fn is not None:
                log_fn(entry)
            log.info("grid point %s", entry)
            scored.append((score, cfg.epochs, cfg.learning_rate, cfg))
    if not scored:
        raise ConfigError("empty hyperparameter grid")
    scored.sort(key=lambda s: s[:3])
    return scored[0][3]
