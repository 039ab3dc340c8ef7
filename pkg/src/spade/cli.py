"""
Command line entry point.

    spade generate  [--out DIR]                 synthetic corpus + injected peaks
    spade train     --data CSV [--variant V]    checkpoint + per-epoch report
    spade evaluate  --data CSV --checkpoint F   WQL overall / peak / post-peak
    spade ablate    --data CSV                  variant x seed grid with % diffs
    spade plot      --data CSV --forecasts F --series ID...

Global flags (--config, --seed, --out, --jobs, --set key=value,
--paper-scale) work before or after the subcommand. The resolved config is
written to ``config.json`` in every output directory.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import contaminate, load_csv, synthesize_tourism_like, write_csv
from .errors import ConfigError, DataError, NumericError, SpadeError, UndefinedMetricError
from .evaluation import AblationError, MetricScope, SCOPE_LABELS, SCOPES, Targets, ablation_grid, wql
from .model import ForecastGrid, load_checkpoint, save_checkpoint
from .plotting import forecast_svg
from .training import train

log = logging.getLogger("spade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

cfgmod.DEFAULTS.setdefault("variant", "full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    p.add_argument("--config", default=s, help="JSON file of flat dotted keys")
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--out", default=s, help="output directory")
    p.add_argument("--jobs", type=int, default=s, help="worker processes for ablate")
    p.add_argument("--set", action="append", default=s, metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--paper-scale", action="store_true", default=s,
                   help="restore full-size layer widths and kernel")
    p.add_argument("-v", "--verbose", action="store_true", default=s)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="spade", description="Peak-aware quantile forecasting", parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="synthesize and contaminate a corpus")
    g.add_argument("--n-series", type=int)
    g.add_argument("--periods", type=int)
    g.add_argument("--rate", type=float)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--data")
    t.add_argument("--variant")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the holdout window")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--forecasts", help="score a forecasts CSV instead of a checkpoint")

    a = sub.add_parser("ablate", parents=[common], help="variant x seed ablation grid")
    a.add_argument("--data")
    a.add_argument("--variants", help="comma separated, e.g. original,masked_conv,full")
    a.add_argument("--seeds", help="a count N (seeds 0..N-1) or a comma separated list")
    a.add_argument("--epochs", type=int)

    p = sub.add_parser("plot", parents=[common], help="SVG of actuals vs forecasts")
    p.add_argument("--data")
    p.add_argument("--forecasts")
    p.add_argument("--series", action="append", help="series id (repeatable)")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    flag_map = {
        "seed": "seed", "jobs": "jobs", "paper_scale": "paper_scale", "n_series": "data.n_series",
        "periods": "data.periods", "rate": "data.rate", "data": "data.path", "variant": "variant",
        "epochs": "train.epochs", "lr": "train.learning_rate", "checkpoint": "eval.checkpoint",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "forecasts", None) is not None:
        cfg["eval.forecasts" if args.command == "evaluate" else "plot.forecasts"] = args.forecasts
    if getattr(args, "variants", None):
        cfg["ablate.variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    if getattr(args, "seeds", None):
        s = args.seeds
        cfg["ablate.seeds"] = list(range(int(s))) if "," not in s else [int(x) for x in s.split(",")]
    if getattr(args, "series", None):
        cfg["plot.series"] = list(args.series)
    for item in getattr(args, "set", None) or []:
        key, value = cfgmod.parse_override(item)
        cfg[key] = value
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(getattr(args, "out", None) or f"runs/{args.command}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _load_records(cfg):
    path = cfg.get("data.path")
    if not path:
        raise ConfigError("no dataset given (use --data or data.path)")
    mc = cfgmod.model_config(cfg)
    records = load_csv(path, horizons=mc.horizons, freq=cfg["data.freq"])
    if not records:
        raise DataError(f"dataset {path} is empty")
    return records


def _configs(cfg, records):
    dims = {"n_past": records[0].past.shape[0], "n_static": len(records[0].static),
            "n_future": records[0].future.shape[0]}
    return cfgmod.model_config(cfg, **dims), cfgmod.train_config(cfg)


# ---------------------------------------------------------------------------
# forecasts CSV
# ---------------------------------------------------------------------------


def write_forecasts(grid: ForecastGrid, path: Path, lengths: dict[str, int]) -> None:
    qcols = [f"q{q:g}" for q in grid.quantiles]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "t", "lead", "span"] + qcols)
        for i, sid in enumerate(grid.series_ids):
            o = int(grid.offset[i])
            for t in range(lengths[sid]):
                for h, (lead, span) in enumerate(grid.horizons):
                    w.writerow([sid, t, lead, span] + [repr(float(v)) for v in grid.values[i, o + t, h]])


def read_forecasts(path: str | Path, records, quantiles, horizons) -> ForecastGrid:
    """Forecast CSV aligned to ``records`` (left padded like a batch)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"forecasts file not found: {path}")
    t_max = max(r.length for r in records)
    index = {r.series_id: i for i, r in enumerate(records)}
    offset = np.array([t_max - r.length for r in records])
    hpos = {tuple(h): k for k, h in enumerate(horizons)}
    values = np.full((len(records), t_max, len(horizons), len(quantiles)), np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        qcols = [f"q{q:g}" for q in quantiles]
        missing = [c for c in ["series_id", "t", "lead", "span"] + qcols if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"forecasts file lacks columns {missing}")
        for row in reader:
            sid = row["series_id"]
            if sid not in index:
                continue
            h = hpos.get((int(row["lead"]), int(row["span"])))
            if h is None:
                continue
            i = index[sid]
            values[i, offset[i] + int(row["t"]), h] = [float(row[c]) for c in qcols]
    return ForecastGrid([r.series_id for r in records], values, tuple(quantiles), tuple(horizons), offset)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    rate = float(cfg["data.rate"])
    if not 0 < rate < 1:
        raise ConfigError(f"data.rate must be in (0, 1), got {rate}")
    mc = cfgmod.model_config(cfg)
    seed = int(cfg["seed"])
    records = synthesize_tourism_like(int(cfg["data.n_series"]), int(cfg["data.periods"]), seed,
                                      mc.horizons, cfg["data.start"])
    records, labels = contaminate(records, rate, seed)
    out = _out_dir(args, cfg)
    write_csv(records, out / "data.csv")
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "timestamp", "position"])
        for rec in records:
            stamps = rec.timestamps()
            for pos in labels[rec.series_id]:
                w.writerow([rec.series_id, stamps[pos], int(pos)])
    manifest = {"seed": seed, "rate": rate, "n_series": len(records), "periods": int(cfg["data.periods"]),
                "injected_per_series": int(len(next(iter(labels.values())))),
                "files": ["data.csv", "labels.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} series to {out / 'data.csv'}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    records = _load_records(cfg)
    mc, tc = _configs(cfg, records)
    out = _out_dir(args, cfg)
    model, report = train(records, cfg["variant"], mc, tc)
    save_checkpoint(model, out / "checkpoint.bin", extra={"train": asdict(tc)})
    log.info("trained %s in %.1fs", report.variant, report.seconds)
    report.seconds = 0.0  # keep artifacts byte-stable across reruns
    report.write(out / "report.jsonl")
    print(f"trained {report.variant}: final loss {report.epoch_loss[-1]:.5f}, "
          f"validation WQL {report.validation_wql}, checksum {report.checksum[:12]}")
    return EXIT_OK


def _metrics_text(metrics: dict, label: str) -> str:
    qs = list(next(iter(metrics.values())))
    rows = [["", ""] + [label]]
    for s in SCOPES:
        for q in qs:
            v = metrics[s][q]
            rows.append([SCOPE_LABELS[s], f"P{round(float(q) * 100)} WQL", "n/a" if v is None else f"{v:.4f}"])
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in rows) + "\n"


def cmd_evaluate(args, cfg) -> int:
    records = _load_records(cfg)
    mc, tc = _configs(cfg, records)
    if cfg.get("eval.forecasts"):
        grid = read_forecasts(cfg["eval.forecasts"], records, mc.quantiles, mc.horizons)
        label = "forecasts"
    else:
        if not cfg.get("eval.checkpoint"):
            raise ConfigError("evaluate needs --checkpoint or --forecasts")
        model = load_checkpoint(cfg["eval.checkpoint"], mc)
        grid = model.forecast(records, holdout=tc.holdout)
        label = model.variant.value
    targets = Targets.from_records(records, "eval", tc.holdout)
    window = int(cfg["eval.window"])
    metrics: dict = {}
    for s in SCOPES:
        metrics[s] = {}
        for q in mc.quantiles:
            try:
                metrics[s][f"{q:g}"] = wql(targets, grid, q, MetricScope.named(s, window))
            except UndefinedMetricError as exc:
                log.warning("%s", exc)
                metrics[s][f"{q:g}"] = None
    out = _out_dir(args, cfg)
    doc = {"model": label, "holdout": tc.holdout, "window": window, "wql": metrics}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "metrics.txt").write_text(_metrics_text(metrics, label))
    if not cfg.get("eval.forecasts"):
        write_forecasts(grid, out / "forecasts.csv", {r.series_id: r.length for r in records})
    print(_metrics_text(metrics, label), end="")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    records = _load_records(cfg)
    mc, tc = _configs(cfg, records)
    out = _out_dir(args, cfg)
    report = ablation_grid(records, cfg["ablate.variants"], cfg["ablate.seeds"], mc, tc,
                           window=int(cfg["eval.window"]), jobs=int(cfg["jobs"]))
    (out / "ablation.json").write_text(report.to_json())
    (out / "ablation.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_plot(args, cfg) -> int:
    records = _load_records(cfg)
    mc, _ = _configs(cfg, records)
    wanted = cfg.get("plot.series") or []
    if not wanted:
        raise ConfigError("plot needs at least one --series")
    by_id = {r.series_id: r for r in records}
    unknown = [s for s in wanted if s not in by_id]
    if unknown:
        raise DataError(f"unknown series id(s): {unknown}")
    if not cfg.get("plot.forecasts"):
        raise ConfigError("plot needs --forecasts (written by evaluate)")
    chosen = [by_id[s] for s in wanted]
    grid = read_forecasts(cfg["plot.forecasts"], chosen, mc.quantiles, mc.horizons)
    out = _out_dir(args, cfg)
    lead, span = mc.horizons[0]
    for i, rec in enumerate(chosen):
        o = int(grid.offset[i])
        traces = {}
        for q in mc.quantiles:
            per_t = grid[q][i, o:, 0] / span
            shifted = np.full(rec.length, np.nan)
            shifted[lead:] = per_t[: rec.length - lead]
            traces[f"p{round(q * 100)}"] = shifted
        svg = forecast_svg(rec.series_id, rec.demand, rec.peak, traces,
                           title=f"{rec.series_id}: actual vs forecasts (lead {lead}, span {span})")
        (out / f"{rec.series_id}.svg").write_text(svg)
    print(f"wrote {len(chosen)} SVG file(s) to {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "plot": cmd_plot}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, AblationError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spade: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpadeError, OSError, ValueError) as exc:
        print(f"spade: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
