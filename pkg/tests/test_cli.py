import csv
import json

import numpy as np
import pytest

from spade.cli import main, read_forecasts
from spade.data import load_csv

SMALL = ["--set", "data.n_series=6", "--set", "data.periods=48", "--rate", "0.15"]
TOY = ["--set", "model.context_length=12", "--set", "train.holdout=6", "--set", "model.conv_layers=3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--out", str(out), "--seed", "3"] + SMALL) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", "--data", str(corpus / "data.csv"), "--out", str(out), "--epochs", "2"] + TOY)
    assert rc == 0
    return out


def test_generate_outputs(corpus):
    for name in ("data.csv", "labels.csv", "manifest.json", "config.json"):
        assert (corpus / name).exists()
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["rate"] == 0.15
    records = load_csv(corpus / "data.csv", ((1, 1), (2, 1), (3, 1)))
    with open(corpus / "labels.csv") as fh:
        labels = list(csv.DictReader(fh))
    peaks = {(r.series_id, int(i)) for r in records for i in np.flatnonzero(r.peak)}
    assert peaks == {(row["series_id"], int(row["position"])) for row in labels}


def test_generate_is_byte_identical(corpus, tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--seed", "3"] + SMALL) == 0
    for name in ("data.csv", "labels.csv", "manifest.json", "config.json"):
        assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()


def test_generate_rejects_zero_rate(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--rate", "0"] + SMALL[:4]) == 1


def test_train_outputs_and_determinism(corpus, trained, tmp_path):
    lines = (trained / "report.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines[:-1]] == [1, 2]
    assert json.loads(lines[-1])["variant"] == "full"
    rc = main(["train", "--data", str(corpus / "data.csv"), "--out", str(tmp_path), "--epochs", "2"] + TOY)
    assert rc == 0
    for name in ("checkpoint.bin", "report.jsonl", "config.json"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_global_flags_after_subcommand_and_config_echo(corpus, tmp_path):
    rc = main(["--seed", "5", "train", "--data", str(corpus / "data.csv"), "--out", str(tmp_path),
               "--epochs", "1", "--variant", "original"] + TOY)
    assert rc == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["seed"] == 5 and cfg["variant"] == "original" and cfg["train.epochs"] == 1


def test_evaluate_checkpoint(corpus, trained, tmp_path):
    rc = main(["evaluate", "--data", str(corpus / "data.csv"), "--checkpoint", str(trained / "checkpoint.bin"),
               "--out", str(tmp_path)] + TOY)
    assert rc == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert set(doc["wql"]) == {"overall", "peak", "postpeak"}
    assert doc["wql"]["overall"]["0.5"] > 0
    assert (tmp_path / "metrics.txt").read_text().startswith(" ")
    records = load_csv(corpus / "data.csv", ((1, 1), (2, 1), (3, 1)))
    grid = read_forecasts(tmp_path / "forecasts.csv", records, (0.5, 0.9), ((1, 1), (2, 1), (3, 1)))
    assert np.isfinite(grid.values).all()
    assert (grid.values[..., 0] <= grid.values[..., 1]).all()


def test_evaluate_perfect_stub_scores_zero(corpus, tmp_path):
    records = load_csv(corpus / "data.csv", ((1, 1), (2, 1), (3, 1)))
    stub = tmp_path / "stub.csv"
    with open(stub, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "t", "lead", "span", "q0.5", "q0.9"])
        for r in records:
            for t in range(r.length):
                for h, (lead, span) in enumerate(r.horizons):
                    w.writerow([r.series_id, t, lead, span, r.target[t, h], r.target[t, h]])
    out = tmp_path / "eval"
    assert main(["evaluate", "--data", str(corpus / "data.csv"), "--forecasts", str(stub),
                 "--out", str(out)] + TOY) == 0
    doc = json.loads((out / "metrics.json").read_text())
    for scope in doc["wql"].values():
        for v in scope.values():
            assert v == 0.0


def test_evaluate_errors(corpus, trained, tmp_path):
    data = str(corpus / "data.csv")
    assert main(["evaluate", "--data", data, "--checkpoint", str(tmp_path / "none.bin"),
                 "--out", str(tmp_path)] + TOY) == 2
    # a different context length changes the conv kernel shape
    assert main(["evaluate", "--data", data, "--checkpoint", str(trained / "checkpoint.bin"),
                 "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--data", str(tmp_path / "missing.csv"), "--checkpoint",
                 str(trained / "checkpoint.bin"), "--out", str(tmp_path)] + TOY) == 2


def test_train_non_finite_loss_exits_3(corpus, tmp_path):
    rc = main(["train", "--data", str(corpus / "data.csv"), "--out", str(tmp_path), "--epochs", "3",
               "--lr", "1e300"] + TOY)
    assert rc == 3


def test_schema_error_names_column(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("series_id,timestamp,demand\nA,1998-01-01,1.0\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "peak_indicator" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--nope"], ["--set", "nokey=1", "generate"]])
def test_usage_errors_exit_1(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv else argv) == 1


def test_ablate_small(corpus, tmp_path):
    rc = main(["ablate", "--data", str(corpus / "data.csv"), "--out", str(tmp_path), "--epochs", "1",
               "--seeds", "2", "--variants", "original,masked_conv"] + TOY)
    assert rc == 0
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert doc["variants"] == ["original", "masked_conv"] and doc["seeds"] == [0, 1]
    assert "Diff(masked_conv)" in (tmp_path / "ablation.txt").read_text()


def test_plot(corpus, trained, tmp_path):
    data = str(corpus / "data.csv")
    ev = tmp_path / "eval"
    assert main(["evaluate", "--data", data, "--checkpoint", str(trained / "checkpoint.bin"),
                 "--out", str(ev)] + TOY) == 0
    out = tmp_path / "plots"
    assert main(["plot", "--data", data, "--forecasts", str(ev / "forecasts.csv"), "--series", "S0",
                 "--series", "S1", "--out", str(out)] + TOY) == 0
    svg = (out / "S0.svg").read_text()
    assert svg.startswith("<svg") and 'class="peak"' in svg and 'class="p50"' in svg
    assert main(["plot", "--data", data, "--forecasts", str(ev / "forecasts.csv"), "--series", "ZZZ",
                 "--out", str(out)] + TOY) == 2
