import csv
import io
import json

import numpy as np
import pytest

from hyperfscil.cli import main
from hyperfscil.data import SyntheticConfig, gen_synthetic, load_bundle, make_splits, write_bundle, SplitSpec

QUICK = ["--base-epochs", "2", "--inc-epochs", "1"]


def _run(argv, capsys=None):
    code = main(argv)
    out = capsys.readouterr().out if capsys else ""
    return code, out


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_gen_data(tmp_path):
    assert main(["gen-data", "--preset", "synthetic-fine", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--preset", "synthetic-fine", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 7
    for f in ("manifest.json", "images.bin", "text.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_requires_out():
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--preset", "synthetic-fine"])
    assert e.value.code != 0


def test_gen_data_seed_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HYPERFSCIL_SEED", "11")
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    assert load_bundle(tmp_path).seed == 11


def test_run_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code, text = _run(["run", "--preset", "synthetic-fine", "--seed", "1", "--out", str(out), *QUICK], capsys)
    assert code == 0 and "avg" in text
    rep = json.loads((out / "report.json").read_text())
    assert rep["ablation"] == {"hyp": True, "ssp": True}
    assert len(rep["accuracies"]) == 6
    rows = _csv((out / "metrics.csv").read_text())
    assert [int(r["session"]) for r in rows] == list(range(6))
    assert float(rows[2]["accuracy"]) == rep["accuracies"][2]
    assert (out / "heatmap_s5.csv").exists()
    # the echoed config reproduces the run byte for byte
    again = tmp_path / "again"
    assert main(["run", "--config", str(out / "config.json"), "--out", str(again)]) == 0
    assert (again / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_run_base_flags(tmp_path):
    assert main(["run", "--preset", "synthetic-fine", "--no-ssp", "--no-hyp", "--out", str(tmp_path), *QUICK]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["ablation"] == {"hyp": False, "ssp": False}
    assert rep["sim_mode"] == "cosine"


def test_run_from_bundle(tmp_path):
    main(["gen-data", "--preset", "synthetic-coarse", "--seed", "2", "--out", str(tmp_path / "d")])
    cfg = {"dataset": str(tmp_path / "d"), "preset": "synthetic-coarse", "base_epochs": 2, "inc_epochs": 1, "seed": 2}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("cfg", [{"preset": "synthetic-fine", "learning_rate": 1}, {"preset": "synthetic-fine", "tau": 0},
                                 {"preset": "synthetic-fine", "c": -1}, {"preset": "synthetic-fine", "ssp": "yes"},
                                 {"preset": "nope"}, {}])
def test_config_errors(tmp_path, cfg):
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_bad_json_and_env(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text("{")
    assert main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("HYPERFSCIL_SEED", "x")
    assert main(["run", "--preset", "synthetic-fine", "--out", str(tmp_path)]) == 2


def test_data_error_exit(tmp_path):
    assert main(["run", "--dataset", str(tmp_path / "missing"), "--preset", "synthetic-fine", "--out", str(tmp_path)]) == 3


def test_numerical_failure_exit(tmp_path):
    ds = make_splits(gen_synthetic(SyntheticConfig(num_classes=6, dim=4, subspace_dim=2)), SplitSpec(4, 1, 2, 2))
    ds.image_vecs[0, 0] = np.nan
    write_bundle(ds, tmp_path / "d")
    assert main(["run", "--dataset", str(tmp_path / "d"), "--out", str(tmp_path / "o"), *QUICK]) == 4


def test_ablate(tmp_path):
    assert main(["ablate", "--preset", "synthetic-fine", "--out", str(tmp_path), *QUICK]) == 0
    rows = _csv((tmp_path / "ablation.csv").read_text())
    assert [r["name"] for r in rows] == ["Base", "w/o SSP", "w/o Hyp", "Ours"]
    assert {"avg", "pd", "final_accuracy"} <= set(rows[0])


def test_sweep(tmp_path):
    assert main(["sweep", "--preset", "synthetic-fine", "--c-values", "0,0.5", "--out", str(tmp_path), *QUICK]) == 0
    rows = {r["metric"]: r for r in _csv((tmp_path / "curvature_sweep.csv").read_text())}
    assert rows["sim_mode"]["c=0"] == "cosine"
    assert rows["sim_mode"]["c=0.5"] == "hyperbolic"


def test_report_rows(capsys):
    code, text = _run(["report", "--row", "84.5,81.9,80.7,78.4,77.8,77.0,76.1,76.0,74.8,75.1,74.9"], capsys)
    assert code == 0
    row = _csv(text)[0]
    assert round(float(row["avg"]), 1) == 77.9 and round(float(row["pd"]), 1) == 9.6


def test_report_single_file(tmp_path, capsys):
    main(["run", "--preset", "synthetic-fine", "--out", str(tmp_path), *QUICK])
    capsys.readouterr()
    code, text = _run(["report", str(tmp_path / "report.json")], capsys)
    rows = {r["source"]: r for r in _csv(text)}
    assert code == 0
    assert float(rows["std"]["avg"]) == 0
    assert float(rows["mean"]["avg"]) == float(rows[str(tmp_path / "report.json")]["avg"])


def test_report_malformed(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"accuracies": [50, 40], "avg": 1.0}))
    assert main(["report", str(tmp_path / "r.json")]) == 3
    (tmp_path / "r.json").write_text("[]")
    assert main(["report", str(tmp_path / "r.json")]) == 3
    assert main(["report"]) == 2


def test_heatmap(tmp_path):
    main(["run", "--preset", "synthetic-coarse", "--out", str(tmp_path), *QUICK])
    assert main(["heatmap", "--report", str(tmp_path / "report.json"), "--session", "2", "--out", str(tmp_path / "h")]) == 0
    rows = list(csv.reader((tmp_path / "h" / "heatmap_s2.csv").open()))
    assert len(rows) == 1 + 21 and len(rows[0]) == 22
    assert main(["heatmap", "--report", str(tmp_path / "report.json"), "--session", "9", "--out", str(tmp_path / "h")]) == 2
