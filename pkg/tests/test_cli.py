import json
import subprocess
import sys

import pytest

from nextpoi import model as lbp_model
from nextpoi.cli import build_parser, main

SYNTH = ["--n-users", "12", "--n-pois", "30", "--events-per-user", "15", "--n-categories", "3"]


@pytest.fixture
def corpus(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--seed", "7", "--out", "c.tsv", *SYNTH]) == 0
    assert main(["split", "c.tsv", "--train-out", "tr.tsv", "--test-out", "te.tsv", "--min-checkins", "1"]) == 0
    return tmp_path


def quick_train(*extra):
    return ["train", "--train", "tr.tsv", "--test", "te.tsv", "--out", "m.lbp", "--patterns", "2", "--dims", "3",
            "--epochs", "2", "--init-sigma", "0.1", "--time-bins", "6", *extra]


def test_synth_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--seed", "7", "--out", "a.tsv", *SYNTH]) == 0
    assert main(["synth", "--seed", "7", "--out", "b.tsv", *SYNTH]) == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert main(["synth", "--seed", "8", "--out", "c.tsv", *SYNTH]) == 0
    assert (tmp_path / "a.tsv").read_bytes() != (tmp_path / "c.tsv").read_bytes()


def test_train_defaults():
    args = build_parser().parse_args(["train", "--train", "x", "--out", "y"])
    assert (args.model, args.patterns, args.dims, args.lambda_theta) == ("gpdm", 6, 60, 1.0)


def test_train_default_sized_model(corpus):
    argv = ["train", "--train", "tr.tsv", "--test", "te.tsv", "--out", "big.lbp", "--model", "gpdm",
            "--patterns", "6", "--dims", "60", "--lambda", "1.0", "--epochs", "1"]
    assert main(argv) == 0
    m = lbp_model.load(corpus / "big.lbp")
    assert (m.K, m.D, m.lambda_theta, m.gate_mode) == (6, 60, 1.0, "global")
    assert m.metadata["config"]["K"] == 6


def test_pipeline_and_recommend(corpus, capsys):
    assert main(quick_train("--trace", "trace.tsv", "--model", "ppdm")) == 0
    assert main(["evaluate", "--train", "tr.tsv", "--test", "te.tsv", "--model", "m.lbp", "--out", "rep"]) == 0
    rep = json.loads((corpus / "rep.json").read_text())
    assert sorted(rep[0]["precision_at"], key=int) == ["1", "5", "10", "20"]
    assert (corpus / "trace.tsv").read_text().startswith("epoch\taudit_objective")
    m = lbp_model.load(corpus / "m.lbp")
    capsys.readouterr()
    argv = ["recommend", "--model", "m.lbp", "--user", m.user_ids[0], "--prev-poi", m.poi_ids[0],
            "--time", "1300000000", "--topn", "10"]
    assert main(argv) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 10
    scores = [float(s) for _, s in rows]
    assert scores == sorted(scores, reverse=True)
    assert all(p in m.poi_ids and p != m.poi_ids[0] for p, _ in rows)


def test_recommend_reads_model_from_environment(corpus, monkeypatch, capsys):
    assert main(quick_train()) == 0
    monkeypatch.setenv("NEXTPOI_MODEL", "m.lbp")
    m = lbp_model.load(corpus / "m.lbp")
    capsys.readouterr()
    argv = ["recommend", "--user", m.user_ids[1], "--prev-poi", m.poi_ids[2], "--time", "1300000000", "--topn", "3"]
    assert main(argv) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_manifest_and_rerun(corpus):
    assert main(quick_train()) == 0
    first = (corpus / "m.lbp").read_bytes()
    man = json.loads((corpus / "m.lbp.manifest.json").read_text())
    assert man["command"] == "train" and man["argv"][0] == "train"
    assert set(man["inputs"]) == {"tr.tsv", "te.tsv"}
    (corpus / "m.lbp").unlink()
    assert main(["--rerun", "m.lbp.manifest.json"]) == 0
    assert (corpus / "m.lbp").read_bytes() == first
    assert json.loads((corpus / "m.lbp.manifest.json").read_text())["outputs"] == man["outputs"]


def test_stats_and_fit_spatial(corpus, capsys):
    assert main(["stats", "c.tsv", "--out", "st", "--min-checkins", "1"]) == 0
    assert "tensor_sparsity" in json.loads((corpus / "st.json").read_text())
    assert main(["fit-spatial", "c.tsv", "--out", "fit.json"]) == 0
    assert json.loads((corpus / "fit.json").read_text())["a"] > 0


def test_usage_error_exit_code(capsys):
    assert main(["train", "--patterns", "two"]) == 2
    assert main([]) == 2


def test_config_error_exit_code(corpus):
    assert main(quick_train("--lambda", "0")) == 2
    assert main(["synth", "--out", "x.tsv", "--hot-term", "nowhere"]) == 2


def test_missing_file_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["ingest", "nope.tsv", "--out", "x.tsv"]) == 3
    assert "MissingFile" in capsys.readouterr().err


def test_parse_error_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.tsv").write_text("u1\tp9\t1300000000\t95.0\t0.0\n")
    assert main(["ingest", "bad.tsv", "--out", "x.tsv", "--min-checkins", "1"]) == 4
    assert "line 1" in capsys.readouterr().err
    (tmp_path / "bad.lbp").write_bytes(b"JUNKJUNKJUNK" * 10)
    assert main(["recommend", "--model", "bad.lbp", "--user", "u", "--prev-poi", "p", "--time", "1"]) == 4


def test_fingerprint_mismatch_exit_code(corpus):
    assert main(quick_train()) == 0
    assert main(["split", "c.tsv", "--train-out", "tr2.tsv", "--test-out", "te2.tsv", "--fraction", "0.6",
                 "--min-checkins", "1"]) == 0
    assert main(["evaluate", "--train", "tr2.tsv", "--test", "te2.tsv", "--model", "m.lbp"]) == 6


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "nextpoi", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("nextpoi ")


def test_divergence_exit_code(corpus, capsys):
    assert main(quick_train("--lr", "1e8", "--init-sigma", "10", "--lambda", "0.001")) == 7
    assert "TrainingDiverged" in capsys.readouterr().err
