import json

import numpy as np
import pytest

from nicaimpute import cli
from nicaimpute.data import load_csv, read_mask

TABLE = "a,b,c\n1,2,x\n,3,y\n3,,x\n4,5,y\n2,1,x\n6,4,y\n"
COMPLETE = "a,b,c\n1,2,0.5\n2,3,1.5\n3,1,2.5\n4,5,3.25\n5,4,4\n6,6,5.5\n"


@pytest.fixture
def table(tmp_path):
    p = tmp_path / "in.csv"
    p.write_text(TABLE)
    return p


@pytest.fixture
def complete(tmp_path):
    p = tmp_path / "full.csv"
    p.write_text(COMPLETE)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_ampute_rate_zero_is_identity(complete, tmp_path):
    assert run("ampute", complete, "--rate", 0, "--out-data", tmp_path / "o.csv", "--out-mask", tmp_path / "m.csv") == 0
    assert (tmp_path / "o.csv").read_text() == COMPLETE
    assert read_mask(tmp_path / "m.csv").all()


def test_ampute_blanks_match_mask_and_are_seeded(complete, tmp_path):
    for tag in ("1", "2"):
        assert run("ampute", complete, "--rate", 0.4, "--seed", 9, "--out-data", tmp_path / f"o{tag}.csv",
                   "--out-mask", tmp_path / f"m{tag}.csv") == 0
    assert (tmp_path / "o1.csv").read_bytes() == (tmp_path / "o2.csv").read_bytes()
    assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    rows = [line.split(",") for line in (tmp_path / "o1.csv").read_text().splitlines()[1:]]
    blanks = np.array([[tok == "" for tok in r] for r in rows])
    np.testing.assert_array_equal(blanks, ~read_mask(tmp_path / "m1.csv"))
    side = json.loads((tmp_path / "o1.csv.json").read_text())
    assert side["seed"] == 9 and side["rate"] == 0.4


def test_ampute_errors(complete, tmp_path):
    out = ("--out-data", tmp_path / "o.csv", "--out-mask", tmp_path / "m.csv")
    assert run("ampute", tmp_path / "nope.csv", "--rate", 0.2, *out) == 2
    (tmp_path / "sparse.csv").write_text("a,b\n1,\n2,\n3,4\n")
    assert run("ampute", tmp_path / "sparse.csv", "--rate", 0.2, *out) == 3
    assert run("ampute", complete, "--rate", 1.5, *out) == 5


def test_impute_mean_splices_and_records_provenance(table, tmp_path):
    assert run("impute", table, "--method", "mean", "--out", tmp_path / "o.csv") == 0
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert abs(float(lines[2].split(",")[0]) - 3.2) < 1e-12
    src = TABLE.splitlines()
    for got, want in zip(lines, src):
        for g, w in zip(got.split(","), want.split(",")):
            if w:
                assert g == w
    assert all(tok for line in lines for tok in line.split(","))
    side = json.loads((tmp_path / "o.csv.json").read_text())
    assert side["method"] == "mean" and side["command"] == "impute" and "baseline" in side


def test_impute_mean_column_example(tmp_path):
    (tmp_path / "t.csv").write_text("a,b\n1,4\n,5\n3,6\n")
    assert run("impute", tmp_path / "t.csv", "--method", "mean", "--out", tmp_path / "o.csv") == 0
    assert (tmp_path / "o.csv").read_text() == "a,b\n1,4\n2,5\n3,6\n"


def test_impute_nica_outputs(table, tmp_path):
    code = run("impute", table, "--method", "nica", "--set", "nica.iterations=5", "--seed", 4,
               "--out", tmp_path / "o.csv", "--save-model", tmp_path / "model.json", "--trace-dir", tmp_path / "tr")
    assert code == 0
    assert len(list((tmp_path / "tr").glob("step_*.csv"))) == 11
    ds = load_csv(tmp_path / "o.csv")
    assert not np.isnan(ds.values).any()
    assert set(ds.codebooks[2]) == {"x", "y"}
    side = json.loads((tmp_path / "o.csv.json").read_text())
    assert side["nica"]["seed"] == 4 and side["nica"]["iterations"] == 5
    ckpt = json.loads((tmp_path / "model.json").read_text())
    assert ckpt["config"]["seed"] == 4
    again = tmp_path / "again.csv"
    run("impute", table, "--method", "nica", "--set", "nica.iterations=5", "--seed", 4, "--out", again)
    assert again.read_bytes() == (tmp_path / "o.csv").read_bytes()


def test_impute_errors(table, complete, tmp_path):
    out = ("--out", tmp_path / "o.csv")
    assert run("impute", tmp_path / "nope.csv", *out) == 2
    assert run("impute", complete, "--method", "mean", *out) == 5
    assert run("impute", complete, "--method", "mean", "--allow-complete", *out) == 0
    assert run("impute", table, "--set", "nica.K=0", *out) == 5
    assert run("impute", table, "--set", "bogus", *out) == 5
    assert run("impute", table, "--method", "mean", "--trace-dir", tmp_path / "t", *out) == 5
    (tmp_path / "bad.ini").write_text("[nica\nK=3\n")
    assert run("impute", table, "--config", tmp_path / "bad.ini", *out) == 5
    (tmp_path / "ragged.csv").write_text("a,b\n1,2\n3\n")
    assert run("impute", tmp_path / "ragged.csv", *out) == 2


def test_impute_divergence_exit_code(table, tmp_path):
    code = run("impute", table, "--set", "nica.iterations=3", "--set", "nica.learning_rate=1e300",
               "--out", tmp_path / "o.csv")
    assert code == 4


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "c.ini").write_text("[nica]\nK = 4\niterations = 7\n[baseline]\nknn_k = 2\n")
    settings = cli.read_config(tmp_path / "c.ini", ["nica.K=6"])
    cfg = cli.nica_config(settings["nica"], seed=3)
    assert (cfg.K, cfg.iterations, cfg.seed) == (6, 7, 3)
    assert cli.baseline_config(settings["baseline"]).knn_k == 2


def write_bench(tmp_path, body):
    p = tmp_path / "bench.ini"
    p.write_text(body)
    return p


def test_evaluate_single_cell_and_determinism(tmp_path):
    cfg = write_bench(tmp_path, "[benchmark]\ndatasets = synthetic:clusters:n=40;d=3\nmethods = mean\n"
                                "rates = 0.3\nrepeats = 1\n")
    outs = []
    for tag in ("a", "b"):
        j, c = tmp_path / f"{tag}.json", tmp_path / f"{tag}.csv"
        assert run("evaluate", cfg, "--out-json", j, "--out-csv", c, "--workers", 1) == 0
        outs.append(j.read_bytes())
    assert outs[0] == outs[1]
    report = json.loads(outs[0])
    assert len(report["entries"]) == 1 and report["config"]["command"] == "evaluate"


def test_sweep_grid_size(tmp_path, monkeypatch):
    monkeypatch.setenv("NICA_WORKERS", "1")
    cfg = write_bench(tmp_path, "[benchmark]\ndatasets = synthetic:clusters:n=30;d=3\nmethods = mean, knn\n"
                                "repeats = 3\ndownstream = false\n")
    assert run("sweep", cfg, "--out-json", tmp_path / "r.json", "--out-csv", tmp_path / "r.csv") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert len(report["entries"]) == 48
    assert sorted({e["missing_rate"] for e in report["entries"]}) == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]


def test_evaluate_config_errors(tmp_path):
    out = ("--out-json", tmp_path / "r.json", "--out-csv", tmp_path / "r.csv")
    assert run("evaluate", write_bench(tmp_path, "[benchmark]\nmethods = gain\n"), *out) == 5
    assert run("evaluate", write_bench(tmp_path, "[benchmark]\nrepeats = many\n"), *out) == 5
    assert run("evaluate", write_bench(tmp_path, "[other]\nx = 1\n"), *out) == 5
    assert run("evaluate", write_bench(tmp_path, "[benchmark]\ndatasets = missing_dir/\n"), *out) == 2
    assert run("evaluate", tmp_path / "absent.ini", *out) == 2


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    first = capsys.readouterr().out
    assert "PASS" in first
    assert run("gradcheck") == 0
    assert capsys.readouterr().out == first
    assert run("gradcheck", "--inject-fault", "attention") == 1
    assert "FAIL" in capsys.readouterr().out


def test_unknown_subcommand_is_a_usage_error():
    assert run("frobnicate") == 5
