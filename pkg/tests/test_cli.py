import csv
import subprocess
import sys

import numpy as np
import pytest

from skewmix.cli import main
from skewmix.modelio import load_model


@pytest.fixture
def table(tmp_path):
    path = tmp_path / "t.csv"
    assert main(["synth", "--out", str(path), "--k", "2", "--d", "3", "--n", "3000",
                 "--seed", "1"]) == 0
    return path


def test_synth_writes_rows_and_labels(table):
    with table.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ct", "mask", "mr1", "mr2"]
    assert len(rows) == 3001
    assert (table.parent / "t.labels.csv").is_file()


def test_synth_same_seed_same_bytes(tmp_path):
    for name in ("a.csv", "b.csv"):
        main(["synth", "--out", str(tmp_path / name), "--k", "2", "--d", "5", "--n", "500",
              "--seed", "3"])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_synth_rejects_zero_rows(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x.csv"), "--n", "0"]) == 2
    assert "--n" in capsys.readouterr().err


def test_synth_cohort(tmp_path):
    out = tmp_path / "cohort"
    assert main(["synth", "--out", str(out), "--two-regime", "--heads", "3", "--n", "100"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["head1.csv", "head2.csv", "head3.csv"]


def test_fit_partitioned_and_predict(table, tmp_path):
    model = tmp_path / "m.txt"
    assert main(["fit", "--input", str(table), "--out", str(model), "--k", "2",
                 "--variant", "sgmm", "--partitioned", "--seed", "7", "--max-iter", "60"]) == 0
    pm = load_model(model)
    assert pm.full.K == pm.nonbone.K == pm.bone.K == 2
    pred = tmp_path / "p.csv"
    assert main(["predict", "--model", str(model), "--input", str(table), "--out",
                 str(pred)]) == 0
    with pred.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ct", "pred", "route"]
    assert len(rows) == 3001
    assert {r[2] for r in rows[1:]} <= {"bone", "nonbone"}


def test_fit_same_seed_byte_identical(table, tmp_path):
    args = ["fit", "--input", str(table), "--k", "2", "--variant", "gmm", "--seed", "7",
            "--max-iter", "80", "--restarts", "2"]
    main(args + ["--out", str(tmp_path / "a.txt")])
    main(args + ["--out", str(tmp_path / "b.txt")])
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_fit_trace_file(table, tmp_path):
    trace = tmp_path / "trace.tsv"
    main(["fit", "--input", str(table), "--out", str(tmp_path / "m.txt"), "--k", "2",
          "--max-iter", "10", "--trace", str(trace)])
    lines = trace.read_text().splitlines()
    assert lines[0].startswith("iteration\tloglik")
    assert len(lines) >= 2


def test_fit_missing_file(tmp_path, capsys):
    code = main(["fit", "--input", str(tmp_path / "missing.csv"), "--out",
                 str(tmp_path / "m.txt")])
    assert code == 2
    assert "missing.csv" in capsys.readouterr().err


def test_fit_strict_nonconvergence(table, tmp_path):
    code = main(["fit", "--input", str(table), "--out", str(tmp_path / "m.txt"), "--k", "2",
                 "--max-iter", "1", "--strict"])
    assert code == 4
    assert (tmp_path / "m.txt").is_file()


def test_fit_numerical_error_exit(tmp_path):
    path = tmp_path / "flat.csv"
    path.write_text("ct,mask,mr1\n" + "0,1,1\n" * 20)
    assert main(["fit", "--input", str(path), "--out", str(tmp_path / "m.txt"), "--k", "1"]) == 3


def test_fit_k_grid(table, tmp_path, capsys):
    assert main(["fit", "--input", str(table), "--out", str(tmp_path / "m.txt"),
                 "--k-grid", "1,2", "--max-iter", "30"]) == 0
    assert "selected K=" in capsys.readouterr().out


def test_bad_interval_is_usage_error(table, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["fit", "--input", str(table), "--out", str(tmp_path / "m.txt"),
              "--train-bone", "100,3071"])
    assert info.value.code == 2


def test_eval_writes_reports(table, tmp_path):
    model = tmp_path / "m.txt"
    main(["fit", "--input", str(table), "--out", str(model), "--k", "2", "--max-iter", "30"])
    out = tmp_path / "ev"
    assert main(["eval", "--model", str(model), "--input", str(table), "--out-dir",
                 str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["t_bland_altman.csv", "t_report.csv", "t_residuals.csv"]


def test_cv_two_heads(tmp_path, capsys):
    cohort = tmp_path / "cohort"
    main(["synth", "--out", str(cohort), "--two-regime", "--heads", "2", "--n", "1500"])
    out = tmp_path / "cv"
    heads = [str(cohort / "head1.csv"), str(cohort / "head2.csv")]
    assert main(["cv", "--input", *heads, "--out-dir", str(out), "--models", "sgmm,gmm",
                 "--k", "2", "--max-iter", "30"]) == 0
    text = capsys.readouterr().out
    assert "Average" in text and "p-value" in text
    with (out / "summary_mae_bone.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["head", "sgmm", "gmm"]
    folds = np.array([[float(v) for v in r[1:]] for r in rows[1:3]])
    avg = [float(v) for v in rows[3][1:]]
    assert rows[3][0] == "Average"
    np.testing.assert_allclose(avg, folds.mean(axis=0), atol=1e-9)
    assert rows[4][0] == "p-value"
    assert (out / "sgmm_fold1_report.csv").is_file()


def test_cv_unknown_model(table, tmp_path):
    assert main(["cv", "--input", str(table), str(table), "--out-dir", str(tmp_path),
                 "--models", "hmm"]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "skewmix", "synth", "--out",
                          str(tmp_path / "x.csv"), "--n", "0"], capture_output=True, text=True)
    assert res.returncode == 2
