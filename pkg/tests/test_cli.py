import csv
import json
import shutil

import pytest
import yaml

from cdt import cli

SPEC = dict(seed=3, n_samples=40, dna_positions=8, d_dna=12, n_genes=4, positional_channels=4)


def _run_config(root, **train):
    cfg = {"seed": 0,
           "paths": {"dna": "data/dna", "rna": "data/rna", "protein": "data/protein",
                     "dataset": "data/dataset.csv", "output": "out"},
           "model": {"d": 16, "heads": 2, "dropout_p": 0.0},
           "train": {"lr": 3e-3, "max_epochs": 3, **train}}
    (root / "run.yaml").write_text(yaml.safe_dump(cfg))
    return root / "run.yaml"


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(SPEC))
    assert cli.main(["gen", str(tmp_path / "spec.yaml"), str(tmp_path / "data")]) == 0
    return tmp_path


def test_gen_writes_files_and_verifies(workspace, capsys):
    for name in ("dna", "rna", "protein", "dataset.csv", "ground_truth.json"):
        assert (workspace / "data" / name).exists()
    assert cli.main(["cache", "verify", str(workspace / "data")]) == 0
    assert cli.main(["cache", "verify", str(workspace / "data" / "rna")]) == 0
    assert "alignment ok" in capsys.readouterr().out


def test_gen_missing_seed(tmp_path, capsys):
    (tmp_path / "s.yaml").write_text("n_samples: 4\n")
    assert cli.main(["gen", str(tmp_path / "s.yaml"), str(tmp_path / "o")]) == 2
    assert "'seed'" in capsys.readouterr().err


def test_cache_verify_corrupt(workspace):
    f = workspace / "data" / "rna" / "embeddings.cdte"
    f.write_bytes(f.read_bytes()[:-1])
    assert cli.main(["cache", "verify", str(workspace / "data")]) == 3


def test_train_eval_report(workspace, capsys):
    cfg = _run_config(workspace)
    assert cli.main(["train", str(cfg)]) == 0
    out = workspace / "out"
    assert (out / "checkpoint" / "manifest.json").exists()
    assert len(json.loads((out / "history.json").read_text())) == 3
    assert "epoch    1" in capsys.readouterr().out

    ds = workspace / "data" / "dataset.csv"
    assert cli.main(["eval", str(out / "checkpoint"), str(ds), "--out", str(workspace / "ev")]) == 0
    with open(workspace / "ev" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 40 and list(rows[0]) == ["enhancer_id", "gene_index", "beta", "beta_hat"]
    assert "pearson_r=" in capsys.readouterr().out

    rep = workspace / "rep"
    rc = cli.main(["report", str(out / "checkpoint"), str(ds), "--out", str(rep), "--top-k", "3",
                   "--temperature", "0.3", "--format", "json", "--format", "bed", "--chrom", "chr2",
                   "--ground-truth", str(workspace / "data" / "ground_truth.json")])
    assert rc == 0
    summary = json.loads((rep / "summary.json").read_text())
    assert 0 <= summary["overlap_mean"] <= 3 and sum(summary["overlap_histogram"]) == 40
    assert summary["temperature"]["argmax_preserved"] is True
    assert "0" in summary["recovery"]
    assert "recovery position 0" in capsys.readouterr().out
    assert (rep / "report.bed").read_text().startswith("chr2\t")


def test_train_twice_identical(workspace):
    cfg = _run_config(workspace)
    assert cli.main(["train", str(cfg)]) == 0
    first = {p.relative_to(workspace / "out"): p.read_bytes()
             for p in (workspace / "out").rglob("*") if p.is_file() and "meta" not in p.name}
    shutil.rmtree(workspace / "out")
    assert cli.main(["train", str(cfg)]) == 0
    second = {p.relative_to(workspace / "out"): p.read_bytes()
              for p in (workspace / "out").rglob("*") if p.is_file() and "meta" not in p.name}
    assert first == second and len(first) > 3


def test_train_misaligned(workspace, capsys):
    man = workspace / "data" / "protein" / "manifest.json"
    data = json.loads(man.read_text())
    data["gene_symbols"][2] = "G0002b"
    man.write_text(json.dumps(data))
    assert cli.main(["train", str(_run_config(workspace))]) == 3
    err = capsys.readouterr().err
    assert "index 2" in err and "G0002b" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_4(workspace):
    cfg = _run_config(workspace, lr=1e300, weight_decay=1e300)
    assert cli.main(["train", str(cfg)]) == 4


def test_config_errors(workspace, tmp_path):
    (tmp_path / "bad.yaml").write_text("paths: {dna: nowhere}\n")
    assert cli.main(["train", str(tmp_path / "bad.yaml")]) == 2
    cfg = _run_config(workspace, bogus=1)
    assert cli.main(["train", str(cfg)]) == 2
    assert cli.main(["train", str(workspace / "missing.yaml")]) == 2


def test_eval_empty_dataset(workspace):
    assert cli.main(["train", str(_run_config(workspace))]) == 0
    empty = workspace / "empty.csv"
    empty.write_text("enhancer_id,dna_index,gene_index,beta\n")
    assert cli.main(["eval", str(workspace / "out" / "checkpoint"), str(empty)]) == 2


def test_report_bad_options(workspace):
    assert cli.main(["train", str(_run_config(workspace))]) == 0
    ck, ds = str(workspace / "out" / "checkpoint"), str(workspace / "data" / "dataset.csv")
    assert cli.main(["report", ck, ds, "--out", str(workspace / "r"), "--top-k", "3",
                     "--format", "bed"]) == 2
    assert cli.main(["report", ck, ds, "--out", str(workspace / "r"), "--top-k", "0"]) == 2
    assert cli.main(["report", ck, ds, "--out", str(workspace / "r"), "--temperature", "-1",
                     "--top-k", "3"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["report", ck, ds, "--out", str(workspace / "r"), "--format", "xml"])
    assert exc.value.code == 2


def test_param_count(capsys):
    assert cli.main(["param-count"]) == 0
    out = capsys.readouterr().out
    assert "60,000,000" in out
