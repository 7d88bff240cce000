import csv
import json

import pytest

from evadelab.cli import main
from evadelab.featurespace import (SyntheticConfig, generate_synthetic,
                                   save_dataset, split)

SYNTH = dict(d=60, n_benign=200, n_malware=200, n_strong=10,
             strong_rate_gap=0.6, weak_rate_gap=0.05, base_density=0.08,
             seed=27)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = generate_synthetic(SyntheticConfig(**SYNTH))
    train, test = split(ds, 0.6, 0)
    save_dataset(train, root / "train.txt")
    save_dataset(test, root / "test.txt")
    (root / "synth.json").write_text(json.dumps(SYNTH))
    rc = main(["train", "--data", str(root / "train.txt"),
               "--preset", "svm", "--epochs", "6", "--seed", "1",
               "--d-hint", "60", "--out", str(root / "model.json")])
    assert rc == 0
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_model_written(self, workdir):
        doc = json.loads((workdir / "model.json").read_text())
        assert doc["kind"] == "linear"
        assert doc["format_version"] == 1

    def test_train_from_synthetic_config(self, workdir, capsys):
        rc = main(["train", "--synthetic", str(workdir / "synth.json"),
                   "--kind", "linear", "--loss", "logistic", "--epochs", "4",
                   "--test", str(workdir / "test.txt"),
                   "--out", str(workdir / "logit.json")])
        assert rc == 0
        info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert info["auc"] > 0.9

    def test_cv_flag(self, workdir, capsys):
        rc = main(["train", "--data", str(workdir / "train.txt"),
                   "--preset", "svm", "--epochs", "3",
                   "--cv-reg", "0.1,1.0",
                   "--out", str(workdir / "cv.json")])
        assert rc == 0
        first = json.loads(capsys.readouterr().out.strip().splitlines()[0])
        assert first["cv_selected_reg"] in (0.1, 1.0)


class TestAttack:
    def test_csv_columns_and_eps_min(self, workdir):
        out = workdir / "attack.csv"
        rc = main(["attack", "--model", str(workdir / "model.json"),
                   "--data", str(workdir / "test.txt"),
                   "--epsilon-grid", "1:5", "--fpr", "0.01",
                   "--method", "greedy", "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        assert set(rows[0]) == {"sample_id", "eps", "score_before",
                                "score_after", "evaded", "eps_min"}
        for rec in rows:
            assert rec["eps_min"] == "NOT_EVADABLE" or int(rec["eps_min"]) >= 0
            assert float(rec["score_after"]) <= float(rec["score_before"]) + 1e-9

    def test_single_epsilon(self, workdir):
        out = workdir / "attack1.csv"
        rc = main(["attack", "--model", str(workdir / "model.json"),
                   "--data", str(workdir / "test.txt"), "--epsilon", "3",
                   "--threshold", "0.0", "--method", "greedy",
                   "--out", str(out)])
        assert rc == 0
        assert {rec["eps"] for rec in read_csv(out)} == {"3"}


class TestExplain:
    def test_sparse_relevance_csv(self, workdir):
        out = workdir / "rel.csv"
        rc = main(["explain", "--model", str(workdir / "model.json"),
                   "--data", str(workdir / "test.txt"),
                   "--method", "gradient_input", "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        assert set(rows[0]) == {"sample_id", "feature", "relevance"}
        assert len({rec["sample_id"] for rec in rows}) > 0

    def test_top_report(self, workdir, capsys):
        rc = main(["explain", "--model", str(workdir / "model.json"),
                   "--data", str(workdir / "test.txt"),
                   "--method", "integrated_gradients", "--p", "20",
                   "--top", "3", "--out", str(workdir / "rel2.csv")])
        assert rc == 0
        line = capsys.readouterr().out.strip().splitlines()[0]
        report = json.loads(line)
        assert len(report["top"]) == 3
        pcts = [abs(t["percent"]) for t in report["top"]]
        assert pcts == sorted(pcts, reverse=True)


class TestEvenness:
    def test_metrics_with_footer(self, workdir):
        rel = workdir / "rel.csv"
        if not rel.exists():
            main(["explain", "--model", str(workdir / "model.json"),
                  "--data", str(workdir / "test.txt"),
                  "--method", "gradient_input", "--out", str(rel)])
        out = workdir / "even.csv"
        rc = main(["evenness", "--relevances", str(rel), "--metric", "both",
                   "--m", "20", "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        assert rows[-1]["sample_id"] == "average"
        defined = [r for r in rows[:-1] if r["defined"] == "1"]
        expected = sum(float(r["e1"]) for r in defined) / len(defined)
        assert float(rows[-1]["e1"]) == pytest.approx(expected)


class TestRobustness:
    def test_curve_and_per_sample_files(self, workdir, capsys):
        out = workdir / "rob.csv"
        rc = main(["robustness", "--model", str(workdir / "model.json"),
                   "--data", str(workdir / "test.txt"),
                   "--eps-grid", "1:6", "--loss", "hinge",
                   "--method", "greedy", "--out", str(out)])
        assert rc == 0
        info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        rows = read_csv(out)
        assert [int(r["eps"]) for r in rows] == [1, 2, 3, 4, 5, 6]
        per_sample = read_csv(workdir / "rob_per_sample.csv")
        assert all(0.0 < float(r["robustness"]) <= 1.0 for r in per_sample)
        assert 0.0 < info["aggregate"] <= 1.0


class TestCorrelate:
    def test_correlation_csv(self, workdir, tmp_path):
        data = tmp_path / "xy.csv"
        with open(data, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b"])
            for i in range(20):
                writer.writerow([i, 2 * i + (i % 3)])
            writer.writerow(["average", ""])  # footer-style junk row skipped
        out = tmp_path / "corr.csv"
        rc = main(["correlate", "--data", str(data), "--x", "a", "--y", "b",
                   "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        assert [r["method"] for r in rows] == ["pearson", "spearman", "kendall"]
        assert all(float(r["coefficient"]) > 0.9 for r in rows)

    def test_permutation_flag(self, workdir, tmp_path):
        data = tmp_path / "xy2.csv"
        with open(data, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"])
            for i in range(12):
                writer.writerow([i, i * i])
        out = tmp_path / "corr2.csv"
        rc = main(["correlate", "--data", str(data), "--x", "x", "--y", "y",
                   "--methods", "spearman", "--permutation", "99",
                   "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        assert float(rows[0]["p_value"]) < 0.05


class TestExperimentCommand:
    def test_runs_and_reports(self, workdir, tmp_path, capsys):
        cfg = {
            "dataset": {"synthetic": SYNTH},
            "classifiers": ["svm"],
            "eps_grid": {"start": 1, "stop": 4},
            "repetitions": 1,
            "seed": 2,
            "n_attack_samples": 30,
            "evenness_m": 20,
            "ig_p": 20,
            "attack": {"max_iters": 60},
        }
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "expout"
        rc = main(["experiment", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert info["cells"] == 1 and info["failed"] == []
        assert (out / "manifest.json").exists()


class TestErrorEnvelope:
    def test_missing_file_gives_json_error(self, capsys):
        rc = main(["attack", "--model", "/nonexistent/model.json",
                   "--data", "/nonexistent/data.txt", "--out", "/tmp/x.csv"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert "error" in err and "message" in err

    def test_bad_dataset_gives_json_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("+9 1:1\n")
        rc = main(["train", "--data", str(bad), "--preset", "svm",
                   "--out", str(tmp_path / "m.json")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "DatasetFormatError"
