import json

import numpy as np
import pytest
from click.testing import CliRunner

from halluscope import cli, hrpeval, scorer, tensorstore
from halluscope.cli import main


@pytest.fixture
def runner():
    return CliRunner()


GRID_SMALL = {"layers": ["0.00", "1.00"], "q": [0.0, 0.25],
              "k": [10, 50], "gamma": [0.0]}


def write_grid(tmp_path, doc=None):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(doc or GRID_SMALL))
    return path


@pytest.fixture
def fixture_tree(runner, tmp_path):
    result = runner.invoke(main, [
        "synth", "--out", str(tmp_path / "data"), "--n-calib", "600",
        "--n-test", "200", "--channels", "16", "--seed", "0",
    ])
    assert result.exit_code == 0, result.output
    return {
        "calib": tmp_path / "data/calib/manifest.json",
        "test": tmp_path / "data/test/manifest.json",
        "root": tmp_path,
    }


class TestEndToEnd:
    def test_synth_calibrate_score_eval(self, runner, fixture_tree, tmp_path):
        grid = write_grid(tmp_path)
        out = tmp_path / "monitor"
        result = runner.invoke(main, [
            "calibrate", "--manifest", str(fixture_tree["calib"]),
            "--out", str(out), "--grid", str(grid), "--seed", "0",
            "--threads", "1",
        ])
        assert result.exit_code == 0, result.output
        assert (out / "monitor.json").exists()
        assert (out / "trace.csv").exists()
        assert (out / "tune.json").exists()
        assert "layer=1.00" in result.output

        scores = tmp_path / "scores.csv"
        result = runner.invoke(main, [
            "score", "--monitor", str(out / "monitor.json"),
            "--manifest", str(fixture_tree["test"]), "--out", str(scores),
        ])
        assert result.exit_code == 0, result.output

        report = tmp_path / "report.json"
        curves = tmp_path / "curves"
        result = runner.invoke(main, [
            "eval", "--scores", str(scores),
            "--quality", str(fixture_tree["test"].parent / "quality.csv"),
            "--out", str(report), "--curves", str(curves),
        ])
        assert result.exit_code == 0, result.output
        doc = json.loads(report.read_text())
        assert doc["mean_hrp"] >= 0.9
        assert (curves / "curve_psnr.csv").exists()

    def test_score_matches_library(self, runner, fixture_tree, tmp_path):
        grid = write_grid(tmp_path)
        out = tmp_path / "monitor"
        runner.invoke(main, [
            "calibrate", "--manifest", str(fixture_tree["calib"]),
            "--out", str(out), "--grid", str(grid), "--threads", "1",
        ])
        scores = tmp_path / "scores.csv"
        runner.invoke(main, [
            "score", "--monitor", str(out / "monitor.json"),
            "--manifest", str(fixture_tree["test"]), "--out", str(scores),
        ])
        ids, conf = hrpeval.read_scores_csv(scores)
        monitor = scorer.load_monitor(out / "monitor.json")
        dataset = tensorstore.load_manifest(fixture_tree["test"])
        lib_ids, lib_conf = scorer.score_batch(dataset, monitor)
        assert ids == lib_ids
        assert np.array_equal(conf, lib_conf)

    def test_bank_members_score_zero(self, runner, tmp_path):
        # k=1, gamma=0, q=0: every calibration member is its own nearest
        # neighbor at distance zero.
        result = runner.invoke(main, [
            "synth", "--out", str(tmp_path / "d"), "--n-calib", "60",
            "--n-test", "20", "--channels", "8",
        ])
        assert result.exit_code == 0
        calib = tmp_path / "d/calib/manifest.json"
        grid = write_grid(tmp_path, {"layers": ["1.00"], "q": [0.0],
                                     "k": [1], "gamma": [0.0]})
        out = tmp_path / "monitor"
        result = runner.invoke(main, [
            "calibrate", "--manifest", str(calib), "--out", str(out),
            "--grid", str(grid), "--threads", "1",
        ])
        assert result.exit_code == 0, result.output
        scores = tmp_path / "scores.csv"
        result = runner.invoke(main, [
            "score", "--monitor", str(out / "monitor.json"),
            "--manifest", str(calib), "--out", str(scores),
        ])
        assert result.exit_code == 0, result.output
        _, conf = hrpeval.read_scores_csv(scores)
        assert np.all(conf == 0.0)

    def test_one_config_grid_trace(self, runner, tmp_path):
        runner.invoke(main, [
            "synth", "--out", str(tmp_path / "d"), "--n-calib", "60",
            "--n-test", "20", "--channels", "8",
        ])
        grid = write_grid(tmp_path, {"layers": ["1.00"], "q": [0.0],
                                     "k": [5], "gamma": [0.0]})
        out = tmp_path / "monitor"
        result = runner.invoke(main, [
            "calibrate", "--manifest", str(tmp_path / "d/calib/manifest.json"),
            "--out", str(out), "--grid", str(grid), "--threads", "1",
        ])
        assert result.exit_code == 0, result.output
        lines = (out / "trace.csv").read_text().splitlines()
        assert len(lines) == 2  # header + single cell


class TestDeterminism:
    def test_calibrate_reruns_byte_identical(self, runner, fixture_tree,
                                             tmp_path):
        grid = write_grid(tmp_path)
        for name in ("a", "b"):
            result = runner.invoke(main, [
                "calibrate", "--manifest", str(fixture_tree["calib"]),
                "--out", str(tmp_path / name), "--grid", str(grid),
                "--seed", "3", "--threads", "2",
            ])
            assert result.exit_code == 0, result.output
        for fname in ("monitor.json", "bank.ftb", "trace.csv", "tune.json"):
            assert ((tmp_path / "a" / fname).read_bytes()
                    == (tmp_path / "b" / fname).read_bytes()), fname

    def test_synth_reruns_byte_identical(self, runner, tmp_path):
        for name in ("a", "b"):
            result = runner.invoke(main, [
                "synth", "--out", str(tmp_path / name), "--n-calib", "40",
                "--n-test", "12", "--channels", "8", "--seed", "9",
            ])
            assert result.exit_code == 0
        for rel in ("calib/layer_1.00.ftb", "calib/quality.csv",
                    "calib/manifest.json"):
            assert ((tmp_path / "a" / rel).read_bytes()
                    == (tmp_path / "b" / rel).read_bytes())


class TestErrors:
    def test_missing_manifest_exit_2(self, runner, tmp_path):
        missing = tmp_path / "nope/manifest.json"
        result = runner.invoke(main, [
            "calibrate", "--manifest", str(missing),
            "--out", str(tmp_path / "out"),
        ])
        assert result.exit_code == 2
        assert str(missing) in result.output

    def test_infeasible_grid_exit_3(self, runner, tmp_path):
        runner.invoke(main, [
            "synth", "--out", str(tmp_path / "d"), "--n-calib", "40",
            "--n-test", "12", "--channels", "8",
        ])
        grid = write_grid(tmp_path, {"layers": ["1.00"], "q": [0.0],
                                     "k": [5000], "gamma": [0.0]})
        result = runner.invoke(main, [
            "calibrate", "--manifest", str(tmp_path / "d/calib/manifest.json"),
            "--out", str(tmp_path / "out"), "--grid", str(grid),
            "--threads", "1",
        ])
        assert result.exit_code == 3

    def test_bad_scores_file_exit_2(self, runner, tmp_path):
        scores = tmp_path / "scores.csv"
        scores.write_text("wrong,header\n")
        quality = tmp_path / "quality.csv"
        quality.write_text("sample_id,psnr\na,1.0\nb,2.0\n")
        result = runner.invoke(main, [
            "eval", "--scores", str(scores), "--quality", str(quality),
            "--out", str(tmp_path / "r.json"),
        ])
        assert result.exit_code == 2  # FormatError is a validation error

    def test_bad_param_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "corrupt", "--images", str(tmp_path / "x.ftb"),
            "--kind", "gaussian_noise", "--param", "sigma",
            "--out", str(tmp_path / "y.ftb"),
        ])
        assert result.exit_code == 2


class TestEval:
    def test_anti_oracle_minus_one(self, runner, tmp_path):
        quality = tmp_path / "quality.csv"
        quality.write_text(
            "sample_id,psnr\na,0.1\nb,0.2\nc,0.3\nd,0.4\n"
        )
        scores = tmp_path / "scores.csv"
        scores.write_text(
            "sample_id,confidence\na,0.4\nb,0.3\nc,0.2\nd,0.1\n"
        )
        result = runner.invoke(main, [
            "eval", "--scores", str(scores), "--quality", str(quality),
            "--out", str(tmp_path / "r.json"),
        ])
        assert result.exit_code == 0, result.output
        assert "-100.00%" in result.output
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["per_metric"]["psnr"]["hrp"] == pytest.approx(-1.0)


class TestCorrelate:
    def test_self_correlation(self, runner, tmp_path):
        table = tmp_path / "measures.csv"
        # hrp top-2 = {m1, m3}; tau top-2 = {m1, m2}; overlap = 1/2
        table.write_text(
            "id,hrp,tau\nm1,0.9,0.5\nm2,0.7,0.6\nm3,0.8,0.4\nm4,0.2,0.1\n"
        )
        out = tmp_path / "corr.json"
        result = runner.invoke(main, [
            "correlate", "--table", str(table), "--k", "2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text())
        assert doc["tau"]["hrp"]["hrp"] == pytest.approx(1.0)
        assert doc["tau"]["tau"]["tau"] == pytest.approx(1.0)
        assert doc["top_k_overlap"]["hrp"]["tau"] == pytest.approx(0.5)

    def test_too_few_rows(self, runner, tmp_path):
        table = tmp_path / "measures.csv"
        table.write_text("id,a\nm1,0.5\n")
        result = runner.invoke(main, [
            "correlate", "--table", str(table), "--out", str(tmp_path / "o"),
        ])
        assert result.exit_code == 2


class TestCorruptAndMetrics:
    def test_corrupt_round_trip(self, runner, tmp_path):
        images = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
        src = tmp_path / "in.ftb"
        tensorstore.write_array(src, images)
        out = tmp_path / "out.ftb"
        result = runner.invoke(main, [
            "corrupt", "--images", str(src), "--kind", "gaussian_noise",
            "--param", "sigma=0.1", "--seed", "1", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        corrupted = tensorstore.read_array(out)
        assert corrupted.shape == images.shape
        assert not np.array_equal(corrupted, images)

        result = runner.invoke(main, [
            "corrupt", "--images", str(src), "--kind", "gaussian_noise",
            "--param", "sigma=0.1", "--seed", "1",
            "--out", str(tmp_path / "out2.ftb"),
        ])
        assert result.exit_code == 0
        assert out.read_bytes() == (tmp_path / "out2.ftb").read_bytes()

    def test_metrics_command(self, runner, tmp_path):
        from halluscope import quality as q
        rng = np.random.default_rng(1)
        outputs = rng.random((2, 1, 32, 32)).astype(np.float32)
        targets = rng.random((2, 1, 32, 32)).astype(np.float32)
        tensorstore.write_array(tmp_path / "out.ftb", outputs)
        tensorstore.write_array(tmp_path / "tgt.ftb", targets)
        (tmp_path / "ids.txt").write_text("s0\ns1\n")
        result = runner.invoke(main, [
            "metrics", "--outputs", str(tmp_path / "out.ftb"),
            "--targets", str(tmp_path / "tgt.ftb"),
            "--ids", str(tmp_path / "ids.txt"),
            "--out", str(tmp_path / "q.csv"),
        ])
        assert result.exit_code == 0, result.output
        table = tensorstore.read_quality_csv(tmp_path / "q.csv")
        assert table.sample_ids == ["s0", "s1"]
        expected = q.psnr(q.ImageTensor(outputs[0]), q.ImageTensor(targets[0]))
        assert table.metrics["psnr"][0] == pytest.approx(expected, abs=1e-6)


class TestSensitivityCommand:
    def test_runs_and_is_deterministic(self, runner, fixture_tree, tmp_path):
        grid = write_grid(tmp_path, {"layers": ["1.00"], "q": [0.0],
                                     "k": [5, 20], "gamma": [0.0]})
        args = [
            "sensitivity", "--manifest", str(fixture_tree["calib"]),
            "--test-manifest", str(fixture_tree["test"]),
            "--factors", "1,2", "--repeats", "1", "--grid", str(grid),
            "--threads", "1",
        ]
        result = runner.invoke(main, args + ["--out", str(tmp_path / "s1.csv")])
        assert result.exit_code == 0, result.output
        result = runner.invoke(main, args + ["--out", str(tmp_path / "s2.csv")])
        assert result.exit_code == 0
        assert ((tmp_path / "s1.csv").read_bytes()
                == (tmp_path / "s2.csv").read_bytes())
        lines = (tmp_path / "s1.csv").read_text().splitlines()
        assert lines[0] == "factor,n_calib,mean_hrp,std_hrp,feasible,reason"
        assert len(lines) == 3
