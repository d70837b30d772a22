import json
import shutil

import pytest

from povmap.cli import BUNDLE_FILES, MANIFEST, BundleError, embedded_hash, main, verify_bundle
from povmap.config import OUT_ENV, RunConfig, config_hash, load_config
from povmap.data_io import read_csv

SMALL_REPORT = """\
seed = 3
grid_levels = ["parent"]
grid_models = ["gbdt", "ols"]
sweep_thresholds = [0.3, 0.6, 0.9]
sweep_kinds = ["counts"]

[params.gbdt]
n_estimators = 20
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--n-clusters", "40", "--seed", "0"]) == 0
    return out


def data_args(synth_dir):
    return ["--detections", str(synth_dir / "detections.jsonl"), "--survey", str(synth_dir / "survey.csv")]


def small_report_dir(tmp_path, synth_dir, name="report"):
    out = tmp_path / name
    out.mkdir()
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL_REPORT)
    for f in ("detections.jsonl", "survey.csv"):
        shutil.copy(synth_dir / f, out / f)
    return out, cfg


class TestSynth:
    def test_writes_files_with_provenance(self, synth_dir):
        for name in ("detections.jsonl", "survey.csv", "ground_truth.json", "run_synth.toml"):
            assert (synth_dir / name).is_file()
        gt = json.loads((synth_dir / "ground_truth.json").read_text())
        assert gt["provenance"]["seed"] == 0
        assert gt["config"]["n_clusters"] == 40
        assert embedded_hash(synth_dir / "run_synth.toml") == gt["provenance"]["config_hash"]

    def test_env_var_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        assert main(["synth", "--n-clusters", "3"]) == 0
        assert (tmp_path / "env" / "survey.csv").is_file()

    def test_relation_preset(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--n-clusters", "4", "--relation", "ratio"]) == 0
        gt = json.loads((tmp_path / "ground_truth.json").read_text())
        assert gt["relation"]["kind"] == "ratio"


class TestFeaturize:
    @pytest.mark.parametrize("level, width", [("parent", 10), ("child", 60)])
    def test_shape(self, tmp_path, synth_dir, level, width):
        assert main(["featurize", "--out", str(tmp_path), "--level", level, *data_args(synth_dir)]) == 0
        meta, header, rows = read_csv(tmp_path / "features.csv")
        assert len(rows) == 40 and len(header) == width + 1
        assert meta["level"] == level and "config_hash" in meta

    def test_defaults_to_inputs_in_out_dir(self, synth_dir, capsys):
        assert main(["featurize", "--out", str(synth_dir)]) == 0
        assert "40 x 10" in capsys.readouterr().out


class TestEvaluate:
    def test_linear_recovery(self, tmp_path, synth_dir, capsys):
        code = main(["evaluate", "--out", str(tmp_path), "--model", "ols", "--threshold", "0.0",
                     *data_args(synth_dir)])
        assert code == 0
        r2 = float(capsys.readouterr().out.split("r2 =")[1])
        assert r2 >= 0.95
        meta, header, rows = read_csv(tmp_path / "predictions.csv")
        assert header == ["cluster_id", "y_true", "y_pred", "n_excluded"] and len(rows) == 40
        model = json.loads((tmp_path / "model.json").read_text())
        assert model["provenance"]["config_hash"] == meta["config_hash"]

    def test_gbdt_counts_parent(self, tmp_path, synth_dir):
        args = ["evaluate", "--out", str(tmp_path), "--model", "gbdt", "--scheme", "counts", "--level", "parent"]
        assert main(args + data_args(synth_dir)) == 0

    def test_unknown_model(self, tmp_path, synth_dir, capsys):
        assert main(["evaluate", "--out", str(tmp_path), "--model", "svm", *data_args(synth_dir)]) == 2
        assert "svm" in capsys.readouterr().err

    def test_missing_survey(self, tmp_path, synth_dir, capsys):
        missing = tmp_path / "nope.csv"
        args = ["evaluate", "--out", str(tmp_path), "--detections", str(synth_dir / "detections.jsonl"),
                "--survey", str(missing)]
        assert main(args) == 2
        assert str(missing) in capsys.readouterr().err

    def test_constant_targets_exit_1(self, tmp_path, synth_dir, capsys):
        lines = (synth_dir / "survey.csv").read_text().splitlines()
        const = [lines[0]] + [",".join(line.split(",")[:3] + ["1.0"]) for line in lines[1:]]
        survey = tmp_path / "const.csv"
        survey.write_text("\n".join(const) + "\n")
        args = ["evaluate", "--out", str(tmp_path), "--model", "ols", "--detections",
                str(synth_dir / "detections.jsonl"), "--survey", str(survey)]
        assert main(args) == 1
        assert "variance" in capsys.readouterr().err

    def test_malformed_survey_exit_2(self, tmp_path, synth_dir):
        survey = tmp_path / "bad.csv"
        survey.write_text("cluster_id,lat,lon,poverty\nc0000,abc,29.6,1.0\n")
        args = ["evaluate", "--out", str(tmp_path), "--detections", str(synth_dir / "detections.jsonl"),
                "--survey", str(survey)]
        assert main(args) == 2

    def test_bad_threshold_exit_2(self, tmp_path, synth_dir):
        assert main(["evaluate", "--out", str(tmp_path), "--threshold", "1.5", *data_args(synth_dir)]) == 2


class TestConfigFile:
    def test_flags_override_file(self, tmp_path, synth_dir):
        cfg = tmp_path / "run.toml"
        cfg.write_text('model = "ridge"\nthreshold = 0.3\nseed = 9\n')
        out = tmp_path / "out"
        assert main(["featurize", "--config", str(cfg), "--out", str(out), "--threshold", "0.5",
                     *data_args(synth_dir)]) == 0
        rec = load_config(out / "run_featurize.toml")
        assert rec.threshold == 0.5 and rec.model == "ridge" and rec.seed == 9

    def test_unknown_key(self, tmp_path, synth_dir):
        cfg = tmp_path / "run.toml"
        cfg.write_text("colour = 1\n")
        assert main(["featurize", "--config", str(cfg), "--out", str(tmp_path), *data_args(synth_dir)]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["featurize", "--config", str(tmp_path / "none.toml")]) == 2

    def test_hash_ignores_out_and_jobs(self):
        a = RunConfig(out="x", jobs=1)
        b = RunConfig(out="y", jobs=4)
        assert config_hash(a) == config_hash(b) != config_hash(RunConfig(seed=1))

    def test_recorded_config_round_trip(self, tmp_path, synth_dir):
        assert main(["featurize", "--out", str(tmp_path), *data_args(synth_dir)]) == 0
        rec = load_config(tmp_path / "run_featurize.toml")
        assert rec.threshold == RunConfig().threshold and rec.grid_models == RunConfig().grid_models


class TestCommands:
    def test_grid_sweep_explain_ablate(self, tmp_path, synth_dir):
        cfg = tmp_path / "small.toml"
        cfg.write_text(SMALL_REPORT)
        base = ["--config", str(cfg), "--out", str(tmp_path / "o"), *data_args(synth_dir)]
        for cmd in ("grid", "sweep", "explain", "ablate"):
            assert main([cmd, *base]) == 0, cmd
        o = tmp_path / "o"
        _, header, rows = read_csv(o / "grid.csv")
        assert len(rows) == 4 and header[0] == "features"
        _, _, rows = read_csv(o / "sweep.csv")
        assert [float(r[0]) for r in rows] == [0.3, 0.6, 0.9]
        meta, header, rows = read_csv(o / "dependence.csv")
        assert header == ["cluster_id", "value", "phi", "interaction_value"] and len(rows) == 40
        assert meta["feature"] and meta["interaction"]
        _, _, rows = read_csv(o / "ablation.csv")
        deltas = [float(r[3]) for r in rows]
        assert deltas == sorted(deltas, reverse=True)

    def test_explain_unknown_feature(self, tmp_path, synth_dir, capsys):
        args = ["explain", "--out", str(tmp_path), "--model", "ols", "--feature", "Spaceship", *data_args(synth_dir)]
        assert main(args) == 2
        assert "Spaceship" in capsys.readouterr().err

    def test_sweep_rejects_bad_thresholds(self, tmp_path, synth_dir):
        args = ["sweep", "--out", str(tmp_path), "--thresholds", "0.5", "1.2", *data_args(synth_dir)]
        assert main(args) == 2

    def test_no_command(self):
        assert main([]) == 2


class TestReport:
    def test_bundle_is_reproducible(self, tmp_path, synth_dir):
        out, cfg = small_report_dir(tmp_path, synth_dir)
        assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / MANIFEST).read_text())
        assert sorted(manifest["files"]) == sorted(BUNDLE_FILES)
        chash = verify_bundle(out)
        assert chash == manifest["config_hash"]
        for name in BUNDLE_FILES:
            assert embedded_hash(out / name) == chash
        first = {name: (out / name).read_bytes() for name in BUNDLE_FILES + (MANIFEST,)}

        again, _ = small_report_dir(tmp_path, synth_dir, "again")
        assert main(["report", "--config", str(cfg), "--out", str(again), "--jobs", "2"]) == 0
        for name, data in first.items():
            assert (again / name).read_bytes() == data, name

    def test_mixed_configs_rejected(self, tmp_path, synth_dir, capsys):
        out, cfg = small_report_dir(tmp_path, synth_dir)
        assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
        h1 = verify_bundle(out)
        before = (out / "grid.csv").read_bytes()
        assert main(["report", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 2
        assert "--force" in capsys.readouterr().err
        assert (out / "grid.csv").read_bytes() == before
        assert main(["report", "--config", str(cfg), "--out", str(out), "--seed", "4", "--force"]) == 0
        assert verify_bundle(out) != h1

    def test_tampered_bundle_detected(self, tmp_path, synth_dir):
        out, cfg = small_report_dir(tmp_path, synth_dir)
        assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
        with (out / "sweep.csv").open("a") as fh:
            fh.write("0.99,0,0\n")
        with pytest.raises(BundleError, match="digest"):
            verify_bundle(out)
