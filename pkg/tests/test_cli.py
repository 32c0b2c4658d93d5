import json

import pandas as pd
import pytest

from driftwatch import cli
from driftwatch.config import PipelineConfig
from driftwatch.pipeline import run_report

SCENARIO = {
    "n_sensors": 5,
    "hours": 350,
    "seed": 5,
    "zone_labels": ["Hot-Dry", "Marine"],
    "inside_sensors": [4],
    "injections": [
        {"sensor_index": 0, "mode": "channel_divergence", "onset_hour": 0,
         "magnitude": 25.0, "fraction": 0.08},
        {"sensor_index": 1, "mode": "channel_death", "onset_hour": 300},
    ],
}


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenario")
    (out / "scenario.json").write_text(json.dumps(SCENARIO))
    assert cli.main(["synth", "--scenario", str(out / "scenario.json"), "--out", str(out / "data")]) == 0
    return out / "data"


class TestExitCodes:
    def test_help_exits_zero_everywhere(self, capsys):
        for command in ["", "fetch", "ingest", "collocate", "flag-sweep", "flag",
                        "degrade", "correct", "trend", "gam", "synth", "report"]:
            argv = ([command, "--help"]) if command else ["--help"]
            with pytest.raises(SystemExit) as exc:
                cli.main(argv)
            assert exc.value.code == 0
            capsys.readouterr()

    def test_unknown_flag_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--bogus", "1"])
        assert exc.value.code == 1

    def test_unknown_command_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["explode"])
        assert exc.value.code == 1

    def test_missing_input_data_error(self, tmp_path, capsys):
        code = cli.main(["synth", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err

    def test_malformed_config_data_error(self, tmp_path, capsys):
        bad = tmp_path / "config.json"
        bad.write_text(json.dumps({"no_such_key": 1}))
        code = cli.main(["report", "--config", str(bad), "--out", str(tmp_path / "out")])
        assert code == 2


class TestStageCommands:
    def test_full_chain(self, scenario_dir, tmp_path, capsys):
        work = tmp_path

        assert cli.main([
            "ingest", "--raw", str(scenario_dir / "raw"),
            "--meta", str(scenario_dir / "meta.csv"),
            "--zones", str(scenario_dir / "zones.csv"),
            "--out", str(work / "ingested"),
        ]) == 0
        assert (work / "ingested" / "hourly.csv").exists()
        qc = json.loads((work / "ingested" / "qc_report.json").read_text())
        assert qc["qc"]["retained"] > 0

        assert cli.main([
            "collocate", "--hourly", str(work / "ingested" / "hourly.csv"),
            "--meta", str(work / "ingested" / "sensor_meta.csv"),
            "--sites", str(scenario_dir / "sites.csv"),
            "--reference", str(scenario_dir / "reference.csv"),
            "--out", str(work / "colloc"),
        ]) == 0
        pairs = pd.read_csv(work / "colloc" / "pairs.csv")
        assert len(pairs) == 4  # indoor sensor excluded

        assert cli.main([
            "flag-sweep", "--merged", str(work / "colloc" / "merged"),
            "--out", str(work / "sweep.csv"),
        ]) == 0
        sweep = pd.read_csv(work / "sweep.csv")
        assert list(sweep.columns) == ["x", "r", "nrmse", "pct_flagged"]
        assert len(sweep) == 100

        assert cli.main([
            "flag", "--hourly", str(work / "ingested" / "hourly.csv"),
            "--meta", str(work / "ingested" / "sensor_meta.csv"),
            "--out", str(work / "flagged.csv"),
        ]) == 0
        flagged = pd.read_csv(work / "flagged.csv")
        assert set(flagged["flag"].unique()) <= {0, 1}

        assert cli.main([
            "degrade", "--flagged", str(work / "flagged.csv"),
            "--meta", str(work / "ingested" / "sensor_meta.csv"),
            "--out", str(work / "degrade"),
        ]) == 0
        verdicts = pd.read_csv(work / "degrade" / "degraded_sensors.csv")
        assert set(verdicts.columns) == {
            "sensor_id", "degraded", "qualifying_hours", "lat", "lon",
            "climate_zone", "location",
        }

        assert cli.main([
            "correct", "--merged", str(work / "colloc" / "merged"),
            "--meta", str(work / "ingested" / "sensor_meta.csv"),
            "--out", str(work / "correct"),
        ]) == 0
        fit = json.loads((work / "correct" / "correction_fit.json").read_text())
        assert fit["model_id"] == 2
        assert len(fit["coefficients"]) == 3
        assert "loso" in fit

        assert cli.main([
            "trend", "--flagged", str(work / "flagged.csv"),
            "--errors", str(work / "correct" / "correction_errors.csv"),
            "--meta", str(work / "ingested" / "sensor_meta.csv"),
            "--out", str(work / "trend"),
        ]) == 0
        trends = pd.read_csv(work / "trend" / "trends.csv")
        assert {"outcome", "stratum", "slope_per_year"} <= set(trends.columns)
        assert (trends["outcome"] == "pct_flagged").any()

        assert cli.main([
            "gam", "--outcome", "pct_flagged", "--flagged", str(work / "flagged.csv"),
            "--out", str(work / "gam.json"), "--replicates", "10", "--seed", "3",
        ]) == 0
        gam = json.loads((work / "gam.json").read_text())
        assert len(gam["curve"]) == 200
        assert gam["bands"]["replicates_used"] <= 10
        capsys.readouterr()

    def test_directory_inputs_accepted(self, scenario_dir, tmp_path, capsys):
        work = tmp_path
        assert cli.main([
            "ingest", "--raw", str(scenario_dir / "raw"),
            "--meta", str(scenario_dir / "meta.csv"),
            "--zones", str(scenario_dir / "zones.csv"),
            "--out", str(work / "ingested"),
        ]) == 0
        # stage output directories stand in for their conventional files
        assert cli.main([
            "flag", "--hourly", str(work / "ingested"),
            "--meta", str(work / "ingested"),
            "--out", str(work / "flagged.csv"),
        ]) == 0
        assert cli.main([
            "degrade", "--flagged", str(work / "flagged.csv"),
            "--meta", str(work / "ingested"),
            "--out", str(work / "degrade"),
        ]) == 0
        assert cli.main([
            "trend", "--flagged", str(work / "flagged.csv"),
            "--meta", str(work / "ingested"),
            "--out", str(work / "trend"), "--weighted",
        ]) == 0
        trends = pd.read_csv(work / "trend" / "trends.csv")
        assert len(trends) > 0
        capsys.readouterr()


class TestReport:
    def _config(self, tmp_path, **overrides):
        doc = {"scenario": SCENARIO, "replicates": 10, "seed": 9}
        doc.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return path

    def test_report_artifacts_exist_and_parse(self, tmp_path, capsys):
        config = self._config(tmp_path)
        assert cli.main(["report", "--config", str(config), "--out", str(tmp_path / "out")]) == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert len(manifest["artifacts"]) >= 10
        for artifact in manifest["artifacts"]:
            path = tmp_path / "out" / artifact["path"]
            assert path.exists(), artifact
            if artifact["kind"] == "json":
                json.loads(path.read_text())
            else:
                pd.read_csv(path)

    def test_report_deterministic(self, tmp_path):
        config = PipelineConfig.from_dict({"scenario": SCENARIO, "replicates": 8, "seed": 4})
        m1 = run_report(config, tmp_path / "r1")
        m2 = run_report(config, tmp_path / "r2")
        assert m1 == m2
        files1 = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(tmp_path / "r2") for p in (tmp_path / "r2").rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (tmp_path / "r1" / rel).read_bytes() == (tmp_path / "r2" / rel).read_bytes(), rel
