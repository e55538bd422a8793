from splitnav.cli import EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, main
from splitnav.pipeline import ReportRow, RunPaths, write_report

MINI = [
    "--set", "dataset.train=4", "--set", "dataset.val=2", "--set", "dataset.test=2",
]


def test_show_config_prints_ini(capsys):
    assert main(["show-config"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[experiment]" in out
    assert "root_seed = 20240811" in out


def test_show_config_applies_overrides(capsys):
    assert main(["show-config", "--set", "teacher.epochs=2"]) == EXIT_OK
    assert "epochs = 2" in capsys.readouterr().out


def test_bad_override_exits_config(capsys):
    assert main(["show-config", "--set", "nonsense"]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_unknown_key_exits_config(capsys):
    assert main(["show-config", "--set", "teacher.warp=9"]) == EXIT_CONFIG


def test_missing_config_file_exits_config(tmp_path, capsys):
    assert main(["show-config", "--config", str(tmp_path / "no.ini")]) == EXIT_CONFIG


def test_gen_data_creates_artifacts(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["gen-data", "--output", out, *MINI]) == EXIT_OK
    paths = RunPaths(out)
    assert paths.dataset("train").exists()
    assert paths.marker("dataset").exists()
    assert "completed" in capsys.readouterr().out
    # second invocation honours the marker
    assert main(["gen-data", "--output", out, *MINI]) == EXIT_OK
    assert "already done" in capsys.readouterr().out


def test_stage_without_inputs_exits_prereq(tmp_path, capsys):
    assert main(["train-teacher", "--output", str(tmp_path / "empty")]) == EXIT_PREREQ
    assert "dataset" in capsys.readouterr().err


def test_report_without_run_exits_prereq(tmp_path):
    assert main(["report", "--output", str(tmp_path / "empty")]) == EXIT_PREREQ


def test_report_prints_table(tmp_path, capsys):
    out = str(tmp_path / "run")
    paths = RunPaths(out)
    write_report(paths.report, [ReportRow("baseline-32", 90.0, 2.1, 0.35, 0.0),
                                ReportRow("gate", 85.0, 2.3, 0.21, 0.6)])
    assert main(["report", "--output", out]) == EXIT_OK
    text = capsys.readouterr().out
    assert "baseline-32" in text and "gate" in text
    assert "90.0" in text and "0.350" in text


def test_pipeline_rejects_unknown_stage(tmp_path, capsys):
    code = main(["pipeline", "--output", str(tmp_path), "--stages", "dataset,deploy"])
    assert code == EXIT_CONFIG


def test_pipeline_stage_subset(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["pipeline", "--output", out, "--stages", "dataset", *MINI]) == EXIT_OK
    paths = RunPaths(out)
    assert paths.marker("dataset").exists()
    assert not paths.marker("teacher").exists()
    assert paths.config_snapshot.exists()


def test_output_env_fallback(tmp_path, monkeypatch, capsys):
    out = str(tmp_path / "env-run")
    monkeypatch.setenv("SPLITNAV_OUTPUT", out)
    assert main(["gen-data", *MINI]) == EXIT_OK
    assert RunPaths(out).dataset("train").exists()
