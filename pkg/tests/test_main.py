import pytest

from core.harness.report import RunReport
from main import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, build_parser, cli_overrides, main


def test_cli_overrides():
    args = build_parser().parse_args(
        ["multimaterial", "--config", "configs/multimaterial.cfg", "--method", "rt", "--fixup", "off", "--anderson", "0", "--out", "tmp"]
    )
    assert cli_overrides(args) == {
        "driver": "multimaterial",
        "method": "rt",
        "fixup": False,
        "anderson_size": 0,
        "outer_solver": "picard",
        "output": "tmp",
    }


def test_cli_anderson_enables_acceleration():
    args = build_parser().parse_args(["mms", "--config", "x.cfg", "--anderson", "3"])
    overrides = cli_overrides(args)
    assert overrides["outer_solver"] == "anderson"
    assert "method" not in overrides


def test_unknown_driver_is_a_usage_error():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["transport", "--config", "x.cfg"])


def test_bad_config_exits_with_config_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("driver = mms\nrt_krylov = minres\npreconditioner = tri\n", encoding="utf-8")
    assert main(["mms", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["mms", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_failed_checks_exit_nonzero(tmp_path, monkeypatch):
    def fake_driver(config):
        report = RunReport(config.driver, config.to_text())
        report.check("always", False)
        return report

    monkeypatch.setattr("main.run_driver", fake_driver)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("driver = mms\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["mms", "--config", str(cfg), "--out", str(out)]) == EXIT_FAILED
    assert (out / "report.csv").exists()
    assert (out / "run.log").exists()


def test_passing_run_exits_zero(tmp_path, monkeypatch):
    def fake_driver(config):
        report = RunReport(config.driver, config.to_text())
        report.check("ok", True)
        return report

    monkeypatch.setattr("main.run_driver", fake_driver)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("driver = sn_convergence\n", encoding="utf-8")
    assert main(["sn_convergence", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK


def test_environment_settings_reach_the_run(tmp_path, monkeypatch):
    seen, levels = {}, []

    def fake_driver(config):
        seen["config"] = config
        report = RunReport(config.driver, config.to_text())
        report.check("ok", True)
        return report

    monkeypatch.setattr("main.run_driver", fake_driver)
    monkeypatch.setattr("main.set_level", levels.append)
    monkeypatch.setenv("SMM_OUTPUT_DIR", str(tmp_path / "env-out"))
    monkeypatch.setenv("SMM_WORKERS", "2")
    monkeypatch.setenv("LOG_LEVEL", "warning")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("driver = mms\n", encoding="utf-8")

    assert main(["mms", "--config", str(cfg)]) == EXIT_OK
    assert seen["config"].workers == 2
    assert (tmp_path / "env-out" / "report.csv").exists()
    assert levels == ["WARNING"]

    cfg.write_text("driver = mms\nworkers = 3\n", encoding="utf-8")
    assert main(["mms", "--config", str(cfg), "--log-level", "debug", "--out", str(tmp_path / "o")]) == EXIT_OK
    assert seen["config"].workers == 3
    assert levels[-1] == "DEBUG"
