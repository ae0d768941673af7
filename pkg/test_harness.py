import logging
import math

import openpyxl
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fk_pipeline
from fklab import acceptance
from fklab import settings as lab_settings
from fklab.acceptance import AcceptanceReport, acceptance_suite
from fklab.config import (
    ExperimentConfig,
    apply_overrides,
    parse_config,
    serialize_config,
    validate_config,
)
from fklab.errors import ArgumentError, ConfigValidationError
from fklab.experiments import run_experiment
from fklab.geometry import export_boundary_csv, koch_prefractal
from fklab.records import RESULT_COLUMNS, RunRecord
from fklab.report import export_workbook

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
positive = st.floats(min_value=1e-6, max_value=1e6, allow_nan=False, allow_infinity=False)


def kernel_config(out_dir, **changes):
    base = ExperimentConfig(
        experiment="kernel", kind="line", half_width=20.0, x=(0.0, 1.0), y=(0.0, -1.0),
        truncation_a=4.0, beta=1.0, step_resolution=2.0, n_paths=200, workers=1, output=str(out_dir),
    )
    return apply_overrides(base, [f"{k}={v}" for k, v in changes.items()])


@settings(deadline=None, max_examples=50)
@given(seed=st.integers(0, 2 ** 31), beta=positive, x=st.tuples(finite, finite),
       sweep=st.lists(positive, min_size=1, max_size=6), constant=st.none() | positive,
       anchor=st.none() | st.tuples(finite, finite))
def test_config_round_trip(seed, beta, x, sweep, constant, anchor):
    config = ExperimentConfig(seed=seed, beta=beta, x=x, a_sweep=sweep, constant=constant, anchor=anchor)
    assert parse_config(serialize_config(config)) == config


def test_overrides_win_over_file():
    config = parse_config("experiment=kernel\nbeta=1.5\n")
    config = apply_overrides(config, ["beta=0.5", "x=0.25:1"])
    assert config.beta == 0.5
    assert config.x == (0.25, 1.0)
    assert config.experiment == "kernel"


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigValidationError, match="unknown config key"):
        parse_config("bogus=1\n")
    with pytest.raises(ConfigValidationError, match="cannot parse"):
        parse_config("level=six\n")
    with pytest.raises(ConfigValidationError):
        apply_overrides(ExperimentConfig(), ["level"])


def test_validation_names_the_problem():
    with pytest.raises(ConfigValidationError, match="unknown experiment"):
        validate_config(ExperimentConfig(experiment="teleport"))
    with pytest.raises(ConfigValidationError, match="at least 4 A values"):
        validate_config(ExperimentConfig(experiment="decay", kind="line", a_sweep=[4.0, 8.0]))
    with pytest.raises(ConfigValidationError, match="use n_steps >= 128"):
        validate_config(ExperimentConfig(experiment="kernel", kind="line", truncation_a=4.0,
                                         step_resolution=2.0, n_steps=10))
    with pytest.raises(ConfigValidationError, match="use level >= 7"):
        validate_config(ExperimentConfig(experiment="positivity", kind="koch", level=5, mesh_levels=4))


def test_run_is_reproducible(tmp_path):
    first = run_experiment(kernel_config(tmp_path / "a"))
    second = run_experiment(kernel_config(tmp_path / "b"))
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert list(first.results.columns) == RESULT_COLUMNS
    assert set(first.results["quantity"]) >= {"free_kernel", "kernel_forward", "kernel_reversed", "lower_bound"}
    assert first.provenance["seed"] == second.provenance["seed"] == 0


def test_worker_count_does_not_change_results(tmp_path):
    serial = run_experiment(kernel_config(tmp_path / "a", n_paths=5000, workers=1))
    pooled = run_experiment(kernel_config(tmp_path / "b", n_paths=5000, workers=2))
    assert serial.results["value"].tolist() == pooled.results["value"].tolist()


def test_record_reload_and_rerun(tmp_path):
    record = run_experiment(kernel_config(tmp_path / "run"))
    loaded = RunRecord.load(tmp_path / "run")
    assert serialize_config(loaded.config) == serialize_config(record.config)
    assert loaded.provenance == record.provenance
    again = loaded.rerun(tmp_path / "again")
    assert again.config.output == str(tmp_path / "again")
    assert (tmp_path / "run" / "results.csv").read_bytes() == (tmp_path / "again" / "results.csv").read_bytes()


def test_dump_paths(tmp_path):
    run_experiment(kernel_config(tmp_path / "run", dump_paths=3))
    assert sorted(p.name for p in (tmp_path / "run" / "paths").iterdir()) == [
        "path_0000.csv", "path_0001.csv", "path_0002.csv"]


def test_geometry_run(tmp_path):
    config = ExperimentConfig(experiment="geometry", kind="koch", level=3, scale_min=3.0 ** -5,
                              output=str(tmp_path / "geo"))
    record = run_experiment(config)
    assert (tmp_path / "geo" / "boundary.csv").exists()
    values = record.results.set_index("quantity")["value"]
    assert values["n_segments"] == 192
    assert values["resolution"] == pytest.approx(1.0 / 27.0)


def test_occupation_run(tmp_path):
    config = ExperimentConfig(experiment="occupation", kind="line", delta=1.0 / 3.0, n_min=1, n_max=2,
                              n_paths=500, workers=1, output=str(tmp_path / "occ"))
    record = run_experiment(config)
    assert record.summary["n_steps"] == 1620
    assert "scaling_slope" in record.summary
    assert set(record.results["param_value"].dropna()) >= {1.0, 2.0}


def test_positivity_run(tmp_path):
    config = ExperimentConfig(experiment="positivity", kind="line", beta=0.5, mesh_levels=6,
                              x=(0.0, 0.5), output=str(tmp_path / "pos"))
    record = run_experiment(config)
    assert record.summary["verdict"] == "finite"
    assert (record.results["quantity"] == "shell_term").sum() == 6


def test_decay_run_shares_paths_across_a(tmp_path):
    config = ExperimentConfig(experiment="decay", kind="line", half_width=20.0, x=(0.0, 0.5), t=0.5,
                              ball_center=(0.0, -1.0), ball_radius=0.75, beta=1.5, step_resolution=2.0,
                              a_sweep=[2.0, 4.0, 8.0, 16.0], n_paths=2000, workers=1,
                              output=str(tmp_path / "decay"))
    record = run_experiment(config)
    assert record.summary["n_steps"] == 1024
    masses = record.results[record.results["quantity"] == "crossing_mass"]["value"].tolist()
    assert len(masses) == 4
    assert masses[0] > masses[-1] > 0
    assert record.summary["sigma_hat"] > 0
    assert math.isfinite(record.summary["sigma_ci95"][0])


def test_cli_exit_codes(tmp_path):
    out = str(tmp_path / "cli")
    assert fk_pipeline.main(["kernel", "--set", "kind=line", "--set", "x=0:1", "--set", "y=0:-1",
                             "--set", "truncation_a=4", "--set", "step_resolution=2",
                             "--set", "n_paths=50", "--workers", "1", "--out", out]) == fk_pipeline.EXIT_OK
    assert fk_pipeline.main(["decay", "--set", "a_sweep=4,8", "--out", out]) == fk_pipeline.EXIT_INVALID


def test_cli_verify(tmp_path):
    good = export_boundary_csv(koch_prefractal(2), tmp_path / "good.csv")
    assert fk_pipeline.main(["geometry", "--verify", str(good), "--set", "scale_min=0.01",
                             "--out", str(tmp_path / "v1")]) == fk_pipeline.EXIT_OK
    lines = good.read_text().splitlines()
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines[:-1]) + "\n")
    assert fk_pipeline.main(["geometry", "--verify", str(bad), "--set", "scale_min=0.01",
                             "--out", str(tmp_path / "v2")]) == fk_pipeline.EXIT_INVALID


def test_cli_acceptance_exit_codes(tmp_path, monkeypatch):
    def passing(plan, rng, workers, scratch):
        return 1.0, "1", "exact", True, 0

    def failing(plan, rng, workers, scratch):
        return 0.0, "1", "exact", False, 0

    monkeypatch.setattr(acceptance, "CHECKS", [("passing", passing)])
    assert fk_pipeline.main(["accept", "--out", str(tmp_path / "ok")]) == fk_pipeline.EXIT_OK
    monkeypatch.setattr(acceptance, "CHECKS", [("passing", passing), ("failing", failing)])
    xlsx = tmp_path / "accept.xlsx"
    code = fk_pipeline.main(["accept", "--out", str(tmp_path / "bad"), "--xlsx", str(xlsx)])
    assert code == fk_pipeline.EXIT_ACCEPTANCE_FAILED
    assert "acceptance" in openpyxl.load_workbook(xlsx).sheetnames


def test_cli_reports_run_events_once(tmp_path, capsys, caplog):
    caplog.set_level(logging.INFO)
    assert fk_pipeline.main(["kernel", "--set", "kind=line", "--set", "x=0:1", "--set", "y=0:-1",
                             "--set", "truncation_a=4", "--set", "step_resolution=2",
                             "--set", "n_paths=50", "--workers", "1",
                             "--out", str(tmp_path / "cli")]) == fk_pipeline.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("STEP 1: KERNEL") == 1
    assert "Wall time:" in out
    assert not [r for r in caplog.records if r.name == "fklab.experiments" and r.levelno >= logging.INFO]


def test_cli_accepts_every_tier():
    parser = fk_pipeline.build_parser()
    for tier in ("fast", "desk", "full"):
        assert parser.parse_args(["accept", "--tier", tier]).tier == tier
        assert validate_config(ExperimentConfig(tier=tier)).tier == tier
    with pytest.raises(ConfigValidationError, match="fast, desk, full"):
        validate_config(ExperimentConfig(tier="medium"))


def test_full_tier_runs_published_parameters():
    full = acceptance.TIERS["full"]
    assert full.step_resolution == 10.0
    assert max(full.crossing_sweep) == 128.0
    assert full.crossing_paths == 10 ** 6
    assert acceptance._koch_for(full.crossing_sweep).level == 7
    desk = acceptance.TIERS["desk"]
    assert desk.step_resolution == 2.0
    assert max(desk.crossing_sweep) == 64.0


def test_occupation_slope_is_labelled_as_oracle():
    report = acceptance_suite("fast", only=["occupation_slope"])
    item = report.items[0]
    assert "oracle" in item.target
    assert "not sampled" in item.target
    assert item.n_samples == 0


def test_acceptance_isolates_errors(monkeypatch):
    def broken(plan, rng, workers, scratch):
        raise RuntimeError("boom")

    monkeypatch.setattr(acceptance, "CHECKS", acceptance.CHECKS + [("broken", broken)])
    report = acceptance_suite("fast", only=["rng_fixture", "broken"])
    items = {item.name: item for item in report.items}
    assert items["rng_fixture"].passed
    assert not items["broken"].passed
    assert "RuntimeError: boom" in items["broken"].error
    assert report.executed_fraction == 0.5
    assert report.failed == ["broken"]


def test_acceptance_detects_corrupted_fixture(tmp_path, monkeypatch):
    corrupted = tmp_path / "rng_reference.json"
    corrupted.write_text('{"generator": "other", "uniforms": [0.5]}')
    monkeypatch.setattr(lab_settings, "RNG_FIXTURE", corrupted)
    report = acceptance_suite("fast", only=["rng_fixture", "kernel_convention"])
    items = {item.name: item for item in report.items}
    assert not items["rng_fixture"].passed
    assert items["kernel_convention"].error == ""


def test_acceptance_rejects_unknown_tier():
    with pytest.raises(ArgumentError):
        acceptance_suite("medium")


def test_acceptance_report_round_trip():
    report = acceptance_suite("fast", only=["rng_fixture"])
    restored = AcceptanceReport.from_dict(report.to_dict())
    assert restored == report
    assert list(report.frame().columns)[:2] == ["name", "measured"]


def test_workbook_export(tmp_path):
    record = run_experiment(kernel_config(tmp_path / "run"))
    report = acceptance_suite("fast", only=["rng_fixture"])
    path = export_workbook([record, record], tmp_path / "book.xlsx", acceptance=report)
    book = openpyxl.load_workbook(path)
    assert book.sheetnames == ["Summary", "kernel", "kernel (2)", "acceptance"]
    sheet = book["kernel"]
    assert [c.value for c in sheet[1]] == RESULT_COLUMNS
    assert sheet.max_row == len(record.results) + 1
