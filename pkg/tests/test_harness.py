import csv
from pathlib import Path

import numpy as np
import pytest

from core.config import ProblemConfig, parse_config
from core.fespace import l2_project, make_space
from core.harness.drivers import (
    MMS_PUBLISHED,
    _check_mixed_fits,
    run_driver,
    run_mms,
    run_multimaterial,
    sample_lineout,
)
from core.harness.mms import DELTA, ManufacturedSolution, mms_fields
from core.harness.problems import ZChannel, build_mesh, diffusion_limit_problem, multimaterial_problem, nominal_h
from core.harness.report import REPORT_COLUMNS, Fit, RunReport, fit_order, strip_timings, timing_columns
from core.transport import FOUR_PI, build_angular_quadrature

POINTS = np.array([[0.3, 0.7], [0.55, 0.2], [0.9, 0.85]])
SHIPPED_CONFIGS = sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.cfg"))


def angular_integral(f, quad):
    return sum(w * f(om) for w, om in zip(quad.weights, quad.omega))


def test_mms_scalar_flux_and_current():
    quad = build_angular_quadrature(2, 4)
    mms = ManufacturedSolution()
    phi = angular_integral(lambda om: mms.psi(POINTS, om), quad)
    np.testing.assert_allclose(phi, mms.phi(POINTS), rtol=1e-12)
    J = angular_integral(lambda om: mms.psi(POINTS, om)[:, None] * om[:2], quad)
    np.testing.assert_allclose(J, mms.current(POINTS), atol=1e-12)


def test_mms_pressure_with_a_fourth_order_quadrature():
    quad = build_angular_quadrature(3, 8)
    mms = ManufacturedSolution()
    P = angular_integral(lambda om: mms.psi(POINTS, om)[:, None, None] * np.outer(om, om), quad)
    exact = mms.pressure(POINTS)
    np.testing.assert_allclose(P[:, :2, :2], exact[:, :2, :2], atol=1e-12)
    np.testing.assert_allclose(P[:, 2, 2], exact[:, 2, 2], atol=1e-12)
    np.testing.assert_allclose(np.trace(P, axis1=1, axis2=2), mms.phi(POINTS), rtol=1e-12)


def test_mms_source_matches_finite_differences():
    mms = ManufacturedSolution(2.0, 1.0)
    omega = np.array([0.48, -0.6, 0.64])
    h = 1e-6
    stream = (mms.psi(POINTS + h * omega[:2], omega) - mms.psi(POINTS - h * omega[:2], omega)) / (2 * h)
    expected = stream + 2.0 * mms.psi(POINTS, omega) - 1.0 * mms.phi(POINTS) / FOUR_PI
    np.testing.assert_allclose(mms.source(POINTS, omega), expected, atol=1e-6)


def test_mms_fields_bundle():
    omega = np.array([0.6, 0.0, 0.8])
    fields = mms_fields(POINTS, omega)
    assert fields.P.shape == (3, 3, 3)
    assert fields.J.shape == (3, 2)
    corner = ManufacturedSolution.alpha(np.array([[0.0, 0.0]]))[0]
    assert corner[0] == pytest.approx(DELTA)


def test_fit_order_recovers_the_rate():
    h = np.array([0.5, 0.25, 0.125, 0.0625])
    fit = fit_order(h, 3.0 * h**2)
    assert fit.order == pytest.approx(2.0, rel=1e-12)
    assert fit.constant == pytest.approx(3.0, rel=1e-10)
    assert fit.residual < 1e-12
    assert fit.levels == 4


@pytest.mark.parametrize("h, errors", [([0.5], [1.0]), ([0.5, 0.25], [1.0, 0.0]), ([0.5, 0.25], [1.0])])
def test_fit_order_rejects_bad_input(h, errors):
    with pytest.raises(ValueError):
        fit_order(h, errors)


def test_report_rows_and_checks():
    report = RunReport("mms", "driver = mms\n", ["projection error uses the L2 projection"])
    report.add_row(driver="mms", method="rt", level=4, err_phi=0.1)
    report.add_row(driver="mms", method="rt", level=8, err_phi=0.025)
    with pytest.raises(ValueError):
        report.add_row(driver="mms", speedup=2.0)
    assert report.column("err_phi", method="rt") == [0.1, 0.025]
    assert report.check("order", True)
    assert report.passed
    assert not report.check("balance", False, "1e-3")
    assert not report.passed


def test_report_files(tmp_path):
    report = RunReport("diffusion_limit", "driver = diffusion_limit\np = 2\n", ["lumped mass fallback"])
    report.fits["phi"] = fit_order([0.5, 0.25], [0.1, 0.025])
    report.add_row(driver="diffusion_limit", epsilon=0.1, outer_iterations=10, **timing_columns({"sweep": 0.5}, 1.0))
    report.lineout.append({"epsilon": 0.1, "x": 0.5, "varphi": 1.0, "varphi_refined": 1.01})
    out = report.write(tmp_path / "run")
    assert (out / "effective-config.txt").read_text() == "driver = diffusion_limit\np = 2\n"
    assert (out / "report.json").exists()
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "# driver: diffusion_limit"
    assert "# note: lumped mass fallback" in lines
    assert any(ln.startswith("# fit phi: order=2.0000") for ln in lines)
    body = [ln for ln in lines if not ln.startswith("#")]
    rows = list(csv.reader(body))
    assert tuple(rows[0]) == REPORT_COLUMNS
    row = dict(zip(rows[0], rows[1]))
    assert row["outer_iterations"] == "10"
    assert row["method"] == ""
    assert row["t_sweep"] == "0.5"
    with open(out / "lineout.csv", newline="") as f:
        assert next(csv.reader(f)) == ["epsilon", "x", "varphi", "varphi_refined"]


def test_strip_timings():
    row = {"driver": "mms", "err_phi": 0.1, **timing_columns({"solve": 2.0}, 3.0)}
    assert strip_timings(row) == {"driver": "mms", "err_phi": 0.1}
    assert row["rss_mb"] > 0


def test_z_channel_geometry():
    channel = ZChannel((0.0, 7.0, 0.0, 2.0), 0.25)
    assert channel.levels == (0.5, 1.5)
    assert channel.contains(0.5, 0.5)
    assert channel.contains(7.0 / 3.0, 1.0)
    assert channel.contains(3.5, 1.5)
    assert not channel.contains(0.5, 1.5)
    assert not channel.contains(3.5, 0.5)
    x = np.array([[0.0, 0.5], [0.0, 0.74], [0.0, 1.0], [1.0, 0.5]])
    np.testing.assert_array_equal(channel.entrance(x), [True, True, False, False])


def test_build_mesh_keeps_the_aspect_ratio():
    config = ProblemConfig(driver="multimaterial", domain=(0.0, 7.0, 0.0, 2.0))
    mesh = build_mesh(config, 2)
    assert mesh.num_elements == 14
    assert nominal_h(config, 2) == pytest.approx(1.0)


def test_diffusion_limit_cross_sections(square_mesh, quad):
    problem = diffusion_limit_problem(square_mesh, 1, quad, 0.01)
    np.testing.assert_allclose(problem.sigma_t, 100.0)
    np.testing.assert_allclose(problem.sigma_a, 0.01, rtol=1e-9)


def test_multimaterial_layout(quad):
    config = ProblemConfig(driver="multimaterial", domain=(0.0, 7.0, 0.0, 2.0), p=1)
    mesh = build_mesh(config, 2)
    problem = multimaterial_problem(config, mesh, quad)
    centroids = mesh.centroids()
    pipe = np.argmin(np.linalg.norm(centroids - [0.5, 0.5], axis=1))
    wall = np.argmin(np.linalg.norm(centroids - [0.5, 1.5], axis=1))
    assert problem.sigma_t[pipe] == pytest.approx(0.2 + 1e-3)
    assert problem.sigma_t[wall] == pytest.approx(200.0 + 1e-3)
    np.testing.assert_allclose(problem.sigma_a, 1e-3, rtol=1e-6)


def test_lineout_of_a_linear_field(square_mesh):
    g = l2_project(make_space(square_mesh, "DG", 1), lambda x: 1.0 + 2.0 * x[:, 0] + x[:, 1])
    xs = np.linspace(0.05, 0.95, 7)
    np.testing.assert_allclose(sample_lineout(g, xs, 0.3), 1.3 + 2.0 * xs, atol=1e-12)


@pytest.mark.slow
def test_diffusion_limit_driver_small_run():
    config = ProblemConfig(driver="diffusion_limit", refinements=[4], p=1, epsilons=[0.1])
    report = run_driver(config)
    assert len(report.column("outer_iterations")) == 1
    assert report.rows[0]["outer_converged"]


@pytest.mark.slow
def test_sn_convergence_driver_small_run():
    config = ProblemConfig(driver="sn_convergence", refinements=[2, 4], p=1, method="hrt", epsilons=[1.0])
    report = run_driver(config)
    assert report.rows


@pytest.mark.slow
def test_mms_driver_reports_rt_hrt_equivalence():
    config = ProblemConfig(driver="mms", refinements=[2, 4], p=1, method="rt")
    report = run_mms(config)
    assert report.checks["rt_hrt_equivalence"]
    assert "err_phi" in report.fits


@pytest.mark.slow
def test_multimaterial_driver_compares_the_fixup():
    config = ProblemConfig(driver="multimaterial", domain=(0.0, 7.0, 0.0, 2.0), refinements=[2], method="hrt")
    report = run_multimaterial(config)
    assert sorted(report.column("fixup")) == ["off", "on"]


def test_mixed_fit_checks_use_the_published_table():
    report = RunReport("mms", "")
    report.fits["err_phi"] = Fit(order=2.01, constant=0.7, residual=0.0, levels=4)
    report.fits["err_phi_proj"] = Fit(order=2.3, constant=0.2, residual=0.0, levels=4)
    report.fits["err_J"] = Fit(order=0.52, constant=0.5, residual=0.0, levels=4)
    _check_mixed_fits(report, 1)
    assert report.checks == {"mms_current_order": False, "mms_projected_order": True, "mms_constant": True}

    report.fits["err_J"] = Fit(order=1.1, constant=0.5, residual=0.0, levels=4)
    report.fits["err_phi"] = Fit(order=2.0, constant=1.83, residual=0.0, levels=4)
    _check_mixed_fits(report, 1)
    assert report.checks["mms_current_order"]
    assert not report.checks["mms_constant"]
    assert set(MMS_PUBLISHED["err_J"]) == {1, 2, 3}


@pytest.mark.parametrize("path", SHIPPED_CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_use_the_published_quadrature(path):
    config = parse_config(path)
    assert config.driver == path.stem
    assert config.quadrature == "level_symmetric"
    assert config.sn_order == (12 if config.driver == "multimaterial" else 4)
    if config.driver == "mms":
        assert config.tg_cell_scaled and config.refinements == [4, 8, 16, 32]


@pytest.mark.slow
@pytest.mark.parametrize("path", SHIPPED_CONFIGS, ids=lambda p: p.stem)
def test_shipped_config_passes_every_check(path):
    report = run_driver(parse_config(path))
    assert report.checks
    failed = [name for name, ok in report.checks.items() if not ok]
    assert not failed, failed
