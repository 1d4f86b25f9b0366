"""Weighted averages, their running-sum realization, and the bounds."""

import numpy as np
import pytest

from conftest import (constant_schedule, d0_from_reference,
                      ergodic_direct_from_records, make_small_tv,
                      make_two_pixel)
from pmm import apps, linops
from pmm.core import KktStop, SolverConfig, solve
from pmm.ergodic import (
    BoundCertificate, ErgodicState, accumulate, big_gamma_lower_bound,
    ergodic_certificate, ergodic_eps_bound, ergodic_report,
    ergodic_residual_bound, pointwise_bound, pointwise_certificate,
)
from pmm.linops import norm


def _run(problem, lam=1.0, iterations=40, rho=1.0, rho_bar=0.0,
         keep_records=False):
    cfg = SolverConfig(lam=lam, rho_bar=rho_bar,
                       rho_schedule=constant_schedule(rho),
                       max_iterations=iterations, stopping=())
    return solve(problem, cfg, keep_records=keep_records)


# ---------------------------------------------------------------------------
# running sums vs the defining formulas

def test_single_iteration_average_is_the_iterate():
    result = _run(make_two_pixel(0.2), iterations=1, keep_records=True)
    report = ergodic_report(result.ergodic)
    rec = result.records[0]
    np.testing.assert_allclose(report.u_bar, rec.u, atol=1e-14)
    np.testing.assert_allclose(report.v_bar, rec.v, atol=1e-14)
    np.testing.assert_allclose(report.x_bar, rec.x, atol=1e-14)
    np.testing.assert_allclose(report.y_bar, rec.y, atol=1e-14)
    assert 0.0 <= report.eps_u <= 1e-12
    assert 0.0 <= report.eps_v <= 1e-12


def test_identical_iterates_have_zero_eps():
    """When every accumulated record is the same point, the averages
    collapse onto it and both inclusion errors vanish."""
    result = _run(make_two_pixel(0.6), iterations=5, keep_records=True)
    rec = result.records[2]
    es = ErgodicState(d=np.zeros_like(rec.x))
    for _ in range(4):
        accumulate(es, rec)
    report = ergodic_report(es)
    np.testing.assert_allclose(report.u_bar, rec.u, atol=1e-13)
    np.testing.assert_allclose(report.y_bar, rec.y, atol=1e-13)
    assert report.eps_u <= 1e-12
    assert report.eps_v <= 1e-12


@pytest.mark.parametrize("prefix", [3, 100])
def test_running_sums_match_stored_history(prefix):
    """The O(1)-memory sums reproduce the direct evaluation from stored
    records: same averages, residuals, and eps values to 1e-12."""
    problem = make_small_tv(cg_tol=1e-10)
    result = _run(problem, iterations=100, rho=1.1, rho_bar=0.2,
                  keep_records=True)
    records = result.records[:prefix]
    direct = ergodic_direct_from_records(records, problem.d)

    es = ErgodicState(d=problem.d)
    for rec in records:
        accumulate(es, rec)
    report = ergodic_report(es)

    assert es.count == prefix
    assert es.big_gamma == pytest.approx(direct["big_gamma"], rel=1e-12)
    for name, got in (("u_bar", report.u_bar), ("v_bar", report.v_bar),
                      ("x_bar", report.x_bar), ("y_bar", report.y_bar),
                      ("r_primal", report.r_primal),
                      ("r_dual", report.r_dual)):
        np.testing.assert_allclose(got, direct[name], rtol=1e-11,
                                   atol=1e-12, err_msg=name)
    assert report.eps_u == pytest.approx(direct["eps_u"], abs=1e-12, rel=1e-9)
    assert report.eps_v == pytest.approx(direct["eps_v"], abs=1e-12, rel=1e-9)


def test_solver_history_matches_per_step_reports():
    """history rows published by solve() equal fresh reports built from
    the same records, at every iteration count."""
    problem = make_two_pixel(0.2)
    result = _run(problem, iterations=30, keep_records=True)
    es = ErgodicState(d=problem.d)
    for j, rec in enumerate(result.records):
        accumulate(es, rec)
        report = ergodic_report(es)
        assert result.history["ergodic_primal_residual"][j] == pytest.approx(
            report.r_primal_norm, rel=1e-12, abs=1e-15)
        assert result.history["ergodic_dual_residual"][j] == pytest.approx(
            report.r_dual_norm, rel=1e-12, abs=1e-15)
        assert result.history["eps_u"][j] == pytest.approx(
            report.eps_u, rel=1e-12, abs=1e-15)
        assert result.history["eps_v"][j] == pytest.approx(
            report.eps_v, rel=1e-12, abs=1e-15)
        assert result.history["big_gamma"][j] == pytest.approx(
            es.big_gamma, rel=1e-13)


@pytest.mark.parametrize("lam,rho,rho_bar", [
    (0.5, 1.0, 0.0), (1.0, 0.8, 0.2), (1.0, 1.2, 0.2), (2.0, 1.5, 0.5),
])
def test_eps_values_stay_nonnegative(lam, rho, rho_bar):
    problem = make_small_tv(lam=lam, cg_tol=1e-10)
    result = _run(problem, lam=lam, iterations=60, rho=rho, rho_bar=rho_bar,
                  keep_records=True)
    assert np.all(result.history["eps_u"] >= 0.0)
    assert np.all(result.history["eps_v"] >= 0.0)
    # The unclamped defining sums must stay above -1e-10 as well.
    direct = ergodic_direct_from_records(result.records, problem.d)
    assert direct["eps_u"] >= -1e-10
    assert direct["eps_v"] >= -1e-10


def test_report_raises_without_iterations():
    with pytest.raises(ValueError, match="no iterations"):
        ergodic_report(ErgodicState(d=np.zeros((2, 2, 1))))


def test_report_raises_on_corrupted_sums():
    result = _run(make_two_pixel(0.2), iterations=20)
    es = result.ergodic
    es.s_uy += 10.0 * es.big_gamma
    with pytest.raises(ValueError, match="negative beyond"):
        ergodic_report(es)


def test_accumulate_returns_state_for_chaining():
    result = _run(make_two_pixel(0.2), iterations=2, keep_records=True)
    es = ErgodicState(d=np.zeros_like(result.records[0].x))
    assert accumulate(es, result.records[0]) is es


# ---------------------------------------------------------------------------
# bound formulas

def test_tau_and_theta_values():
    cert = BoundCertificate(d0_bound=1.0, lam=2.0, rho_bar=0.5)
    assert cert.tau == 0.5
    assert cert.theta == pytest.approx(17.0)
    assert BoundCertificate(1.0, 1.0, 0.0).theta == pytest.approx(2.0)


def test_certificate_validation():
    with pytest.raises(ValueError, match="d0_bound"):
        BoundCertificate(-1.0, 1.0, 0.0)
    with pytest.raises(ValueError, match="lam"):
        BoundCertificate(1.0, 0.0, 0.0)
    with pytest.raises(ValueError, match="rho_bar"):
        BoundCertificate(1.0, 1.0, 1.0)


def test_bound_scaling_in_d0():
    base = BoundCertificate(d0_bound=0.7, lam=1.3, rho_bar=0.2)
    doubled = BoundCertificate(d0_bound=1.4, lam=1.3, rho_bar=0.2)
    k = 17
    assert pointwise_bound(doubled, k) == pytest.approx(
        2.0 * pointwise_bound(base, k))
    assert ergodic_residual_bound(doubled, k) == pytest.approx(
        2.0 * ergodic_residual_bound(base, k))
    assert ergodic_eps_bound(doubled, k) == pytest.approx(
        4.0 * ergodic_eps_bound(base, k))
    assert big_gamma_lower_bound(doubled, k) == big_gamma_lower_bound(base, k)


def test_bound_values_at_unit_parameters():
    cert = BoundCertificate(d0_bound=1.0, lam=1.0, rho_bar=0.0)
    assert pointwise_bound(cert, 4) == pytest.approx(1.0)
    assert big_gamma_lower_bound(cert, 10) == pytest.approx(5.0)
    assert ergodic_residual_bound(cert, 8) == pytest.approx(0.5)
    assert ergodic_eps_bound(cert, 16) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# certificates on solved instances

def test_two_pixel_certificates_pass(two_pixel_tight):
    for zeta, (problem, ref) in two_pixel_tight.items():
        cert = BoundCertificate(d0_bound=d0_from_reference(ref), lam=1.0,
                                rho_bar=0.0)
        result = _run(problem, iterations=40)
        min_primal = np.minimum.accumulate(result.history["primal_residual"])
        min_dual = np.minimum.accumulate(result.history["dual_residual"])
        point = pointwise_certificate(min_primal, min_dual, cert)
        assert point.passed, (zeta, point.margins)
        assert min(point.margins.values()) > 0.0
        erg = ergodic_certificate(result.ergodic, cert)
        assert erg.passed, (zeta, erg.margins)
        assert set(erg.margins) == {"primal", "dual", "eps", "big_gamma"}


def test_big_gamma_beats_lower_bound_at_every_k(small_tv_tight):
    problem, _ = small_tv_tight
    result = _run(problem, iterations=80, rho=0.9, rho_bar=0.2)
    ks = np.arange(1, 81)
    cert = BoundCertificate(d0_bound=1.0, lam=1.0, rho_bar=0.2)
    lower = big_gamma_lower_bound(cert, ks)
    assert np.all(result.history["big_gamma"] >= lower)


def test_ergodic_history_satisfies_per_k_bounds(small_tv_tight):
    """Every iteration count k, not just the final one, obeys the
    averaged-iterate bounds."""
    problem, ref = small_tv_tight
    cert = BoundCertificate(d0_bound=d0_from_reference(ref), lam=1.0,
                            rho_bar=0.0)
    result = _run(problem, iterations=120)
    ks = np.arange(1, 121)
    res_bounds = ergodic_residual_bound(cert, ks)
    assert np.all(result.history["ergodic_primal_residual"] <= res_bounds)
    assert np.all(result.history["ergodic_dual_residual"] <= res_bounds)
    eps_bounds = ergodic_eps_bound(cert, ks)
    eps_total = result.history["eps_u"] + result.history["eps_v"]
    assert np.all(eps_total <= eps_bounds)


def test_pointwise_certificate_input_validation():
    cert = BoundCertificate(1.0, 1.0, 0.0)
    with pytest.raises(ValueError, match="equal length"):
        pointwise_certificate(np.zeros(3), np.zeros(4), cert)
    with pytest.raises(ValueError, match="no iterations"):
        pointwise_certificate(np.zeros(0), np.zeros(0), cert)


def test_ergodic_certificate_count_mismatch():
    result = _run(make_two_pixel(0.2), iterations=10)
    cert = BoundCertificate(1.0, 1.0, 0.0)
    with pytest.raises(ValueError, match="does not match"):
        ergodic_certificate(result.ergodic, cert, k=9)


def test_degenerate_instance_accumulates_nothing():
    """An instance solved exactly at the first step never reaches the
    averaging phase; the report refuses to fabricate one."""
    b = np.full((3, 3), 0.2)
    problem = apps.build_tv_problem(
        apps.TvProblem(b, zeta=1.0), 1.0,
        linops.CgConfig(tolerance=1e-13, max_iterations=100))
    result = solve(problem, SolverConfig(lam=1.0, max_iterations=10))
    assert result.stopped_exact
    assert result.ergodic.count == 0
    with pytest.raises(ValueError, match="no iterations"):
        ergodic_report(result.ergodic)


def test_averaged_subgradient_inclusion_for_l1_block(two_pixel_tight):
    """x_bar is an eps_v-subgradient of the l1 term at v_bar: finite
    conjugate value and a duality gap within eps_v."""
    for zeta, (problem, _) in two_pixel_tight.items():
        result = _run(problem, iterations=40)
        report = ergodic_report(result.ergodic)
        x_bar = report.x_bar
        v_bar = report.v_bar
        assert np.max(np.abs(x_bar)) <= zeta + 1e-10
        gap = zeta * np.sum(np.abs(v_bar)) - linops.inner(x_bar, v_bar)
        assert gap <= report.eps_v + 1e-10


def test_larger_instance_pointwise_bound_at_k100():
    """32x32 denoising: the k = 100 best-so-far bound evaluates to
    2 d0 / 10 and holds with three orders of magnitude to spare."""
    problem = make_small_tv(shape=(32, 32), cg_tol=1e-10)
    cfg = SolverConfig(lam=1.0, max_iterations=2000,
                       stopping=(KktStop(1e-5, 1e-5),))
    ref = solve(problem, cfg, track_ergodic=False)
    assert ref.stop_reason == "kkt"
    d0 = d0_from_reference(ref, pad=1e-4)
    cert = BoundCertificate(d0_bound=d0, lam=1.0, rho_bar=0.0)

    result = _run(problem, iterations=100)
    assert pointwise_bound(cert, 100) == pytest.approx(2.0 * d0 / 10.0)
    min_primal = np.minimum.accumulate(result.history["primal_residual"])
    min_dual = np.minimum.accumulate(result.history["dual_residual"])
    outcome = pointwise_certificate(min_primal, min_dual, cert, k=100)
    assert outcome.passed
    assert max(min_primal[-1], min_dual[-1]) <= pointwise_bound(cert, 100)
