import warnings

import numpy as np
import pytest

from elliptic import assemble, reconstruct_derivatives, solve_neumann
from errors import ClampWarning, HypothesisError, MeshResolutionError, StageError
from fields import make_oracle
from geometry import Disk, Interval, build_mesh
from identity import (IDENTITY_NAMES, SUPPLEMENTARY_IDENTITY_NAMES, TERM_NAMES, beta_limit_sweep,
                      boundary_curvature_defect, boundary_term, certify_convexity, check_ibp_identities,
                      hessian_term, hs_defect, phi2_fd, phi2_from_moments, refinement_ratio, solve_instance,
                      square_term, verify_identity)
from measure import build_measure

UNIT_INTERVAL = Interval(0.0, 1.0)
UNIT_DISK = Disk((0.0, 0.0), 1.0)


@pytest.fixture(scope="module")
def disk_reports():
    oracle = make_oracle("AnisotropicConvex", 2)
    return {resolution: verify_identity(UNIT_DISK, resolution, oracle, 0.0, 5.0)
            for resolution in ((32, 64), (64, 128))}


def test_separable_field_closed_form():
    report = verify_identity(UNIT_INTERVAL, 64, make_oracle("SeparableExponential", 1), 0.3, 3.0)
    # phi(t) = C exp(beta t / (beta - n)), so phi''/phi = (3/2)^2
    assert report.phi2_moments / report.phi == pytest.approx(2.25, rel=1e-12)
    assert report.phi2_decomposition / report.phi == pytest.approx(2.25, rel=1e-12)
    assert report.phi2_fd / report.phi == pytest.approx(2.25, rel=1e-6)
    assert report.terms["hessian_term"] == pytest.approx(1.5, rel=1e-12)
    assert report.terms["square_term"] == pytest.approx(0.75, rel=1e-12)
    assert report.terms["hs_defect_term"] == 0.0
    assert report.terms["boundary_term"] == 0.0
    assert report.headline_residual <= 1e-6


def test_separable_field_on_the_disk():
    oracle = make_oracle("SeparableExponential", 2, b0=2.0, g=(0.3, -0.1), q=0.2)
    report = verify_identity(UNIT_DISK, (16, 32), oracle, -0.4, 6.0)
    assert report.phi2_decomposition / report.phi == pytest.approx(2.25, rel=1e-10)
    assert report.residuals["fd_vs_decomposition"] <= 1e-6
    assert report.diagnostics.bc_relative == 0.0


def test_time_independent_field_has_zero_terms():
    mesh = build_mesh(UNIT_DISK, (16, 32))
    oracle = make_oracle("SpatialQuadratic", 2)
    report = verify_identity(UNIT_DISK, (16, 32), oracle, 0.1, 4.0)
    assert all(report.terms[name] == 0.0 for name in TERM_NAMES)
    assert report.phi2_moments == 0.0
    assert abs(phi2_fd(mesh, oracle, 0.1, 4.0).value) <= 1e-6 * report.phi


def test_affine_in_time_field():
    report = verify_identity(UNIT_INTERVAL, 32, make_oracle("AffineInTime", 1), 0.5, 3.0)
    # phi(t) ~ (1 + t)^k with k = beta / (beta - n): phi''/phi = k (k - 1) / (1 + t)^2
    assert report.terms["hessian_term"] == 0.0
    assert report.phi2_decomposition / report.phi == pytest.approx(1.0 / 3.0, rel=1e-10)
    assert report.phi2_fd / report.phi == pytest.approx(1.0 / 3.0, rel=1e-6)


def test_beta_zero_functional_is_flat():
    mesh = build_mesh(UNIT_DISK, (16, 32))
    estimate = phi2_fd(mesh, make_oracle("QuadraticConvex", 2), 0.3, 0.0)
    assert abs(estimate.value) <= 1e-8
    assert estimate.h == pytest.approx(1.3e-3)


def test_richardson_and_sensitivity():
    mesh = build_mesh(UNIT_INTERVAL, 32)
    oracle = make_oracle("QuadraticConvex", 1)
    plain = phi2_fd(mesh, oracle, 0.2, 3.0)
    extrapolated = phi2_fd(mesh, oracle, 0.2, 3.0, richardson=True)
    assert extrapolated.richardson and not plain.richardson
    assert plain.sensitivity >= 0.0
    assert extrapolated.value == pytest.approx(plain.value, rel=1e-5)


def test_hypotheses_on_beta():
    oracle = make_oracle("QuadraticConvex", 2)
    for beta in (0.0, 2.0):
        with pytest.raises(HypothesisError):
            verify_identity(UNIT_DISK, (16, 32), oracle, 0.0, beta)
    mesh = build_mesh(UNIT_DISK, (16, 32))
    state = build_measure(mesh, oracle, 0.0, 2.0)
    with pytest.raises(HypothesisError):
        phi2_from_moments(mesh, state, oracle, 0.0, 2.0)


def test_disk_three_way_agreement(disk_reports):
    report = disk_reports[(64, 128)]
    assert report.residuals["fd_vs_moments"] <= 1e-6
    assert report.residuals["fd_vs_decomposition"] <= 1e-2
    assert report.residuals["hs_defect_min"] >= 0.0
    assert report.diagnostics.bc_relative <= 0.1
    assert report.phi2_decomposition > 0
    assert all(report.sign_certificate.values())


def test_decomposition_converges_under_refinement(disk_reports):
    coarse = disk_reports[(32, 64)].residuals["moments_vs_decomposition"]
    fine = disk_reports[(64, 128)].residuals["moments_vs_decomposition"]
    assert refinement_ratio(coarse, fine) >= 3.0


def test_interval_agreement():
    report = verify_identity(UNIT_INTERVAL, 128, make_oracle("QuadraticConvex", 1), 0.2, 3.0)
    assert report.residuals["fd_vs_decomposition"] <= 1e-3
    assert report.terms["boundary_term"] == 0.0
    assert report.terms["hs_defect_term"] == 0.0


def test_terms_are_gauge_invariant():
    instance = solve_instance(UNIT_DISK, (16, 32), make_oracle("AnisotropicConvex", 2), 0.2, 5.0)
    mesh, state, sol = instance.mesh, instance.state, instance.solution
    shifted = reconstruct_derivatives(mesh, sol.grid_u + 3.0)
    oracle = make_oracle("AnisotropicConvex", 2)
    assert hessian_term(mesh, state, oracle, 0.2, 5.0, shifted) == pytest.approx(
        hessian_term(mesh, state, oracle, 0.2, 5.0, sol), rel=1e-9)
    assert square_term(mesh, state, oracle, 0.2, 5.0, 2, shifted) == pytest.approx(
        square_term(mesh, state, oracle, 0.2, 5.0, 2, sol), rel=1e-9)
    assert boundary_term(mesh, state, shifted, 5.0, 2) == pytest.approx(
        boundary_term(mesh, state, sol, 5.0, 2), rel=1e-9, abs=1e-12)


def test_hs_defect():
    assert hs_defect(np.array([[3.0, 0.0], [0.0, 3.0]])) == pytest.approx(0.0)
    assert hs_defect(np.array([[1.0, 0.0], [0.0, -1.0]])) == pytest.approx(2.0)
    assert hs_defect(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(2.0)
    assert np.all(hs_defect(np.full((5, 1, 1), 7.0)) == 0.0)


def test_ibp_identities_for_vanishing_solution():
    oracle = make_oracle("SeparableExponential", 1)
    instance = solve_instance(UNIT_INTERVAL, 32, oracle, 0.0, 3.0)
    checks = check_ibp_identities(instance.mesh, instance.state, oracle, 0.0, 3.0, instance.solution, instance.f)
    assert set(checks) == set(IDENTITY_NAMES + SUPPLEMENTARY_IDENTITY_NAMES)
    assert all(check.residual <= 1e-12 for check in checks.values())


def test_drift_square_for_constant_field():
    oracle = make_oracle("Constant", 1)
    mesh = build_mesh(UNIT_INTERVAL, 64)
    state = build_measure(mesh, oracle, 0.0, 3.0)
    f = np.cos(np.pi * mesh.interior_nodes[:, 0])
    grid_f = np.cos(np.pi * mesh.grid.nodes[:, 0])
    sol = solve_neumann(assemble(mesh, state), grid_f, state)
    checks = check_ibp_identities(mesh, state, oracle, 0.0, 3.0, sol, f)
    assert checks["drift_square"].residual <= 1e-6


@pytest.fixture(scope="module")
def disk_instances():
    oracle = make_oracle("AnisotropicConvex", 2)
    return oracle, {resolution: solve_instance(UNIT_DISK, resolution, oracle, 0.0, 5.0)
                    for resolution in ((32, 64), (64, 128), (128, 256))}


def _ibp_checks(oracle, instance):
    return check_ibp_identities(instance.mesh, instance.state, oracle, 0.0, 5.0,
                                instance.solution, instance.f)


def test_ibp_identities_on_the_disk(disk_instances):
    oracle, instances = disk_instances
    checks = _ibp_checks(oracle, instances[(64, 128)])
    for name in IDENTITY_NAMES:
        assert checks[name].residual <= 1e-3, name


@pytest.mark.parametrize("name", IDENTITY_NAMES)
def test_ibp_residuals_shrink_under_refinement(disk_instances, name):
    oracle, instances = disk_instances
    coarse = _ibp_checks(oracle, instances[(64, 128)])[name].residual
    fine = _ibp_checks(oracle, instances[(128, 256)])[name].residual
    assert refinement_ratio(coarse, fine) >= 3.0


def test_boundary_curvature_defect_vanishes_pointwise(disk_instances):
    _, instances = disk_instances
    defects = []
    for resolution in ((32, 64), (64, 128), (128, 256)):
        instance = instances[resolution]
        defect = boundary_curvature_defect(instance.mesh, instance.solution)
        assert defect.shape == (instance.mesh.n_boundary,)
        defects.append(float(np.max(np.abs(defect))))
    assert defects[1] <= 0.5 * defects[0]
    assert defects[2] <= 0.5 * defects[1]


def test_boundary_curvature_defect_is_zero_on_an_interval():
    instance = solve_instance(UNIT_INTERVAL, 32, make_oracle("QuadraticConvex", 1), 0.2, 3.0)
    defect = boundary_curvature_defect(instance.mesh, instance.solution)
    # II = 0 at an endpoint, leaving u' u'' which carries the Neumann error
    assert np.max(np.abs(defect)) <= 1e-2

@pytest.mark.parametrize("beta", [3.0, 5.0, 10.0])
def test_convex_certificate(beta):
    certificate = certify_convexity("i", make_oracle("QuadraticConvex", 2), UNIT_DISK,
                                   np.linspace(-0.5, 0.5, 11), beta, (16, 32))
    assert certificate.effective_beta == beta
    assert len(certificate.rows) == 11
    assert certificate.passed
    for row in certificate.rows:
        assert all(row.report.terms[name] >= -1e-8 for name in TERM_NAMES)


@pytest.mark.parametrize("beta", [1.0, 2.0])
def test_concave_certificate_runs_at_negative_beta(beta):
    certificate = certify_convexity("ii", make_oracle("QuadraticConcave", 1), Interval(-0.5, 0.5),
                                   np.linspace(-0.4, 0.4, 9), beta, 32)
    assert certificate.effective_beta == -beta
    assert certificate.passed
    for row in certificate.rows:
        assert all(row.report.terms[name] <= 1e-8 for name in TERM_NAMES)
        assert row.report.phi2_decomposition <= 0.0


def test_concave_case_matches_finite_differences():
    certificate = certify_convexity("ii", make_oracle("QuadraticConcave", 1), Interval(-0.5, 0.5),
                                   [-0.2, 0.0, 0.3], 2.0, 64)
    for row in certificate.rows:
        assert row.report.beta == -2.0
        assert row.report.residuals["fd_vs_decomposition"] <= 1e-3


def test_pole_core_residual_is_reported_separately(disk_reports):
    report = disk_reports[(64, 128)]
    assert 0.0 <= report.residuals["pde_strong_residual"] <= 1e-2
    assert report.residuals["pde_core_residual"] == report.diagnostics.core_residual
    assert np.isfinite(report.residuals["pde_core_residual"])
    interval = verify_identity(UNIT_INTERVAL, 32, make_oracle("QuadraticConvex", 1), 0.2, 3.0)
    assert interval.residuals["pde_core_residual"] == 0.0


@pytest.mark.parametrize("case, name, beta, domain", [
    ("i", "QuadraticConcave", 5.0, Interval(-0.5, 0.5)),
    ("i", "QuadraticConvex", 1.5, UNIT_DISK),
    ("ii", "QuadraticConvex", 2.0, UNIT_DISK),
    ("ii", "QuadraticConcave", -1.0, Interval(-0.5, 0.5)),
])
def test_certificate_hypotheses(case, name, beta, domain):
    oracle = make_oracle(name, domain.dim)
    with pytest.raises(HypothesisError):
        certify_convexity(case, oracle, domain, [0.0], beta, 16)


def test_unknown_certificate_case():
    with pytest.raises(ValueError):
        certify_convexity("iii", make_oracle("QuadraticConvex", 1), UNIT_INTERVAL, [0.0], 3.0, 16)


@pytest.mark.parametrize("kind", ["convex", "concave"])
def test_constant_field_limit(kind):
    mesh = build_mesh(UNIT_INTERVAL, 64)
    sweep = beta_limit_sweep(mesh, make_oracle("Constant", 1), 0.0, [1e2, 1e3, 1e4, 1e5], kind)
    assert sweep.target == pytest.approx(1.0 if kind == "convex" else -1.0, abs=1e-13)
    assert list(sweep.table.columns) == ["beta", "value", "target", "error", "clamped"]
    assert sweep.decreasing
    assert not sweep.clamped
    assert abs(sweep.final_error) <= 1e-6


def test_convex_limit_decays_like_one_over_beta():
    mesh = build_mesh(UNIT_DISK, (16, 32))
    sweep = beta_limit_sweep(mesh, make_oracle("QuadraticConvex", 2), 0.0, [1e2, 1e3, 1e4])
    assert -1.2 <= sweep.decay_exponent <= -0.8
    assert sweep.decreasing


def test_concave_limit_clamps_small_beta():
    mesh = build_mesh(UNIT_INTERVAL, 16)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sweep = beta_limit_sweep(mesh, make_oracle("Constant", 1, value=5.0), 0.0, [2.0, 10.0], "concave")
    assert any(issubclass(w.category, ClampWarning) for w in caught)
    assert sweep.clamped
    assert sweep.table["clamped"].tolist() == [True, False]


def test_limit_sweep_arguments():
    mesh = build_mesh(UNIT_INTERVAL, 16)
    oracle = make_oracle("Constant", 1)
    with pytest.raises(ValueError):
        beta_limit_sweep(mesh, oracle, 0.0, [10.0, 5.0])
    with pytest.raises(HypothesisError):
        beta_limit_sweep(mesh, oracle, 0.0, [1.0, 5.0])
    with pytest.raises(ValueError):
        beta_limit_sweep(mesh, oracle, 0.0, [5.0], kind="sideways")


def test_refinement_ratio():
    assert refinement_ratio(4e-3, 1e-3) == pytest.approx(4.0)
    assert refinement_ratio(1e-10, 1e-11) == float("inf")
    assert refinement_ratio(1e-3, 0.0) == float("inf")


def test_failures_carry_their_stage():
    with pytest.raises(StageError) as excinfo:
        solve_instance(UNIT_INTERVAL, 4, make_oracle("QuadraticConvex", 1), 0.3, 3.0)
    assert excinfo.value.stage == "solve"
    assert excinfo.value.t == 0.3
    assert isinstance(excinfo.value.cause, MeshResolutionError)
