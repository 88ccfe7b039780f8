import numpy as np
import pytest

from errors import HypothesisError, MeasureError, OutsideValidityError
from fields import make_oracle
from geometry import Disk, Interval, build_mesh
from measure import (build_measure, eval_phi, log_functional, log_partition, mean_under_mu,
                     variance_under_mu)


@pytest.fixture
def interval_mesh():
    return build_mesh(Interval(0.0, 1.0), 32)


@pytest.fixture
def disk_mesh():
    return build_mesh(Disk((0.0, 0.0), 1.0), (16, 32))


def test_weights_form_a_probability_measure(disk_mesh):
    state = build_measure(disk_mesh, make_oracle("QuadraticConvex", 2), 0.2, 5.0)
    assert state.interior_mu_weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(state.interior_mu_weights > 0)
    assert np.all(state.boundary_mu_weights > 0)
    assert np.allclose(state.density * disk_mesh.interior_weights, state.interior_mu_weights)


def test_weights_are_invariant_under_scaling_phi(interval_mesh):
    phi = make_oracle("SeparableExponential", 1, b0=1.0, g=0.3, q=0.2)
    doubled = make_oracle("SeparableExponential", 1, b0=2.0, g=0.6, q=0.4)
    a = build_measure(interval_mesh, phi, 0.1, 4.0)
    b = build_measure(interval_mesh, doubled, 0.1, 4.0)
    assert np.allclose(a.interior_mu_weights, b.interior_mu_weights, rtol=1e-12)
    assert b.log_Z == pytest.approx(a.log_Z - 4.0 * np.log(2.0), abs=1e-12)


@pytest.mark.parametrize("beta", [500.0, 2000.0, -500.0])
def test_large_beta_stays_finite(disk_mesh, beta):
    state = build_measure(disk_mesh, make_oracle("QuadraticConvex", 2), 0.0, beta)
    assert np.isfinite(state.log_Z)
    assert np.all(np.isfinite(state.interior_mu_weights))
    assert state.interior_mu_weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_constant_field_closed_form(interval_mesh):
    oracle = make_oracle("Constant", 1, value=2.0)
    assert eval_phi(interval_mesh, oracle, 0.0, 3.0) == pytest.approx(2.0 ** 1.5, rel=1e-13)
    assert log_partition(interval_mesh, oracle, 0.0, 3.0) == pytest.approx(-3.0 * np.log(2.0), abs=1e-13)
    assert log_functional(interval_mesh, oracle, 0.0) == pytest.approx(2.0, abs=1e-13)


def test_phi_is_undefined_at_beta_equal_dimension(interval_mesh):
    with pytest.raises(HypothesisError):
        eval_phi(interval_mesh, make_oracle("QuadraticConvex", 1), 0.0, 1.0)


def test_non_positive_field_is_rejected(interval_mesh):
    with pytest.raises(MeasureError):
        build_measure(interval_mesh, make_oracle("SeparableExponential", 1, b0=-1.0), 0.0, 3.0)


def test_nodes_outside_the_validity_box(interval_mesh):
    with pytest.raises(OutsideValidityError):
        build_measure(interval_mesh, make_oracle("QuadraticConcave", 1), 0.0, 3.0)


def test_moments(disk_mesh):
    state = build_measure(disk_mesh, make_oracle("QuadraticConvex", 2), 0.0, 5.0)
    x = disk_mesh.interior_nodes[:, 0]
    assert mean_under_mu(state, x) == pytest.approx(0.0, abs=1e-14)
    assert variance_under_mu(state, np.full(x.size, 3.0)) == pytest.approx(0.0, abs=1e-28)
    assert variance_under_mu(state, x) == pytest.approx(mean_under_mu(state, x * x), rel=1e-10)
    with pytest.raises(ValueError):
        mean_under_mu(state, x[:-1])


def test_separable_field_phi_closed_form(interval_mesh):
    oracle = make_oracle("SeparableExponential", 1)
    # Z(t) = exp(-beta t) |V|, so phi(t) = exp(beta t / (beta - n))
    assert eval_phi(interval_mesh, oracle, 0.2, 3.0) == pytest.approx(np.exp(0.3), rel=1e-13)


def test_uniform_variance_is_exact():
    mesh = build_mesh(Interval(0.0, 1.0), 16)
    state = build_measure(mesh, make_oracle("Constant", 1), 0.0, 3.0)
    x = mesh.interior_nodes[:, 0]
    assert mean_under_mu(state, x) == pytest.approx(0.5, abs=1e-14)
    assert variance_under_mu(state, x) == pytest.approx(1.0 / 12.0, abs=1e-14)


def test_log_partition_matches_a_ten_times_finer_quadrature():
    oracle = make_oracle("QuadraticConvex", 1)
    coarse = np.exp(log_partition(build_mesh(Interval(0.0, 1.0), 32), oracle, 0.0, 3.0))
    fine = np.exp(log_partition(build_mesh(Interval(0.0, 1.0), 320), oracle, 0.0, 3.0))
    assert abs(coarse - fine) <= 1e-8


def test_grid_weights_form_a_probability_measure(disk_mesh):
    state = build_measure(disk_mesh, make_oracle("QuadraticConvex", 2), 0.2, 5.0)
    assert state.grid_mu_weights.shape == (disk_mesh.n_interior,)
    assert state.grid_mu_weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(state.grid_density * disk_mesh.grid.volumes, state.grid_mu_weights)
    with pytest.raises(ValueError):
        state.grid_mu_weights[0] = 0.0
    # both rules see the same moments of a smooth weight
    x = disk_mesh.interior_nodes[:, 0] ** 2
    g = disk_mesh.grid.nodes[:, 0] ** 2
    assert state.grid_mu_weights @ g == pytest.approx(mean_under_mu(state, x), rel=1e-2)
