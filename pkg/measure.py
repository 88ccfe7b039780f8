"""
Partition function, the probability measure mu_t and the functional phi(t)

mu_t has density phi(t, .)^(-beta) / Z(t) with respect to Lebesgue measure.
All sums are taken in log space so that large |beta| does not overflow.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from errors import HypothesisError, MeasureError, OutsideValidityError


@dataclass(frozen=True)
class MeasureState:
    """mu_t on the quadrature nodes, its boundary surface density, and its
    discrete counterpart on the control grid (normalised by its own sum)"""
    t: float
    beta: float
    Z: float
    log_Z: float
    interior_mu_weights: np.ndarray
    boundary_mu_weights: np.ndarray
    density: np.ndarray
    boundary_density: np.ndarray
    grid_mu_weights: np.ndarray
    grid_density: np.ndarray

    @property
    def size(self):
        return self.interior_mu_weights.size


def _field_values(oracle, t, points, where):
    if not oracle.contains(t, points):
        raise OutsideValidityError(f"{oracle.name}: {where} nodes leave the validity box at t={t}")
    values = oracle.value(t, points)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise MeasureError(f"{oracle.name} is not positive at every {where} node (t={t}, min={np.min(values)})")
    return values


def _read_only(*arrays):
    for array in arrays:
        array.setflags(write=False)


def log_partition(mesh, oracle, t, beta):
    """log of sum_i w_i phi(t, x_i)^(-beta)"""
    values = _field_values(oracle, t, mesh.interior_nodes, "interior")
    log_Z = logsumexp(np.log(mesh.interior_weights) - beta * np.log(values))
    if not np.isfinite(log_Z):
        raise MeasureError(f"partition function is not finite at t={t}, beta={beta}")
    return float(log_Z)


def build_measure(mesh, oracle, t, beta):
    """Discrete mu_t on the quadrature nodes, plus its surface density on the boundary.

    Interior weights are normalised by their own sum so they add up to one
    to rounding; boundary weights use the same normaliser Z. The grid
    weights (control volume times phi^(-beta)) get their own normaliser.
    """
    values = _field_values(oracle, t, mesh.interior_nodes, "interior")
    boundary_values = _field_values(oracle, t, mesh.boundary_nodes, "boundary")
    grid_values = _field_values(oracle, t, mesh.grid.nodes, "grid")

    log_q = np.log(mesh.interior_weights) - beta * np.log(values)
    log_Z = logsumexp(log_q)
    Z = np.exp(log_Z)
    if not np.isfinite(log_Z) or not np.isfinite(Z) or Z <= 0:
        raise MeasureError(f"phi^(-beta) does not give a finite positive Z at t={t}, beta={beta}")

    q = np.exp(log_q - log_Z)
    weights = q / q.sum()
    boundary_weights = np.exp(np.log(mesh.boundary_weights) - beta * np.log(boundary_values) - log_Z)
    if not np.all(np.isfinite(boundary_weights)):
        raise MeasureError(f"boundary weights are not finite at t={t}, beta={beta}")

    log_g = np.log(mesh.grid.volumes) - beta * np.log(grid_values)
    g = np.exp(log_g - logsumexp(log_g))
    grid_weights = g / g.sum()

    density = weights / mesh.interior_weights
    boundary_density = boundary_weights / mesh.boundary_weights
    grid_density = grid_weights / mesh.grid.volumes
    _read_only(weights, boundary_weights, density, boundary_density, grid_weights, grid_density)
    return MeasureState(
        t=float(t),
        beta=float(beta),
        Z=float(Z),
        log_Z=float(log_Z),
        interior_mu_weights=weights,
        boundary_mu_weights=boundary_weights,
        density=density,
        boundary_density=boundary_density,
        grid_mu_weights=grid_weights,
        grid_density=grid_density,
    )


def eval_phi(mesh, oracle, t, beta, n=None):
    """phi(t) = Z(t)^(-1 / (beta - n))"""
    n = mesh.dim if n is None else n
    if beta == n:
        raise HypothesisError(f"the functional needs beta != n (beta={beta}, n={n})")
    return float(np.exp(-log_partition(mesh, oracle, t, beta) / (beta - n)))


def log_functional(mesh, oracle, t):
    """-log of the integral of exp(-phi(t, .)) over V"""
    values = _field_values(oracle, t, mesh.interior_nodes, "interior")
    return float(-logsumexp(np.log(mesh.interior_weights) - values))


def _nodal(state, g):
    g = np.asarray(g, dtype=float)
    if g.shape != state.interior_mu_weights.shape:
        raise ValueError(f"nodal values have shape {g.shape}, expected {state.interior_mu_weights.shape}")
    return g


def mean_under_mu(state, g):
    return float(state.interior_mu_weights @ _nodal(state, g))


def variance_under_mu(state, g):
    """Var_mu(g), computed in centred form so it is never negative"""
    g = _nodal(state, g)
    centred = g - state.interior_mu_weights @ g
    return float(state.interior_mu_weights @ (centred * centred))
