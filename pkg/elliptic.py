"""
Weighted Neumann problem L_t u = f, du/dnu = 0 on the control grid

L_t u = Lap u - beta <grad_x phi, grad u> / phi is discretised through its
Dirichlet form a(u, v) = int <grad u, grad v> dmu_t, assembled as
G^T diag(c) G with G a fourth-order staggered face-difference operator.
The solve returns grid values of u fixed by the gauge int u dmu_t = 0;
gradients and Hessians are reconstructed on the grid with fourth-order
stencils (radial / interval) and spectral differentiation (angular), then
moved to the quadrature nodes.

The lumped mass of the rings next to the disk centre sits at the ring
radius rather than at the cell centroid, an offset of dr / (12 (i + 1/2)).
The strong residual max |L_t u - f| is therefore first order inside a core
around the centre and second order outside it; both are reported.
"""

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.fft import irfft, rfft
from scipy.sparse.linalg import cg, splu
from scipy.special import factorial

from errors import (DegenerateWeightsError, IncompatibleDataError, MeshResolutionError,
                    SolverConvergenceError)
from geometry import Interval, pole_core, to_quadrature

MIN_NODES_PER_DIRECTION = 8
COMPATIBILITY_TOL = 1e-6
NEGLIGIBLE_RHS = 1e-13


@dataclass(frozen=True)
class WeakSystem:
    mesh: object
    matrix: sp.csr_matrix
    gradient: sp.csr_matrix
    face_coefficients: np.ndarray
    mass: np.ndarray

    @property
    def size(self):
        return self.mass.size


@dataclass(frozen=True)
class Derivatives:
    """Values and Cartesian derivatives of a grid field at the quadrature nodes,
    and extrapolated to the boundary nodes"""
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    lap: np.ndarray
    boundary_value: np.ndarray
    boundary_grad: np.ndarray
    boundary_hess: np.ndarray


@dataclass(frozen=True)
class SolverDiagnostics:
    method: str
    algebraic_residual: float
    compatibility_mean: float
    gauge: float
    bc_residual: float
    bc_relative: float
    strong_residual: float = None
    core_residual: float = None


@dataclass(frozen=True)
class NeumannSolution:
    """``u`` at the quadrature nodes; ``grid_u`` is the solved grid field"""
    u: np.ndarray
    grid_u: np.ndarray
    derivatives: Derivatives
    diagnostics: SolverDiagnostics

    @property
    def grad_u(self):
        return self.derivatives.grad

    @property
    def hess_u(self):
        return self.derivatives.hess

    @property
    def lap_u(self):
        return self.derivatives.lap

    def with_strong_residual(self, value, core=0.0):
        diagnostics = replace(self.diagnostics, strong_residual=float(value), core_residual=float(core))
        return replace(self, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Finite-difference stencils on uniform lines
# ---------------------------------------------------------------------------

def fd_weights(offsets, order):
    """Weights w with sum_k w_k f(s_k) ~ f^(order)(0) for unit-spaced offsets s_k"""
    offsets = np.asarray(offsets, dtype=float)
    powers = np.arange(offsets.size)
    vandermonde = offsets[None, :] ** powers[:, None] / factorial(powers)[:, None]
    rhs = np.zeros(offsets.size)
    rhs[order] = 1.0
    return np.linalg.solve(vandermonde, rhs)


@lru_cache(maxsize=64)
def _line_operator(length, order):
    """Differentiation matrix on `length` unit-spaced nodes: centred 5-point
    stencils inside, one-sided 6-point stencils at the two ends"""
    rows, cols, vals = [], [], []
    for i in range(length):
        if 2 <= i <= length - 3:
            idx = np.arange(i - 2, i + 3)
        elif i < 2:
            idx = np.arange(6)
        else:
            idx = np.arange(length - 6, length)
        rows.extend([i] * idx.size)
        cols.extend(idx)
        vals.extend(fd_weights(idx - i, order))
    return sp.csr_matrix((vals, (rows, cols)), shape=(length, length))


@lru_cache(maxsize=64)
def _face_stencils(length, through_centre):
    """Four-node stencils for the faces between consecutive cells of a line.

    Cell k is centred at k + 1/2 and face i, between cells i and i + 1, sits
    at i + 1. Each entry is (first cell, derivative weights, value weights).
    With ``through_centre`` the first face may reach cell -1, the mirror of
    cell 0 across the disk centre.
    """
    stencils = []
    for i in range(length - 1):
        start = min(i - 1, length - 4)
        if not through_centre:
            start = max(start, 0)
        offsets = start + np.arange(4) + 0.5 - (i + 1)
        stencils.append((start, fd_weights(offsets, 1), fd_weights(offsets, 0)))
    return tuple(stencils)


@lru_cache(maxsize=64)
def _end_weights(length, order, side):
    """Weights evaluating the order-th derivative half a cell beyond the first or last node"""
    if side == "high":
        idx = np.arange(length - 6, length)
        target = length - 0.5
    else:
        idx = np.arange(6)
        target = -0.5
    return idx, fd_weights(idx - target, order)


def _end_value(values, h, order, side):
    idx, weights = _end_weights(values.shape[0], order, side)
    return np.tensordot(weights, values[idx], axes=(0, 0)) / h ** order


def _angular_derivative(values, order):
    """Spectral derivative along the last (periodic, uniform) axis in radians"""
    m = values.shape[-1]
    k = np.arange(m // 2 + 1, dtype=float)
    if order == 1:
        factor = 1j * k
        if m % 2 == 0:
            factor[-1] = 0.0
    else:
        factor = -(k ** 2)
    return irfft(rfft(values, axis=-1) * factor, n=m, axis=-1)


def _check_resolution(mesh):
    if min(mesh.shape) < MIN_NODES_PER_DIRECTION:
        raise MeshResolutionError(
            f"derivative stencils need >= {MIN_NODES_PER_DIRECTION} nodes per direction, got {mesh.shape}")


def _polar_to_cartesian(r, theta, ur, urr, ut, utt, urt):
    c, s = np.cos(theta), np.sin(theta)
    radial = ur / r + utt / r ** 2
    twist = urt / r - ut / r ** 2
    grad = np.stack([c * ur - s * ut / r, s * ur + c * ut / r], axis=-1)
    hxx = c * c * urr + s * s * radial - 2 * s * c * twist
    hyy = s * s * urr + c * c * radial + 2 * s * c * twist
    hxy = s * c * (urr - radial) + (c * c - s * s) * twist
    hess = np.stack([np.stack([hxx, hxy], axis=-1), np.stack([hxy, hyy], axis=-1)], axis=-2)
    return grad, hess


def _grid_derivatives(mesh, U):
    """Cartesian gradient and Hessian of a grid field, plus boundary extrapolations"""
    if isinstance(mesh.domain, Interval):
        h, = mesh.spacing
        m = U.size
        du = _line_operator(m, 1) @ U / h
        d2u = _line_operator(m, 2) @ U / h ** 2
        ends = [(_end_value(U, h, k, "low"), _end_value(U, h, k, "high")) for k in range(3)]
        return (du[:, None], d2u[:, None, None], np.array(ends[0]),
                np.array(ends[1])[:, None], np.array(ends[2])[:, None, None])

    m_r, m_theta = mesh.shape
    dr, _ = mesh.spacing
    U = U.reshape(m_r, m_theta)
    half = m_theta // 2
    # values at radii -r_1, -r_0 are those at r_1, r_0 on the opposite ray
    extended = np.vstack([np.roll(U[1], -half), np.roll(U[0], -half), U])
    ur = (_line_operator(m_r + 2, 1) @ extended)[2:] / dr
    urr = (_line_operator(m_r + 2, 2) @ extended)[2:] / dr ** 2
    ut = _angular_derivative(U, 1)
    utt = _angular_derivative(U, 2)
    urt = _angular_derivative(ur, 1)
    grad, hess = _polar_to_cartesian(mesh.grid.radii[:, None], mesh.angles[None, :], ur, urr, ut, utt, urt)

    ub = _end_value(U, dr, 0, "high")
    ur_b = _end_value(U, dr, 1, "high")
    urr_b = _end_value(U, dr, 2, "high")
    b_grad, b_hess = _polar_to_cartesian(
        mesh.domain.radius, mesh.angles, ur_b, urr_b,
        _angular_derivative(ub, 1), _angular_derivative(ub, 2), _angular_derivative(ur_b, 1))
    return grad.reshape(-1, 2), hess.reshape(-1, 2, 2), ub, b_grad, b_hess


def reconstruct_derivatives(mesh, u):
    """Value, gradient, Hessian and Laplacian at the quadrature nodes of the grid field u.

    Interval: fourth-order central differences with one-sided closures.
    Disk: fourth-order differences in r (continued through the centre along
    the opposite ray, so only the rim needs a one-sided closure) and FFT
    differentiation in theta, then a change to Cartesian components.
    Boundary quantities are extrapolated from the grid directly.
    """
    _check_resolution(mesh)
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_interior,):
        raise ValueError(f"grid field has shape {u.shape}, expected ({mesh.n_interior},)")

    grad, hess, boundary_value, boundary_grad, boundary_hess = _grid_derivatives(mesh, u)
    hess = to_quadrature(mesh, hess)
    return Derivatives(
        value=to_quadrature(mesh, u),
        grad=to_quadrature(mesh, grad),
        hess=hess,
        lap=np.trace(hess, axis1=1, axis2=2),
        boundary_value=boundary_value,
        boundary_grad=boundary_grad,
        boundary_hess=boundary_hess,
    )


# ---------------------------------------------------------------------------
# Assembly and solve
# ---------------------------------------------------------------------------

def _interval_faces(mesh, density):
    m = mesh.n_interior
    h, = mesh.spacing
    rows, cols, grad_vals, interp_vals = [], [], [], []
    for i, (start, dw, iw) in enumerate(_face_stencils(m, False)):
        rows.extend([i] * 4)
        cols.extend(range(start, start + 4))
        grad_vals.extend(dw / h)
        interp_vals.extend(iw)
    gradient = sp.csr_matrix((grad_vals, (rows, cols)), shape=(m - 1, m))
    interpolate = sp.csr_matrix((interp_vals, (rows, cols)), shape=(m - 1, m))
    return gradient, (interpolate @ density) * h


def _disk_faces(mesh, density):
    m_r, m_theta = mesh.shape
    dr, dtheta = mesh.spacing
    radii = mesh.grid.radii
    rho = density.reshape(m_r, m_theta)
    index = np.arange(m_r * m_theta).reshape(m_r, m_theta)
    opposite = (np.arange(m_theta) + m_theta // 2) % m_theta

    # radial faces at r = (i + 1) dr between rings i and i + 1
    radial_rows, radial_cols, radial_vals, rho_radial = [], [], [], []
    for i, (start, dw, iw) in enumerate(_face_stencils(m_r, True)):
        cols = np.stack([index[k] if k >= 0 else index[-k - 1, opposite] for k in range(start, start + 4)])
        radial_rows.append(np.repeat(i * m_theta + np.arange(m_theta), 4))
        radial_cols.append(cols.T.ravel())
        radial_vals.append(np.tile(dw / dr, m_theta))
        rho_radial.append(iw @ density[cols])
    n_radial = (m_r - 1) * m_theta
    face_r = (np.arange(1, m_r) * dr)[:, None]
    radial_coeff = (np.array(rho_radial) * face_r * dtheta * dr).ravel()

    # angular faces between theta_j and theta_{j+1}, fourth-order staggered difference
    shifts = (-1, 0, 1, 2)
    stencil = np.array([1.0, -27.0, 27.0, -1.0]) / 24.0
    n_angular = m_r * m_theta
    angular_rows = np.repeat(np.arange(n_angular), 4) + n_radial
    angular_cols = np.stack([np.roll(index, -s, axis=1) for s in shifts], axis=-1).ravel()
    scale = 1.0 / (radii[:, None] * dtheta)
    angular_vals = (stencil[None, None, :] * np.broadcast_to(scale, (m_r, m_theta))[..., None]).ravel()
    rho_face = (-np.roll(rho, 1, axis=1) + 9 * rho + 9 * np.roll(rho, -1, axis=1) - np.roll(rho, -2, axis=1)) / 16
    angular_coeff = (rho_face * radii[:, None] * dtheta * dr).ravel()

    rows = np.concatenate(radial_rows + [angular_rows])
    cols = np.concatenate(radial_cols + [angular_cols])
    vals = np.concatenate(radial_vals + [angular_vals])
    gradient = sp.csr_matrix((vals, (rows, cols)), shape=(n_radial + n_angular, n_angular))
    return gradient, np.concatenate([radial_coeff, angular_coeff])


def assemble(mesh, state):
    """Discrete Dirichlet form of mu_t on the control grid and the grid mass weights"""
    if state.grid_mu_weights.size != mesh.n_interior:
        raise ValueError("measure and mesh have different node counts")
    if isinstance(mesh.domain, Interval):
        gradient, coeff = _interval_faces(mesh, state.grid_density)
    else:
        gradient, coeff = _disk_faces(mesh, state.grid_density)
    if not np.all(np.isfinite(coeff)) or np.any(coeff <= 0):
        raise DegenerateWeightsError(f"face coefficients must be positive, min={np.min(coeff)}")
    matrix = (gradient.T @ sp.diags(coeff) @ gradient).tocsr()
    matrix = (0.5 * (matrix + matrix.T)).tocsr()
    return WeakSystem(mesh=mesh, matrix=matrix, gradient=gradient.tocsr(),
                      face_coefficients=coeff, mass=np.asarray(state.grid_mu_weights))


def dirichlet_form(system, u, v):
    """a(u, v) = sum over faces of c_f (G u)_f (G v)_f"""
    return float((system.gradient @ u) @ (system.face_coefficients * (system.gradient @ v)))


def _solve_direct(system, rhs, refinement_steps=2):
    p = system.mass
    bordered = sp.bmat([[system.matrix, sp.csr_matrix(p[:, None])],
                        [sp.csr_matrix(p[None, :]), None]], format="csc")
    lu = splu(bordered)
    full_rhs = np.append(rhs, 0.0)
    x = lu.solve(full_rhs)
    for _ in range(refinement_steps):
        x += lu.solve(full_rhs - bordered @ x)
    return x[:-1]


def _solve_cg(system, rhs, rtol, maxiter):
    p = system.mass
    u, info = cg(system.matrix, rhs, rtol=0.1 * rtol, maxiter=maxiter)
    if info != 0:
        raise SolverConvergenceError(f"conjugate gradients stopped with info={info}")
    return u - (p @ u)


def solve_neumann(system, f, state, method="direct", rtol=1e-10, maxiter=None):
    """Solve A u = -M f on the control grid after projecting f to exact mean zero.

    ``f`` holds the right-hand side at the grid nodes. Raises
    IncompatibleDataError when the mean of f before projection is larger
    than 1e-6 (relative to max |f|), SolverConvergenceError when the
    relative algebraic residual exceeds ``rtol``.
    """
    mesh = system.mesh
    p = system.mass
    f = np.asarray(f, dtype=float)
    if f.shape != p.shape:
        raise ValueError(f"right-hand side has shape {f.shape}, expected {p.shape}")

    mean = float(p @ f)
    scale = max(1.0, float(np.max(np.abs(f))))
    if abs(mean) > COMPATIBILITY_TOL * scale:
        raise IncompatibleDataError(f"int f dmu_t = {mean:.3e}; the Neumann problem needs mean zero")
    f = f - mean
    rhs = -p * f

    rhs_norm = float(np.linalg.norm(rhs))
    if float(np.max(np.abs(f))) <= NEGLIGIBLE_RHS * scale:
        # rounding-level data, e.g. a field separable in (t, x)
        u = np.zeros_like(f)
        residual = 0.0
    else:
        if method == "direct":
            u = _solve_direct(system, rhs)
        elif method == "cg":
            u = _solve_cg(system, rhs, rtol, maxiter or 20 * f.size)
        else:
            raise ValueError(f"unknown solver method '{method}'")
        u = u - (p @ u)
        residual = float(np.linalg.norm(system.matrix @ u - rhs)) / rhs_norm
        if not residual <= rtol:
            raise SolverConvergenceError(f"relative algebraic residual {residual:.3e} exceeds {rtol:.1e}")

    derivatives = reconstruct_derivatives(mesh, u)
    normal_derivative = np.sum(derivatives.boundary_grad * mesh.normals, axis=1)
    bc_residual = float(np.max(np.abs(normal_derivative)))
    grad_scale = float(np.max(np.linalg.norm(derivatives.grad, axis=1)))
    diagnostics = SolverDiagnostics(
        method=method,
        algebraic_residual=residual,
        compatibility_mean=mean,
        gauge=float(p @ u),
        bc_residual=bc_residual,
        bc_relative=bc_residual / grad_scale if grad_scale > 0 else 0.0,
    )
    u.setflags(write=False)
    values = derivatives.value
    values.setflags(write=False)
    return NeumannSolution(u=values, grid_u=u, derivatives=derivatives, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Strong form and diagnostics
# ---------------------------------------------------------------------------

def _derivatives_of(field):
    return field.derivatives if isinstance(field, NeumannSolution) else field


def apply_strong_operator(mesh, state, oracle, t, beta, u):
    """L_t u = Lap u - beta <grad_x phi, grad u> / phi at the quadrature nodes.

    ``u`` is a NeumannSolution or the Derivatives of any grid field.
    """
    d = _derivatives_of(u)
    points = mesh.interior_nodes
    drift = np.sum(oracle.grad_x(t, points) * d.grad, axis=1) / oracle.value(t, points)
    return d.lap - beta * drift


def strong_residuals(mesh, strong, f):
    """max |L_t u - f| / max(1, max |f|) outside the pole core and inside it"""
    scale = max(1.0, float(np.max(np.abs(f))))
    gap = np.abs(np.asarray(strong) - np.asarray(f)) / scale
    core = pole_core(mesh)
    outside = float(np.max(gap[~core])) if np.any(~core) else 0.0
    inside = float(np.max(gap[core])) if np.any(core) else 0.0
    return outside, inside


def _boundary_normal_derivative(mesh, d):
    return np.sum(d.boundary_grad * mesh.normals, axis=1)


def weak_form_residual(mesh, state, oracle, t, beta, u, v_values, v):
    """Relative residual of int (L u) v + int <grad u, grad v> - int_{dV} v du/dnu (all dmu_t)"""
    du, dv = _derivatives_of(u), _derivatives_of(v)
    p, pb = state.interior_mu_weights, state.boundary_mu_weights
    lu = apply_strong_operator(mesh, state, oracle, t, beta, du)
    terms = np.array([
        p @ (lu * v_values),
        p @ np.sum(du.grad * dv.grad, axis=1),
        -(pb @ (dv.boundary_value * _boundary_normal_derivative(mesh, du))),
    ])
    scale = np.max(np.abs(terms))
    return float(abs(terms.sum()) / scale) if scale > 0 else 0.0


def self_adjointness_gap(mesh, state, oracle, t, beta, u_values, u, v_values, v):
    """Relative gap between int (L u) v dmu_t and int (L v) u dmu_t"""
    p = state.interior_mu_weights
    luv = p @ (apply_strong_operator(mesh, state, oracle, t, beta, u) * v_values)
    lvu = p @ (apply_strong_operator(mesh, state, oracle, t, beta, v) * u_values)
    scale = max(abs(luv), abs(lvu))
    return float(abs(luv - lvu) / scale) if scale > 0 else 0.0


def manufactured_solution_error(mesh, state, solution, exact):
    """L2 errors of a solved field against exact nodal values, up to the gauge constant"""
    p = state.interior_mu_weights
    error = np.asarray(solution.u) - np.asarray(exact, dtype=float)
    error = error - p @ error
    return {
        "l2_mu": float(np.sqrt(p @ (error * error))),
        "l2": float(np.sqrt(mesh.interior_weights @ (error * error))),
        "max": float(np.max(np.abs(error))),
    }
