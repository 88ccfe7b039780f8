"""
Second-derivative identity for phi(t) = (int_V phi(t, x)^(-beta) dx)^(-1 / (beta - n))

Three independent computations of phi'' are compared:

* ``phi2_fd``: finite differences of the discrete phi(t)
* ``phi2_from_moments``: mean / variance formula of d_t phi / phi under mu_t (no PDE)
* ``phi2_from_decomposition``: four-term decomposition through the weighted
  Neumann problem L_t u = d_t phi / phi - int d_t phi / phi dmu_t

Each term evaluator already carries its prefactor, so phi''/phi is their sum.
"""

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from elliptic import apply_strong_operator, assemble, solve_neumann, strong_residuals
from errors import (BoundaryConditionError, ClampWarning, HypothesisError, OutsideValidityError,
                    PrekopaError, StageError)
from fields import hessian_quadratic_form, sample_field
from geometry import boundary_second_form, build_mesh, tangential_part
from measure import build_measure, eval_phi, log_functional, mean_under_mu, variance_under_mu

TERM_NAMES = ("hessian_term", "hs_defect_term", "square_term", "boundary_term")
IDENTITY_NAMES = ("bochner", "drift_square", "time_ibp", "boundary_curvature")
SUPPLEMENTARY_IDENTITY_NAMES = ("source_pairing", "variance_expansion")

# residuals of phi'' are relative to max(|phi2_fd|, RESIDUAL_FLOOR * phi)
RESIDUAL_FLOOR = 1e-8
IDENTITY_FLOOR = 1e-12


@contextmanager
def stage(name, t):
    """Re-raise failures inside the block as StageError(name, t)"""
    try:
        yield
    except StageError:
        raise
    except (PrekopaError, ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise StageError(name, t, exc) from exc


def _derivatives(sol):
    return getattr(sol, "derivatives", sol)


def _check_beta(beta, n):
    if beta == n:
        raise HypothesisError(f"the decomposition needs beta != n (beta={beta}, n={n})")


def phi_from_state(state, n):
    _check_beta(state.beta, n)
    return float(np.exp(-state.log_Z / (state.beta - n)))


# ---------------------------------------------------------------------------
# The four terms (nodal integrands and their quadratures)
# ---------------------------------------------------------------------------

def hessian_integrand(mesh, oracle, t, beta, sol):
    """(beta / (beta - n)) <Hess_(t,x) phi X, X> / phi at each node, X = (1, beta grad u)"""
    n = mesh.dim
    _check_beta(beta, n)
    grad = _derivatives(sol).grad
    X = np.column_stack([np.ones(grad.shape[0]), beta * grad])
    form = hessian_quadratic_form(oracle, t, mesh.interior_nodes, X)
    return beta / (beta - n) * form / oracle.value(t, mesh.interior_nodes)


def hs_defect(hess):
    """||H||_HS^2 - (tr H)^2 / n, evaluated as the squared norm of the traceless part"""
    n = hess.shape[-1]
    trace = np.trace(hess, axis1=-2, axis2=-1)
    traceless = hess - (trace / n)[..., None, None] * np.eye(n)
    return np.sum(traceless * traceless, axis=(-2, -1))


def hs_defect_integrand(sol, beta, n):
    _check_beta(beta, n)
    return beta ** 2 / (beta - n) * hs_defect(_derivatives(sol).hess)


def square_integrand(state, oracle, t, beta, n, sol, points):
    _check_beta(beta, n)
    sample = sample_field(oracle, t, points)
    m = mean_under_mu(state, sample.log_derivative)
    gap = abs(beta - n)
    s = np.sign(beta - n)
    expr = np.sqrt(gap / n) * _derivatives(sol).lap - s * np.sqrt(n / gap) * m
    return beta / gap * expr * expr


def boundary_integrand(mesh, sol, beta, n):
    """(beta^2 / (beta - n)) II(grad u, grad u) at each boundary node, grad u projected on the tangent space"""
    _check_beta(beta, n)
    tangent = tangential_part(mesh.normals, _derivatives(sol).boundary_grad)
    return beta ** 2 / (beta - n) * boundary_second_form(mesh, tangent)


def hessian_term(mesh, state, oracle, t, beta, sol):
    return float(state.interior_mu_weights @ hessian_integrand(mesh, oracle, t, beta, sol))


def hs_defect_term(state, sol, beta, n):
    return float(state.interior_mu_weights @ hs_defect_integrand(sol, beta, n))


def square_term(mesh, state, oracle, t, beta, n, sol):
    integrand = square_integrand(state, oracle, t, beta, n, sol, mesh.interior_nodes)
    return float(state.interior_mu_weights @ integrand)


def boundary_term(mesh, state, sol, beta, n, bc_tol=0.1):
    """Boundary curvature term; the normal derivative of u must be small relative to |grad u|"""
    diagnostics = getattr(sol, "diagnostics", None)
    if diagnostics is not None and diagnostics.bc_relative > bc_tol:
        raise BoundaryConditionError(
            f"|du/dnu| / max|grad u| = {diagnostics.bc_relative:.3e} exceeds {bc_tol}")
    return float(state.boundary_mu_weights @ boundary_integrand(mesh, sol, beta, n))


def phi2_from_decomposition(terms, phi):
    return float(sum(terms[name] for name in TERM_NAMES) * phi)


# ---------------------------------------------------------------------------
# phi'' without the PDE
# ---------------------------------------------------------------------------

def phi2_from_moments(mesh, state, oracle, t, beta, n=None):
    """phi'' from
    ((beta - n) / beta) phi''/phi = E[d_tt phi / phi] - (beta + 1) Var(psi) + n / (beta - n) E[psi]^2
    with psi = d_t phi / phi and moments under mu_t."""
    n = mesh.dim if n is None else n
    if beta == 0 or beta == n:
        raise HypothesisError(f"the moment formula needs beta not in {{0, n}} (beta={beta}, n={n})")
    sample = sample_field(oracle, t, mesh.interior_nodes)
    psi = sample.log_derivative
    mean_tt = mean_under_mu(state, sample.dtt / sample.value)
    mean_psi = mean_under_mu(state, psi)
    var_psi = variance_under_mu(state, psi)
    bracket = mean_tt - (beta + 1) * var_psi + n / (beta - n) * mean_psi ** 2
    return float(phi_from_state(state, n) * beta / (beta - n) * bracket)


@dataclass(frozen=True)
class FiniteDifferenceEstimate:
    value: float
    sensitivity: float
    h: float
    richardson: bool


def default_time_step(t):
    return 1e-3 * (1.0 + abs(t))


def _five_point(values, step):
    fm2, fm1, f0, fp1, fp2 = values
    return (-fp2 + 16.0 * fp1 - 30.0 * f0 + 16.0 * fm1 - fm2) / (12.0 * step * step)


def phi2_fd(mesh, oracle, t, beta, n=None, h_t=None, richardson=False):
    """Five-point second difference of the discrete phi(t).

    The sensitivity is |D(h) - D(h/2)|; with ``richardson`` the value is
    (16 D(h/2) - D(h)) / 15.
    """
    h = default_time_step(t) if h_t is None else float(h_t)
    if h <= 0:
        raise ValueError(f"h_t must be positive, got {h}")
    for shift in (-2 * h, 2 * h):
        inside = (oracle.contains(t + shift, mesh.interior_nodes)
                  and oracle.contains(t + shift, mesh.boundary_nodes))
        if not inside:
            raise OutsideValidityError(
                f"finite-difference stencil t={t} +- 2h_t (h_t={h}) leaves the validity box of {oracle.name}")

    phi = {k: eval_phi(mesh, oracle, t + 0.5 * k * h, beta, n) for k in (-4, -2, -1, 0, 1, 2, 4)}
    full = _five_point([phi[k] for k in (-4, -2, 0, 2, 4)], h)
    half = _five_point([phi[k] for k in (-2, -1, 0, 1, 2)], 0.5 * h)
    value = (16.0 * half - full) / 15.0 if richardson else full
    return FiniteDifferenceEstimate(value=float(value), sensitivity=float(abs(full - half)),
                                    h=h, richardson=bool(richardson))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolvedInstance:
    """Everything the term evaluators need at one (t, beta)"""
    t: float
    beta: float
    mesh: object
    state: object
    sample: object
    f: np.ndarray
    grid_f: np.ndarray
    solution: object

    @property
    def n(self):
        return self.mesh.dim


def solve_instance(domain, resolution, oracle, t, beta, solver="direct", solver_rtol=1e-10):
    """mesh -> measure -> right-hand side -> assembly -> Neumann solve, with stage attribution"""
    with stage("mesh", t):
        mesh = build_mesh(domain, resolution)
    with stage("measure", t):
        state = build_measure(mesh, oracle, t, beta)
    with stage("rhs", t):
        sample = sample_field(oracle, t, mesh.interior_nodes)
        psi = sample.log_derivative
        f = psi - mean_under_mu(state, psi)
        grid_psi = sample_field(oracle, t, mesh.grid.nodes).log_derivative
        grid_f = grid_psi - state.grid_mu_weights @ grid_psi
    with stage("assemble", t):
        system = assemble(mesh, state)
    with stage("solve", t):
        solution = solve_neumann(system, grid_f, state, method=solver, rtol=solver_rtol)
        strong = apply_strong_operator(mesh, state, oracle, t, beta, solution)
        solution = solution.with_strong_residual(*strong_residuals(mesh, strong, f))
    return SolvedInstance(t=float(t), beta=float(beta), mesh=mesh, state=state,
                          sample=sample, f=f, grid_f=grid_f, solution=solution)


@dataclass(frozen=True)
class IdentityReport:
    t: float
    beta: float
    n: int
    resolution: tuple
    phi: float
    phi2_fd: float
    phi2_fd_sensitivity: float
    h_t: float
    phi2_moments: float
    phi2_decomposition: float
    terms: dict
    residuals: dict
    node_extremes: dict
    diagnostics: object
    sign_certificate: dict = field(default_factory=dict)

    @property
    def headline_residual(self):
        return max(self.residuals["fd_vs_moments"], self.residuals["fd_vs_decomposition"])

    def as_row(self):
        row = {
            "t": self.t,
            "phi": self.phi,
            "phi2_fd": self.phi2_fd,
            "phi2_moments": self.phi2_moments,
            "phi2_decomposition": self.phi2_decomposition,
        }
        row.update(self.terms)
        row.update(self.residuals)
        row["phi2_fd_sensitivity"] = self.phi2_fd_sensitivity
        row["bc_relative"] = self.diagnostics.bc_relative
        return row


def _relative_gap(a, b, reference, phi):
    return float(abs(a - b) / max(abs(reference), RESIDUAL_FLOOR * abs(phi)))


def sign_certificate(terms, node_extremes, phi2_values, phi, expected_sign, slack):
    """Per-term sign flags: each term and each nodal integrand has sign ``expected_sign`` up to ``slack``"""
    flags = {}
    for name in TERM_NAMES:
        lo, hi = node_extremes[name]
        if expected_sign > 0:
            flags[name] = terms[name] >= -slack and lo >= -slack
        else:
            flags[name] = terms[name] <= slack and hi <= slack
    flags["phi2"] = all(expected_sign * value >= -slack * phi for value in phi2_values)
    return flags


def expected_sign(oracle, beta, n):
    """+1 when phi'' >= 0 is guaranteed, -1 when phi'' <= 0 is, 0 otherwise"""
    if oracle.convexity == "convex" and beta > n:
        return 1
    if oracle.convexity == "concave" and beta < 0:
        return -1
    return 0


def verify_identity(domain, resolution, oracle, t, beta, *, h_t=None, richardson=False,
                    solver="direct", solver_rtol=1e-10, bc_tol=0.1, sign_slack=1e-8):
    """Run the full pipeline at one t and compare the three phi'' values"""
    n = domain.dim
    if beta == 0 or beta == n:
        raise HypothesisError(f"verification needs beta not in {{0, n}} (beta={beta}, n={n})")

    instance = solve_instance(domain, resolution, oracle, t, beta, solver, solver_rtol)
    mesh, state, sol = instance.mesh, instance.state, instance.solution

    with stage("terms", t):
        phi = phi_from_state(state, n)
        nodal = {
            "hessian_term": hessian_integrand(mesh, oracle, t, beta, sol),
            "hs_defect_term": hs_defect_integrand(sol, beta, n),
            "square_term": square_integrand(state, oracle, t, beta, n, sol, mesh.interior_nodes),
        }
        terms = {name: float(state.interior_mu_weights @ values) for name, values in nodal.items()}
        terms["boundary_term"] = boundary_term(mesh, state, sol, beta, n, bc_tol)
        nodal["boundary_term"] = boundary_integrand(mesh, sol, beta, n)
        terms = {name: terms[name] for name in TERM_NAMES}
        extremes = {name: (float(np.min(nodal[name])), float(np.max(nodal[name]))) for name in TERM_NAMES}
        phi2_decomposition = phi2_from_decomposition(terms, phi)

    with stage("moments", t):
        phi2_moments = phi2_from_moments(mesh, state, oracle, t, beta, n)

    with stage("finite_difference", t):
        fd = phi2_fd(mesh, oracle, t, beta, n, h_t=h_t, richardson=richardson)

    residuals = {
        "fd_vs_moments": _relative_gap(fd.value, phi2_moments, fd.value, phi),
        "fd_vs_decomposition": _relative_gap(fd.value, phi2_decomposition, fd.value, phi),
        "moments_vs_decomposition": _relative_gap(phi2_moments, phi2_decomposition, fd.value, phi),
        "pde_strong_residual": float(sol.diagnostics.strong_residual),
        "pde_core_residual": float(sol.diagnostics.core_residual),
        "hs_defect_min": float(np.min(hs_defect(sol.hess_u))),
    }

    sign = expected_sign(oracle, beta, n)
    certificate = {}
    if sign:
        certificate = sign_certificate(terms, extremes, (phi2_decomposition, fd.value), phi, sign, sign_slack)

    return IdentityReport(
        t=float(t),
        beta=float(beta),
        n=n,
        resolution=tuple(mesh.resolution),
        phi=phi,
        phi2_fd=fd.value,
        phi2_fd_sensitivity=fd.sensitivity,
        h_t=fd.h,
        phi2_moments=phi2_moments,
        phi2_decomposition=phi2_decomposition,
        terms=terms,
        residuals=residuals,
        node_extremes=extremes,
        diagnostics=sol.diagnostics,
        sign_certificate=certificate,
    )


def refinement_ratio(coarse, fine, floor=1e-9):
    """error(h) / error(h/2); infinite when both errors are already at the floor"""
    coarse, fine = abs(coarse), abs(fine)
    if coarse <= floor and fine <= floor:
        return float("inf")
    if fine == 0.0:
        return float("inf")
    return float(coarse / fine)


# ---------------------------------------------------------------------------
# Integration-by-parts identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityCheck:
    name: str
    lhs: float
    rhs: float
    scale: float

    @property
    def residual(self):
        return float(abs(self.lhs - self.rhs) / self.scale)


def _identity(name, lhs_terms, rhs_terms, extra_scale=0.0):
    scale = max([abs(v) for v in (*lhs_terms, *rhs_terms)] + [abs(extra_scale), IDENTITY_FLOOR])
    return IdentityCheck(name=name, lhs=float(sum(lhs_terms)), rhs=float(sum(rhs_terms)), scale=float(scale))


def boundary_curvature_defect(mesh, sol):
    """<(Hess u) grad u, nu> + II(grad u, grad u) at each boundary node, with grad u
    projected on the tangent space; it vanishes where du/dnu = 0"""
    d = _derivatives(sol)
    hess_grad_normal = np.einsum("ki,kij,kj->k", mesh.normals, d.boundary_hess, d.boundary_grad)
    return hess_grad_normal + boundary_second_form(mesh, tangential_part(mesh.normals, d.boundary_grad))


def check_ibp_identities(mesh, state, oracle, t, beta, sol, f=None):
    """Both sides of the integration-by-parts identities behind the decomposition.

    Residuals are |lhs - rhs| divided by the largest single term. ``bochner``
    and ``drift_square`` substitute L_t u = f; ``source_pairing`` and
    ``variance_expansion`` use the strong operator applied to the
    reconstructed u.
    """
    d = _derivatives(sol)
    p, pb = state.interior_mu_weights, state.boundary_mu_weights
    sample = sample_field(oracle, t, mesh.interior_nodes)
    psi = sample.log_derivative
    if f is None:
        f = psi - mean_under_mu(state, psi)

    drift = np.sum(sample.grad * d.grad, axis=1) / sample.value
    hess_phi = np.einsum("ki,kij,kj->k", d.grad, sample.hess, d.grad) / sample.value
    mixed = np.sum(sample.grad_dt * d.grad, axis=1) / sample.value
    hs2 = np.sum(d.hess * d.hess, axis=(1, 2))
    lap = d.lap
    strong = apply_strong_operator(mesh, state, oracle, t, beta, d)

    hess_grad_normal = np.einsum("ki,kij,kj->k", mesh.normals, d.boundary_hess, d.boundary_grad)
    second_form = boundary_second_form(mesh, tangential_part(mesh.normals, d.boundary_grad))
    grad_norm = np.linalg.norm(d.grad, axis=1)

    checks = [
        _identity("bochner",
                  [p @ (f * f)],
                  [p @ hs2, beta * (p @ hess_phi), -beta * (p @ (drift * drift)), -(pb @ hess_grad_normal)]),
        _identity("drift_square",
                  [beta ** 2 * (p @ (drift * drift))],
                  [p @ (f * f), p @ (lap * lap), -2.0 * (p @ (lap * f))]),
        _identity("time_ibp",
                  [(beta + 1) * (p @ (psi * drift))],
                  [p @ mixed, p @ (psi * lap)]),
        _identity("boundary_curvature",
                  [pb @ hess_grad_normal],
                  [-(pb @ second_form)],
                  extra_scale=p @ (np.sqrt(hs2) * grad_norm)),
        _identity("source_pairing",
                  [p @ (f * strong)],
                  [-(p @ mixed), p @ (psi * drift)]),
        _identity("variance_expansion",
                  [variance_under_mu(state, psi)],
                  [-(p @ (strong * strong)), 2.0 * (p @ (f * strong))]),
    ]
    return {check.name: check for check in checks}


# ---------------------------------------------------------------------------
# Convexity certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CertificateRow:
    t: float
    report: IdentityReport
    flags: dict

    @property
    def passed(self):
        return all(self.flags.values())


@dataclass(frozen=True)
class Certificate:
    case: str
    beta: float
    effective_beta: float
    rows: tuple

    @property
    def passed(self):
        return all(row.passed for row in self.rows)


def check_certificate_hypotheses(case, oracle, beta, n):
    if case == "i":
        if oracle.convexity != "convex":
            raise HypothesisError(f"convex case requires a convex oracle, {oracle.name} is {oracle.convexity}")
        if not beta > n:
            raise HypothesisError(f"convex case requires beta > n (beta={beta}, n={n})")
    elif case == "ii":
        if oracle.convexity != "concave":
            raise HypothesisError(f"concave case requires a concave oracle, {oracle.name} is {oracle.convexity}")
        if not beta > 0:
            raise HypothesisError(f"concave case requires beta > 0 (beta={beta})")
    else:
        raise ValueError(f"unknown case '{case}', expected 'i' or 'ii'")


def certify_convexity(case, oracle, domain, t_grid, beta, resolution, *, slack=1e-8, h_t=None,
                     solver="direct", solver_rtol=1e-10, bc_tol=0.1):
    """Term-by-term sign certificate of the convex (i) and concave (ii) statements.

    Case (i): phi convex, beta > n; every term >= -slack and phi'' >= -slack phi.
    Case (ii): phi concave, beta > 0; (int phi^beta)^(1 / (beta + n)) is the
    functional at -beta, so the pipeline runs with -beta and every term must
    be <= slack.
    """
    n = domain.dim
    check_certificate_hypotheses(case, oracle, beta, n)
    effective = beta if case == "i" else -beta
    sign = 1 if case == "i" else -1
    rows = []
    for t in t_grid:
        report = verify_identity(domain, resolution, oracle, t, effective, h_t=h_t, solver=solver,
                                 solver_rtol=solver_rtol, bc_tol=bc_tol, sign_slack=slack)
        flags = sign_certificate(report.terms, report.node_extremes,
                                 (report.phi2_decomposition, report.phi2_fd), report.phi, sign, slack)
        rows.append(CertificateRow(t=float(t), report=report, flags=flags))
    return Certificate(case=case, beta=float(beta), effective_beta=float(effective), rows=tuple(rows))


# ---------------------------------------------------------------------------
# Large-beta limits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LimitSweep:
    kind: str
    t: float
    target: float
    table: pd.DataFrame
    decay_exponent: float

    @property
    def final_error(self):
        return float(self.table["error"].iloc[-1])

    @property
    def clamped(self):
        return bool(self.table["clamped"].any())

    @property
    def decreasing(self):
        errors = np.abs(self.table["error"].to_numpy())
        return bool(np.all(np.diff(errors) <= 0))


def _limit_value(log_weights, values, beta, n, kind):
    if kind == "convex":
        base = 1.0 + values / beta
        clamped = bool(np.any(base <= 0))
        if clamped:
            # (0)^(-beta) makes the integral infinite
            return -(beta - n), True
        log_integral = logsumexp(log_weights - beta * np.log1p(values / beta))
        return (beta - n) * np.expm1(-log_integral / (beta - n)), False

    base = 1.0 - values / beta
    positive = base > 0
    clamped = not bool(np.all(positive))
    if not np.any(positive):
        return -(beta + n), True
    log_integral = logsumexp(log_weights[positive] + beta * np.log1p(-values[positive] / beta))
    return (beta + n) * np.expm1(log_integral / (beta + n)), clamped


def beta_limit_sweep(mesh, oracle, t, beta_list, kind="convex"):
    """Large-beta expressions against their limits -log int e^(-phi) (convex) and
    log int e^(-phi) (concave).

    The fitted decay exponent is the slope of log|e(beta)| against log(beta).
    """
    if kind not in ("convex", "concave"):
        raise ValueError(f"unknown limit kind '{kind}'")
    n = mesh.dim
    betas = np.asarray(list(beta_list), dtype=float)
    if betas.size == 0:
        raise ValueError("beta_list is empty")
    if np.any(np.diff(betas) <= 0):
        raise ValueError(f"beta_list must be strictly increasing, got {betas.tolist()}")
    if np.any(betas <= n):
        raise HypothesisError(f"the large-beta limit needs every beta > n (n={n})")

    points = oracle.check(t, mesh.interior_nodes)
    values = oracle.value(t, points)
    log_weights = np.log(mesh.interior_weights)
    target = log_functional(mesh, oracle, t)
    if kind == "concave":
        target = -target

    rows = []
    for beta in betas:
        value, clamped = _limit_value(log_weights, values, beta, n, kind)
        if clamped:
            warnings.warn(f"positive part clamped at beta={beta:g} ({kind} limit, t={t})", ClampWarning)
        rows.append({"beta": float(beta), "value": float(value), "target": target,
                     "error": float(value - target), "clamped": clamped})
    table = pd.DataFrame(rows, columns=["beta", "value", "target", "error", "clamped"])

    usable = table[(~table["clamped"]) & (table["error"].abs() > 0) & np.isfinite(table["error"])]
    if len(usable) >= 2:
        slope = float(np.polyfit(np.log(usable["beta"]), np.log(usable["error"].abs()), 1)[0])
    else:
        slope = float("nan")
    return LimitSweep(kind=kind, t=float(t), target=float(target), table=table, decay_exponent=slope)
