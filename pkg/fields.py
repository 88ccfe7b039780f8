"""
Test fields phi(t, x) with closed-form derivatives

Every field is evaluated vectorised: ``t`` is a scalar and ``x`` an array of
points with shape (N, n). Derivatives are written out by hand; use
``validate_derivatives`` to check them against central differences.
"""

from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from errors import HypothesisError, OutsideValidityError

CONVEXITY_CLASSES = ("convex", "concave", "neither")


def as_points(x, dim):
    """Coerce ``x`` to an (N, dim) float array"""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected points with {dim} coordinate(s), got shape {np.shape(x)}")
    return x


def _vector(value, dim, default=0.0):
    if value is None:
        return (float(default),) * dim
    value = tuple(float(v) for v in np.atleast_1d(value))
    if len(value) != dim:
        raise ValueError(f"expected {dim} component(s), got {value}")
    return value


class FieldOracle:
    """Positive C^2 field phi(t, x) on a (t, x) validity box.

    Subclasses provide ``value``, ``dt``, ``dtt``, ``grad_x``, ``hess_x`` and
    ``grad_x_dt``; ``name`` and ``convexity`` are class attributes.
    """
    name = "FieldOracle"
    convexity = "neither"

    def t_bounds(self):
        return (-np.inf, np.inf)

    def x_bounds(self):
        return ((-np.inf, np.inf),) * self.dim

    def params(self):
        return {f.name: getattr(self, f.name) for f in dataclass_fields(self) if f.name != "dim"}

    def contains(self, t, x, margin=0.0):
        x = as_points(x, self.dim)
        lo, hi = self.t_bounds()
        if not (lo + margin <= t <= hi - margin):
            return False
        for axis, (lo, hi) in enumerate(self.x_bounds()):
            column = x[:, axis]
            if np.any(column < lo + margin) or np.any(column > hi - margin):
                return False
        return True

    def check(self, t, x, margin=0.0):
        """Raise unless every (t, x) lies in the validity box and phi > 0 there"""
        x = as_points(x, self.dim)
        if not self.contains(t, x, margin):
            raise OutsideValidityError(
                f"{self.name}: (t={t}, x) leaves the validity box t in {self.t_bounds()}, "
                f"x in {self.x_bounds()} (margin {margin})")
        values = self.value(t, x)
        if not np.all(values > 0):
            raise OutsideValidityError(f"{self.name}: phi <= 0 at t={t}")
        return x

    def space_time_hessian(self, t, x):
        """(N, n+1, n+1) Hessian in (t, x)"""
        x = as_points(x, self.dim)
        n = self.dim
        out = np.empty((x.shape[0], n + 1, n + 1))
        out[:, 0, 0] = self.dtt(t, x)
        mixed = self.grad_x_dt(t, x)
        out[:, 0, 1:] = mixed
        out[:, 1:, 0] = mixed
        out[:, 1:, 1:] = self.hess_x(t, x)
        return out


def _identity_stack(count, dim, scale):
    return np.broadcast_to(scale * np.eye(dim), (count, dim, dim)).copy()


@dataclass(frozen=True)
class QuadraticConvex(FieldOracle):
    dim: int
    c: float = 1.0
    t0: float = 0.0
    x0: tuple = None

    name = "QuadraticConvex"
    convexity = "convex"

    def __post_init__(self):
        object.__setattr__(self, "x0", _vector(self.x0, self.dim))
        if self.c <= 0:
            raise HypothesisError("QuadraticConvex needs c > 0 to stay positive")

    def value(self, t, x):
        d = as_points(x, self.dim) - np.asarray(self.x0)
        return self.c + (t - self.t0) ** 2 + np.sum(d * d, axis=1)

    def dt(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], 2.0 * (t - self.t0))

    def dtt(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], 2.0)

    def grad_x(self, t, x):
        return 2.0 * (as_points(x, self.dim) - np.asarray(self.x0))

    def hess_x(self, t, x):
        return _identity_stack(as_points(x, self.dim).shape[0], self.dim, 2.0)

    def grad_x_dt(self, t, x):
        return np.zeros_like(as_points(x, self.dim))


@dataclass(frozen=True)
class QuadraticConcave(FieldOracle):
    """c - (t - t0)^2 - |x - x0|^2 on the box |t - t0| <= t_halfwidth,
    |x_i - x0_i| <= x_halfwidth, where it is bounded below by
    c - t_halfwidth^2 - n x_halfwidth^2 > 0."""
    dim: int
    c: float = 1.0
    t0: float = 0.0
    x0: tuple = None
    t_halfwidth: float = 0.5
    x_halfwidth: float = 0.5

    name = "QuadraticConcave"
    convexity = "concave"

    def __post_init__(self):
        object.__setattr__(self, "x0", _vector(self.x0, self.dim))
        floor = self.c - self.t_halfwidth ** 2 - self.dim * self.x_halfwidth ** 2
        if self.t_halfwidth <= 0 or self.x_halfwidth <= 0 or floor <= 0:
            raise HypothesisError(
                f"QuadraticConcave is not positive on its box (c - tw^2 - n xw^2 = {floor})")

    def t_bounds(self):
        return (self.t0 - self.t_halfwidth, self.t0 + self.t_halfwidth)

    def x_bounds(self):
        return tuple((c - self.x_halfwidth, c + self.x_halfwidth) for c in self.x0)

    def value(self, t, x):
        d = as_points(x, self.dim) - np.asarray(self.x0)
        return self.c - (t - self.t0) ** 2 - np.sum(d * d, axis=1)

    def dt(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], -2.0 * (t - self.t0))

    def dtt(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], -2.0)

    def grad_x(self, t, x):
        return -2.0 * (as_points(x, self.dim) - np.asarray(self.x0))

    def hess_x(self, t, x):
        return _identity_stack(as_points(x, self.dim).shape[0], self.dim, -2.0)

    def grad_x_dt(self, t, x):
        return np.zeros_like(as_points(x, self.dim))


@dataclass(frozen=True)
class SeparableExponential(FieldOracle):
    """exp(t) * b(x) with b(x) = b0 + <g, x> + q |x|^2"""
    dim: int
    b0: float = 1.0
    g: tuple = None
    q: float = 0.0

    name = "SeparableExponential"
    convexity = "neither"

    def __post_init__(self):
        object.__setattr__(self, "g", _vector(self.g, self.dim))

    def _b(self, x):
        return self.b0 + x @ np.asarray(self.g) + self.q * np.sum(x * x, axis=1)

    def value(self, t, x):
        return np.exp(t) * self._b(as_points(x, self.dim))

    def dt(self, t, x):
        return self.value(t, x)

    def dtt(self, t, x):
        return self.value(t, x)

    def grad_x(self, t, x):
        x = as_points(x, self.dim)
        return np.exp(t) * (np.asarray(self.g) + 2.0 * self.q * x)

    def hess_x(self, t, x):
        return _identity_stack(as_points(x, self.dim).shape[0], self.dim, 2.0 * self.q * np.exp(t))

    def grad_x_dt(self, t, x):
        return self.grad_x(t, x)


@dataclass(frozen=True)
class AnisotropicConvex(FieldOracle):
    """c + (t + <v, x>)^2 + |x|^2; the t-x coupling makes the Neumann data non-zero"""
    dim: int
    c: float = 1.0
    v: tuple = None

    name = "AnisotropicConvex"
    convexity = "convex"

    def __post_init__(self):
        v = self.v
        if v is None:
            v = (1.0,) + (0.0,) * (self.dim - 1)
        object.__setattr__(self, "v", _vector(v, self.dim))
        if self.c <= 0:
            raise HypothesisError("AnisotropicConvex needs c > 0 to stay positive")

    def _s(self, t, x):
        return t + x @ np.asarray(self.v)

    def value(self, t, x):
        x = as_points(x, self.dim)
        return self.c + self._s(t, x) ** 2 + np.sum(x * x, axis=1)

    def dt(self, t, x):
        return 2.0 * self._s(t, as_points(x, self.dim))

    def dtt(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], 2.0)

    def grad_x(self, t, x):
        x = as_points(x, self.dim)
        return 2.0 * self._s(t, x)[:, None] * np.asarray(self.v) + 2.0 * x

    def hess_x(self, t, x):
        count = as_points(x, self.dim).shape[0]
        v = np.asarray(self.v)
        return _identity_stack(count, self.dim, 2.0) + 2.0 * np.outer(v, v)

    def grad_x_dt(self, t, x):
        count = as_points(x, self.dim).shape[0]
        return np.tile(2.0 * np.asarray(self.v), (count, 1))


@dataclass(frozen=True)
class Constant(FieldOracle):
    dim: int
    value_: float = 1.0

    name = "Constant"
    convexity = "convex"

    def __post_init__(self):
        if self.value_ <= 0:
            raise HypothesisError("Constant field must be positive")

    def params(self):
        return {"value": self.value_}

    def value(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], float(self.value_))

    def dt(self, t, x):
        return np.zeros(as_points(x, self.dim).shape[0])

    dtt = dt

    def grad_x(self, t, x):
        return np.zeros_like(as_points(x, self.dim))

    grad_x_dt = grad_x

    def hess_x(self, t, x):
        return np.zeros((as_points(x, self.dim).shape[0], self.dim, self.dim))


@dataclass(frozen=True)
class SpatialQuadratic(FieldOracle):
    """c + |x - x0|^2, independent of t"""
    dim: int
    c: float = 1.0
    x0: tuple = None

    name = "SpatialQuadratic"
    convexity = "convex"

    def __post_init__(self):
        object.__setattr__(self, "x0", _vector(self.x0, self.dim))
        if self.c <= 0:
            raise HypothesisError("SpatialQuadratic needs c > 0")

    def value(self, t, x):
        d = as_points(x, self.dim) - np.asarray(self.x0)
        return self.c + np.sum(d * d, axis=1)

    def dt(self, t, x):
        return np.zeros(as_points(x, self.dim).shape[0])

    dtt = dt

    def grad_x(self, t, x):
        return 2.0 * (as_points(x, self.dim) - np.asarray(self.x0))

    def hess_x(self, t, x):
        return _identity_stack(as_points(x, self.dim).shape[0], self.dim, 2.0)

    def grad_x_dt(self, t, x):
        return np.zeros_like(as_points(x, self.dim))


@dataclass(frozen=True)
class AffineInTime(FieldOracle):
    """c + a t, constant in x"""
    dim: int
    c: float = 1.0
    a: float = 1.0

    name = "AffineInTime"
    convexity = "convex"

    def t_bounds(self):
        if self.a > 0:
            return (-self.c / self.a, np.inf)
        if self.a < 0:
            return (-np.inf, -self.c / self.a)
        return (-np.inf, np.inf)

    def value(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], self.c + self.a * t)

    def dt(self, t, x):
        return np.full(as_points(x, self.dim).shape[0], float(self.a))

    def dtt(self, t, x):
        return np.zeros(as_points(x, self.dim).shape[0])

    def grad_x(self, t, x):
        return np.zeros_like(as_points(x, self.dim))

    grad_x_dt = grad_x

    def hess_x(self, t, x):
        return np.zeros((as_points(x, self.dim).shape[0], self.dim, self.dim))


CATALOG = {
    cls.name: cls
    for cls in (QuadraticConvex, QuadraticConcave, SeparableExponential, AnisotropicConvex,
                Constant, SpatialQuadratic, AffineInTime)
}


def make_oracle(name, dim, **params):
    """Build a catalog field by name"""
    if name not in CATALOG:
        raise KeyError(f"unknown field '{name}', choose from {sorted(CATALOG)}")
    if name == "Constant" and "value" in params:
        params["value_"] = params.pop("value")
    return CATALOG[name](dim=dim, **params)


@dataclass(frozen=True)
class FieldSample:
    """Field and derivatives at a fixed t on a set of points"""
    t: float
    value: np.ndarray
    dt: np.ndarray
    dtt: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    grad_dt: np.ndarray

    @property
    def log_derivative(self):
        """d_t phi / phi"""
        return self.dt / self.value


def sample_field(oracle, t, points):
    points = oracle.check(t, points)
    return FieldSample(
        t=float(t),
        value=oracle.value(t, points),
        dt=oracle.dt(t, points),
        dtt=oracle.dtt(t, points),
        grad=oracle.grad_x(t, points),
        hess=oracle.hess_x(t, points),
        grad_dt=oracle.grad_x_dt(t, points),
    )


def hessian_quadratic_form(oracle, t, x, X):
    """<(space-time Hessian of phi) X, X> with X = (X0, X_s).

    ``X`` may be a single (n+1)-vector or one vector per point.
    Returns a float for a single point and a single vector.
    """
    single = np.ndim(x) <= 1 and (oracle.dim > 1 or np.ndim(x) == 0 or np.size(x) == 1)
    x = oracle.check(t, x)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = np.broadcast_to(X, (x.shape[0], X.size))
    if X.shape != (x.shape[0], oracle.dim + 1):
        raise ValueError(f"X must have {oracle.dim + 1} components per point, got shape {X.shape}")
    x0, xs = X[:, 0], X[:, 1:]
    form = (x0 * x0 * oracle.dtt(t, x)
            + 2.0 * x0 * np.sum(oracle.grad_x_dt(t, x) * xs, axis=1)
            + np.einsum("ki,kij,kj->k", xs, oracle.hess_x(t, x), xs))
    if single and form.size == 1:
        return float(form[0])
    return form


def validate_derivatives(oracle, samples, h):
    """Worst relative discrepancy between declared and finite-difference derivatives.

    First derivatives are central differences of phi; second derivatives are
    central differences of the (already checked) first derivatives.
    ``samples`` is an iterable of (t, x) pairs with x a single point.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    n = oracle.dim
    worst = 0.0

    def discrepancy(declared, approx):
        declared = np.asarray(declared, dtype=float)
        return float(np.max(np.abs(approx - declared) / np.maximum(1.0, np.abs(declared))))

    for t, x in samples:
        x = as_points(x, n)[:1]
        oracle.check(t, x, margin=2.0 * h)
        e = np.eye(n) * h

        dt_fd = (oracle.value(t + h, x) - oracle.value(t - h, x)) / (2 * h)
        worst = max(worst, discrepancy(oracle.dt(t, x), dt_fd))

        dtt_fd = (oracle.dt(t + h, x) - oracle.dt(t - h, x)) / (2 * h)
        worst = max(worst, discrepancy(oracle.dtt(t, x), dtt_fd))

        grad = oracle.grad_x(t, x)[0]
        hess = oracle.hess_x(t, x)[0]
        grad_dt = oracle.grad_x_dt(t, x)[0]
        for i in range(n):
            plus, minus = x + e[i], x - e[i]
            grad_fd = (oracle.value(t, plus) - oracle.value(t, minus)) / (2 * h)
            worst = max(worst, discrepancy(grad[i], grad_fd))
            hess_fd = (oracle.grad_x(t, plus) - oracle.grad_x(t, minus))[0] / (2 * h)
            worst = max(worst, discrepancy(hess[:, i], hess_fd))
            mixed_fd = (oracle.dt(t, plus) - oracle.dt(t, minus)) / (2 * h)
            worst = max(worst, discrepancy(grad_dt[i], mixed_fd))
        mixed_fd = (oracle.grad_x(t + h, x) - oracle.grad_x(t - h, x))[0] / (2 * h)
        worst = max(worst, discrepancy(grad_dt, mixed_fd))
    return worst
