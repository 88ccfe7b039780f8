"""
Spatial domains, quadrature meshes and boundary geometry

Two domains are supported: an interval (n=1) and a disk (n=2). A mesh
carries two node sets of the same size. The quadrature nodes are
Gauss-Legendre in x (interval) or in r times uniform angles (disk) and
serve every integral against mu_t. The control grid is cell-centred and
carries the finite-volume Neumann solve; nodal fields on it are moved to
the quadrature nodes by cubic splines along lines (diameters on the disk).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import interp1d
from scipy.special import roots_legendre

from errors import DomainError, MeshResolutionError

BOUNDARY_TOL = 1e-9
# nodes closer to the disk centre than this fraction of R form the pole core
POLE_CORE_FRACTION = 0.25


@dataclass(frozen=True)
class Interval:
    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or not self.a < self.b:
            raise DomainError(f"interval needs a < b, got a={self.a}, b={self.b}")

    @property
    def dim(self):
        return 1

    @property
    def volume(self):
        return self.b - self.a

    @property
    def perimeter(self):
        # counting measure on the two endpoints
        return 2.0

    def bounding_box(self):
        return ((self.a, self.b),)


@dataclass(frozen=True)
class Disk:
    center: tuple
    radius: float

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        if len(center) != 2:
            raise DomainError(f"disk center must have two coordinates, got {self.center!r}")
        object.__setattr__(self, "center", center)
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise DomainError(f"disk radius must be positive, got {self.radius}")

    @property
    def dim(self):
        return 2

    @property
    def volume(self):
        return np.pi * self.radius ** 2

    @property
    def perimeter(self):
        return 2.0 * np.pi * self.radius

    def bounding_box(self):
        cx, cy = self.center
        R = self.radius
        return ((cx - R, cx + R), (cy - R, cy + R))


def _frozen(array):
    array = np.ascontiguousarray(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ControlGrid:
    """Cell-centred finite-volume grid.

    Interval: m cells of width h with centres at the nodes. Disk: rings
    r_i = (i + 1/2) dr times the quadrature angles; ``volumes`` are the exact
    annular-sector areas r_i dr dtheta.
    """
    nodes: np.ndarray
    volumes: np.ndarray
    spacing: tuple
    radii: np.ndarray = field(default=None)


@dataclass(frozen=True)
class Mesh:
    """Quadrature nodes of V and of its boundary, plus the control grid.

    Interior nodes of a disk are stored ring-major: node (i, j) at radius
    ``radii[i]`` and angle ``angles[j]`` has flat index ``i * m_theta + j``.
    The grid uses the same ordering with its own radii. Boundary node j
    sits at angle ``angles[j]``.
    """
    domain: object
    resolution: tuple
    interior_nodes: np.ndarray
    interior_weights: np.ndarray
    boundary_nodes: np.ndarray
    boundary_weights: np.ndarray
    normals: np.ndarray
    grid: ControlGrid
    radii: np.ndarray = field(default=None)
    angles: np.ndarray = field(default=None)

    @property
    def dim(self):
        return self.domain.dim

    @property
    def n_interior(self):
        return self.interior_weights.size

    @property
    def n_boundary(self):
        return self.boundary_weights.size

    @property
    def shape(self):
        """Logical grid shape, shared by the quadrature nodes and the control grid"""
        return tuple(self.resolution)

    @property
    def spacing(self):
        return self.grid.spacing


def _normalise_resolution(domain, resolution):
    if np.isscalar(resolution):
        resolution = (resolution,)
    resolution = tuple(int(r) for r in resolution)
    if isinstance(domain, Interval):
        if len(resolution) != 1:
            raise MeshResolutionError(f"interval mesh takes one resolution parameter, got {resolution}")
    elif isinstance(domain, Disk):
        if len(resolution) == 1:
            resolution = (resolution[0], 2 * resolution[0])
        if len(resolution) != 2:
            raise MeshResolutionError(f"disk mesh takes (m_r, m_theta), got {resolution}")
        if resolution[1] % 2:
            # the radial stencils continue through the centre along the opposite angle
            raise MeshResolutionError(f"m_theta must be even, got {resolution[1]}")
    else:
        raise DomainError(f"unsupported domain {domain!r}")
    if min(resolution) < 4:
        raise MeshResolutionError(f"resolution parameters must be >= 4, got {resolution}")
    return resolution


def _legendre(m, lo, hi):
    """m-point Gauss-Legendre nodes and weights on [lo, hi]"""
    x, w = roots_legendre(m)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def build_mesh(domain, resolution):
    """Build the quadrature mesh of ``domain`` and its control grid.

    Interval: m Gauss-Legendre nodes, exact for polynomials of degree
    2m - 1. Disk: m_r Gauss-Legendre radii weighted by the Jacobian r, times
    m_theta uniform angles (trapezoid rule, exact for trigonometric
    polynomials of degree < m_theta). Boundary weights are 1 per interval
    endpoint and R dtheta per disk boundary node.
    """
    resolution = _normalise_resolution(domain, resolution)

    if isinstance(domain, Interval):
        m, = resolution
        h = domain.volume / m
        x, w = _legendre(m, domain.a, domain.b)
        centres = domain.a + (np.arange(m) + 0.5) * h
        grid = ControlGrid(nodes=_frozen(centres[:, None]), volumes=_frozen(np.full(m, h)), spacing=(h,))
        return Mesh(
            domain=domain,
            resolution=resolution,
            interior_nodes=_frozen(x[:, None]),
            interior_weights=_frozen(w),
            boundary_nodes=_frozen([[domain.a], [domain.b]]),
            boundary_weights=_frozen([1.0, 1.0]),
            normals=_frozen([[-1.0], [1.0]]),
            grid=grid,
        )

    m_r, m_theta = resolution
    R = domain.radius
    cx, cy = domain.center
    dr = R / m_r
    dtheta = 2.0 * np.pi / m_theta
    angles = np.arange(m_theta) * dtheta
    rho, w = _legendre(m_r, 0.0, R)

    def polar(radii):
        rr, tt = np.meshgrid(radii, angles, indexing="ij")
        return np.column_stack([cx + (rr * np.cos(tt)).ravel(), cy + (rr * np.sin(tt)).ravel()])

    centres = (np.arange(m_r) + 0.5) * dr
    volumes = np.repeat(centres * dr * dtheta, m_theta)
    grid = ControlGrid(nodes=_frozen(polar(centres)), volumes=_frozen(volumes),
                       spacing=(dr, dtheta), radii=_frozen(centres))
    normals = np.column_stack([np.cos(angles), np.sin(angles)])
    boundary = np.column_stack([cx + R * normals[:, 0], cy + R * normals[:, 1]])
    return Mesh(
        domain=domain,
        resolution=resolution,
        interior_nodes=_frozen(polar(rho)),
        interior_weights=_frozen(np.repeat(w * rho * dtheta, m_theta)),
        boundary_nodes=_frozen(boundary),
        boundary_weights=_frozen(np.full(m_theta, R * dtheta)),
        normals=_frozen(normals),
        grid=grid,
        radii=_frozen(rho),
        angles=_frozen(angles),
    )


def to_quadrature(mesh, values):
    """Move a field given on the control grid to the quadrature nodes.

    ``values`` has the grid nodes along its first axis; trailing axes (vector
    or matrix components) are carried along. On the disk the spline runs
    along each diameter, so the centre is an ordinary interior point.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != mesh.n_interior:
        raise ValueError(f"grid field has {values.shape[0]} nodes, expected {mesh.n_interior}")
    if isinstance(mesh.domain, Interval):
        spline = interp1d(mesh.grid.nodes[:, 0], values, kind="cubic", axis=0,
                          fill_value="extrapolate", assume_sorted=True)
        return spline(mesh.interior_nodes[:, 0])

    m_r, m_theta = mesh.shape
    half = m_theta // 2
    rest = values.shape[1:]
    V = values.reshape((m_r, m_theta) + rest)
    # negative signed radius s on ray j is radius -s on ray j + m_theta / 2
    lines = np.concatenate([V[::-1, half:], V[:, :half]], axis=0)
    signed = np.concatenate([-mesh.grid.radii[::-1], mesh.grid.radii])
    targets = np.concatenate([-mesh.radii[::-1], mesh.radii])
    spline = interp1d(signed, lines, kind="cubic", axis=0, fill_value="extrapolate", assume_sorted=True)
    out = spline(targets)
    Q = np.concatenate([out[m_r:], out[:m_r][::-1]], axis=1)
    return Q.reshape((m_r * m_theta,) + rest)


def pole_core(mesh, fraction=POLE_CORE_FRACTION):
    """Quadrature nodes within ``fraction * R`` of the disk centre (none on an interval)"""
    if isinstance(mesh.domain, Interval):
        return np.zeros(mesh.n_interior, dtype=bool)
    offset = mesh.interior_nodes - np.asarray(mesh.domain.center)
    return np.hypot(offset[:, 0], offset[:, 1]) < fraction * mesh.domain.radius


def _as_point(domain, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (domain.dim,):
        raise DomainError(f"expected a point with {domain.dim} coordinate(s), got shape {x.shape}")
    return x


def outer_normal(domain, x, tol=BOUNDARY_TOL):
    """Unit outer normal at the boundary point ``x``"""
    x = _as_point(domain, x)
    if isinstance(domain, Interval):
        scale = max(1.0, abs(domain.a), abs(domain.b))
        if abs(x[0] - domain.a) <= tol * scale:
            return np.array([-1.0])
        if abs(x[0] - domain.b) <= tol * scale:
            return np.array([1.0])
        raise DomainError(f"{x[0]} is not an endpoint of [{domain.a}, {domain.b}]")
    offset = x - np.asarray(domain.center)
    dist = np.hypot(offset[0], offset[1])
    if abs(dist - domain.radius) > tol * max(1.0, domain.radius):
        raise DomainError(f"point {x.tolist()} is at distance {dist} from the centre, radius is {domain.radius}")
    return offset / dist


def normal_jacobian(domain, x):
    """Jacobian d_i(nu_j) of the extended normal field at ``x``.

    The disk normal is extended as (x - c) / R, whose Jacobian is I / R.
    The interval normal is locally constant.
    """
    if isinstance(domain, Interval):
        return np.zeros((1, 1))
    return np.eye(2) / domain.radius


def second_fundamental_form(domain, x, X, tol=BOUNDARY_TOL):
    """II_x(X, X) for a tangent vector X at the boundary point x"""
    nu = outer_normal(domain, x, tol)
    X = _as_point(domain, X)
    size = max(1.0, float(np.linalg.norm(X)))
    if isinstance(domain, Interval):
        if abs(X[0]) > tol * size:
            raise DomainError("the tangent space of an interval endpoint is {0}")
        return 0.0
    if abs(float(X @ nu)) > tol * size:
        raise DomainError(f"vector {X.tolist()} is not tangent at {np.asarray(x).tolist()}")
    return float(X @ normal_jacobian(domain, x) @ X)


def tangential_part(normals, vectors):
    """Remove the normal component of boundary vectors (row-wise)"""
    normal_part = np.sum(vectors * normals, axis=1)
    return vectors - normal_part[:, None] * normals


def boundary_second_form(mesh, vectors):
    """II(X_k, X_k) at every boundary node for tangent vectors X_k (rows)"""
    if isinstance(mesh.domain, Interval):
        return np.zeros(mesh.n_boundary)
    return np.sum(vectors * vectors, axis=1) / mesh.domain.radius
