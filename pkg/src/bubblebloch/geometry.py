"""Unit cell and inclusion surface meshes.

The periodic cell is Y = [-1/2, 1/2]^3 with unit lattice vectors.  The
inclusion D sits strictly inside Y and is described by a linear map of the
unit sphere (sphere or axis-aligned ellipsoid).  Surface quadrature uses a
Gauss-Legendre grid in cos(theta) times a uniform trapezoidal grid in phi;
for smooth integrands this pairing integrates spherical polynomials up to
degree 2*order - 1 exactly, which the singular-quadrature construction in
``layers`` relies on.

Conventions: lengths are in units of the lattice constant, normals point out
of D, and ``weights`` are genuine surface measures (sum = area of boundary).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

# Containment check leaves a small safety margin only at exactly 1/2;
# anything strictly inside the cell is accepted.
_HALF_CELL = 0.5


@dataclass(frozen=True)
class QuadratureMesh:
    """Nyström quadrature data for the inclusion boundary.

    Attributes:
        nodes: (n, 3) quadrature points on the surface.
        weights: (n,) positive quadrature weights, sum approximates the area.
        normals: (n, 3) outward unit normals.
        uhat: (n, 3) preimages of the nodes on the unit parameter sphere.
        sphere_weights: (n,) reference quadrature weights on the unit sphere
            (sum exactly 4*pi); the surface Jacobian is weights/sphere_weights.
        map_diag: (3,) diagonal of the linear map taking the parameter sphere
            to the surface (sphere: (R, R, R)).
        order: polar order of the underlying product grid.
    """

    nodes: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    uhat: np.ndarray
    sphere_weights: np.ndarray
    map_diag: np.ndarray
    order: int

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def max_extent(self) -> float:
        """Largest coordinate magnitude over all nodes (containment radius)."""
        return float(np.max(np.abs(self.nodes)))


@dataclass(frozen=True)
class CellGeometry:
    """Inclusion description inside the unit cell.

    shape is "sphere" (uses radius) or "ellipsoid" (uses semiaxes).
    """

    shape: str = "sphere"
    radius: float = 0.25
    semiaxes: tuple[float, float, float] = (0.25, 0.25, 0.25)
    order: int = 12
    _diag: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.shape not in ("sphere", "ellipsoid"):
            raise GeometryError(f"unknown inclusion shape {self.shape!r}")
        if self.order < 4:
            raise GeometryError("mesh order must be at least 4")
        diag = (
            np.full(3, float(self.radius))
            if self.shape == "sphere"
            else np.asarray(self.semiaxes, dtype=float)
        )
        if np.any(diag <= 0.0):
            raise GeometryError(f"inclusion axes must be positive, got {diag}")
        if np.max(diag) >= _HALF_CELL:
            raise GeometryError(
                f"inclusion of extent {np.max(diag):.6g} touches the cell boundary "
                f"(needs max semi-axis < {_HALF_CELL})"
            )
        object.__setattr__(self, "_diag", diag)

    def mesh(self) -> QuadratureMesh:
        return _linear_map_mesh(self._diag, self.order)


# ---------------------------------------------------------------------------
# constructors


def _sphere_grid(order: int):
    """Reference Gauss-Legendre x trapezoid grid on the unit sphere."""
    t, wt = np.polynomial.legendre.leggauss(order)
    n_phi = 2 * order
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    w_phi = 2.0 * np.pi / n_phi
    st = np.sqrt(1.0 - t**2)
    # outer products: index = (i_theta, j_phi) flattened C-order
    x = np.outer(st, np.cos(phi)).ravel()
    y = np.outer(st, np.sin(phi)).ravel()
    z = np.outer(t, np.ones(n_phi)).ravel()
    uhat = np.column_stack([x, y, z])
    ws = np.outer(wt, np.full(n_phi, w_phi)).ravel()
    return uhat, ws


def _linear_map_mesh(diag: np.ndarray, order: int) -> QuadratureMesh:
    uhat, ws = _sphere_grid(order)
    nodes = uhat * diag  # row-wise scaling by the map diagonal
    minv_u = uhat / diag
    norm_minv = np.linalg.norm(minv_u, axis=1)
    normals = minv_u / norm_minv[:, None]
    jac = np.prod(diag) * norm_minv  # dS = |det M| |M^-1 uhat| dS_hat
    weights = jac * ws
    return QuadratureMesh(
        nodes=nodes,
        weights=weights,
        normals=normals,
        uhat=uhat,
        sphere_weights=ws,
        map_diag=diag.copy(),
        order=order,
    )


def make_sphere_mesh(radius: float, order: int) -> QuadratureMesh:
    """Quadrature mesh for a sphere of given radius centered at the origin."""
    return CellGeometry(shape="sphere", radius=radius, order=order).mesh()


def make_ellipsoid_mesh(semiaxes, order: int) -> QuadratureMesh:
    """Quadrature mesh for an axis-aligned ellipsoid centered at the origin."""
    a, b, c = semiaxes
    return CellGeometry(shape="ellipsoid", semiaxes=(a, b, c), order=order).mesh()


# ---------------------------------------------------------------------------
# mesh functionals


def mesh_volume(mesh: QuadratureMesh) -> float:
    """Enclosed volume via the divergence identity V = (1/3) sum w x.nu.

    For linear-map surfaces this is exact up to roundoff at any order.
    """
    return float(np.sum(mesh.weights * np.sum(mesh.nodes * mesh.normals, axis=1)) / 3.0)


def mesh_area(mesh: QuadratureMesh) -> float:
    return float(np.sum(mesh.weights))


def check_symmetry(mesh: QuadratureMesh, tol: float = 1e-12) -> bool:
    """True if the weighted node set is invariant under all three reflections.

    The curvature maximality argument at the corner quasi-momentum needs the
    inclusion to be symmetric about every coordinate plane; the solvers call
    this before trusting symmetry-based shortcuts.
    """
    rows = np.column_stack([mesh.nodes, mesh.weights])
    for axis in range(3):
        refl = rows.copy()
        refl[:, axis] = -refl[:, axis]
        if not _same_point_set(rows, refl, tol):
            return False
    return True


def _same_point_set(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    # sort rows after snapping to a tolerance grid, then compare
    def key(arr):
        snapped = np.round(arr / max(tol, 1e-300)) * tol
        order = np.lexsort(snapped.T[::-1])
        return arr[order]

    return bool(np.allclose(key(a), key(b), atol=10 * tol, rtol=0.0))


def rescale(mesh: QuadratureMesh, s: float) -> QuadratureMesh:
    """Scale the surface by s: nodes s*x, weights s^2*w, normals unchanged."""
    if s <= 0:
        raise GeometryError(f"scale factor must be positive, got {s}")
    return QuadratureMesh(
        nodes=mesh.nodes * s,
        weights=mesh.weights * s**2,
        normals=mesh.normals.copy(),
        uhat=mesh.uhat.copy(),
        sphere_weights=mesh.sphere_weights.copy(),
        map_diag=mesh.map_diag * s,
        order=mesh.order,
    )


def reflect(mesh: QuadratureMesh, axis: int) -> QuadratureMesh:
    """Mirror the mesh across the plane x_axis = 0 (normals flip with nodes)."""
    nodes = mesh.nodes.copy()
    normals = mesh.normals.copy()
    uhat = mesh.uhat.copy()
    for arr in (nodes, normals, uhat):
        arr[:, axis] = -arr[:, axis]
    return QuadratureMesh(
        nodes=nodes,
        weights=mesh.weights.copy(),
        normals=normals,
        uhat=uhat,
        sphere_weights=mesh.sphere_weights.copy(),
        map_diag=mesh.map_diag.copy(),
        order=mesh.order,
    )


# ---------------------------------------------------------------------------
# plain-text serialization (external interface)

_MESH_HEADER = "bubblebloch-mesh-v1"


def dump_mesh(mesh: QuadratureMesh) -> str:
    """Serialize a mesh to a plain text block (stable column layout)."""
    buf = io.StringIO()
    buf.write(f"# {_MESH_HEADER}\n")
    buf.write(f"# order {mesh.order}\n")
    buf.write("# map_diag " + " ".join(f"{v:.17g}" for v in mesh.map_diag) + "\n")
    buf.write("# columns: x y z w nx ny nz ux uy uz ws\n")
    table = np.column_stack(
        [mesh.nodes, mesh.weights, mesh.normals, mesh.uhat, mesh.sphere_weights]
    )
    np.savetxt(buf, table, fmt="%.17g")
    return buf.getvalue()


def load_mesh(text: str) -> QuadratureMesh:
    lines = text.splitlines()
    if not lines or _MESH_HEADER not in lines[0]:
        raise GeometryError("not a mesh block: missing header line")
    order = None
    map_diag = None
    for ln in lines[:4]:
        if ln.startswith("# order"):
            order = int(ln.split()[-1])
        if ln.startswith("# map_diag"):
            map_diag = np.array([float(v) for v in ln.split()[2:]])
    if order is None or map_diag is None:
        raise GeometryError("mesh block is missing order/map_diag metadata")
    table = np.loadtxt(io.StringIO(text))
    table = np.atleast_2d(table)
    if table.shape[1] != 11:
        raise GeometryError(f"mesh block has {table.shape[1]} columns, expected 11")
    return QuadratureMesh(
        nodes=table[:, 0:3],
        weights=table[:, 3],
        normals=table[:, 4:7],
        uhat=table[:, 7:10],
        sphere_weights=table[:, 10],
        map_diag=map_diag,
        order=order,
    )
