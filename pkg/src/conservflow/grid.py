"""Cartesian primal mesh, vertex-centred control volumes, Q^r bases and quadrature.

Index conventions used throughout the package:

* element (i, j) has index ``i + nx * j`` and covers
  ``[i*hx, (i+1)*hx] x [j*hy, (j+1)*hy]``;
* vertex (i, j) has index ``i + (nx + 1) * j``;
* on the reference square the local node (a, b) of a degree-r basis has index
  ``a + (r + 1) * b`` and sits at ``(a/r, b/r)``;
* the global node lattice of a degree-r space is ``(r*nx + 1) x (r*ny + 1)``,
  numbered x-fastest like the vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import ConfigurationError

SIDES = ("left", "right", "bottom", "top")
MAX_DEGREE = 6


@dataclass(frozen=True)
class PrimalMesh:
    """Uniform rectangular element grid on ``[0, Lx] x [0, Ly]``."""

    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def element_index(self, i, j):
        return np.asarray(i) + self.nx * np.asarray(j)

    def vertex_index(self, i, j):
        return np.asarray(i) + (self.nx + 1) * np.asarray(j)

    def element_ij(self):
        """Return the (i, j) arrays of all elements in index order."""
        e = np.arange(self.n_elements)
        return e % self.nx, e // self.nx

    def element_origins(self):
        i, j = self.element_ij()
        return i * self.hx, j * self.hy

    def vertex_coords(self):
        v = np.arange(self.n_vertices)
        return (v % (self.nx + 1)) * self.hx, (v // (self.nx + 1)) * self.hy


def build_primal_mesh(nx: int, ny: int, Lx: float = 1.0, Ly: float = 1.0) -> PrimalMesh:
    """Create a :class:`PrimalMesh` after validating its dimensions."""
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise ConfigurationError(f"element counts must be integers >= 2, got nx={nx}, ny={ny}")
    if not (Lx > 0 and Ly > 0 and np.isfinite(Lx) and np.isfinite(Ly)):
        raise ConfigurationError(f"domain lengths must be positive, got Lx={Lx}, Ly={Ly}")
    return PrimalMesh(int(nx), int(ny), float(Lx), float(Ly))


@dataclass(frozen=True, eq=False)
class DualMesh:
    """Control volumes centred at the primal vertices that carry a constraint.

    Each CV is the ``hx x hy`` box around its vertex, clipped to the domain.
    Its interior boundary is made of half-midlines of the primal elements;
    these pieces are stored once as *segments*. Segment ``s`` lies in element
    ``seg_elem[s]`` on the line ``xi = 1/2`` (``seg_axis = 0``, normal +x) or
    ``eta = 1/2`` (``seg_axis = 1``, normal +y), in the lower/left half
    (``seg_half = 0``) or upper/right half (``seg_half = 1``). The normal points
    from CV ``seg_minus`` into CV ``seg_plus``; either may be -1 when the
    vertex on that side carries no CV (a Dirichlet vertex).
    """

    mesh: PrimalMesh
    dirichlet: tuple
    cv_of_vertex: np.ndarray
    cv_vertex: np.ndarray
    cv_ij: np.ndarray
    cv_bounds: np.ndarray
    seg_elem: np.ndarray
    seg_axis: np.ndarray
    seg_half: np.ndarray
    seg_minus: np.ndarray
    seg_plus: np.ndarray

    @property
    def n_cv(self) -> int:
        return len(self.cv_vertex)

    @property
    def cv_areas(self):
        b = self.cv_bounds
        return (b[:, 1] - b[:, 0]) * (b[:, 3] - b[:, 2])

    @property
    def seg_length(self):
        m = self.mesh
        return np.where(self.seg_axis == 0, 0.5 * m.hy, 0.5 * m.hx)

    def seg_endpoints(self):
        """Physical end points ``(x0, y0, x1, y1)`` of every segment."""
        m = self.mesh
        i = self.seg_elem % m.nx
        j = self.seg_elem // m.nx
        vert = self.seg_axis == 0
        x0 = np.where(vert, (i + 0.5) * m.hx, (i + 0.5 * self.seg_half) * m.hx)
        x1 = np.where(vert, x0, x0 + 0.5 * m.hx)
        y0 = np.where(vert, (j + 0.5 * self.seg_half) * m.hy, (j + 0.5) * m.hy)
        y1 = np.where(vert, y0 + 0.5 * m.hy, y0)
        return x0, y0, x1, y1

    def cv_balance(self, seg_values):
        """Sum per-segment values into outward totals per CV."""
        out = np.zeros(self.n_cv)
        m = self.seg_minus >= 0
        p = self.seg_plus >= 0
        np.add.at(out, self.seg_minus[m], seg_values[m])
        np.add.at(out, self.seg_plus[p], -seg_values[p])
        return out


def build_dual_mesh(mesh: PrimalMesh, dirichlet=SIDES) -> DualMesh:
    """Build the control volumes for the given Dirichlet sides.

    With all four sides Dirichlet (the default) there is one CV per interior
    vertex. Vertices on non-Dirichlet sides get CVs clipped to the domain.
    """
    dirichlet = tuple(sorted(set(dirichlet)))
    unknown = set(dirichlet) - set(SIDES)
    if unknown:
        raise ConfigurationError(f"unknown boundary side(s): {sorted(unknown)}")
    nx, ny = mesh.nx, mesh.ny
    vi, vj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    vi, vj = vi.ravel(), vj.ravel()
    on_d = np.zeros(vi.shape, dtype=bool)
    if "left" in dirichlet:
        on_d |= vi == 0
    if "right" in dirichlet:
        on_d |= vi == nx
    if "bottom" in dirichlet:
        on_d |= vj == 0
    if "top" in dirichlet:
        on_d |= vj == ny
    cv_vertex = np.flatnonzero(~on_d)
    cv_of_vertex = np.full(mesh.n_vertices, -1, dtype=np.int64)
    cv_of_vertex[cv_vertex] = np.arange(len(cv_vertex))
    ci, cj = vi[cv_vertex], vj[cv_vertex]
    hx, hy = mesh.hx, mesh.hy
    bounds = np.column_stack(
        [
            np.maximum(ci - 0.5, 0.0) * hx,
            np.minimum(ci + 0.5, nx) * hx,
            np.maximum(cj - 0.5, 0.0) * hy,
            np.minimum(cj + 0.5, ny) * hy,
        ]
    )

    ei, ej = mesh.element_ij()
    e = np.arange(mesh.n_elements)
    corner = {
        (a, b): cv_of_vertex[mesh.vertex_index(ei + a, ej + b)] for a in (0, 1) for b in (0, 1)
    }
    # (axis, half) -> (minus corner, plus corner)
    layout = {
        (0, 0): ((0, 0), (1, 0)),
        (0, 1): ((0, 1), (1, 1)),
        (1, 0): ((0, 0), (0, 1)),
        (1, 1): ((1, 0), (1, 1)),
    }
    parts = []
    for (axis, half), (cm, cp) in layout.items():
        parts.append(
            (e, np.full_like(e, axis), np.full_like(e, half), corner[cm], corner[cp])
        )
    seg = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    keep = (seg[3] >= 0) | (seg[4] >= 0)
    seg = [s[keep] for s in seg]
    order = np.lexsort((seg[2], seg[1], seg[0]))
    seg = [s[order] for s in seg]
    return DualMesh(
        mesh=mesh,
        dirichlet=dirichlet,
        cv_of_vertex=cv_of_vertex,
        cv_vertex=cv_vertex,
        cv_ij=np.column_stack([ci, cj]),
        cv_bounds=bounds,
        seg_elem=seg[0],
        seg_axis=seg[1],
        seg_half=seg[2],
        seg_minus=seg[3],
        seg_plus=seg[4],
    )


@lru_cache(maxsize=None)
def gauss_rule(n: int):
    """Gauss-Legendre rule with ``n`` points on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_rule_2d(n: int, box=(0.0, 1.0, 0.0, 1.0)):
    """Tensor Gauss rule on a sub-box of the reference square.

    Returns ``(xi, eta, w)`` flattened with xi fastest.
    """
    t, w = gauss_rule(n)
    x0, x1, y0, y1 = box
    xi = x0 + (x1 - x0) * t
    eta = y0 + (y1 - y0) * t
    XI, ETA = np.meshgrid(xi, eta, indexing="xy")
    W = np.outer(w * (y1 - y0), w * (x1 - x0))
    return XI.ravel(), ETA.ravel(), W.ravel()


@lru_cache(maxsize=None)
def _lagrange_coeffs(r: int):
    nodes = np.linspace(0.0, 1.0, r + 1)
    V = np.vander(nodes, r + 1, increasing=True)
    return nodes, np.linalg.inv(V)  # column a holds the monomial coefficients of L_a


class QrBasis:
    """Tensor-product Lagrange basis of degree ``r`` on equispaced nodes of [0,1]^2."""

    def __init__(self, r: int):
        if int(r) != r or not 1 <= r <= MAX_DEGREE:
            raise ConfigurationError(f"degree must be an integer in 1..{MAX_DEGREE}, got {r}")
        self.r = int(r)
        self.nodes1d, self._coef = _lagrange_coeffs(self.r)
        self._dcoef = np.array([npoly.polyder(self._coef[:, a]) for a in range(self.r + 1)])

    @property
    def n_local(self) -> int:
        return (self.r + 1) ** 2

    @property
    def nodes(self):
        a = np.arange(self.n_local)
        return self.nodes1d[a % (self.r + 1)], self.nodes1d[a // (self.r + 1)]

    def eval_1d(self, t):
        """Values and derivatives of the 1D factors, shape ``(len(t), r+1)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        val = np.stack([npoly.polyval(t, self._coef[:, a]) for a in range(self.r + 1)], axis=1)
        der = np.stack([npoly.polyval(t, self._dcoef[a]) for a in range(self.r + 1)], axis=1)
        return val, der

    def eval(self, xi, eta):
        """Basis values ``(npts, nloc)`` and reference gradients ``(npts, nloc, 2)``."""
        vx, dx = self.eval_1d(xi)
        vy, dy = self.eval_1d(eta)
        n = len(vx)
        val = (vy[:, :, None] * vx[:, None, :]).reshape(n, -1)
        gx = (vy[:, :, None] * dx[:, None, :]).reshape(n, -1)
        gy = (dy[:, :, None] * vx[:, None, :]).reshape(n, -1)
        return val, np.stack([gx, gy], axis=-1)


def basis_eval(r: int, point):
    """Evaluate the degree-r basis at one reference point.

    Returns:
        values: shape ``((r+1)**2,)``
        gradients: shape ``((r+1)**2, 2)`` with respect to the reference coordinates.
    """
    xi, eta = point
    val, grad = QrBasis(r).eval([xi], [eta])
    return val[0], grad[0]


@dataclass(frozen=True, eq=False)
class FESpace:
    """Continuous Q^r space on a primal mesh with Dirichlet dof bookkeeping."""

    mesh: PrimalMesh
    basis: QrBasis
    dirichlet: tuple = SIDES
    elem_dofs: np.ndarray = field(init=False)
    is_dirichlet: np.ndarray = field(init=False)
    free_dofs: np.ndarray = field(init=False)

    def __post_init__(self):
        m, r = self.mesh, self.basis.r
        nnx = r * m.nx + 1
        ei, ej = m.element_ij()
        a = np.arange(self.basis.n_local)
        ax, ay = a % (r + 1), a // (r + 1)
        dofs = (r * ei[:, None] + ax[None, :]) + nnx * (r * ej[:, None] + ay[None, :])
        I, J = self.node_ij()
        d = np.zeros(self.n_dofs, dtype=bool)
        if "left" in self.dirichlet:
            d |= I == 0
        if "right" in self.dirichlet:
            d |= I == nnx - 1
        if "bottom" in self.dirichlet:
            d |= J == 0
        if "top" in self.dirichlet:
            d |= J == r * m.ny
        object.__setattr__(self, "elem_dofs", dofs)
        object.__setattr__(self, "is_dirichlet", d)
        object.__setattr__(self, "free_dofs", np.flatnonzero(~d))

    @property
    def r(self) -> int:
        return self.basis.r

    @property
    def n_dofs(self) -> int:
        return (self.r * self.mesh.nx + 1) * (self.r * self.mesh.ny + 1)

    def node_ij(self):
        n = np.arange(self.n_dofs)
        nnx = self.r * self.mesh.nx + 1
        return n % nnx, n // nnx

    def node_coords(self):
        I, J = self.node_ij()
        return I * self.mesh.hx / self.r, J * self.mesh.hy / self.r

    def interpolate(self, fn):
        """Nodal interpolant of ``fn(x, y)`` as a full coefficient vector."""
        x, y = self.node_coords()
        return np.asarray(fn(x, y), dtype=float) * np.ones(self.n_dofs)
