"""Locally conservative Q^r finite elements for ``-div(Lam grad p) = q``.

The discrete pressure minimises the usual energy over the Q^r space subject to
one flux-balance constraint per control volume. The resulting KKT system is::

    [A  B^T] [p  ]   [f]
    [B  0  ] [lam] = [g]

with ``A_ij = int Lam grad(phi_j) . grad(phi_i)``,
``B_kj = int_{dV_k} -Lam grad(phi_j) . n`` (outward Darcy flux of phi_j),
``f_i = int q phi_i`` and ``g_k = int_{V_k} q`` plus any boundary inflow
through the clipped part of ``dV_k``. ``B p = g`` is then exact mass balance on
every control volume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ModelError, RankDeficiencyError, SolverError
from .grid import SIDES, DualMesh, FESpace, PrimalMesh, QrBasis, build_dual_mesh, gauss_rule, gauss_rule_2d

logger = logging.getLogger(__name__)

QUADRANTS = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True, eq=False)
class MobilityField:
    """Element-wise constant scalar coefficient Lam_e > 0."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ModelError("mobility contains non-finite values")
        if np.any(v <= 0):
            bad = np.flatnonzero(v <= 0)
            raise ModelError(f"mobility must be positive; {len(bad)} element(s) fail, first {bad[:5].tolist()}")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, mesh: PrimalMesh, value: float = 1.0):
        return cls(np.full(mesh.n_elements, float(value)))

    def scaled(self, c: float):
        return MobilityField(self.values * c)


def _as_source(q):
    """Normalise a source specification into a vectorised callable or None."""
    if q is None:
        return None
    if callable(q):
        return q
    c = float(q)
    if c == 0.0:
        return None
    return lambda x, y: np.full(np.broadcast(x, y).shape, c)


# ---------------------------------------------------------------- reference tables


@lru_cache(maxsize=None)
def _stiffness_reference(r: int):
    basis = QrBasis(r)
    xi, eta, w = gauss_rule_2d(r + 1)
    _, g = basis.eval(xi, eta)
    kxx = np.einsum("q,qa,qb->ab", w, g[:, :, 0], g[:, :, 0])
    kyy = np.einsum("q,qa,qb->ab", w, g[:, :, 1], g[:, :, 1])
    return kxx, kyy


@lru_cache(maxsize=None)
def _segment_reference(r: int, npts: int):
    """Integrals of the normal reference derivative along each half-midline.

    Returns an array ``T[axis, half, a]`` of ``int d(phi_a)/d(xi_axis)`` over the
    half-line (reference length 1/2).
    """
    basis = QrBasis(r)
    t, w = gauss_rule(npts)
    T = np.zeros((2, 2, basis.n_local))
    for half in (0, 1):
        s = 0.5 * half + 0.5 * t
        ws = 0.5 * w
        _, g = basis.eval(np.full_like(s, 0.5), s)
        T[0, half] = ws @ g[:, :, 0]
        _, g = basis.eval(s, np.full_like(s, 0.5))
        T[1, half] = ws @ g[:, :, 1]
    return T


def element_dofs(mesh: PrimalMesh, basis: QrBasis):
    return FESpace(mesh, basis, dirichlet=()).elem_dofs


def _scatter(rows, cols, data, shape):
    return sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=shape)


# ---------------------------------------------------------------- assembly


def assemble_stiffness(mesh: PrimalMesh, basis: QrBasis, mobility: MobilityField):
    """Global stiffness matrix over all nodes (Dirichlet rows included)."""
    lam = mobility.values
    if lam.shape != (mesh.n_elements,):
        raise ModelError(f"mobility has {lam.size} values for {mesh.n_elements} elements")
    kxx, kyy = _stiffness_reference(basis.r)
    kref = (mesh.hy / mesh.hx) * kxx + (mesh.hx / mesh.hy) * kyy
    dofs = element_dofs(mesh, basis)
    n = (basis.r * mesh.nx + 1) * (basis.r * mesh.ny + 1)
    rows = np.repeat(dofs[:, :, None], basis.n_local, axis=2)
    cols = np.repeat(dofs[:, None, :], basis.n_local, axis=1)
    data = lam[:, None, None] * kref[None]
    return _scatter(rows, cols, data, (n, n))


def assemble_constraints(mesh: PrimalMesh, dual: DualMesh, basis: QrBasis, mobility: MobilityField):
    """Constraint block: row k is the outward flux of ``-Lam grad v`` through dV_k."""
    lam = mobility.values
    T = _segment_reference(basis.r, basis.r + 1)
    dofs = element_dofs(mesh, basis)
    scale = np.where(dual.seg_axis == 0, mesh.hy / mesh.hx, mesh.hx / mesh.hy)
    # flux of -Lam grad(phi_a) . e_axis across each segment
    flux = -(lam[dual.seg_elem] * scale)[:, None] * T[dual.seg_axis, dual.seg_half]
    n = (basis.r * mesh.nx + 1) * (basis.r * mesh.ny + 1)
    segdofs = dofs[dual.seg_elem]
    rows, cols, data = [], [], []
    for cv, sign in ((dual.seg_minus, 1.0), (dual.seg_plus, -1.0)):
        ok = cv >= 0
        rows.append(np.repeat(cv[ok], basis.n_local))
        cols.append(segdofs[ok].ravel())
        data.append(sign * flux[ok].ravel())
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(dual.n_cv, n)
    )


def _element_points(mesh: PrimalMesh, xi, eta):
    x0, y0 = mesh.element_origins()
    return x0[:, None] + mesh.hx * xi[None, :], y0[:, None] + mesh.hy * eta[None, :]


def assemble_loads(q, dual: DualMesh, basis: QrBasis, n_quad: int | None = None):
    """Load vector over all nodes and per-CV source integrals.

    ``n_quad`` points per direction are used on each element quadrant; the
    default ``r + 4`` keeps the quadrature error of smooth sources far below
    discretisation error.
    """
    mesh = dual.mesh
    n = (basis.r * mesh.nx + 1) * (basis.r * mesh.ny + 1)
    f = np.zeros(n)
    g = np.zeros(dual.n_cv)
    q = _as_source(q)
    if q is None:
        return f, g
    nq = n_quad or basis.r + 4
    dofs = element_dofs(mesh, basis)
    ei, ej = mesh.element_ij()
    jac = mesh.hx * mesh.hy
    for a, b in QUADRANTS:
        xi, eta, w = gauss_rule_2d(nq, (0.5 * a, 0.5 * a + 0.5, 0.5 * b, 0.5 * b + 0.5))
        val, _ = basis.eval(xi, eta)
        X, Y = _element_points(mesh, xi, eta)
        Q = q(X, Y) * (w * jac)[None, :]
        np.add.at(f, dofs, Q @ val)
        cv = dual.cv_of_vertex[mesh.vertex_index(ei + a, ej + b)]
        ok = cv >= 0
        np.add.at(g, cv[ok], Q[ok].sum(axis=1))
    return f, g


# ---------------------------------------------------------------- system / solution


@dataclass(eq=False)
class SaddleSystem:
    """KKT blocks restricted to the free (non-Dirichlet) dofs."""

    space: FESpace
    dual: DualMesh
    mobility: MobilityField
    A: sp.csr_matrix
    B: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    source: Callable | None = None
    g_boundary: np.ndarray | None = None

    @property
    def n_free(self) -> int:
        return self.A.shape[0]

    def kkt(self):
        return sp.bmat([[self.A, self.B.T], [self.B, None]], format="csc")


@dataclass(eq=False)
class PressureSolution:
    """Pressure coefficients, multipliers and residual diagnostics."""

    system: SaddleSystem
    p_free: np.ndarray
    lam: np.ndarray
    conservative: bool
    residuals: dict = field(default_factory=dict)

    @property
    def p(self):
        """Full nodal coefficient vector including the Dirichlet zeros."""
        full = np.zeros(self.system.space.n_dofs)
        full[self.system.space.free_dofs] = self.p_free
        return full


def build_saddle_system(space: FESpace, dual: DualMesh, mobility: MobilityField, source=None, n_quad=None):
    """Assemble A, B, f, g and eliminate the (homogeneous) Dirichlet dofs."""
    mesh, basis = space.mesh, space.basis
    A = assemble_stiffness(mesh, basis, mobility)
    B = assemble_constraints(mesh, dual, basis, mobility)
    f, g = assemble_loads(source, dual, basis, n_quad)
    free = space.free_dofs
    return SaddleSystem(
        space=space,
        dual=dual,
        mobility=mobility,
        A=A[free][:, free].tocsr(),
        B=B[:, free].tocsr(),
        f=f[free],
        g=g,
        source=_as_source(source),
        g_boundary=np.zeros(dual.n_cv),
    )


def _zero_rows(B):
    return np.flatnonzero(np.abs(B).sum(axis=1).A1 == 0)


def _dependent_rows(B, max_dense=3000):
    """Indices of constraint rows that depend on earlier ones (pivoted QR)."""
    zero = _zero_rows(B)
    if len(zero) or B.shape[0] > max_dense:
        return zero
    _, R, piv = scipy.linalg.qr(B.toarray().T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d.max() * max(B.shape) * np.finfo(float).eps if d.size else 0.0
    # more rows than unknowns: the trailing pivots have no diagonal entry
    small = np.concatenate([d <= tol, np.ones(len(piv) - len(d), dtype=bool)])
    return np.sort(piv[small])


def _backward_error(K, x, rhs):
    r = K @ x - rhs
    knorm = spla.norm(K, np.inf)
    return r, np.abs(r).max() / (knorm * np.abs(x).max() + np.abs(rhs).max() + 1e-300)


def _direct(K, rhs, tol, refine=3, ordering="MMD_AT_PLUS_A"):
    try:
        lu = spla.splu(K, permc_spec=ordering)
    except RuntimeError as exc:
        raise SolverError(f"factorisation failed: {exc}") from exc
    x = lu.solve(rhs)
    r, err = _backward_error(K, x, rhs)
    for _ in range(refine):
        if err <= tol:
            break
        x = x - lu.solve(r)
        r, err = _backward_error(K, x, rhs)
    return x, err


def _schur(system: SaddleSystem, tol):
    """Eliminate p with a factorised A and run CG on the multiplier system."""
    A, B = system.A.tocsc(), system.B
    lu = spla.splu(A)
    Ainv_f = lu.solve(system.f)
    S = spla.LinearOperator((B.shape[0],) * 2, matvec=lambda y: B @ lu.solve(B.T @ y), dtype=float)
    rhs = B @ Ainv_f - system.g
    lam, info = spla.cg(S, rhs, rtol=tol * 1e-2, atol=0.0, maxiter=20 * B.shape[0])
    if info != 0:
        raise SolverError(f"Schur-complement CG did not converge (info={info})")
    p = lu.solve(system.f - B.T @ lam)
    return p, lam


def solve_saddle(system: SaddleSystem, method: str = "direct", tol: float = 1e-12) -> PressureSolution:
    """Solve the KKT system for (p, lam) and record residuals.

    Raises:
        RankDeficiencyError: if some constraint rows are linearly dependent.
        SolverError: if the factorisation fails or the residual target is missed.
    """
    bad = _zero_rows(system.B)
    if len(bad):
        raise RankDeficiencyError(f"constraint block is rank deficient at CV(s) {bad[:10].tolist()}", bad)
    n = system.n_free
    if method == "direct":
        K = system.kkt()
        rhs = np.concatenate([system.f, system.g])
        try:
            # square B (Q1) factors much faster with a column ordering
            ordering = "COLAMD" if system.B.shape[0] == n else "MMD_AT_PLUS_A"
            x, err = _direct(K, rhs, tol, ordering=ordering)
        except SolverError:
            bad = _dependent_rows(system.B)
            if len(bad):
                raise RankDeficiencyError(
                    f"constraint block is rank deficient at CV(s) {bad[:10].tolist()}", bad
                ) from None
            raise
        p, lam = x[:n], x[n:]
    elif method == "schur":
        p, lam = _schur(system, tol)
        K = system.kkt()
        _, err = _backward_error(K, np.concatenate([p, lam]), np.concatenate([system.f, system.g]))
    else:
        raise SolverError(f"unknown solver method {method!r}")
    r1 = system.A @ p + system.B.T @ lam - system.f
    r2 = system.B @ p - system.g
    res = {
        "backward_error": float(err),
        "first_block_inf": float(np.abs(r1).max(initial=0.0)),
        "constraint_inf": float(np.abs(r2).max(initial=0.0)),
    }
    if not np.all(np.isfinite(p)) or not np.all(np.isfinite(lam)) or err > max(tol, 1e-10):
        raise SolverError("KKT solve did not reach the residual target", res)
    return PressureSolution(system, p, lam, True, res)


def solve_fem(system: SaddleSystem, tol: float = 1e-12) -> PressureSolution:
    """Plain Galerkin solve ``A p = f`` (constraints ignored)."""
    lu = spla.splu(system.A.tocsc())
    p = lu.solve(system.f)
    r = system.A @ p - system.f
    for _ in range(2):
        if np.abs(r).max(initial=0.0) <= tol * max(np.abs(system.f).max(initial=0.0), 1e-300):
            break
        p = p - lu.solve(r)
        r = system.A @ p - system.f
    res = {"first_block_inf": float(np.abs(r).max(initial=0.0))}
    return PressureSolution(system, p, np.zeros(system.dual.n_cv), False, res)


def solve_pressure(
    mesh: PrimalMesh,
    degree: int,
    mobility: MobilityField,
    source=None,
    conservative: bool = True,
    dirichlet=SIDES,
    method: str = "direct",
):
    """Assemble and solve on a full-Dirichlet (or given) boundary setup."""
    space = FESpace(mesh, QrBasis(degree), tuple(dirichlet))
    dual = build_dual_mesh(mesh, dirichlet)
    system = build_saddle_system(space, dual, mobility, source)
    if conservative:
        return solve_saddle(system, method=method)
    return solve_fem(system)


# ---------------------------------------------------------------- post-processing


def _fields_at(sol: PressureSolution, xi, eta):
    space = sol.system.space
    mesh = space.mesh
    val, grad = space.basis.eval(xi, eta)
    P = sol.p[space.elem_dofs]
    return P @ val.T, (P @ grad[:, :, 0].T) / mesh.hx, (P @ grad[:, :, 1].T) / mesh.hy


def energy_indicator(sol: PressureSolution, mobility: MobilityField | None = None, source=None, n_quad=None):
    """``E(p) = 1/2 int Lam |grad p|^2 - int q p`` evaluated by quadrature."""
    space = sol.system.space
    mesh = space.mesh
    lam = (mobility or sol.system.mobility).values
    q = _as_source(source) if source is not None else sol.system.source
    xi, eta, w = gauss_rule_2d(n_quad or space.r + 4)
    P, Px, Py = _fields_at(sol, xi, eta)
    jac = mesh.hx * mesh.hy
    e = 0.5 * np.sum(lam[:, None] * (Px**2 + Py**2) * w[None, :]) * jac
    if q is not None:
        X, Y = _element_points(mesh, xi, eta)
        e -= np.sum(q(X, Y) * P * w[None, :]) * jac
    return float(e)


def recover_cv_fluxes(sol: PressureSolution, mobility: MobilityField | None = None, n_quad=None):
    """Flux ``int_s -Lam grad p . n`` through every dual segment.

    ``n`` is the segment's +x or +y normal, so the value is counted outward for
    ``seg_minus`` and inward for ``seg_plus``.
    """
    dual = sol.system.dual
    space = sol.system.space
    mesh = space.mesh
    lam = (mobility or sol.system.mobility).values
    t, w = gauss_rule(n_quad or space.r + 1)
    P = sol.p[space.elem_dofs[dual.seg_elem]]
    out = np.zeros(len(dual.seg_elem))
    for axis in (0, 1):
        for half in (0, 1):
            sel = (dual.seg_axis == axis) & (dual.seg_half == half)
            s = 0.5 * half + 0.5 * t
            mid = np.full_like(s, 0.5)
            if axis == 0:
                _, g = space.basis.eval(mid, s)
                dn = (P[sel] @ g[:, :, 0].T) / mesh.hx
                length = 0.5 * mesh.hy
            else:
                _, g = space.basis.eval(s, mid)
                dn = (P[sel] @ g[:, :, 1].T) / mesh.hy
                length = 0.5 * mesh.hx
            out[sel] = -lam[dual.seg_elem[sel]] * (dn @ w) * length
    return out


def cv_imbalance(sol: PressureSolution, mobility: MobilityField | None = None):
    """Per-CV outward flux minus the CV's source and boundary inflow."""
    fl = recover_cv_fluxes(sol, mobility)
    return sol.system.dual.cv_balance(fl) - sol.system.g


def mass_indicator(sol: PressureSolution, mobility: MobilityField | None = None, source=None, dual=None):
    """``J(p) = sqrt(sum_V (int_dV -Lam grad p . n - int_V q)^2)`` over the CVs."""
    system = sol.system
    if source is not None or dual is not None:
        dual = dual or system.dual
        _, g = assemble_loads(source if source is not None else system.source, dual, system.space.basis)
        g = g + (system.g_boundary if dual is system.dual else 0.0)
        fl = recover_cv_fluxes(sol, mobility)
        return float(np.sqrt(np.sum((dual.cv_balance(fl) - g) ** 2)))
    return float(np.sqrt(np.sum(cv_imbalance(sol, mobility) ** 2)))


def error_norms(sol: PressureSolution, exact, n_quad=None, sign: float = 1.0):
    """L2 and H1-seminorm errors of p^h and the L2 error of ``p^h + lam^h``.

    Args:
        exact: pair ``(p, grad_p)`` of callables; ``grad_p`` returns ``(px, py)``.
        sign: multiplier applied to lam^h in the corrected field.

    Returns:
        ``(err_L2, err_H1, err_L2_corrected)``
    """
    p_ex, grad_ex = exact
    space = sol.system.space
    dual = sol.system.dual
    mesh = space.mesh
    ei, ej = mesh.element_ij()
    jac = mesh.hx * mesh.hy
    nq = n_quad or space.r + 4
    l2 = h1 = l2c = 0.0
    for a, b in QUADRANTS:
        xi, eta, w = gauss_rule_2d(nq, (0.5 * a, 0.5 * a + 0.5, 0.5 * b, 0.5 * b + 0.5))
        P, Px, Py = _fields_at(sol, xi, eta)
        X, Y = _element_points(mesh, xi, eta)
        E = P - p_ex(X, Y)
        gx, gy = grad_ex(X, Y)
        cv = dual.cv_of_vertex[mesh.vertex_index(ei + a, ej + b)]
        shift = np.where(cv >= 0, sol.lam[np.maximum(cv, 0)], 0.0) * sign
        l2 += np.sum(E**2 * w) * jac
        h1 += np.sum(((Px - gx) ** 2 + (Py - gy) ** 2) * w) * jac
        l2c += np.sum((E + shift[:, None]) ** 2 * w) * jac
    return float(np.sqrt(l2)), float(np.sqrt(h1)), float(np.sqrt(l2c))


# ---------------------------------------------------------------- manufactured problem


def manufactured_solution():
    """Smooth test problem on the unit square with zero boundary values.

    ``p = sin(pi x) sin(pi y) (3y - x)`` and ``q = -lap p``.

    Returns:
        (p, grad_p, q) as vectorised callables.
    """
    pi = np.pi

    def p(x, y):
        return np.sin(pi * x) * np.sin(pi * y) * (3 * y - x)

    def grad(x, y):
        sx, cx, sy, cy = np.sin(pi * x), np.cos(pi * x), np.sin(pi * y), np.cos(pi * y)
        lin = 3 * y - x
        return pi * cx * sy * lin - sx * sy, pi * sx * cy * lin + 3 * sx * sy

    def q(x, y):
        sx, cx, sy, cy = np.sin(pi * x), np.cos(pi * x), np.sin(pi * y), np.cos(pi * y)
        return 2 * pi * (cx * sy - 3 * sx * cy + pi * sx * sy * (3 * y - x))

    return p, grad, q


def evaluate(sol: PressureSolution, x, y):
    """Pressure and gradient of the discrete solution at arbitrary points.

    Points on an element edge are assigned to the element on the upper/right
    side (the last element for the domain boundary).
    """
    space = sol.system.space
    mesh = space.mesh
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    sx, sy = x.ravel() / mesh.hx, y.ravel() / mesh.hy
    i = np.clip(np.floor(sx).astype(int), 0, mesh.nx - 1)
    j = np.clip(np.floor(sy).astype(int), 0, mesh.ny - 1)
    xi, eta = sx - i, sy - j
    val, grad = space.basis.eval(xi, eta)
    P = sol.p[space.elem_dofs[mesh.element_index(i, j)]]
    p = np.einsum("na,na->n", P, val)
    px = np.einsum("na,na->n", P, grad[:, :, 0]) / mesh.hx
    py = np.einsum("na,na->n", P, grad[:, :, 1]) / mesh.hy
    return p.reshape(x.shape), px.reshape(x.shape), py.reshape(x.shape)


def as_exact(sol: PressureSolution):
    """Wrap a (reference) solution as the ``(p, grad_p)`` pair used by :func:`error_norms`."""

    def p(x, y):
        return evaluate(sol, x, y)[0]

    def grad(x, y):
        _, px, py = evaluate(sol, x, y)
        return px, py

    return p, grad


def compare_methods(n: int, degree: int, mobility=None, source=None, exact=None, method: str = "direct"):
    """Plain FEM and the conservative method on an ``n x n`` unit-square mesh.

    Args:
        mobility: element values (element order), a MobilityField, or None for 1.
        exact: optional ``(p, grad_p)`` pair for the error columns.

    Returns:
        dict with keys degree, h, E_FEM, E_HOCFEM, J_FEM, J_HOCFEM and, if
        ``exact`` is given, errL2, errH1, errL2corr (of the conservative solution).
    """
    from .grid import build_primal_mesh

    mesh = build_primal_mesh(n, n)
    if mobility is None:
        mob = MobilityField.constant(mesh)
    elif isinstance(mobility, MobilityField):
        mob = mobility
    else:
        mob = MobilityField(mobility)
    space = FESpace(mesh, QrBasis(degree))
    dual = build_dual_mesh(mesh)
    system = build_saddle_system(space, dual, mob, source)
    fem = solve_fem(system)
    hoc = solve_saddle(system, method=method)
    row = {
        "degree": degree,
        "h": 1.0 / n,
        "E_FEM": energy_indicator(fem),
        "E_HOCFEM": energy_indicator(hoc),
        "J_FEM": mass_indicator(fem),
        "J_HOCFEM": mass_indicator(hoc),
    }
    if exact is not None:
        row["errL2"], row["errH1"], row["errL2corr"] = error_norms(hoc, exact)
    return row
