"""Lagrangian-Eulerian finite-volume transport for ``u_t + f(u)_x + g(u)_y = 0``.

One step has two stages:

1. *Lagrangian evolution.* Every cell's vertical sides move with the local
   edge speed ``r = f(u)/u`` (``g(u)/u`` for horizontal sides) for a time
   ``dt``. No mass crosses the moving sides, so the cell content is
   conserved on the deformed rectangle of size ``w_x * w_y`` and its new mean
   is ``U * dx * dy / (w_x * w_y)``.
2. *Eulerian projection.* The deformed rectangles are intersected with the
   fixed grid. Under the CFL bound each one overlaps only its 3x3
   neighbourhood, and the overlap of rectangle (i, j) with cell (i+a, j+b)
   is the product of a 1D x-overlap and a 1D y-overlap.

Edge speeds are evaluated per side (``rL`` used by the cell left of/below an
edge, ``rR`` by the cell right of/above it). The default ``"donor"`` face
method lets each cell move its sides with the speed of its own state, which
turns the update into a flux-vector splitting that is monotone for the
built-in models. ``"mean"`` uses the arithmetic mean of the two cells for
both sides (a single-valued edge speed), and ``"muscl"`` / ``"lagrange_p2"``
use reconstructed interface states.

Grids are tensor-product and may be non-uniform (the coupled solver's
control volumes are half-width at the domain boundary). Three ghost layers are
used so that the first ghost layer can act as a full source cell, including
the reconstructed states on its outer face.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import CFLError, ConfigurationError, NumericalFailure, SingularRatioError

logger = logging.getLogger(__name__)

EPS_RATIO = 1e-12
GHOSTS = 3
FACE_METHODS = ("donor", "mean", "muscl", "lagrange_p2")
BC_POLICIES = ("periodic", "dirichlet", "outflow", "reflective")


# ---------------------------------------------------------------- flux models


@dataclass(frozen=True)
class FluxModel:
    """Flux pair ``(f, g)`` with derivatives, all vectorised over arrays."""

    name: str
    f: Callable
    df: Callable
    g: Callable
    dg: Callable
    eps_ratio: float = EPS_RATIO
    params: dict = field(default_factory=dict, compare=False)
    # optional monotone splits u -> (plus, minus) with plus + minus = flux
    f_split: Callable | None = field(default=None, compare=False)
    g_split: Callable | None = field(default=None, compare=False)

    def flux(self, u, axis: int):
        return self.f(u) if axis == 0 else self.g(u)

    def dflux(self, u, axis: int):
        return self.df(u) if axis == 0 else self.dg(u)


def edge_ratio(model: FluxModel, u_face, axis: int = 0, velocity=None):
    """Edge speed ``f(u)/u`` (``g(u)/u`` for ``axis=1``) times an optional velocity.

    For ``|u| <= eps_ratio`` the limit ``f'(0)`` is used, which requires
    ``f(0) = 0``.
    """
    u = np.asarray(u_face, dtype=float)
    fn, dfn = (model.f, model.df) if axis == 0 else (model.g, model.dg)
    small = np.abs(u) <= model.eps_ratio
    if np.any(small):
        f0 = float(np.asarray(fn(np.zeros(1)))[0])
        if f0 != 0.0:
            raise SingularRatioError(f"{model.name}: flux at u=0 is {f0}, ratio f(u)/u is singular")
    safe = np.where(small, 1.0, u)
    r = np.where(small, dfn(np.zeros_like(u)), fn(safe) / safe)
    if velocity is not None:
        r = r * velocity
    return r


def linear_model(ax: float = 1.0, ay: float = 1.0) -> FluxModel:
    return FluxModel(
        "linear",
        lambda u: ax * u,
        lambda u: ax * np.ones_like(u),
        lambda u: ay * u,
        lambda u: ay * np.ones_like(u),
        params={"ax": ax, "ay": ay},
    )


def burgers_model() -> FluxModel:
    return FluxModel("burgers", lambda u: 0.5 * u * u, lambda u: u, lambda u: 0.5 * u * u, lambda u: u)


def fractional_flow(M: float = 1.0):
    """Quadratic-Corey water fractional flow ``S^2 / (S^2 + M (1-S)^2)`` and its derivative."""

    def f(s):
        return s * s / (s * s + M * (1 - s) ** 2)

    def df(s):
        d = s * s + M * (1 - s) ** 2
        return 2 * M * s * (1 - s) / (d * d)

    return f, df


def _printed_flow(M: float, Cg: float):
    # denominator as printed: S^2 + M (1 - Cg (1-S)^2); kept only for comparison
    def f(s):
        return s * s / (s * s + M * (1 - Cg * (1 - s) ** 2))

    def df(s):
        d = s * s + M * (1 - Cg * (1 - s) ** 2)
        dd = 2 * s + 2 * M * Cg * (1 - s)
        return (2 * s * d - s * s * dd) / (d * d)

    return f, df


def buckley_leverett_model(M: float = 1.0, printed_variant: bool = False, Cg: float = 5.0) -> FluxModel:
    """Buckley-Leverett flux in both directions (no gravity)."""
    f, df = _printed_flow(M, Cg) if printed_variant else fractional_flow(M)
    return FluxModel("buckley_leverett", f, df, f, df, params={"M": M, "printed_variant": printed_variant})


def single_minimum_split(fn, lo: float = 0.0, hi: float = 1.0):
    """Engquist-Osher split of a flux that decreases then increases on ``[lo, hi]``.

    ``minus(u) = fn(min(u, u_min))`` and ``plus = fn - minus``, so ``plus`` is
    nondecreasing and ``minus`` nonincreasing.
    """
    from scipy.optimize import minimize_scalar

    grid = np.linspace(lo, hi, 2001)
    k = int(np.argmin(fn(grid)))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    u_min = float(minimize_scalar(fn, bounds=(a, b), method="bounded", options={"xatol": 1e-14}).x) if 0 < k < len(grid) - 1 else float(grid[k])

    def split(u):
        minus = fn(np.minimum(u, u_min))
        return fn(u) - minus, minus

    split.u_min = u_min
    return split


def bl_gravity_model(M: float = 1.0, Cg: float = 5.0, printed_variant: bool = False) -> FluxModel:
    """Buckley-Leverett in x, ``f(S) (1 - Cg (1-S)^2)`` in y."""
    f, df = _printed_flow(M, Cg) if printed_variant else fractional_flow(M)

    def g(s):
        return f(s) * (1 - Cg * (1 - s) ** 2)

    def dg(s):
        return df(s) * (1 - Cg * (1 - s) ** 2) + f(s) * 2 * Cg * (1 - s)

    return FluxModel(
        "bl_gravity", f, df, g, dg,
        params={"M": M, "Cg": Cg, "printed_variant": printed_variant},
        g_split=single_minimum_split(g),
    )


BUILTIN_MODELS = {
    "linear": linear_model,
    "burgers": burgers_model,
    "buckley_leverett": buckley_leverett_model,
    "bl_gravity": bl_gravity_model,
}


# ---------------------------------------------------------------- fields and boundaries


@dataclass(frozen=True, eq=False)
class CellField:
    """Cell averages on a tensor-product grid, indexed ``values[i, j]`` (x first)."""

    values: np.ndarray
    x_edges: np.ndarray
    y_edges: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        xe = np.asarray(self.x_edges, dtype=float)
        ye = np.asarray(self.y_edges, dtype=float)
        if v.shape != (len(xe) - 1, len(ye) - 1):
            raise ConfigurationError(f"field shape {v.shape} does not match edges {len(xe) - 1}x{len(ye) - 1}")
        if np.any(np.diff(xe) <= 0) or np.any(np.diff(ye) <= 0):
            raise ConfigurationError("cell edges must be strictly increasing")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "x_edges", xe)
        object.__setattr__(self, "y_edges", ye)

    @classmethod
    def uniform(cls, values, h: float, origin=(0.0, 0.0), t: float = 0.0):
        v = np.asarray(values, dtype=float)
        nx, ny = v.shape
        return cls(v, origin[0] + h * np.arange(nx + 1), origin[1] + h * np.arange(ny + 1), t)

    @property
    def shape(self):
        return self.values.shape

    @property
    def dx(self):
        return np.diff(self.x_edges)

    @property
    def dy(self):
        return np.diff(self.y_edges)

    @property
    def h(self) -> float:
        return float(min(self.dx.min(), self.dy.min()))

    @property
    def areas(self):
        return np.outer(self.dx, self.dy)

    def centers(self):
        xc = 0.5 * (self.x_edges[1:] + self.x_edges[:-1])
        yc = 0.5 * (self.y_edges[1:] + self.y_edges[:-1])
        return np.meshgrid(xc, yc, indexing="ij")

    def total(self) -> float:
        return float(np.sum(self.values * self.areas))

    def with_values(self, values, t=None):
        return replace(self, values=values, t=self.t if t is None else t)


@dataclass(frozen=True)
class BoundarySpec:
    """Ghost-cell policy per side.

    ``dirichlet`` entries map a side to ``fn(x0, x1, y0, y1, t)`` returning ghost
    cell averages (constants are accepted too).
    """

    left: str = "periodic"
    right: str = "periodic"
    bottom: str = "periodic"
    top: str = "periodic"
    dirichlet: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for side in ("left", "right", "bottom", "top"):
            pol = getattr(self, side)
            if pol not in BC_POLICIES:
                raise ConfigurationError(f"unknown boundary policy {pol!r} on {side}")
            if pol == "dirichlet" and side not in self.dirichlet:
                raise ConfigurationError(f"dirichlet policy on {side} needs a value")
        if (self.left == "periodic") != (self.right == "periodic") or (self.bottom == "periodic") != (
            self.top == "periodic"
        ):
            raise ConfigurationError("periodic boundaries must be paired")

    @classmethod
    def all(cls, policy: str, **kw):
        return cls(policy, policy, policy, policy, **kw)


def _ghost_widths(w, policy_lo, policy_hi):
    if policy_lo == "periodic":
        lo, hi = w[-GHOSTS:], w[:GHOSTS]
    else:
        lo, hi = w[:GHOSTS][::-1], w[-GHOSTS:][::-1]
    return np.concatenate([lo, w, hi])


def _extended_edges(edges, policy_lo, policy_hi):
    w = _ghost_widths(np.diff(edges), policy_lo, policy_hi)
    start = edges[0] - w[:GHOSTS].sum()
    return start + np.concatenate([[0.0], np.cumsum(w)])


def _pad_axis(a, axis, policy, side, width=GHOSTS):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (width, 0) if side == "lo" else (0, width)
    mode = {"periodic": "wrap", "outflow": "edge", "reflective": "symmetric"}.get(policy, "edge")
    return np.pad(a, pad, mode=mode)


def _dirichlet_values(fn, x0, x1, y0, y1, t):
    if callable(fn):
        return np.asarray(fn(x0, x1, y0, y1, t), dtype=float) * np.ones(np.broadcast(x0, y0).shape)
    return np.full(np.broadcast(x0, y0).shape, float(fn))


def fill_ghosts(U: CellField, bc: BoundarySpec):
    """Return the extended array (``GHOSTS`` layers) and its edges."""
    xe = _extended_edges(U.x_edges, bc.left, bc.right)
    ye = _extended_edges(U.y_edges, bc.bottom, bc.top)
    G = GHOSTS
    E = U.values
    if bc.left == "periodic":
        E = np.pad(E, ((G, G), (0, 0)), mode="wrap")
    else:
        E = _pad_axis(E, 0, bc.left, "lo")
        E = _pad_axis(E, 0, bc.right, "hi")
    if bc.bottom == "periodic":
        E = np.pad(E, ((0, 0), (G, G)), mode="wrap")
    else:
        E = _pad_axis(E, 1, bc.bottom, "lo")
        E = _pad_axis(E, 1, bc.top, "hi")
    E = E.copy()
    X0, Y0 = np.meshgrid(xe[:-1], ye[:-1], indexing="ij")
    X1, Y1 = np.meshgrid(xe[1:], ye[1:], indexing="ij")
    sl = {
        "left": (slice(0, G), slice(None)),
        "right": (slice(-G, None), slice(None)),
        "bottom": (slice(None), slice(0, G)),
        "top": (slice(None), slice(-G, None)),
    }
    for side in ("left", "right", "bottom", "top"):
        if getattr(bc, side) == "dirichlet":
            s = sl[side]
            E[s] = _dirichlet_values(bc.dirichlet[side], X0[s], X1[s], Y0[s], Y1[s], U.t)
    return E, xe, ye


def _extend_velocity(v, axis, bc: BoundarySpec):
    """Pad face velocities of the physical grid onto the extended face grid."""
    lo, hi = (bc.left, bc.right) if axis == 0 else (bc.bottom, bc.top)
    olo, ohi = (bc.bottom, bc.top) if axis == 0 else (bc.left, bc.right)
    # along the normal axis: GHOSTS-1 extra faces each side; along the other: GHOSTS cells
    k = GHOSTS - 1
    if lo == "periodic":
        # faces 0 and n coincide; wrap the interior faces
        inner = np.take(v, range(0, v.shape[axis] - 1), axis=axis)
        n = inner.shape[axis]
        v = np.concatenate(
            [np.take(inner, range(n - k, n), axis=axis), inner, np.take(inner, range(0, k + 1), axis=axis)],
            axis=axis,
        )
    else:
        v = _pad_axis(v, axis, "outflow", "lo", k)
        v = _pad_axis(v, axis, "outflow", "hi", k)
    other = 1 - axis
    mode = "wrap" if olo == "periodic" else "edge"
    pad = [(0, 0), (0, 0)]
    pad[other] = (GHOSTS, GHOSTS)
    return np.pad(v, pad, mode=mode)


# ---------------------------------------------------------------- face states


def minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def van_leer(a, b):
    return np.where(a * b > 0, 2 * a * b / np.where(a + b == 0, 1.0, a + b), 0.0)


def monotonized_central(a, b):
    c = 0.5 * (a + b)
    return np.where(a * b > 0, np.sign(c) * np.minimum(np.abs(c), 2 * np.minimum(np.abs(a), np.abs(b))), 0.0)


def superbee(a, b):
    s = np.sign(a)
    m1 = minmod(a, 2 * b)
    m2 = minmod(2 * a, b)
    return np.where(a * b > 0, s * np.maximum(np.abs(m1), np.abs(m2)), 0.0)


LIMITERS = {"minmod": minmod, "van_leer": van_leer, "mc": monotonized_central, "superbee": superbee}


def _faces_1d(E, method, limiter):
    """Left/right interface states along axis 0 for faces between E[k] and E[k+1]."""
    a, b = E[:-1], E[1:]
    if method == "donor":
        return a, b
    if method == "mean":
        m = 0.5 * (a + b)
        return m, m
    if method == "muscl":
        lim = LIMITERS.get(limiter)
        if lim is None:
            raise ConfigurationError(f"unknown limiter {limiter!r}; choose from {sorted(LIMITERS)}")
        s = np.zeros_like(E)
        s[1:-1] = lim(E[1:-1] - E[:-2], E[2:] - E[1:-1])
        # average of the two linear reconstructions over [x_k, x_{k+1}]
        m = 0.5 * (a + b) + 0.125 * (s[:-1] - s[1:])
        return m, m
    if method == "lagrange_p2":
        right = 0.375 * a + 0.75 * b  # quadratic centred on the right cell, at its left face
        left = 0.375 * b + 0.75 * a
        right[:-1] -= 0.125 * E[2:]
        left[1:] -= 0.125 * E[:-2]
        m = 0.5 * (left + right)
        # one-sided quadratics at the outermost faces
        m[0] = right[0]
        m[-1] = left[-1]
        return m, m
    raise ConfigurationError(f"unknown face method {method!r}; choose from {FACE_METHODS}")


def face_states(U, method: str = "donor", limiter: str = "minmod", axis: int = 0):
    """Interface states between consecutive cells along ``axis``.

    ``U`` is an array that already contains its ghost cells (or a
    :class:`CellField`, in which case only interior faces are returned).
    Returns the pair ``(u_left_side, u_right_side)``; the two coincide for all
    single-valued methods.
    """
    arr = U.values if isinstance(U, CellField) else np.asarray(U, dtype=float)
    if axis == 1:
        l, r = _faces_1d(np.swapaxes(arr, 0, 1), method, limiter)
        return np.swapaxes(l, 0, 1), np.swapaxes(r, 0, 1)
    return _faces_1d(arr, method, limiter)


# ---------------------------------------------------------------- the step


@dataclass
class StepReport:
    """Boundary mass transfer of one step (mass units, not rates)."""

    inflow: float = 0.0
    outflow: float = 0.0


@dataclass(frozen=True, eq=False)
class ProjectionWeights:
    """1D overlap triples of every source cell (interior plus first ghost ring).

    ``X[k]`` with ``k = 0, 1, 2`` is the overlap with the left neighbour,
    itself and the right neighbour; ``Y`` likewise in y. ``C`` is their outer
    product ``C[a, b] = X[a] * Y[b]``.
    """

    X: np.ndarray
    Y: np.ndarray
    wx: np.ndarray
    wy: np.ndarray

    @property
    def C(self):
        return self.X[:, None] * self.Y[None, :]


def _velocity_arrays(velocity, U: CellField, bc: BoundarySpec):
    nx, ny = U.shape
    if velocity is None:
        return None, None
    vx, vy = velocity
    vx = np.broadcast_to(np.asarray(vx, dtype=float), (nx + 1, ny))
    vy = np.broadcast_to(np.asarray(vy, dtype=float), (nx, ny + 1))
    return _extend_velocity(vx, 0, bc), _extend_velocity(vy, 1, bc)


def _edge_speeds(E, model, method, limiter, bc, vxe, vye):
    """Per-side edge speeds on the extended grid plus the CFL speed bound."""
    uxl, uxr = face_states(E, method, limiter, axis=0)
    uyl, uyr = face_states(E, method, limiter, axis=1)
    rxl = edge_ratio(model, uxl, 0, vxe)
    rxr = edge_ratio(model, uxr, 0, vxe)
    ryl = edge_ratio(model, uyl, 1, vye)
    ryr = edge_ratio(model, uyr, 1, vye)
    if method == "donor":
        # cells whose split has both parts open up: upper side carries plus, lower side minus
        for split, uL, uR, rl, rr, v in ((model.f_split, uxl, uxr, rxl, rxr, vxe),
                                         (model.g_split, uyl, uyr, ryl, ryr, vye)):
            if split is None:
                continue
            _split_speeds(split, uL, rl, v, upper=True)
            _split_speeds(split, uR, rr, v, upper=False)
    G = GHOSTS
    nx, ny = E.shape[0] - 2 * G, E.shape[1] - 2 * G
    # solid walls: nothing crosses the physical boundary face
    if bc.left == "reflective":
        rxl[G - 1] = rxr[G - 1] = 0.0
    if bc.right == "reflective":
        rxl[G - 1 + nx] = rxr[G - 1 + nx] = 0.0
    if bc.bottom == "reflective":
        ryl[:, G - 1] = ryr[:, G - 1] = 0.0
    if bc.top == "reflective":
        ryl[:, G - 1 + ny] = ryr[:, G - 1 + ny] = 0.0
    return rxl, rxr, ryl, ryr


def _split_speeds(split, u, r, v, upper):
    plus, minus = split(u)
    mixed = (np.abs(u) > EPS_RATIO) & (plus != 0) & (minus != 0)
    if not mixed.any():
        return
    part = plus if upper else minus
    spd = part[mixed] / u[mixed]
    r[mixed] = spd * v[mixed] if v is not None else spd


def _speed_bound(E, model, rxl, rxr, ryl, ryr, vxe, vye):
    G = GHOSTS
    core = (slice(G - 1, -G + 1), slice(G - 1, -G + 1))
    Ec = E[core]
    sx = np.abs(model.df(Ec))
    sy = np.abs(model.dg(Ec))
    if vxe is not None:
        # cell e has faces e-1 and e; entry k of the pairwise maxima belongs to cell k+1
        nx, ny = Ec.shape
        vx_cell = np.maximum(np.abs(vxe[:-1]), np.abs(vxe[1:]))[G - 2 : G - 2 + nx, G - 1 : G - 1 + ny]
        vy_cell = np.maximum(np.abs(vye[:, :-1]), np.abs(vye[:, 1:]))[G - 1 : G - 1 + nx, G - 2 : G - 2 + ny]
        sx, sy = sx * vx_cell, sy * vy_cell
    m = max(sx.max(initial=0.0), sy.max(initial=0.0))
    # opening cells are widened by 1 / (1 - dt (plus - minus) / (u d)); doubling
    # the bound keeps that factor below 4/3 for theta < 1
    for split, v in ((model.f_split, vxe), (model.g_split, vye)):
        if split is None:
            continue
        plus, minus = split(Ec)
        mixed = (np.abs(Ec) > EPS_RATIO) & (plus != 0) & (minus != 0)
        if mixed.any():
            vmax = 1.0 if v is None else float(np.abs(v).max())
            m = max(m, float(np.max(2 * (plus[mixed] - minus[mixed]) / np.abs(Ec[mixed]))) * vmax)
    xs = (slice(G - 2, -G + 1), slice(G - 1, -G + 1))
    ys = (slice(G - 1, -G + 1), slice(G - 2, -G + 1))
    for r in (rxl[xs], rxr[xs]):
        m = max(m, np.abs(r).max(initial=0.0))
    for r in (ryl[ys], ryr[ys]):
        m = max(m, np.abs(r).max(initial=0.0))
    return float(m)


def cfl_dt(
    U: CellField,
    model: FluxModel,
    theta: float,
    t_remaining: float,
    bc: BoundarySpec | None = None,
    method: str = "donor",
    limiter: str = "minmod",
    velocity=None,
) -> float:
    """Largest admissible step ``min(theta * (h/2) / M, t_remaining)``.

    ``M`` bounds the flux derivatives and edge speeds over the stencil and
    ``h`` is the smallest cell width.
    """
    if not 0 < theta < 1:
        raise ConfigurationError(f"CFL number must lie in (0, 1), got {theta}")
    bc = bc or BoundarySpec.all("outflow")
    E, _, _ = fill_ghosts(U, bc)
    vxe, vye = _velocity_arrays(velocity, U, bc)
    rs = _edge_speeds(E, model, method, limiter, bc, vxe, vye)
    M = _speed_bound(E, model, *rs, vxe, vye)
    if M == 0.0:
        return float(t_remaining)
    return float(min(theta * 0.5 * U.h / M, t_remaining))


def _triples(d, a_lo, a_hi):
    """Overlap lengths with (lower neighbour, self, upper neighbour)."""
    lo = np.maximum(0.0, -a_lo)
    hi = np.maximum(0.0, a_hi)
    mid = d - np.maximum(0.0, a_lo) - np.maximum(0.0, -a_hi)
    return lo, mid, hi


def _open_cells(a_lo, a_hi, d):
    opening = (a_hi > 0) & (a_lo < 0)
    if not opening.any():
        return a_lo, a_hi
    rel = (a_hi - a_lo) / d
    grow = np.ones_like(rel)
    grow[opening] = 1.0 / (1.0 - rel[opening])
    if np.any(grow <= 0):
        raise CFLError("opening cell would invert; reduce the time step")
    return a_lo * grow, a_hi * grow


def _transfers(U, model, dt, bc, method, limiter, velocity, check=True):
    """Mass moved from every source cell to each of its 3x3 neighbours.

    Returns ``T`` of shape ``(3, 3, nx+2, ny+2)`` on the grid of interior cells
    plus the first ghost ring; ``T[a+1, b+1, i, j]`` is the mass sent from
    source ``(i, j)`` to ``(i+a, j+b)``.
    """
    E, xe, ye = fill_ghosts(U, bc)
    vxe, vye = _velocity_arrays(velocity, U, bc)
    rxl, rxr, ryl, ryr = _edge_speeds(E, model, method, limiter, bc, vxe, vye)
    G = GHOSTS
    S = E[G - 1 : -G + 1, G - 1 : -G + 1]
    dx = np.diff(xe)[G - 1 : -G + 1][:, None]
    dy = np.diff(ye)[G - 1 : -G + 1][None, :]
    rows = slice(G - 1, -G + 1)
    ax_lo = dt * rxr[G - 2 : -G + 1][:, rows]  # left side of each source moves with rR of its left face
    ax_hi = dt * rxl[G - 1 :][:, rows][: S.shape[0]]
    ay_lo = dt * ryr[rows][:, G - 2 : -G + 1]
    ay_hi = dt * ryl[rows][:, G - 1 :][:, : S.shape[1]]
    if method == "donor":
        # opening cells: widen so the swept strips carry exactly dt * plus and dt * minus
        if model.f_split is not None:
            ax_lo, ax_hi = _open_cells(ax_lo, ax_hi, dx)
        if model.g_split is not None:
            ay_lo, ay_hi = _open_cells(ay_lo, ay_hi, dy)
    if check:
        lim = 0.5 * min(dx.min(), dy.min()) * (1 + 1e-12)
        amax = max(np.abs(ax_lo).max(), np.abs(ax_hi).max(), np.abs(ay_lo).max(), np.abs(ay_hi).max())
        if amax > lim:
            raise CFLError(f"edge displacement {amax:.3e} exceeds half the smallest cell {lim:.3e}")
    wx = dx + ax_hi - ax_lo
    wy = dy + ay_hi - ay_lo
    X = _triples(dx, ax_lo, ax_hi)
    Y = _triples(dy, ay_lo, ay_hi)
    Ubar = S * dx * dy / (wx * wy)
    T = np.empty((3, 3) + S.shape)
    for a in range(3):
        for b in range(3):
            T[a, b] = X[a] * Y[b] * Ubar
    return T, S, dx, dy, (X, Y, wx, wy)


def projection_weights(U: CellField, model: FluxModel, dt: float, bc: BoundarySpec | None = None,
                       method: str = "donor", limiter: str = "minmod", velocity=None):
    """Overlap weights of the interior source cells (for inspection and tests)."""
    bc = bc or BoundarySpec.all("outflow")
    _, _, _, _, (X, Y, wx, wy) = _transfers(U, model, dt, bc, method, limiter, velocity)
    inner = (slice(1, -1), slice(1, -1))
    return ProjectionWeights(
        np.stack([np.broadcast_to(x, wx.shape)[inner] for x in X]),
        np.stack([np.broadcast_to(y, wy.shape)[inner] for y in Y]),
        np.broadcast_to(wx, X[1].shape)[inner],
        np.broadcast_to(wy, Y[1].shape)[inner],
    )


def _gather(T, nx, ny):
    """Sum transfers into the interior destinations."""
    out = np.zeros((nx, ny))
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            out += T[a + 1, b + 1, 1 - a : 1 - a + nx, 1 - b : 1 - b + ny]
    return out


def le_step(
    U: CellField,
    model: FluxModel,
    dt: float,
    bc: BoundarySpec | None = None,
    method: str = "donor",
    limiter: str = "minmod",
    velocity=None,
    report: StepReport | None = None,
) -> CellField:
    """Advance ``U`` by one Lagrangian-Eulerian step of length ``dt``.

    Args:
        velocity: optional pair ``(vx, vy)`` of face multipliers, shapes
            ``(nx+1, ny)`` and ``(nx, ny+1)``; edge speeds become ``v f(u)/u``.
        report: if given, receives the mass that entered and left through the
            boundary during the step.

    Raises:
        CFLError: an edge moves by more than half a cell.
        NumericalFailure: a non-finite value appears.
    """
    bc = bc or BoundarySpec.all("outflow")
    nx, ny = U.shape
    T, S, dx, dy, _ = _transfers(U, model, dt, bc, method, limiter, velocity)
    new = _gather(T, nx, ny) / (dx[1:-1] * dy[:, 1:-1])
    bad = ~np.isfinite(new)
    if bad.any():
        idx = tuple(int(k) for k in np.argwhere(bad)[0])
        raise NumericalFailure(f"non-finite value at cell {idx} after step t={U.t}", idx)
    if report is not None:
        ghost = np.ones(S.shape, dtype=bool)
        ghost[1:-1, 1:-1] = False
        report.inflow = float(_gather(T * ghost, nx, ny).sum())
        from_inner = _gather(T * ~ghost, nx, ny).sum()
        report.outflow = float(np.sum(U.values * U.areas) - from_inner)
    return U.with_values(new, U.t + dt)


def flux_form(
    U: CellField,
    model: FluxModel,
    dt: float,
    bc: BoundarySpec | None = None,
    method: str = "donor",
    limiter: str = "minmod",
    velocity=None,
):
    """Numerical edge fluxes reproducing :func:`le_step` in conservation form.

    Transfers between face neighbours are attributed to the shared face;
    diagonal transfers are split evenly between their two face-to-face routes
    (x then y, and y then x). Fluxes are per unit edge length and time, so::

        U_new = U - dt/dx (F[1:] - F[:-1]) - dt/dy (G[:, 1:] - G[:, :-1])

    Returns:
        ``F`` of shape ``(nx+1, ny)`` and ``G`` of shape ``(nx, ny+1)``.
    """
    bc = bc or BoundarySpec.all("outflow")
    nx, ny = U.shape
    T, S, dx, dy, _ = _transfers(U, model, dt, bc, method, limiter, velocity)
    # x-faces between source-grid columns c and c+1, c = 0..nx, rows 1..ny
    c0, c1 = slice(0, nx + 1), slice(1, nx + 2)
    r = slice(1, ny + 1)
    net = T[2, 1, c0, r] - T[0, 1, c1, r]
    for b in (-1, 1):
        rb = slice(1 - b, ny + 1 - b)
        net = net + 0.5 * (T[2, b + 1, c0, r] + T[2, b + 1, c0, rb])
        net = net - 0.5 * (T[0, b + 1, c1, r] + T[0, b + 1, c1, rb])
    F = net / (dt * dy[:, 1:-1]) if dt > 0 else np.zeros_like(net)
    c = slice(1, nx + 1)
    d0, d1 = slice(0, ny + 1), slice(1, ny + 2)
    net = T[1, 2, c, d0] - T[1, 0, c, d1]
    for a in (-1, 1):
        ca = slice(1 - a, nx + 1 - a)
        net = net + 0.5 * (T[a + 1, 2, c, d0] + T[a + 1, 2, ca, d0])
        net = net - 0.5 * (T[a + 1, 0, c, d1] + T[a + 1, 0, ca, d1])
    Gf = net / (dt * dx[1:-1]) if dt > 0 else np.zeros_like(net)
    return F, Gf


def flux_form_update(U: CellField, F, G, dt: float):
    dx = U.dx[:, None]
    dy = U.dy[None, :]
    return U.values - dt / dx * (F[1:] - F[:-1]) - dt / dy * (G[:, 1:] - G[:, :-1])


# ---------------------------------------------------------------- time loop


@dataclass
class RunResult:
    """Final field, snapshots at requested times and accumulated boundary mass."""

    field: CellField
    frames: list
    steps: int
    inflow: float
    outflow: float
    history: list = field(default_factory=list)


def advance(
    U: CellField,
    model: FluxModel,
    t_end: float,
    theta: float,
    bc: BoundarySpec | None = None,
    method: str = "donor",
    limiter: str = "minmod",
    velocity=None,
    frame_times=(),
    on_step: Callable | None = None,
    max_steps: int = 10_000_000,
) -> RunResult:
    """March with :func:`cfl_dt` and :func:`le_step` until ``t_end``.

    The step sequence is clipped so that every frame time and ``t_end`` are hit
    exactly; ``on_step(field, report)`` is called after each step.
    """
    bc = bc or BoundarySpec.all("outflow")
    stops = sorted({float(t) for t in frame_times if U.t < t <= t_end} | {float(t_end)})
    frames = []
    inflow = outflow = 0.0
    steps = 0
    for stop in stops:
        while U.t < stop and not np.isclose(U.t, stop, rtol=0, atol=1e-13 * max(1.0, abs(stop))):
            dt = cfl_dt(U, model, theta, stop - U.t, bc, method, limiter, velocity)
            rep = StepReport()
            U = le_step(U, model, dt, bc, method, limiter, velocity, rep)
            if stop - U.t < 1e-13 * max(1.0, abs(stop)):
                U = U.with_values(U.values, stop)
            inflow += rep.inflow
            outflow += rep.outflow
            steps += 1
            if on_step is not None:
                on_step(U, rep)
            if steps > max_steps:
                raise CFLError(f"exceeded {max_steps} steps before t={stop}")
        if stop in frame_times or any(np.isclose(stop, t) for t in frame_times):
            frames.append(U)
    return RunResult(U, frames, steps, inflow, outflow)


# ---------------------------------------------------------------- exact solutions


def sine_cell_averages(x0, x1, y0, y1, t):
    """Exact cell averages of ``sin(pi (x + y - 2 t))``."""
    c = -2 * np.pi * t
    s = lambda x, y: np.sin(np.pi * (x + y) + c)  # noqa: E731
    num = s(x1, y1) - s(x1, y0) - s(x0, y1) + s(x0, y0)
    return -num / (np.pi**2 * (x1 - x0) * (y1 - y0))


def welge_front(M: float = 1.0, s0: float = 0.0):
    """Shock saturation and shock speed (per unit total velocity) of 1D Buckley-Leverett.

    The shock state ``s*`` solves ``f'(s) (s - s0) = f(s) - f(s0)`` on ``(s0, 1]``.
    """
    from scipy.optimize import brentq

    f, df = fractional_flow(M)
    h = lambda s: df(s) * (s - s0) - (f(s) - f(s0))  # noqa: E731
    grid = np.linspace(s0, 1.0, 2001)[1:]
    vals = h(grid)
    k = np.flatnonzero(vals[:-1] * vals[1:] <= 0)
    if not len(k):
        return 1.0, float((f(1.0) - f(s0)) / (1.0 - s0))
    ss = brentq(h, grid[k[-1]], grid[k[-1] + 1], xtol=1e-15)
    return float(ss), float(df(ss))


def welge_solution(x, t, q: float = 1.0, M: float = 1.0, s0: float = 0.0, porosity: float = 1.0):
    """Similarity solution of ``phi S_t + q f(S)_x = 0`` with ``S(0, t) = 1``."""
    from scipy.optimize import brentq

    f, df = fractional_flow(M)
    ss, speed = welge_front(M, s0)
    x = np.asarray(x, dtype=float)
    if t <= 0:
        return np.where(x <= 0, 1.0, s0)
    xi = x * porosity / (q * t)
    out = np.full(x.shape, s0)
    d1 = df(1.0)
    rare = (xi <= speed) & (xi >= 0)
    for k in np.flatnonzero(rare.ravel()):
        v = xi.flat[k]
        if v <= d1:
            out.flat[k] = 1.0
        else:
            out.flat[k] = brentq(lambda s: df(s) - v, ss, 1.0, xtol=1e-15)
    out[x < 0] = 1.0
    return out


def welge_cell_averages(x_edges, t, q=1.0, M=1.0, s0=0.0, porosity=1.0, sub=64):
    """Cell averages of :func:`welge_solution` by midpoint sampling."""
    x_edges = np.asarray(x_edges, dtype=float)
    frac = (np.arange(sub) + 0.5) / sub
    pts = x_edges[:-1, None] + np.diff(x_edges)[:, None] * frac[None, :]
    return welge_solution(pts, t, q, M, s0, porosity).mean(axis=1)


# ---------------------------------------------------------------- test problems


@dataclass
class ProblemSetup:
    """Initial field, flux, boundary policy, end time and optional exact solution."""

    name: str
    field: CellField
    model: FluxModel
    bc: BoundarySpec
    t_end: float
    exact: Callable | None = None  # exact(field_at_t) -> cell averages
    velocity: tuple | None = None
    frame_times: tuple = ()


def _uniform_edges(n, lo, hi):
    return np.linspace(lo, hi, n + 1)


def _disc_fraction(xe, ye, r2, sub=8):
    frac = (np.arange(sub) + 0.5) / sub
    xs = (xe[:-1, None] + np.diff(xe)[:, None] * frac).ravel()
    ys = (ye[:-1, None] + np.diff(ye)[:, None] * frac).ravel()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = (X**2 + Y**2 < r2).astype(float)
    return inside.reshape(len(xe) - 1, sub, len(ye) - 1, sub).mean(axis=(1, 3))


def setup_problem(problem: str, n: int, t_end: float | None = None, **kw) -> ProblemSetup:
    """Build one of the named test problems on an ``n x n``-type grid."""
    if problem == "linear_advection":
        xe = ye = _uniform_edges(n, 0.0, 1.0)
        X0, Y0 = np.meshgrid(xe[:-1], ye[:-1], indexing="ij")
        X1, Y1 = np.meshgrid(xe[1:], ye[1:], indexing="ij")
        U = CellField(sine_cell_averages(X0, X1, Y0, Y1, 0.0), xe, ye)
        bc = BoundarySpec(
            "dirichlet", "outflow", "dirichlet", "outflow",
            dirichlet={"left": sine_cell_averages, "bottom": sine_cell_averages},
        )

        def exact(F):
            return sine_cell_averages(X0, X1, Y0, Y1, F.t)

        return ProblemSetup(problem, U, linear_model(), bc, 1.0 if t_end is None else t_end, exact)
    if problem == "burgers_oblique":
        xe = ye = _uniform_edges(n, 0.0, 1.0)
        X, Y = CellField(np.zeros((n, n)), xe, ye).centers()
        u = np.where(X > 0.5, np.where(Y > 0.5, -1.0, 0.8), np.where(Y > 0.5, -0.2, 0.5))
        return ProblemSetup(problem, CellField(u, xe, ye), burgers_model(), BoundarySpec.all("outflow"),
                            1.0 / 12.0 if t_end is None else t_end)
    if problem == "bl_gravity":
        xe = ye = _uniform_edges(n, -1.5, 1.5)
        u = _disc_fraction(xe, ye, 0.5)
        model = bl_gravity_model(kw.get("M", 1.0), kw.get("Cg", 5.0), kw.get("printed_variant", False))
        return ProblemSetup(problem, CellField(u, xe, ye), model, BoundarySpec.all("reflective"),
                            0.5 if t_end is None else t_end)
    if problem == "bl_radial_verification":
        # planar flood, uniform velocity in x, invariant in y
        Lx, Ly = kw.get("Lx", 256.0), kw.get("Ly", 64.0)
        q, M = kw.get("q", 0.75), kw.get("M", 1.0)
        ny = max(2, int(round(n * Ly / Lx)))
        xe, ye = _uniform_edges(n, 0.0, Lx), _uniform_edges(ny, 0.0, Ly)
        U = CellField(np.zeros((n, ny)), xe, ye)
        bc = BoundarySpec("dirichlet", "outflow", "reflective", "reflective", dirichlet={"left": 1.0})
        velocity = (np.full((n + 1, ny), q), np.zeros((n, ny + 1)))

        def exact(F):
            return np.repeat(welge_cell_averages(xe, F.t, q, M)[:, None], ny, axis=1)

        return ProblemSetup(problem, U, buckley_leverett_model(M), bc, 220.0 if t_end is None else t_end,
                            exact, velocity, kw.get("frame_times", (10.0, 110.0, 220.0)))
    raise ConfigurationError(
        f"unknown problem {problem!r}; choose from linear_advection, burgers_oblique, bl_gravity, "
        "bl_radial_verification"
    )


def error_norms(U: CellField, exact_values):
    """Discrete l1, l2 (area weighted) and max-norm errors."""
    e = U.values - exact_values
    a = U.areas
    return float(np.sum(np.abs(e) * a)), float(np.sqrt(np.sum(e * e * a))), float(np.abs(e).max())


def run_problem(problem: str, n: int, theta: float = 0.67, t_end: float | None = None,
                method: str = "donor", limiter: str = "minmod", frame_times=None, **kw):
    """Run a named problem; returns ``(RunResult, errors or None, setup)``."""
    s = setup_problem(problem, n, t_end, **kw)
    frames = s.frame_times if frame_times is None else frame_times
    res = advance(s.field, s.model, s.t_end, theta, s.bc, method, limiter, s.velocity, frames)
    errs = error_norms(res.field, s.exact(res.field)) if s.exact else None
    return res, errs, s


def fit_power_law(h, err):
    """Least-squares fit ``err ~ C h^p``; returns ``(C, p)``."""
    p, logc = np.polyfit(np.log(h), np.log(err), 1)
    return float(np.exp(logc)), float(p)


def convergence_table(problem: str, grids, theta: float = 0.67, method: str = "donor", **kw):
    """Errors, per-refinement orders and least-squares fits over a grid ladder.

    Returns:
        (rows, fits): ``rows`` are dicts with keys Cells, h, err_l1, order_l1,
        err_l2, order_l2, err_linf, order_linf; ``fits`` maps each norm to
        ``(C, p)``.
    """
    grids = list(grids)
    if len(grids) < 2:
        raise ConfigurationError("convergence_table needs at least two grids")
    rows = []
    for n in grids:
        res, errs, s = run_problem(problem, n, theta, method=method, frame_times=(), **kw)
        if errs is None:
            raise ConfigurationError(f"problem {problem!r} has no exact solution")
        rows.append({"Cells": f"{n}x{n}", "h": s.field.h, "err_l1": errs[0], "err_l2": errs[1], "err_linf": errs[2]})
    for k, row in enumerate(rows):
        for norm in ("l1", "l2", "linf"):
            if k == 0:
                row[f"order_{norm}"] = float("nan")
            else:
                prev = rows[k - 1]
                row[f"order_{norm}"] = float(
                    np.log(prev[f"err_{norm}"] / row[f"err_{norm}"]) / np.log(prev["h"] / row["h"])
                )
    hs = np.array([r["h"] for r in rows])
    fits = {norm: fit_power_law(hs, np.array([r[f"err_{norm}"] for r in rows])) for norm in ("l1", "l2", "linf")}
    return rows, fits


def restrict(field_fine: CellField, x_edges, y_edges):
    """Conservative (area-weighted) restriction onto another tensor grid."""

    def overlap(fine, coarse):
        lo = np.maximum(fine[:-1][None, :], coarse[:-1][:, None])
        hi = np.minimum(fine[1:][None, :], coarse[1:][:, None])
        return np.maximum(hi - lo, 0.0)

    Ox = overlap(field_fine.x_edges, np.asarray(x_edges, dtype=float))
    Oy = overlap(field_fine.y_edges, np.asarray(y_edges, dtype=float))
    mass = Ox @ field_fine.values @ Oy.T
    area = np.outer(Ox.sum(axis=1), Oy.sum(axis=1))
    return mass / np.where(area > 0, area, 1.0)
