"""Sequential pressure/saturation solver for a left-to-right waterflood.

Pressure is solved with the locally conservative Q^r method on the primal
mesh; saturation lives on the dual control volumes, so the recovered CV-edge
fluxes are exactly the fluxes the transport step needs. Boundary conditions:
prescribed inflow rate on ``x = 0``, ``p = 0`` on ``x = Lx`` and no flow on
``y = 0`` and ``y = Ly``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .elliptic import MobilityField, PressureSolution, SaddleSystem, build_saddle_system, recover_cv_fluxes
from .elliptic import solve_saddle
from .errors import ConfigurationError, StateError
from .grid import FESpace, PrimalMesh, QrBasis, build_dual_mesh, build_primal_mesh, gauss_rule
from .hyperbolic import BoundarySpec, CellField, FluxModel, StepReport, advance, fractional_flow

logger = logging.getLogger(__name__)

DEFAULT_FRAMES = (24.0, 48.0, 73.0, 97.0, 122.0, 146.0, 171.0, 195.0, 220.0)
MEDIA = ("homogeneous", "barrier", "raster")
BOUND_TOL = 1e-9


# ---------------------------------------------------------------- configuration


@dataclass
class SimulationConfig:
    """Physical and numerical parameters of one coupled run.

    ``barrier`` is the low-permeability rectangle as fractions of the domain,
    ``(x0, x1, y0, y1)``; ``raster`` is a permeability array (x first) that is
    block-resampled to the mesh when ``medium == "raster"``.
    """

    Lx: float = 256.0
    Ly: float = 64.0
    h: float = 1.0
    q: float = 0.75
    mu_w: float = 1.0
    mu_o: float = 1.0
    degree: int = 1
    theta: float = 0.67
    t_end: float = 220.0
    frame_times: tuple = DEFAULT_FRAMES
    pressure_updates_per_frame: int = 1
    s0: float = 0.0
    medium: str = "homogeneous"
    barrier: tuple = (0.4, 0.6, 0.375, 0.625)
    contrast: float = 1e4
    raster: np.ndarray | None = field(default=None, repr=False)
    face_method: str = "donor"
    solver: str = "direct"
    solver_tol: float = 1e-12

    def __post_init__(self):
        for name in ("Lx", "Ly", "h", "mu_w", "mu_o", "theta", "t_end", "contrast"):
            if not float(getattr(self, name)) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.q < 0:
            raise ConfigurationError(f"q must be nonnegative, got {self.q}")
        for name, L in (("Lx", self.Lx), ("Ly", self.Ly)):
            n = L / self.h
            if abs(n - round(n)) > 1e-9 * n or round(n) < 2:
                raise ConfigurationError(f"h = {self.h} must divide {name} = {L} into at least 2 cells")
        if not 0 <= self.s0 <= 1:
            raise ConfigurationError(f"s0 must lie in [0, 1], got {self.s0}")
        if self.medium not in MEDIA:
            raise ConfigurationError(f"medium must be one of {MEDIA}, got {self.medium!r}")
        if self.medium == "raster" and self.raster is None:
            raise ConfigurationError("medium 'raster' needs a raster array")
        if int(self.pressure_updates_per_frame) < 1:
            raise ConfigurationError("pressure_updates_per_frame must be at least 1")
        self.frame_times = tuple(float(t) for t in self.frame_times if 0 < t <= self.t_end)

    @property
    def M(self) -> float:
        """Viscosity ratio ``mu_w / mu_o``."""
        return self.mu_w / self.mu_o

    @property
    def nx(self) -> int:
        return int(round(self.Lx / self.h))

    @property
    def ny(self) -> int:
        return int(round(self.Ly / self.h))

    def as_dict(self):
        d = asdict(self)
        d["raster"] = None if self.raster is None else list(np.shape(self.raster))
        d["frame_times"] = list(self.frame_times)
        d["barrier"] = list(self.barrier)
        return d


# ---------------------------------------------------------------- constitutive laws


def total_mobility(S, M: float = 1.0, mu_o: float = 1.0):
    """``S^2/mu_w + (1-S)^2/mu_o`` with ``mu_w = M mu_o``."""
    S = np.asarray(S, dtype=float)
    if np.any(S < -1e-12) or np.any(S > 1 + 1e-12):
        bad = np.flatnonzero((S.ravel() < -1e-12) | (S.ravel() > 1 + 1e-12))
        raise StateError(f"saturation outside [0, 1] at {len(bad)} point(s), first index {int(bad[0])}")
    S = np.clip(S, 0.0, 1.0)
    return S * S / (M * mu_o) + (1 - S) ** 2 / mu_o


def water_model(M: float = 1.0) -> FluxModel:
    """Fractional flow in both directions; the face velocity supplies direction and size."""
    f, df = fractional_flow(M)
    return FluxModel("fractional_flow", f, df, f, df, params={"M": M})


# ---------------------------------------------------------------- pressure system


def slab_system(mesh: PrimalMesh, degree: int, mobility: MobilityField, q: float) -> SaddleSystem:
    """Saddle system with ``p = 0`` on the right side and inflow ``q`` on the left."""
    space = FESpace(mesh, QrBasis(degree), ("right",))
    dual = build_dual_mesh(mesh, ("right",))
    return apply_slab_bcs(build_saddle_system(space, dual, mobility), q)


def apply_slab_bcs(system: SaddleSystem, q: float) -> SaddleSystem:
    """Add the inlet flux ``-Lam grad p . n = -q`` on ``x = 0`` to ``f`` and ``g``.

    The right-side Dirichlet condition is already eliminated by the space;
    top and bottom are natural no-flow sides. Returns a new system.
    """
    space, dual = system.space, system.dual
    mesh, basis = space.mesh, space.basis
    if "left" in dual.dirichlet:
        raise ConfigurationError("the inlet side must not be a Dirichlet side")
    f_full = np.zeros(space.n_dofs)
    g_in = np.zeros(dual.n_cv)
    if q != 0.0:
        t, w = gauss_rule(basis.r + 2)
        val, _ = basis.eval(np.zeros_like(t), t)
        e = mesh.element_index(np.zeros(mesh.ny, dtype=int), np.arange(mesh.ny))
        np.add.at(f_full, space.elem_dofs[e], np.broadcast_to(q * mesh.hy * (w @ val), (mesh.ny, basis.n_local)))
        on_inlet = dual.cv_ij[:, 0] == 0
        b = dual.cv_bounds[on_inlet]
        g_in[on_inlet] = q * (b[:, 3] - b[:, 2])
    g_prev = system.g_boundary if system.g_boundary is not None else np.zeros(dual.n_cv)
    return replace(
        system,
        f=system.f + f_full[space.free_dofs],
        g=system.g + g_in,
        g_boundary=g_prev + g_in,
    )


# ---------------------------------------------------------------- transport grid


@dataclass(frozen=True, eq=False)
class TransportGrid:
    """Cells = dual control volumes, indexed by the vertex position ``(ci, cj)``."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    cv_ij: np.ndarray

    @property
    def shape(self):
        return len(self.x_edges) - 1, len(self.y_edges) - 1

    def to_cells(self, cv_values):
        out = np.zeros(self.shape)
        out[self.cv_ij[:, 0], self.cv_ij[:, 1]] = cv_values
        return out


def transport_grid(dual) -> TransportGrid:
    b = dual.cv_bounds
    xe = np.unique(np.concatenate([b[:, 0], b[:, 1]]))
    ye = np.unique(np.concatenate([b[:, 2], b[:, 3]]))
    grid = TransportGrid(xe, ye, dual.cv_ij)
    if grid.shape[0] * grid.shape[1] != dual.n_cv:
        raise ConfigurationError("control volumes do not form a tensor grid")
    return grid


def face_fluxes(sol: PressureSolution, grid: TransportGrid, q: float):
    """Total volumetric fluxes through the transport faces.

    Returns ``(Fx, Fy)`` of shapes ``(nx+1, ny)`` and ``(nx, ny+1)``, positive
    in +x / +y. The inlet faces carry ``q`` times their length, the outlet
    faces the flux into the Dirichlet column and the walls zero.
    """
    dual = sol.system.dual
    seg = recover_cv_fluxes(sol)
    nx, ny = grid.shape
    Fx = np.zeros((nx + 1, ny))
    Fy = np.zeros((nx, ny + 1))
    ij = grid.cv_ij[dual.seg_minus]
    vert = dual.seg_axis == 0
    np.add.at(Fx, (ij[vert, 0] + 1, ij[vert, 1]), seg[vert])
    np.add.at(Fy, (ij[~vert, 0], ij[~vert, 1] + 1), seg[~vert])
    Fx[0] = q * np.diff(grid.y_edges)
    return Fx, Fy


def face_velocities(Fx, Fy, grid: TransportGrid):
    """Edge-averaged normal velocities (flux / edge length)."""
    return Fx / np.diff(grid.y_edges)[None, :], Fy / np.diff(grid.x_edges)[:, None]


def element_saturation(S_cells, mesh: PrimalMesh):
    """Mean of the (up to four) transport cells overlapping each element, element order."""
    nxT, nyT = S_cells.shape
    total = np.zeros((mesh.nx, mesh.ny))
    count = np.zeros((mesh.nx, mesh.ny))
    for a in (0, 1):
        for b in (0, 1):
            ci = np.arange(mesh.nx) + a
            cj = np.arange(mesh.ny) + b
            ok = ci < nxT
            total[ok] += S_cells[np.ix_(ci[ok], cj)]
            count[ok] += 1
    return (total / count).ravel(order="F")


def element_permeability(cfg: SimulationConfig, mesh: PrimalMesh):
    """Element permeabilities (element order) for the configured medium."""
    from . import fields_io

    if cfg.medium == "homogeneous":
        return np.ones(mesh.n_elements)
    if cfg.medium == "barrier":
        x0, x1, y0, y1 = cfg.barrier
        strip = (x0 * cfg.Lx, x1 * cfg.Lx, y0 * cfg.Ly, y1 * cfg.Ly)
        return fields_io.barrier_field(mesh, strip, cfg.contrast).element_values()
    raster = cfg.raster if isinstance(cfg.raster, fields_io.PermeabilityRaster) else fields_io.PermeabilityRaster(
        np.asarray(cfg.raster, dtype=float), "config array")
    return raster.resample(mesh.nx, mesh.ny).element_values()


# ---------------------------------------------------------------- state and stepping


@dataclass
class TwoPhaseState:
    """Saturation on the transport grid plus the last pressure solve."""

    S: CellField
    pressure: PressureSolution | None
    velocity: tuple | None
    t: float
    inflow: float = 0.0
    outflow: float = 0.0
    steps: int = 0

    @property
    def water(self) -> float:
        return float(np.sum(self.S.values * self.S.areas))


@dataclass
class CoupledModel:
    """Everything that stays fixed during a run."""

    cfg: SimulationConfig
    mesh: PrimalMesh
    grid: TransportGrid
    permeability: np.ndarray
    flux: FluxModel
    bc: BoundarySpec
    base: SaddleSystem | None = None


def build_model(cfg: SimulationConfig) -> CoupledModel:
    mesh = build_primal_mesh(cfg.nx, cfg.ny, cfg.Lx, cfg.Ly)
    grid = transport_grid(build_dual_mesh(mesh, ("right",)))
    bc = BoundarySpec("dirichlet", "outflow", "reflective", "reflective", dirichlet={"left": 1.0})
    return CoupledModel(cfg, mesh, grid, element_permeability(cfg, mesh), water_model(cfg.M), bc)


def initial_state(model: CoupledModel) -> TwoPhaseState:
    S = CellField(np.full(model.grid.shape, model.cfg.s0), model.grid.x_edges, model.grid.y_edges, 0.0)
    return TwoPhaseState(S, None, None, 0.0)


def solve_flow(model: CoupledModel, S: CellField):
    """Pressure solve for the current saturation; returns ``(solution, (vx, vy))``."""
    cfg = model.cfg
    lam = model.permeability * total_mobility(element_saturation(S.values, model.mesh), cfg.M, cfg.mu_o)
    system = slab_system(model.mesh, cfg.degree, MobilityField(lam), cfg.q)
    sol = solve_saddle(system, method=cfg.solver, tol=cfg.solver_tol)
    Fx, Fy = face_fluxes(sol, model.grid, cfg.q)
    return sol, face_velocities(Fx, Fy, model.grid)


def _check_bounds(U: CellField, _report=None):
    v = U.values
    lo, hi = v.min(), v.max()
    if lo < -BOUND_TOL or hi > 1 + BOUND_TOL:
        idx = np.unravel_index(np.argmin(v) if lo < -BOUND_TOL else np.argmax(v), v.shape)
        raise StateError(
            f"saturation {v[idx]:.12g} outside [0, 1] at cell {tuple(int(k) for k in idx)}, t={U.t:.6g}"
        )


def impes_advance(state: TwoPhaseState, model: CoupledModel, t_next: float) -> TwoPhaseState:
    """One pressure solve followed by transport sub-steps up to ``t_next``."""
    if t_next <= state.t:
        raise ConfigurationError(f"t_next={t_next} is not after the current time {state.t}")
    cfg = model.cfg
    sol, vel = solve_flow(model, state.S)
    res = advance(state.S, model.flux, t_next, cfg.theta, model.bc, cfg.face_method, velocity=vel,
                  on_step=_check_bounds)
    return TwoPhaseState(res.field, sol, vel, res.field.t, state.inflow + res.inflow,
                         state.outflow + res.outflow, state.steps + res.steps)


def _pressure_times(cfg: SimulationConfig):
    stops = sorted(set(cfg.frame_times) | {cfg.t_end})
    out, prev = [], 0.0
    for stop in stops:
        k = int(cfg.pressure_updates_per_frame)
        out.extend(prev + (stop - prev) * np.arange(1, k + 1) / k)
        prev = stop
    out[-1] = cfg.t_end
    return out


@dataclass
class CoupledRun:
    """Frames, mass-balance history and diagnostics of one coupled run."""

    cfg: SimulationConfig
    model: CoupledModel
    frames: list
    history: list
    final: TwoPhaseState
    diagnostics: dict


def run_coupled(cfg: SimulationConfig, on_frame=None) -> CoupledRun:
    """March from ``t = 0`` to ``t_end``, solving pressure at a fixed cadence."""
    t0 = time.perf_counter()
    model = build_model(cfg)
    state = initial_state(model)
    water0 = state.water
    history = [{"t": 0.0, "water": water0, "inflow": 0.0, "outflow": 0.0}]
    frames = []
    worst = 0.0
    for t_next in _pressure_times(cfg):
        state = impes_advance(state, model, t_next)
        imb = cv_flux_imbalance(state.pressure)
        worst = max(worst, imb)
        history.append({"t": state.t, "water": state.water, "inflow": state.inflow, "outflow": state.outflow})
        if any(np.isclose(state.t, t) for t in cfg.frame_times):
            frames.append(state)
            if on_frame is not None:
                on_frame(state)
    diag = {
        "steps": state.steps,
        "max_cv_imbalance": worst,
        "pressure_solves": len(history) - 1,
        "wall_seconds": time.perf_counter() - t0,
    }
    if cfg.medium == "barrier":
        diag["barrier_flux_ratio"] = barrier_flux_ratio(state, model)
    logger.info("coupled run h=%g finished: %s", cfg.h, diag)
    return CoupledRun(cfg, model, frames, history, state, diag)


# ---------------------------------------------------------------- diagnostics


def cv_flux_imbalance(sol: PressureSolution) -> float:
    """Largest per-CV difference between outward flux and inflow, relative to the inflow."""
    sys_ = sol.system
    bal = sys_.dual.cv_balance(recover_cv_fluxes(sol)) - sys_.g
    scale = max(float(np.abs(sys_.g_boundary).sum()), 1e-300)
    return float(np.abs(bal).max() / scale)


def barrier_flux_ratio(state: TwoPhaseState, model: CoupledModel) -> float:
    """Largest total |x-flux| across a vertical cut through the barrier, over the inlet flux."""
    cfg = model.cfg
    x0, x1, y0, y1 = cfg.barrier
    vx, _ = state.velocity
    xe, ye = model.grid.x_edges, model.grid.y_edges
    dy = np.diff(ye)
    yc = 0.5 * (ye[:-1] + ye[1:])
    rows = (yc > y0 * cfg.Ly) & (yc < y1 * cfg.Ly)
    cols = (xe > x0 * cfg.Lx) & (xe < x1 * cfg.Lx)
    if not rows.any() or not cols.any():
        return 0.0
    F = np.abs(vx[np.ix_(cols, rows)]) * dy[rows][None, :]
    return float(F.sum(axis=1).max() / (cfg.q * cfg.Ly)) if cfg.q > 0 else 0.0


def mass_balance_report(history, cfg: SimulationConfig):
    """Relative mass error ``|dW - (in - out)| / in`` per recorded time.

    Returns a list of dicts with keys ``t``, ``h``, ``rel_mass_err``; times with
    no inflow yet are skipped.
    """
    if not history:
        raise StateError("empty history")
    w0 = history[0]["water"]
    out = []
    for rec in history:
        if rec["inflow"] <= 0:
            continue
        err = abs(rec["water"] - w0 - (rec["inflow"] - rec["outflow"])) / rec["inflow"]
        out.append({"t": rec["t"], "h": cfg.h, "rel_mass_err": float(err)})
    return out


def front_position(S: CellField, level: float) -> float:
    """Largest x where the y-averaged saturation profile crosses ``level`` (linear interpolation)."""
    prof = (S.values * S.dy[None, :]).sum(axis=1) / S.dy.sum()
    xc = 0.5 * (S.x_edges[:-1] + S.x_edges[1:])
    above = np.flatnonzero(prof >= level)
    if not len(above):
        return float(S.x_edges[0])
    k = above[-1]
    if k + 1 >= len(prof):
        return float(S.x_edges[-1])
    a, b = prof[k], prof[k + 1]
    return float(xc[k] + (a - level) / (a - b) * (xc[k + 1] - xc[k]))


def saturation_difference(fine: CellField, coarse: CellField) -> float:
    """Area-weighted l1 distance after conservative restriction of ``fine`` onto ``coarse``."""
    from .hyperbolic import restrict

    R = restrict(fine, coarse.x_edges, coarse.y_edges)
    return float(np.sum(np.abs(R - coarse.values) * coarse.areas))
