"""Acceptance criteria 1-10, one test each.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line (also collected
into the terminal summary) and then asserts the same condition.
"""

import functools
import os

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import overlap_oracle

from conservflow.coupling import (
    SimulationConfig,
    front_position,
    mass_balance_report,
    run_coupled,
    saturation_difference,
)
from conservflow.elliptic import MobilityField, compare_methods, manufactured_solution
from conservflow.fields_io import load_raster
from conservflow.hyperbolic import (
    BoundarySpec,
    CellField,
    advance,
    bl_gravity_model,
    buckley_leverett_model,
    burgers_model,
    cfl_dt,
    convergence_table,
    fit_power_law,
    flux_form,
    flux_form_update,
    le_step,
    linear_model,
    restrict,
    setup_problem,
    welge_front,
)

P_EX, GRAD_EX, Q_EX = manufactured_solution()
PERIODIC = BoundarySpec.all("periodic")


def verdict(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def table_row(n, r):
    return compare_methods(n, r, source=Q_EX, exact=(P_EX, GRAD_EX))


@functools.lru_cache(maxsize=None)
def coupled(medium, h):
    return run_coupled(SimulationConfig(h=h, medium=medium))


# ---------------------------------------------------------------- elliptic


def test_criterion_1_local_mass_conservation():
    rows = [table_row(128, r) for r in (1, 2, 3)]
    ok = all(r["J_HOCFEM"] <= 1e-10 and r["J_FEM"] >= 1e-6 for r in rows)
    detail = ", ".join(f"Q{r['degree']}: J_HOC={r['J_HOCFEM']:.2e} J_FEM={r['J_FEM']:.2e}" for r in rows)
    verdict(1, ok, detail + " (need J_HOC <= 1e-10, J_FEM >= 1e-6)")


def test_criterion_2_energy_agreement():
    rows = [table_row(128, r) for r in (1, 2, 3)]
    rel = [abs(r["E_FEM"] - r["E_HOCFEM"]) / abs(r["E_FEM"]) for r in rows]
    detail = ", ".join(f"Q{r['degree']}: {d:.2e}" for r, d in zip(rows, rel))
    verdict(2, max(rel) <= 1e-5, f"|dE|/|E| {detail} (need <= 1e-5)")


@pytest.mark.slow
def test_criterion_3_convergence_orders():
    ns = (16, 32, 64, 128)
    parts, ok = [], True
    for r in (1, 2):
        rows = [table_row(n, r) for n in ns]
        h = np.array([row["h"] for row in rows])
        _, p_h1 = fit_power_law(h, np.array([row["errH1"] for row in rows]))
        _, p_l2 = fit_power_law(h, np.array([row["errL2corr"] for row in rows]))
        ok &= abs(p_h1 - r) <= 0.3 and abs(p_l2 - (r + 1)) <= 0.3
        parts.append(f"Q{r}: H1 {p_h1:.3f} (target {r}), L2 corrected {p_l2:.3f} (target {r + 1})")
    verdict(3, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_4_spe10_high_contrast():
    path = os.environ.get("CONSERVFLOW_SPE10")
    if not path or not os.path.exists(path):
        verdict(4, False, "data unavailable: set CONSERVFLOW_SPE10 to a 64x64 SPE10 permeability raster")
    raster = load_raster(path).resample(256, 256)
    row = compare_methods(256, 1, mobility=MobilityField(raster.element_values()), source=1.0)
    ok = row["J_HOCFEM"] <= 1e-9 and row["J_FEM"] >= 1e-2
    verdict(4, ok, f"J_HOC={row['J_HOCFEM']:.2e} (<= 1e-9), J_FEM={row['J_FEM']:.2e} (>= 1e-2)")


# ---------------------------------------------------------------- transport


@pytest.mark.slow
def test_criterion_5_advection_table():
    rows, fits = convergence_table("linear_advection", (64, 128, 256, 512), theta=0.67)
    e64 = rows[0]["err_l1"]
    order = fits["l1"][1]
    band = abs(e64 / 5.156e-2 - 1) <= 0.2
    ok_order = 0.84 <= order <= 1.14
    verdict(5, band and ok_order,
            f"l1(64)={e64:.4e} vs 5.156e-2 ({'within' if band else 'outside'} +/-20%), fitted order {order:.3f} "
            f"({'in' if ok_order else 'outside'} [0.84, 1.14])")


def _max_drift(setup_name, n, steps):
    s = setup_problem(setup_name, n)
    U = CellField(s.field.values, s.field.x_edges, s.field.y_edges)
    worst = 0.0
    for _ in range(steps):
        m0 = U.total()
        U = le_step(U, s.model, cfl_dt(U, s.model, 0.67, 1.0, PERIODIC), PERIODIC)
        worst = max(worst, abs(U.total() - m0) / max(abs(m0), np.abs(U.values).sum() * U.h**2))
    return worst


def test_criterion_6_conservation_monotonicity_oracle():
    drift = max(_max_drift("linear_advection", 64, 50), _max_drift("burgers_oblique", 64, 50))
    rng = np.random.default_rng(20240601)
    models = [(linear_model(1.0, 1.0), -1, 1), (linear_model(-0.6, 0.3), -1, 1), (burgers_model(), -1, 1),
              (buckley_leverett_model(1.0), 0, 1), (buckley_leverett_model(4.0), 0, 1)]
    violation = 0.0
    for k in range(1000):
        model, lo, hi = models[k % len(models)]
        U = CellField.uniform(rng.uniform(lo, hi, (8, 8)), 1.0 / 8)
        theta = rng.uniform(0.05, 0.99)
        new = le_step(U, model, cfl_dt(U, model, theta, 1.0, PERIODIC), PERIODIC).values
        u = U.values
        nb = [np.roll(np.roll(u, a, 0), b, 1) for a in (-1, 0, 1) for b in (-1, 0, 1)]
        violation = max(violation, (np.min(nb, axis=0) - new).max(), (new - np.max(nb, axis=0)).max())
    oracle_err = 0.0
    for k, model in enumerate((linear_model(), burgers_model(), buckley_leverett_model(2.0))):
        lo = 0.0 if k == 2 else -1.0
        U = CellField.uniform(rng.uniform(lo, 1.0, (16, 16)), 1.0 / 16)
        dt = cfl_dt(U, model, 0.67, 1.0, PERIODIC)
        oracle_err = max(oracle_err, np.abs(le_step(U, model, dt, PERIODIC).values
                                            - overlap_oracle(U, model, dt, "donor")).max())
    ok = drift <= 1e-12 and violation <= 1e-14 and oracle_err <= 1e-12
    verdict(6, ok, f"per-step mass drift {drift:.1e} (<= 1e-12), min/max violation over 1000 states "
                   f"{max(violation, 0.0):.1e}, oracle difference {oracle_err:.1e} (<= 1e-12)")


@pytest.mark.slow
def test_criterion_7_burgers_oblique():
    fields, lo, hi = [], np.inf, -np.inf
    for n in (128, 256, 512):
        s = setup_problem("burgers_oblique", n)
        seen = []
        res = advance(s.field, s.model, s.t_end, 0.67, s.bc,
                      on_step=lambda U, _r: seen.append((U.values.min(), U.values.max())))
        lo = min(lo, min(a for a, _ in seen))
        hi = max(hi, max(b for _, b in seen))
        fields.append(res.field)
    diffs = [saturation_difference(fields[k + 1], fields[k]) for k in range(2)]
    ok = lo >= -1.0 - 1e-14 and hi <= 0.8 + 1e-14 and diffs[1] < diffs[0]
    verdict(7, ok, f"range [{lo:.15g}, {hi:.15g}] within [-1, 0.8]; l1 self-differences "
                   f"{diffs[0]:.4e} -> {diffs[1]:.4e}")


# ---------------------------------------------------------------- coupled


@pytest.mark.slow
def test_criterion_8_welge_front():
    run = coupled("homogeneous", 1.0)
    cfg = run.cfg
    s_star, speed = welge_front(cfg.M, cfg.s0)
    exact = speed * cfg.q * cfg.t_end
    num = front_position(run.final.S, 0.5 * (s_star + cfg.s0))
    verdict(8, abs(num - exact) <= 2 * cfg.h,
            f"front at x={num:.3f} vs Welge {exact:.3f}, offset {abs(num - exact) / cfg.h:.2f} cells (<= 2)")


@pytest.mark.slow
def test_criterion_9_coupled_refinement():
    hs = (8.0, 4.0, 2.0, 1.0)
    parts, ok = [], True
    for medium in ("homogeneous", "barrier"):
        runs = [coupled(medium, h) for h in hs]
        errs = [mass_balance_report(r.history, r.cfg)[-1]["rel_mass_err"] for r in runs]
        diffs = [saturation_difference(runs[k + 1].final.S, runs[k].final.S) for k in range(len(hs) - 1)]
        mono_err = all(errs[k + 1] <= errs[k] + 1e-12 for k in range(len(errs) - 1))
        mono_diff = all(diffs[k + 1] < diffs[k] for k in range(len(diffs) - 1))
        ok &= mono_err and mono_diff
        parts.append(f"{medium}: mass err " + "/".join(f"{e:.1e}" for e in errs)
                     + ", l1 diffs " + " -> ".join(f"{d:.1f}" for d in diffs))
    verdict(9, ok, "; ".join(parts))


def test_criterion_10_flux_form_consistency():
    rng = np.random.default_rng(10)
    models = {"linear": (linear_model(), -1.0), "burgers": (burgers_model(), -1.0),
              "buckley_leverett": (buckley_leverett_model(2.0), 0.0), "bl_gravity": (bl_gravity_model(), 0.0)}
    bc = BoundarySpec.all("outflow")
    rec, const = 0.0, 0.0
    for model, lo in models.values():
        U = CellField.uniform(rng.uniform(lo, 1.0, (16, 16)), 1.0 / 16)
        dt = cfl_dt(U, model, 0.67, 1.0, bc)
        F, G = flux_form(U, model, dt, bc)
        rec = max(rec, np.abs(flux_form_update(U, F, G, dt) - le_step(U, model, dt, bc).values).max())
        for c in (lo, 0.3, 0.8, 1.0):
            C = CellField.uniform(np.full((6, 6), c), 1.0 / 6)
            dt = cfl_dt(C, model, 0.67, 1.0, PERIODIC)
            F, G = flux_form(C, model, dt, PERIODIC)
            const = max(const, np.abs(le_step(C, model, dt, PERIODIC).values - c).max(),
                        np.abs(F - model.f(np.array(c))).max(), np.abs(G - model.g(np.array(c))).max())
    verdict(10, rec <= 1e-12 and const <= 1e-12,
            f"flux-form vs step {rec:.1e} (<= 1e-12), constant-state update and F(u..u)-f(u) {const:.1e}")
