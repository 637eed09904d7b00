import numpy as np
import pytest
import scipy.integrate as si

from conservflow.hyperbolic import fractional_flow, welge_cell_averages, welge_front, welge_solution


def test_unit_viscosity_ratio_front():
    s, speed = welge_front(1.0)
    assert np.isclose(s, 1 / np.sqrt(2), atol=1e-12)
    assert np.isclose(speed, (1 + np.sqrt(2)) / 2, atol=1e-12)


@pytest.mark.parametrize("M, s0", [(0.5, 0.0), (2.0, 0.0), (4.0, 0.1)])
def test_front_is_tangent_and_satisfies_jump_condition(M, s0):
    f, df = fractional_flow(M)
    s, speed = welge_front(M, s0)
    assert s0 < s < 1
    shock = (f(s) - f(s0)) / (s - s0)
    assert np.isclose(speed, shock, rtol=1e-10)
    assert np.isclose(df(s), shock, rtol=1e-10)


@pytest.mark.parametrize("M", [0.5, 1.0, 3.0])
def test_injected_volume_is_conserved(M):
    q, t = 0.75, 40.0
    _, speed = welge_front(M)
    xf = speed * q * t
    vol = si.quad(lambda x: welge_solution(np.array([x]), t, q, M)[0], 0, xf, points=[xf], limit=400)[0]
    assert np.isclose(vol, q * t, rtol=1e-6)


def test_profile_is_monotone_with_jump_at_front():
    s, speed = welge_front(1.0)
    t, q = 10.0, 1.0
    x = np.linspace(0, 20, 2001)
    S = welge_solution(x, t, q)
    assert np.all(np.diff(S) <= 1e-12)
    xf = speed * q * t
    assert np.isclose(welge_solution(np.array([xf - 1e-9]), t, q)[0], s, atol=1e-6)
    assert welge_solution(np.array([xf + 1e-9]), t, q)[0] == 0.0


def test_cell_averages_integrate_to_injected_volume():
    xe = np.linspace(0, 256, 257)
    avg = welge_cell_averages(xe, 220.0, 0.75, sub=256)
    assert np.isclose(avg.sum(), 0.75 * 220.0, rtol=1e-3)
