import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralfmu.core import ModelKind
from neuralfmu.errors import PhaseError
from neuralfmu.models import (
    NATIVE_FACTORIES,
    VR_FEXT,
    VR_S,
    VR_V,
    PendulumParams,
    friction_force,
    friction_slope,
    make_friction_pendulum,
    make_frictionless_pendulum,
    make_linear_model,
    simulate_me,
    wrap_me_as_cs,
)
from neuralfmu.odesolve import SolverConfig
from neuralfmu.sensitivity import model_jacobian

from conftest import OMEGA, analytic_s, analytic_v

REF = PendulumParams.reference()


def _expected_friction(v):
    # Coulomb + viscous + Stribeck with the reference coefficients, odd in v
    a = abs(v)
    return math.copysign(0.25 + 0.05 * a + 0.5 * math.exp(-2.0 * a), v)


# -- parameters ----------------------------------------------------------------


def test_parameter_sets():
    fmu = PendulumParams.fmu()
    assert (fmu.m, fmu.c, fmu.s_rel, fmu.s0) == (1.0, 10.0, 1.0, 0.1)
    assert fmu.f_coulomb == fmu.f_prop == fmu.f_stribeck == 0.0
    assert REF.s0 == 0.0 and REF.breakaway == pytest.approx(0.75)
    assert fmu.equilibrium == pytest.approx(1.1) and REF.equilibrium == 1.0


@pytest.mark.parametrize("kw", [{"m": 0.0}, {"c": -1.0}, {"f_prop": -0.1}, {"s0": math.nan}])
def test_invalid_parameters(kw):
    with pytest.raises(ValueError):
        PendulumParams(**kw)


# -- friction law --------------------------------------------------------------


@pytest.mark.parametrize("v", [0.25, 0.5, 1.0, 1.5, -0.25, -0.5, -1.0, -1.5, 3.0])
def test_friction_values(v):
    assert friction_force(v, REF) == pytest.approx(_expected_friction(v), rel=1e-14)


def test_friction_spot_values():
    assert friction_force(0.5, REF) == pytest.approx(0.458939720, abs=1e-9)
    assert friction_force(0.0, REF) == 0.0


@given(st.floats(-50, 50, allow_nan=False))
def test_friction_is_odd(v):
    assert friction_force(-v, REF) == -friction_force(v, REF)


@given(st.floats(1e-3, 10))
def test_friction_slope_matches_difference_quotient(v):
    h = 1e-6
    fd = (friction_force(v + h, REF) - friction_force(v - h, REF)) / (2 * h)
    assert friction_slope(v, REF) == pytest.approx(fd, abs=1e-7)
    assert friction_slope(-v, REF) == pytest.approx(friction_slope(v, REF))


def test_friction_vectorized():
    v = np.array([-1.0, 0.0, 1.0])
    np.testing.assert_allclose(friction_force(v, REF), [-_expected_friction(1.0), 0.0, _expected_friction(1.0)])


# -- frictionless model ----------------------------------------------------------


def test_frictionless_matches_closed_form(me_instance):
    t = np.linspace(0.0, 10.0, 1001)
    traj = simulate_me(me_instance, (0.0, 10.0), SolverConfig.adaptive(1e-8), save_at=t)
    assert np.max(np.abs(traj.states[:, 0] - analytic_s(t))) < 1e-5
    assert np.max(np.abs(traj.states[:, 1] - analytic_v(t))) < 1e-4
    assert traj.event_times == []


def test_frictionless_energy_conserved(me_instance):
    e0 = me_instance.energy()
    simulate_me(me_instance, (0.0, 5.0), SolverConfig.adaptive(1e-10))
    assert me_instance.energy() == pytest.approx(e0, rel=1e-7)


def test_force_input_shifts_acceleration():
    inst = make_frictionless_pendulum(with_force_input=True).instantiate().initialize()
    a0 = inst.get_derivatives()[1]
    inst.set_real([VR_FEXT], [2.0])
    assert inst.get_derivatives()[1] == pytest.approx(a0 + 2.0)
    jac = model_jacobian(inst, knowns=[VR_S, VR_V, VR_FEXT])
    np.testing.assert_allclose(jac, [[0.0, 1.0, 0.0], [-10.0, 0.0, 1.0]], atol=1e-15)


# -- friction model ----------------------------------------------------------------


def _reference_run(s_start, v_start, t_end=20.0, n=2001):
    inst = make_friction_pendulum(REF, s_start, v_start).instantiate().initialize()
    t = np.linspace(0.0, t_end, n)
    traj = simulate_me(inst, (0.0, t_end), SolverConfig.adaptive(1e-10, 1e-12), save_at=t)
    return inst, traj


@pytest.mark.parametrize("x0", [(0.5, 0.0), (1.0, -1.5), (2.0, 0.0), (0.0, 3.0)])
def test_reference_energy_non_increasing(x0):
    _, traj = _reference_run(*x0)
    e = REF.energy(traj.states[:, 0], traj.states[:, 1])
    assert np.all(np.diff(e) <= 1e-9)


def test_reference_sticks_within_breakaway_band():
    inst, traj = _reference_run(1.0, -1.5)
    assert inst.mode == "stuck"
    tail = traj.states[traj.times >= traj.event_times[-1]]
    assert np.all(tail[:, 1] == 0.0)
    assert np.all(tail[:, 0] == tail[0, 0])
    assert abs(tail[0, 0] - 1.0) <= REF.breakaway / REF.c


def test_reference_starts_stuck_inside_band():
    inst = make_friction_pendulum(REF, 1.05, 0.0).instantiate().initialize()
    assert inst.mode == "stuck"
    np.testing.assert_array_equal(inst.get_derivatives(), [0.0, 0.0])


def test_reference_first_stop_matches_independent_solver():
    integrate = pytest.importorskip("scipy.integrate")

    def sliding_forward(t, x):
        # positive-velocity branch of the reference law
        return [x[1], 10.0 * (1.0 - x[0]) - _expected_friction(max(x[1], 1e-300))]

    def stop(t, x):
        return x[1]

    stop.terminal, stop.direction = True, -1
    # leave the rest position first: at v == 0 the mass breaks away since |f| = 5 > 0.75
    sol = integrate.solve_ivp(sliding_forward, (0.0, 4.0), [0.5, 0.0], rtol=1e-12, atol=1e-14, events=stop, first_step=1e-8)
    t_stop = sol.t_events[0][0] if sol.t_events[0][0] > 1e-6 else sol.t_events[0][1]
    _, traj = _reference_run(0.5, 0.0, t_end=4.0, n=401)
    assert traj.event_times[0] == pytest.approx(t_stop, abs=1e-7)


def test_reference_sliding_jacobian():
    inst = make_friction_pendulum(REF, 0.5, 0.7).instantiate().initialize()
    jac = inst._derivative_jacobian()
    assert jac[1, 0] == -10.0
    assert jac[1, 1] == pytest.approx(-friction_slope(0.7, REF))


# -- linear model --------------------------------------------------------------------


def test_linear_model():
    inst = make_linear_model([[0.0, 1.0], [-2.0, -3.0]], [[0.0], [1.0]], [1.0, 0.0]).instantiate().initialize()
    inst.set_real(inst.description.input_vrs, [0.5])
    np.testing.assert_allclose(inst.get_derivatives(), [0.0, -1.5])


def test_linear_model_shape_checks():
    with pytest.raises(ValueError):
        make_linear_model([[1.0, 2.0]])
    with pytest.raises(ValueError):
        make_linear_model(np.eye(2), np.ones((3, 1)))


def test_native_factories_cover_builtins():
    assert set(NATIVE_FACTORIES) >= {"FrictionlessPendulum", "FrictionPendulum", "LinearModel"}


# -- co-simulation wrapper --------------------------------------------------------------


def _cs(bundle=None):
    bundle = make_frictionless_pendulum() if bundle is None else bundle
    return wrap_me_as_cs(bundle).instantiate().initialize()


def test_cs_step_from_rest():
    inst = _cs()
    inst.do_step(0.0, 0.1)
    s, v = inst.get_real([VR_S, VR_V])
    assert s == pytest.approx(0.529751, abs=1e-5)
    assert s == pytest.approx(float(analytic_s(0.1)), abs=1e-9)
    assert v == pytest.approx(float(analytic_v(0.1)), abs=1e-8)
    assert v == pytest.approx(0.590050, abs=1e-5)


def test_cs_large_macro_step():
    inst = _cs()
    inst.do_step(0.0, 1.0)
    assert inst.get_real([VR_S])[0] == pytest.approx(float(analytic_s(1.0)), abs=1e-7)
    # the macro step only bounds the internal micro steps
    assert inst.last_step_stats["accepted"] > 1


def test_cs_steps_compose():
    one, many = _cs(), _cs()
    one.do_step(0.0, 1.0)
    t = 0.0
    for _ in range(10):
        many.do_step(t, 0.1)
        t += 0.1
    np.testing.assert_allclose(one.get_real([VR_S, VR_V]), many.get_real([VR_S, VR_V]), atol=1e-7)


def test_cs_outputs_are_states():
    md = wrap_me_as_cs(make_frictionless_pendulum()).description
    assert md.kind is ModelKind.CS
    assert tuple(md.output_vrs) == (VR_S, VR_V)


def test_cs_rejects_derivative_access():
    inst = _cs()
    with pytest.raises(PhaseError):
        inst.get_derivatives()


def test_cs_friction_model_reaches_rest():
    inst = _cs(make_friction_pendulum(REF, 1.0, -1.5))
    t = 0.0
    for _ in range(100):
        inst.do_step(t, 0.2)
        t += 0.2
    s, v = inst.get_real([VR_S, VR_V])
    assert v == 0.0 and abs(s - 1.0) <= 0.075


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(-2.0, 2.0), st.floats(0.01, 0.5))
def test_cs_step_matches_closed_form(s0, v0, h):
    inst = _cs(make_frictionless_pendulum(s_start=s0, v_start=v0))
    inst.do_step(0.0, h)
    amp_c, amp_s = s0 - 1.1, v0 / OMEGA
    s = 1.1 + amp_c * math.cos(OMEGA * h) + amp_s * math.sin(OMEGA * h)
    assert inst.get_real([VR_S])[0] == pytest.approx(s, abs=1e-7)
