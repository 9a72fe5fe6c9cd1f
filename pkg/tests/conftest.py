import math

import numpy as np
import pytest

from neuralfmu.models import PendulumParams, make_friction_pendulum, make_frictionless_pendulum

OMEGA = math.sqrt(10.0)


def analytic_s(t, s_start=0.5, s_eq=1.1):
    """Closed-form position of the undamped oscillator released at rest."""
    return s_eq - (s_eq - s_start) * np.cos(OMEGA * np.asarray(t))


def analytic_v(t, s_start=0.5, s_eq=1.1):
    return (s_eq - s_start) * OMEGA * np.sin(OMEGA * np.asarray(t))


@pytest.fixture
def frictionless():
    return make_frictionless_pendulum(PendulumParams.fmu())


@pytest.fixture
def friction():
    return make_friction_pendulum(PendulumParams.reference())


@pytest.fixture
def me_instance(frictionless):
    return frictionless.instantiate().initialize(0.0)


def toy_neuralfmu(seed=0, rtol=1e-10):
    """12-parameter ME NeuralFMU around the frictionless pendulum on t in [0, 1]."""
    from neuralfmu.hybrid import MENeuralFMU, reference_dataset
    from neuralfmu.net import Dense
    from neuralfmu.odesolve import SolverConfig

    inst = make_frictionless_pendulum().instantiate().initialize()
    nfmu = MENeuralFMU([Dense(2, 2)], inst, [Dense(2, 2, "tanh")], solver_cfg=SolverConfig.adaptive(rtol, rtol * 1e-2))
    rng = np.random.default_rng(seed)
    params = np.concatenate([np.eye(2).ravel(), np.zeros(2), 0.3 * rng.standard_normal(6)])
    params[:6] += 0.05 * rng.standard_normal(6)
    data = reference_dataset([0.5, 0.0], t_end=1.0, n_samples=100)
    return nfmu, data, params


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
