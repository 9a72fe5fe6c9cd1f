"""Built-in native models.

Two horizontal spring pendulums share the dynamics

    s' = v,    v' = (c * (s0 + s_rel - s) - f_fric(v)) / m

The frictionless variant (``f_fric = 0``) plays the role of the imperfect
white-box model; the friction variant adds Stribeck friction with a
stuck/sliding mode and serves as the reference system.  A linear model and a
co-simulation wrapper complete the set.
"""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import (
    Causality,
    ModelDescription,
    ModelInstance,
    ModelKind,
    Phase,
    ScalarVariable,
    Variability,
    instantiate,
)
from .errors import SolverError
from .odesolve import EventSpec, SolverConfig, solve

_GUID_NS = uuid.UUID("6f1c5d0e-5a51-4b8e-9d0c-3f0b8f6a2c11")


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    c: float = 10.0
    s_rel: float = 1.0
    s0: float = 0.0
    f_coulomb: float = 0.0
    f_prop: float = 0.0
    f_stribeck: float = 0.0
    f_exp: float = 0.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.m <= 0.0 or self.c <= 0.0:
            raise ValueError("mass and spring constant must be positive")
        if min(self.f_coulomb, self.f_prop, self.f_stribeck, self.f_exp) < 0.0:
            raise ValueError("friction coefficients must be non-negative")

    @classmethod
    def reference(cls) -> "PendulumParams":
        """Reference system: Stribeck friction, anchor at 0."""
        return cls(m=1.0, c=10.0, s_rel=1.0, s0=0.0, f_coulomb=0.25, f_prop=0.05, f_stribeck=0.5, f_exp=2.0)

    @classmethod
    def fmu(cls) -> "PendulumParams":
        """White-box model: no friction, anchor displaced by 0.1 m."""
        return cls(m=1.0, c=10.0, s_rel=1.0, s0=0.1)

    @property
    def breakaway(self) -> float:
        return self.f_coulomb + self.f_stribeck

    @property
    def equilibrium(self) -> float:
        return self.s0 + self.s_rel

    def energy(self, s, v):
        s = np.asarray(s)
        v = np.asarray(v)
        return 0.5 * self.m * v * v + 0.5 * self.c * (s - self.equilibrium) ** 2


def friction_force(v, p: PendulumParams):
    """Sliding friction force, odd in ``v`` and zero at ``v == 0``."""
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    mag = p.f_coulomb + p.f_prop * a + p.f_stribeck * np.exp(-p.f_exp * a)
    out = np.where(v > 0.0, mag, np.where(v < 0.0, -mag, 0.0))
    return float(out) if out.ndim == 0 else out


def friction_slope(v: float, p: PendulumParams) -> float:
    """d f_fric / d v for ``v != 0`` (even in ``v``)."""
    return p.f_prop - p.f_stribeck * p.f_exp * math.exp(-p.f_exp * abs(v))


class ModelBundle(NamedTuple):
    description: ModelDescription
    factory: Callable

    def instantiate(self, kind=None) -> ModelInstance:
        return instantiate(self.description, self.factory, kind)


# value references shared by both pendulums
VR_S, VR_V, VR_DS, VR_A = 0, 1, 2, 3
VR_M, VR_C, VR_SREL, VR_S0 = 4, 5, 6, 7
VR_FCOUL, VR_FPROP, VR_FSTRIB, VR_FEXP = 8, 9, 10, 11
VR_FEXT = 12

_FRICTION_NAMES = {
    VR_FCOUL: ("friction.f_coulomb", "f_coulomb"),
    VR_FPROP: ("friction.f_prop", "f_prop"),
    VR_FSTRIB: ("friction.f_stribeck", "f_stribeck"),
    VR_FEXP: ("friction.f_exp", "f_exp"),
}
_PARAM_FIELDS = {VR_M: "m", VR_C: "c", VR_SREL: "s_rel", VR_S0: "s0"}


def _pendulum_description(name, p, friction, s_start, v_start, with_force_input, n_events):
    P, L, O, I = Causality.PARAMETER, Causality.LOCAL, Causality.OUTPUT, Causality.INPUT
    fixed = Variability.FIXED
    variables = [
        ScalarVariable("mass.s", VR_S, L, start=s_start, description="position [m]"),
        ScalarVariable("mass.v", VR_V, L, start=v_start, description="velocity [m/s]"),
        ScalarVariable("der(mass.s)", VR_DS, L, description="position derivative [m/s]"),
        ScalarVariable("mass.a", VR_A, O, description="acceleration [m/s2]"),
        ScalarVariable("mass.m", VR_M, P, fixed, start=p.m, description="mass [kg]"),
        ScalarVariable("spring.c", VR_C, P, fixed, start=p.c, description="spring constant [N/m]"),
        ScalarVariable("spring.s_rel", VR_SREL, P, fixed, start=p.s_rel, description="relaxed length [m]"),
        ScalarVariable("fixed.s0", VR_S0, P, fixed, start=p.s0, description="anchor position [m]"),
    ]
    if friction:
        for vr, (vname, fld) in _FRICTION_NAMES.items():
            variables.append(ScalarVariable(vname, vr, P, fixed, start=getattr(p, fld)))
    inputs = ()
    if with_force_input:
        variables.append(ScalarVariable("mass.f_ext", VR_FEXT, I, start=0.0, description="external force [N]"))
        inputs = (VR_FEXT,)
    key = f"{name}|{p}|{s_start}|{v_start}|{with_force_input}"
    return ModelDescription(
        model_name=name,
        guid="{" + str(uuid.uuid5(_GUID_NS, key)) + "}",
        kind=ModelKind.ME,
        variables=tuple(variables),
        state_vrs=(VR_S, VR_V),
        derivative_vrs=(VR_DS, VR_A),
        input_vrs=inputs,
        output_vrs=(VR_A,),
        provides_directional_derivative=True,
        can_get_set_state=True,
        n_event_indicators=n_events,
    )


class _Pendulum(ModelInstance):
    _friction = False

    def _parameters_changed(self):
        kw = {fld: self.params[vr] for vr, fld in _PARAM_FIELDS.items()}
        if self._friction:
            kw.update({fld: self.params[vr] for vr, (_, fld) in _FRICTION_NAMES.items()})
        self.p = PendulumParams(**kw)

    def spring_force(self) -> float:
        p = self.p
        f = p.c * (p.s0 + p.s_rel - self.x[0])
        if self.u.shape[0]:
            f += self.u[0]
        return f

    def energy(self) -> float:
        return float(self.p.energy(self.x[0], self.x[1]))


class FrictionlessPendulum(_Pendulum):
    """Linear spring pendulum without friction."""

    def _derivatives(self):
        return np.array([self.x[1], self.spring_force() / self.p.m])

    def _derivative_jacobian(self):
        p = self.p
        jac = np.zeros((2, 2 + self.u.shape[0]))
        jac[0, 1] = 1.0
        jac[1, 0] = -p.c / p.m
        if self.u.shape[0]:
            jac[1, 2] = 1.0 / p.m
        return jac


SLIDING, STUCK = "sliding", "stuck"


class FrictionPendulum(_Pendulum):
    """Spring pendulum with Stribeck friction and stick/slip switching.

    Mode flags: ``mode`` is ``"sliding"`` or ``"stuck"``; ``direction`` is
    the sign of the velocity branch while sliding.  Between events the
    friction law of the current branch is used even if a trial stage of the
    integrator overshoots ``v = 0``; the sign change is left to the event
    indicator ``z1 = v``.
    """

    _friction = True

    def _mode_reset(self):
        self.mode = SLIDING
        self.direction = 0.0

    def _mode_get(self):
        return (self.mode, self.direction)

    def _mode_set(self, mode):
        self.mode, self.direction = mode

    def _initialize_mode(self):
        v = self.x[1]
        if v != 0.0:
            self.mode, self.direction = SLIDING, math.copysign(1.0, v)
        else:
            self._settle()

    def _settle(self):
        """Mass at rest: stick if the spring cannot overcome breakaway friction."""
        self.x[1] = 0.0
        f = self.spring_force()
        if abs(f) <= self.p.breakaway:
            self.mode, self.direction = STUCK, 0.0
        else:
            self.mode, self.direction = SLIDING, math.copysign(1.0, f)

    def _branch_friction(self):
        p, d = self.p, self.direction
        w = d * self.x[1]
        return d * (p.f_coulomb + p.f_prop * w + p.f_stribeck * math.exp(-p.f_exp * w))

    def _derivatives(self):
        if self.mode == STUCK:
            return np.zeros(2)
        return np.array([self.x[1], (self.spring_force() - self._branch_friction()) / self.p.m])

    def _derivative_jacobian(self):
        p = self.p
        jac = np.zeros((2, 2 + self.u.shape[0]))
        if self.mode == STUCK:
            return jac
        w = self.direction * self.x[1]
        jac[0, 1] = 1.0
        jac[1, 0] = -p.c / p.m
        jac[1, 1] = -(p.f_prop - p.f_stribeck * p.f_exp * math.exp(-p.f_exp * w)) / p.m
        if self.u.shape[0]:
            jac[1, 2] = 1.0 / p.m
        return jac

    def _event_indicators(self):
        if self.mode == STUCK:
            return np.array([self.x[1], abs(self.spring_force()) - self.p.breakaway])
        # the breakaway indicator is only armed while stuck
        return np.array([self.x[1], 1.0])

    def _handle_event(self):
        if self.mode == SLIDING:
            # velocity reached zero: stick or reverse
            self._settle()
        elif abs(self.spring_force()) > self.p.breakaway:
            self.mode = SLIDING
            self.direction = math.copysign(1.0, self.spring_force())


def make_frictionless_pendulum(
    p: Optional[PendulumParams] = None,
    s_start: float = 0.5,
    v_start: float = 0.0,
    with_force_input: bool = False,
) -> ModelBundle:
    """ME description and factory of the frictionless pendulum (default: white-box parameters)."""
    p = PendulumParams.fmu() if p is None else p
    md = _pendulum_description("FrictionlessPendulum", p, False, s_start, v_start, with_force_input, 0)
    return ModelBundle(md, FrictionlessPendulum)


def make_friction_pendulum(
    p: Optional[PendulumParams] = None,
    s_start: float = 0.5,
    v_start: float = 0.0,
    with_force_input: bool = False,
) -> ModelBundle:
    """ME description and factory of the reference pendulum with stick/slip friction."""
    p = PendulumParams.reference() if p is None else p
    md = _pendulum_description("FrictionPendulum", p, True, s_start, v_start, with_force_input, 2)
    return ModelBundle(md, FrictionPendulum)


class LinearModel(ModelInstance):
    """``x' = A x + B u`` with states ``x[i]`` and derivatives ``der(x[i])``."""

    def _parameters_changed(self):
        n = len(self.description.state_vrs)
        m = len(self.description.input_vrs)
        vals = [self.params[vr] for vr in self._param_vrs]
        self.A = np.array(vals[: n * n]).reshape(n, n)
        self.B = np.array(vals[n * n : n * n + n * m]).reshape(n, m)

    def _derivatives(self):
        return self.A @ self.x + self.B @ self.u

    def _derivative_jacobian(self):
        return np.hstack([self.A, self.B])


def make_linear_model(A, B=None, x_start=None, name="LinearModel") -> ModelBundle:
    """Linear ME model; the entries of ``A`` and ``B`` are parameters ``A[i,j]`` / ``B[i,j]``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    B = np.zeros((n, 0)) if B is None else np.atleast_2d(np.asarray(B, dtype=np.float64))
    if B.shape[0] != n:
        raise ValueError("B must have as many rows as A")
    m = B.shape[1]
    x_start = np.zeros(n) if x_start is None else np.asarray(x_start, dtype=np.float64)
    variables = []
    vr = 0
    states, derivs, inputs = [], [], []
    for i in range(n):
        variables.append(ScalarVariable(f"x[{i + 1}]", vr, Causality.LOCAL, start=float(x_start[i])))
        states.append(vr)
        vr += 1
    for i in range(n):
        variables.append(ScalarVariable(f"der(x[{i + 1}])", vr, Causality.OUTPUT))
        derivs.append(vr)
        vr += 1
    for i in range(n):
        for j in range(n):
            variables.append(
                ScalarVariable(f"A[{i + 1},{j + 1}]", vr, Causality.PARAMETER, Variability.FIXED, start=A[i, j])
            )
            vr += 1
    for i in range(n):
        for j in range(m):
            variables.append(
                ScalarVariable(f"B[{i + 1},{j + 1}]", vr, Causality.PARAMETER, Variability.FIXED, start=B[i, j])
            )
            vr += 1
    for j in range(m):
        variables.append(ScalarVariable(f"u[{j + 1}]", vr, Causality.INPUT, start=0.0))
        inputs.append(vr)
        vr += 1
    md = ModelDescription(
        model_name=name,
        guid="{" + str(uuid.uuid5(_GUID_NS, f"{name}|{A.tolist()}|{B.tolist()}|{x_start.tolist()}")) + "}",
        kind=ModelKind.ME,
        variables=tuple(variables),
        state_vrs=tuple(states),
        derivative_vrs=tuple(derivs),
        input_vrs=tuple(inputs),
        output_vrs=tuple(derivs),
        provides_directional_derivative=True,
        can_get_set_state=True,
    )
    return ModelBundle(md, LinearModel)


# -- co-simulation wrapper ----------------------------------------------------


def model_events(inst: ModelInstance) -> Optional[EventSpec]:
    """Event spec driving an ME instance's indicators and event handler."""
    if inst.description.n_event_indicators == 0:
        return None

    def indicators(t, x):
        inst.t = t
        inst.set_continuous_states(x)
        return inst.get_event_indicators()

    def handler(t, x):
        inst.t = t
        inst.set_continuous_states(x)
        inst.handle_event()
        return inst.get_continuous_states()

    return EventSpec(indicators, handler)


def model_rhs(inst: ModelInstance):
    def rhs(t, x):
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite state {x} at t={t:.6g}")
        inst.t = t
        inst.set_continuous_states(x)
        return inst.get_derivatives()

    return rhs


def simulate_me(inst: ModelInstance, t_span, cfg: SolverConfig, save_at=None, dense=False):
    """Integrate an initialized ME instance (with its events) over ``t_span``."""
    traj = solve(model_rhs(inst), inst.get_continuous_states(), t_span, cfg, model_events(inst), save_at, dense)
    # leave the instance at the final state
    inst.t = float(t_span[1])
    inst.set_continuous_states(traj.x_final)
    return traj


class CoSimulationWrapper(ModelInstance):
    """CS instance advancing an inner ME instance with the adaptive solver.

    The macro step ``h`` only bounds the internal micro steps.  Snapshots
    capture the inner instance including its discrete mode.
    """

    inner_description: ModelDescription = None
    inner_factory: Callable = None
    solver_cfg: SolverConfig = None

    def __init__(self, description, kind=ModelKind.CS):
        self.inner = instantiate(self.inner_description, self.inner_factory, ModelKind.ME)
        super().__init__(description, kind)

    def _sync_inner_params(self):
        inner = self.inner
        pvrs = list(self.params)
        inner.set_real(pvrs, [self.params[v] for v in pvrs])

    def _mode_reset(self):
        self.inner.reset()

    def _mode_get(self):
        if self.inner.phase is Phase.INSTANTIATED:
            return None
        return self.inner.get_state()

    def _mode_set(self, mode):
        if mode is None:
            self.inner.reset()
        else:
            self.inner.set_state(mode)

    def _initialize_mode(self):
        inner = self.inner
        inner.reset()
        inner.setup_experiment(self.t, None)
        inner.enter_initialization()
        self._sync_inner_params()
        inner.set_real(list(self.description.state_vrs), self.x)
        if self.u.shape[0]:
            inner.set_real(list(self.description.input_vrs), self.u)
        inner.exit_initialization()
        self.x = inner.get_continuous_states()

    def _inner_at_current(self):
        inner = self.inner
        inner.t = self.t
        inner.x[:] = self.x
        inner.u[:] = self.u
        inner._cache = None
        return inner

    def _do_step(self, t, h):
        inner = self._inner_at_current()
        cfg = self.solver_cfg
        h0 = min(cfg.h0, h)
        cfg = replace(cfg, h0=h0, h_max=min(cfg.h_max, h), h_min=min(cfg.h_min, h0))
        traj = solve(model_rhs(inner), self.x.copy(), (t, t + h), cfg, model_events(inner), save_at=[t + h])
        self.x = traj.states[-1].copy()
        self.t = t + h
        inner.t = self.t
        inner.set_continuous_states(self.x)
        self.last_step_stats = traj.stats

    def _value(self, vr):
        return self._inner_at_current().get_real([vr])[0]

    def _derivative_jacobian(self):
        return self._inner_at_current()._derivative_jacobian()

    def _directional(self, unknown_vrs, dz):
        # instantaneous dy(t)/du(t): the zero-step approximation of the macro-step Jacobian
        out = np.empty(len(unknown_vrs))
        n_x = self.x.shape[0]
        for k, vr in enumerate(unknown_vrs):
            var = self.description.variable(vr)
            if var.vr in self._state_index:
                out[k] = dz[self._state_index[var.vr]]
            elif var.vr in self._input_index:
                out[k] = dz[n_x + self._input_index[var.vr]]
            else:
                out[k] = self._inner_at_current()._directional([var.vr], dz)[0]
        return out


def wrap_me_as_cs(bundle: ModelBundle, solver_cfg: Optional[SolverConfig] = None, outputs: Optional[Sequence[str]] = None) -> ModelBundle:
    """Embed an ME model and an adaptive solver into a CS model.

    ``outputs`` (default: the state variables) become the CS outputs; any
    other former outputs are demoted to locals.
    """
    md = bundle.description
    if solver_cfg is None:
        solver_cfg = SolverConfig.adaptive(rtol=1e-8, atol=1e-10)
    out_vrs = tuple(md.state_vrs) if outputs is None else tuple(md.vr(n) for n in outputs)
    variables = []
    for var in md.variables:
        if var.vr in out_vrs:
            var = replace(var, causality=Causality.OUTPUT)
        elif var.causality is Causality.OUTPUT:
            var = replace(var, causality=Causality.LOCAL)
        variables.append(var)
    cs_md = ModelDescription(
        model_name=md.model_name + "_CS",
        guid="{" + str(uuid.uuid5(_GUID_NS, md.guid + "|CS|" + repr(solver_cfg))) + "}",
        kind=ModelKind.CS,
        variables=tuple(variables),
        state_vrs=md.state_vrs,
        derivative_vrs=md.derivative_vrs,
        input_vrs=md.input_vrs,
        output_vrs=out_vrs,
        provides_directional_derivative=md.provides_directional_derivative,
        can_get_set_state=md.can_get_set_state,
        n_event_indicators=0,
        description=md.description,
    )
    factory = type(
        md.model_name + "CS",
        (CoSimulationWrapper,),
        {"inner_description": md, "inner_factory": bundle.factory, "solver_cfg": solver_cfg},
    )
    return ModelBundle(cs_md, factory)


BUILTIN_MODELS = {
    "frictionless": make_frictionless_pendulum,
    "friction": make_friction_pendulum,
}

# native implementations by model name, used for descriptions read from disk
NATIVE_FACTORIES = {
    "FrictionlessPendulum": FrictionlessPendulum,
    "FrictionPendulum": FrictionPendulum,
    "LinearModel": LinearModel,
}
