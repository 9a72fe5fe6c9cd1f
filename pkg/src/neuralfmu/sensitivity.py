"""Model Jacobians and loss gradients of ME NeuralFMUs.

Jacobians over a model come from its directional derivatives or from
central finite differences (co-simulation models are probed from a state
snapshot).  Loss gradients are available by three routes:

* :func:`grad_discretize_backprop` - reverse mode through an unrolled
  fixed-step RK4 solve,
* :func:`grad_forward_sensitivity` - the state augmented by ``dx/dp``,
* :func:`grad_backward_adjoint` - the adjoint ODE solved backwards in time,

with :func:`finite_difference_loss_gradient` as a reference oracle.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ModelInstance, ModelKind
from .errors import CapabilityError, EventError, SolverError
from .odesolve import EventSpec, SolverConfig, _crossings, _earliest_event, rk4_step, solve


class Strategy(str, enum.Enum):
    DIRECTIONAL = "DirectionalDerivative"
    FINITE_DIFFERENCE = "FiniteDifference"


@dataclass(frozen=True)
class JacobianProvider:
    strategy: Strategy = Strategy.DIRECTIONAL
    h_rel: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.h_rel > 0.0:
            raise ValueError("h_rel must be positive")

    @classmethod
    def directional(cls) -> "JacobianProvider":
        return cls(Strategy.DIRECTIONAL)

    @classmethod
    def finite_difference(cls, h_rel: float = 1e-6) -> "JacobianProvider":
        return cls(Strategy.FINITE_DIFFERENCE, h_rel)


def default_provider(instance: ModelInstance) -> JacobianProvider:
    """Directional derivatives when the model has them, finite differences otherwise."""
    if instance.description.provides_directional_derivative:
        return JacobianProvider.directional()
    return JacobianProvider.finite_difference()


def _default_vrs(instance):
    md = instance.description
    if instance.kind is ModelKind.ME:
        return list(md.derivative_vrs), list(md.state_vrs)
    return list(md.output_vrs), list(md.input_vrs)


def model_jacobian(instance: ModelInstance, provider: Optional[JacobianProvider] = None, h=None, unknowns=None, knowns=None):
    """Jacobian ``d unknowns / d knowns`` at the instance's current state.

    Defaults: ME ``d xdot / d x``; CS ``d y / d u``.  With directional
    derivatives a CS model reports the instantaneous ``dy(t)/du(t)``; with
    finite differences and a macro step ``h`` it reports the macro-step
    Jacobian ``dy(t+h)/du(t)``.
    """
    if provider is None:
        provider = default_provider(instance)
    du, dk = _default_vrs(instance)
    unknowns = du if unknowns is None else list(unknowns)
    knowns = dk if knowns is None else list(knowns)
    n_in = len(knowns)
    jac = np.empty((len(unknowns), n_in))
    if provider.strategy is Strategy.DIRECTIONAL:
        if not instance.description.provides_directional_derivative:
            raise CapabilityError(f"{instance.description.model_name} provides no directional derivatives")
        seed = np.zeros(n_in)
        for i in range(n_in):
            seed[:] = 0.0
            seed[i] = 1.0
            jac[:, i] = instance.get_directional_derivative(unknowns, knowns, seed)
        return jac
    if instance.kind is ModelKind.CS and h is not None:
        return _fd_cs(instance, provider.h_rel, h, unknowns, knowns)
    return _fd_instantaneous(instance, provider.h_rel, unknowns, knowns)


def _fd_instantaneous(instance, h_rel, unknowns, knowns):
    md = instance.description
    base = instance.get_real(knowns)
    state_index = {vr: i for i, vr in enumerate(md.state_vrs)}
    is_me = instance.kind is ModelKind.ME
    x0 = instance.get_continuous_states()

    def put(vr, value):
        if vr in state_index:
            if not is_me:
                raise CapabilityError("perturbing states of a CS model needs a macro step h")
            x = instance.get_continuous_states()
            x[state_index[vr]] = value
            instance.set_continuous_states(x)
        else:
            instance.set_real([vr], [value])

    jac = np.empty((len(unknowns), len(knowns)))
    try:
        for i, vr in enumerate(knowns):
            step = h_rel * max(1.0, abs(base[i]))
            put(vr, base[i] + step)
            y_plus = instance.get_real(unknowns)
            put(vr, base[i] - step)
            y_minus = instance.get_real(unknowns)
            put(vr, base[i])
            jac[:, i] = (y_plus - y_minus) / (2.0 * step)
    finally:
        if is_me:
            instance.set_continuous_states(x0)
    return jac


def _fd_cs(instance, h_rel, h, unknowns, knowns):
    if not instance.description.can_get_set_state:
        raise CapabilityError("finite differences on a CS model need get/set state")
    snap = instance.get_state()
    t = instance.t
    base = instance.get_real(knowns)
    jac = np.empty((len(unknowns), len(knowns)))
    try:
        for i, vr in enumerate(knowns):
            step = h_rel * max(1.0, abs(base[i]))
            ys = []
            for sign in (1.0, -1.0):
                instance.set_state(snap)
                instance.set_real([vr], [base[i] + sign * step])
                instance.do_step(t, h)
                ys.append(instance.get_real(unknowns))
            jac[:, i] = (ys[0] - ys[1]) / (2.0 * step)
    finally:
        instance.set_state(snap)
    return jac


def vjp(instance: ModelInstance, provider: Optional[JacobianProvider], upstream, **kw) -> np.ndarray:
    """``J.T @ upstream`` for the model Jacobian at the current state."""
    return model_jacobian(instance, provider, **kw).T @ np.asarray(upstream, dtype=np.float64)


def jvp(instance: ModelInstance, provider: Optional[JacobianProvider], seed, **kw) -> np.ndarray:
    """``J @ seed`` for the model Jacobian at the current state."""
    return model_jacobian(instance, provider, **kw) @ np.asarray(seed, dtype=np.float64)


# -- loss gradients ------------------------------------------------------------
#
# The gradient routines work on any "differentiable system" exposing
#   n_x, n_params, solver_cfg
#   begin(x0, params, t0)            prepare for a rollout (e.g. reset a model)
#   rhs(t, x, params) -> xdot
#   rhs_taped(t, x, params) -> (xdot, tape)
#   rhs_vjp(tape, g, gp) -> gx       gx = (df/dx)^T g, gp += (df/dp)^T g
#   event_spec(params) -> EventSpec | None
# and any objective exposing t0, x0, times, loss(states), loss_grad(states).


class GradientMethod(str, enum.Enum):
    DISCRETIZE_BACKPROP = "DiscretizeBackprop"
    FORWARD_SENSITIVITY = "ForwardSensitivity"
    BACKWARD_ADJOINT = "BackwardAdjoint"


class ScalarLinearSystem:
    """``xdot = p * x`` with a single scalar state and parameter."""

    n_x = 1
    n_params = 1

    def __init__(self, solver_cfg: Optional[SolverConfig] = None):
        self.solver_cfg = SolverConfig.adaptive(1e-10, 1e-12) if solver_cfg is None else solver_cfg

    def begin(self, x0, params, t0):
        pass

    def rhs(self, t, x, params):
        return params[0] * x

    def rhs_taped(self, t, x, params):
        return params[0] * x, (x.copy(), params[0])

    def rhs_vjp(self, tape, g, gp):
        x, p = tape
        gp[0] += float(g @ x)
        return p * g

    def event_spec(self, params):
        return None


@dataclass(frozen=True)
class TerminalObjective:
    """Loss ``w . x(t1)`` for a rollout started at ``x0``."""

    x0: np.ndarray
    t1: float
    weights: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=np.float64)))
        object.__setattr__(self, "weights", np.atleast_1d(np.asarray(self.weights, dtype=np.float64)))

    @property
    def times(self):
        return np.array([self.t1])

    def loss(self, states):
        return float(states[-1] @ self.weights)

    def loss_grad(self, states):
        g = np.zeros_like(states)
        g[-1] = self.weights
        return g


def rollout(system, data, params, cfg: Optional[SolverConfig] = None, dense=False):
    """Solve ``system`` from ``data.x0`` and sample it at ``data.times``."""
    params = np.asarray(params, dtype=np.float64)
    cfg = system.solver_cfg if cfg is None else cfg
    system.begin(data.x0, params, data.t0)
    times = np.asarray(data.times, dtype=np.float64)
    t_end = times[-1] if times.size else data.t0

    def rhs(t, x):
        return system.rhs(t, x, params)

    return solve(rhs, data.x0, (data.t0, t_end), cfg, system.event_spec(params), times, dense)


def rollout_loss(system, data, params, cfg: Optional[SolverConfig] = None) -> float:
    if len(data.times) == 0:
        return 0.0
    return data.loss(rollout(system, data, params, cfg).states)


def finite_difference_gradient(fn, params, h_rel: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn`` with step ``h_rel * max(1, |p_i|)``."""
    p = np.array(params, dtype=np.float64).reshape(-1)
    grad = np.empty_like(p)
    for i in range(p.size):
        step = h_rel * max(1.0, abs(p[i]))
        orig = p[i]
        p[i] = orig + step
        f_plus = fn(p)
        p[i] = orig - step
        f_minus = fn(p)
        p[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def finite_difference_loss_gradient(system, data, params, h_rel: float = 1e-6, fixed_h: float = 1e-2) -> np.ndarray:
    """FD oracle over the full loss of a fixed-step RK4 rollout.

    A fixed step keeps the loss smooth in the parameters; adaptive step
    selection would add noise of the order ``rtol / step``.
    """
    cfg = SolverConfig.rk4(fixed_h)
    return finite_difference_gradient(lambda p: rollout_loss(system, data, p, cfg), params, h_rel)


def _grid_indices(times, t0, h):
    k = np.rint((np.asarray(times) - t0) / h).astype(np.int64)
    if times.size and (np.max(np.abs(t0 + k * h - times)) > 1e-9 * max(1.0, h) or k[0] < 0):
        raise ValueError("dataset times must lie on the fixed step grid t0 + k*h")
    return k


def _rk4_taped(system, t, x, p, h):
    k1, T1 = system.rhs_taped(t, x, p)
    k2, T2 = system.rhs_taped(t + 0.5 * h, x + (0.5 * h) * k1, p)
    k3, T3 = system.rhs_taped(t + 0.5 * h, x + (0.5 * h) * k2, p)
    k4, T4 = system.rhs_taped(t + h, x + h * k3, p)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise SolverError(f"non-finite state at t={t + h:.6g}")
    return x_next, (h, T1, T2, T3, T4)


def _rk4_step_vjp(system, rec, abar, gp):
    """Adjoint of one RK4 step: returns d/dx_n given ``abar = d/dx_{n+1}``."""
    h, T1, T2, T3, T4 = rec
    xbar = abar.copy()
    gx = system.rhs_vjp(T4, (h / 6.0) * abar, gp)
    xbar += gx
    kbar = (h / 3.0) * abar + h * gx
    gx = system.rhs_vjp(T3, kbar, gp)
    xbar += gx
    kbar = (h / 3.0) * abar + (0.5 * h) * gx
    gx = system.rhs_vjp(T2, kbar, gp)
    xbar += gx
    kbar = (h / 6.0) * abar + (0.5 * h) * gx
    xbar += system.rhs_vjp(T1, kbar, gp)
    return xbar


def grad_discretize_backprop(system, data, params, fixed_h: float = 1e-2, return_loss: bool = False):
    """Reverse mode through an unrolled fixed-step RK4 rollout.

    Events split the step at the located event time; the jump itself is
    treated as having identity sensitivity (event times are not
    differentiated).
    """
    p = np.asarray(params, dtype=np.float64)
    gp = np.zeros(system.n_params)
    times = np.asarray(data.times, dtype=np.float64)
    if times.size == 0:
        return (0.0, gp) if return_loss else gp
    grid = _grid_indices(times, data.t0, fixed_h)
    n_grid = int(grid[-1])
    system.begin(data.x0, p, data.t0)
    x = np.array(data.x0, dtype=np.float64)
    states = np.empty((n_grid + 1, x.size))
    states[0] = x
    events = system.event_spec(p)
    z = events.indicator_fn(data.t0, x) if events is not None else None
    steps = []
    grid_after = {}  # step index -> grid point reached by it
    tol = 1e-9 * fixed_h
    t = data.t0
    for k in range(n_grid):
        t_end = data.t0 + (k + 1) * fixed_h
        while t < t_end - tol:
            x_new, rec = _rk4_taped(system, t, x, p, t_end - t)
            t_new = t_end
            if events is not None:
                z_new = events.indicator_fn(t_end, x_new)
                idx = _crossings(z, z_new)
                if idx:
                    t_s, x_s = t, x

                    def state_at(tt):
                        return x_s if tt <= t_s else rk4_step(lambda ti, xi: system.rhs(ti, xi, p), t_s, x_s, tt - t_s)

                    t_e = _earliest_event(events, idx, t, t_end, state_at)
                    if t_e < t_end - tol:
                        x_new, rec = _rk4_taped(system, t, x, p, t_e - t)
                        t_new = t_e
                    steps.append(rec)
                    x = np.array(events.handler(t_new, x_new), dtype=np.float64)
                    t = t_new
                    z = events.indicator_fn(t, x)
                    continue
                z = z_new
            steps.append(rec)
            x, t = x_new, t_new
        t = t_end
        grid_after[len(steps) - 1] = k + 1
        states[k + 1] = x
    sampled = states[grid]
    G = data.loss_grad(sampled)
    gstate = np.zeros_like(states)
    np.add.at(gstate, grid, G)
    abar = np.zeros(x.size)
    for j in range(len(steps) - 1, -1, -1):
        if j in grid_after:
            abar = abar + gstate[grid_after[j]]
        abar = _rk4_step_vjp(system, steps[j], abar, gp)
    if return_loss:
        return data.loss(sampled), gp
    return gp


def _jacobians(system, tape, n_x, n_p):
    jx = np.empty((n_x, n_x))
    jp = np.zeros((n_x, n_p))
    e = np.zeros(n_x)
    for i in range(n_x):
        e[:] = 0.0
        e[i] = 1.0
        jx[i] = system.rhs_vjp(tape, e, jp[i])
    return jx, jp


def grad_forward_sensitivity(system, data, params, return_loss: bool = False):
    """Integrate ``[x, dx/dp]`` with ``dS/dt = J_x S + df/dp``.

    ``J_x`` and ``df/dp`` come row by row from ``n_x`` reverse passes
    through the system, which composes the chain and model Jacobians.
    Event jumps keep the sensitivities unchanged.
    """
    p = np.asarray(params, dtype=np.float64)
    n_x, n_p = system.n_x, system.n_params
    if n_p > 10 * n_x:
        warnings.warn(
            f"forward sensitivities integrate {(1 + n_p) * n_x} equations for {n_p} parameters; "
            "reverse-mode methods scale better",
            RuntimeWarning,
            stacklevel=2,
        )
    times = np.asarray(data.times, dtype=np.float64)
    if times.size == 0:
        return (0.0, np.zeros(n_p)) if return_loss else np.zeros(n_p)
    system.begin(data.x0, p, data.t0)

    def aug_rhs(t, y):
        x = y[:n_x]
        S = y[n_x:].reshape(n_x, n_p)
        f, tape = system.rhs_taped(t, x, p)
        jx, jp = _jacobians(system, tape, n_x, n_p)
        return np.concatenate((f, (jx @ S + jp).ravel()))

    y0 = np.zeros((1 + n_p) * n_x)
    y0[:n_x] = data.x0
    assert y0.size == (1 + n_p) * n_x
    events = system.event_spec(p)
    aug_events = None
    if events is not None:
        aug_events = EventSpec(
            lambda t, y: events.indicator_fn(t, y[:n_x]),
            lambda t, y: np.concatenate((events.handler(t, y[:n_x]), y[n_x:])),
        )
    traj = solve(aug_rhs, y0, (data.t0, times[-1]), system.solver_cfg, aug_events, times)
    xs = traj.states[:, :n_x]
    G = data.loss_grad(xs)
    grad = np.zeros(n_p)
    for i in range(times.size):
        grad += G[i] @ traj.states[i, n_x:].reshape(n_x, n_p)
    if return_loss:
        return data.loss(xs), grad
    return grad


def grad_backward_adjoint(system, data, params, return_loss: bool = False):
    """Solve the adjoint ODE backwards in time.

    With ``tau = t_end - t`` the adjoint ``a = dL/dx(t)`` and the parameter
    gradient ``g`` follow ``da/dtau = J_x^T a`` and ``dg/dtau = (df/dp)^T a``,
    with the forward state taken from the dense interpolant.  Each sample
    adds its loss gradient to ``a`` as a jump.  Trajectories with events
    are rejected.
    """
    p = np.asarray(params, dtype=np.float64)
    n_x, n_p = system.n_x, system.n_params
    times = np.asarray(data.times, dtype=np.float64)
    if times.size == 0:
        return (0.0, np.zeros(n_p)) if return_loss else np.zeros(n_p)
    traj = rollout(system, data, p, dense=True)
    if traj.event_times:
        raise EventError(
            f"backward adjoint needs an event-free trajectory, found {len(traj.event_times)} event(s) "
            f"starting at t={traj.event_times[0]:.6g}"
        )
    G = data.loss_grad(traj.states)
    t_end = float(times[-1])
    dense = traj.dense

    def adj_rhs(tau, y):
        t = t_end - tau
        x = dense(t)
        _, tape = system.rhs_taped(t, x, p)
        dg = np.zeros(n_p)
        da = system.rhs_vjp(tape, y[:n_x], dg)
        return np.concatenate((da, dg))

    cfg = system.solver_cfg
    y = np.zeros(n_x + n_p)
    tau = 0.0
    bounds = list(times[::-1]) + [data.t0]
    for i, t_next in enumerate(bounds):
        tau_next = t_end - t_next
        if tau_next > tau:
            y = solve(adj_rhs, y, (tau, tau_next), cfg).x_final
            tau = tau_next
        if i < times.size:
            y[:n_x] += G[times.size - 1 - i]
    grad = y[n_x:]
    if return_loss:
        return data.loss(traj.states), grad
    return grad


def loss_and_gradient(system, data, params, method=GradientMethod.DISCRETIZE_BACKPROP, fixed_h: float = 1e-2):
    method = GradientMethod(method)
    if method is GradientMethod.DISCRETIZE_BACKPROP:
        return grad_discretize_backprop(system, data, params, fixed_h, return_loss=True)
    if method is GradientMethod.FORWARD_SENSITIVITY:
        return grad_forward_sensitivity(system, data, params, return_loss=True)
    return grad_backward_adjoint(system, data, params, return_loss=True)
