"""Explicit ODE integration: fixed-step RK4 and adaptive Dormand-Prince 5(4).

Both integrators support state events.  An event is a sign change of one
component of an indicator vector; it is located by bisection (on the dense
interpolant for the adaptive method, by re-stepping for RK4), the event
handler may re-initialize the state, and integration restarts from the
event time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EventError, SolverError

EVENT_Z_TOL = 1e-10
EVENT_T_TOL = 1e-12


class Method(str, enum.Enum):
    RK4_FIXED = "RK4Fixed"
    ADAPTIVE_RK45 = "AdaptiveRK45"


@dataclass(frozen=True)
class SolverConfig:
    """Integrator settings.

    For ``RK4Fixed`` the step is ``h0``; ``h_min``/``h_max`` only matter for
    the adaptive method.
    """

    method: Method = Method.ADAPTIVE_RK45
    h0: float = 1e-3
    h_min: float = 1e-12
    h_max: float = math.inf
    rtol: float = 1e-6
    atol: float = 1e-9
    max_steps: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not (0.0 < self.h_min <= self.h0 <= self.h_max):
            raise ValueError(f"need 0 < h_min <= h0 <= h_max, got {self.h_min}, {self.h0}, {self.h_max}")
        if not (self.rtol > 0.0 and self.atol > 0.0):
            raise ValueError("rtol and atol must be positive")
        if int(self.max_steps) < 1:
            raise ValueError("max_steps must be positive")

    @classmethod
    def rk4(cls, h: float, **kw) -> "SolverConfig":
        return cls(method=Method.RK4_FIXED, h0=h, h_min=min(h, kw.pop("h_min", h)), h_max=h, **kw)

    @classmethod
    def adaptive(cls, rtol: float = 1e-6, atol: Optional[float] = None, **kw) -> "SolverConfig":
        if atol is None:
            atol = rtol * 1e-3
        return cls(method=Method.ADAPTIVE_RK45, rtol=rtol, atol=atol, **kw)


@dataclass
class EventSpec:
    """State events: ``indicator_fn(t, x) -> z`` and ``handler(t, x) -> x_new``."""

    indicator_fn: Callable[[float, np.ndarray], np.ndarray]
    handler: Callable[[float, np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    event_times: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    dense: Optional["DenseOutput"] = None
    x_final: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim == 1:
            self.states = self.states.reshape(len(self.times), -1)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("row count of states must match times")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly ascending")

    def __len__(self):
        return self.times.shape[0]


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

# continuous extension (Shampine), x(t + th*h) = x + h * K.T @ _P @ [th, th^2, th^3, th^4]
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite state at t={t:.6g}")


def rk4_step(rhs, t: float, x: np.ndarray, h: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step."""
    if not h > 0.0:
        raise ValueError("h must be positive")
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * h, x + (0.5 * h) * k1)
    k3 = rhs(t + 0.5 * h, x + (0.5 * h) * k2)
    k4 = rhs(t + h, x + h * k3)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(x_next, t + h)
    return x_next


def _dopri_stages(rhs, t, x, h, k1=None):
    n = x.shape[0]
    K = np.empty((7, n))
    K[0] = rhs(t, x) if k1 is None else k1
    for i in range(1, 7):
        K[i] = rhs(t + _C[i] * h, x + h * (_A[i] @ K[:i]))
    return K


def _error_norm(err_vec, x, x_new, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
    if err_vec.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((err_vec / scale) ** 2)))


def _next_step(h, err) -> float:
    if err == 0.0:
        factor = _MAX_FACTOR
    elif not np.isfinite(err):
        factor = _MIN_FACTOR
    else:
        factor = min(_MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err ** -0.2))
    return h * factor


def _dopri_step(rhs, t, x, h, rtol, atol, k1=None):
    K = _dopri_stages(rhs, t, x, h, k1)
    # last stage is evaluated at the propagated solution (FSAL)
    x_next = x + h * (_A[6] @ K[:6])
    err = _error_norm(h * (_E @ K), x, x_next, rtol, atol)
    if not np.all(np.isfinite(x_next)):
        err = math.inf
    return x_next, err, _next_step(h, err), K


def adaptive_step(rhs, t: float, x: np.ndarray, h: float, rtol: float, atol: float):
    """One Dormand-Prince 5(4) attempt.

    Returns ``(x_next, error_estimate, h_next)``; the step is acceptable iff
    ``error_estimate <= 1``.
    """
    x_next, err, h_next, _ = _dopri_step(rhs, t, np.asarray(x, dtype=np.float64), h, rtol, atol)
    return x_next, err, h_next


def _interp(t0, h, x0, K, t):
    th = (t - t0) / h
    return x0 + h * (K.T @ (_P @ np.array([th, th * th, th ** 3, th ** 4])))


class DenseOutput:
    """Piecewise 4th-order interpolant over all accepted adaptive steps."""

    def __init__(self):
        self._t0 = []
        self._t1 = []
        self._h = []
        self._x = []
        self._K = []

    def append(self, t0, t1, h, x, K):
        self._t0.append(t0)
        self._t1.append(t1)
        self._h.append(h)
        self._x.append(x.copy())
        self._K.append(K.copy())

    @property
    def t_min(self):
        return self._t0[0]

    @property
    def t_max(self):
        return self._t1[-1]

    def __call__(self, t: float) -> np.ndarray:
        if not self._t0:
            raise ValueError("empty dense output")
        i = int(np.searchsorted(self._t1, t, side="left"))
        i = min(max(i, 0), len(self._t0) - 1)
        return _interp(self._t0[i], self._h[i], self._x[i], self._K[i], t)


def locate_event(indicator, t_lo: float, t_hi: float, dense_state) -> float:
    """Bisect for a sign change of ``indicator(t, x)`` with ``x = dense_state(t)``.

    Stops when the bracket is narrower than 1e-12 s or ``|z| < 1e-10``.
    The returned time is on the post-crossing side unless it satisfies the
    ``|z|`` criterion directly.
    """
    z_lo = float(indicator(t_lo, dense_state(t_lo)))
    z_hi = float(indicator(t_hi, dense_state(t_hi)))
    if z_hi == 0.0:
        return t_hi
    if z_lo == 0.0:
        return t_lo
    if np.sign(z_lo) == np.sign(z_hi):
        raise EventError(f"indicator does not change sign on [{t_lo}, {t_hi}]")
    return _bisect(indicator, t_lo, t_hi, z_lo, dense_state)


def _bisect(indicator, t_lo, t_hi, z_lo, dense_state):
    s_lo = np.sign(z_lo)
    while t_hi - t_lo > EVENT_T_TOL:
        t_mid = 0.5 * (t_lo + t_hi)
        if t_mid <= t_lo or t_mid >= t_hi:
            break
        z_mid = float(indicator(t_mid, dense_state(t_mid)))
        if abs(z_mid) < EVENT_Z_TOL:
            return t_mid
        if np.sign(z_mid) == s_lo:
            t_lo = t_mid
        else:
            t_hi = t_mid
    return t_hi


def _crossings(z_old, z_new):
    """Indices whose indicator left a nonzero sign (zeros at the start never count)."""
    return [i for i in range(z_old.shape[0]) if z_old[i] != 0.0 and (z_new[i] == 0.0 or np.sign(z_new[i]) != np.sign(z_old[i]))]


def _earliest_event(events, idx, t_lo, t_hi, state_at):
    t_best = t_hi
    for i in idx:
        t_e = _bisect_component(events, i, t_lo, t_hi, state_at)
        t_best = min(t_best, t_e)
    return t_best


def _bisect_component(events, i, t_lo, t_hi, state_at):
    def z(t, x):
        return events.indicator_fn(t, x)[i]

    return _bisect(z, t_lo, t_hi, float(z(t_lo, state_at(t_lo))), state_at)


class _Recorder:
    def __init__(self, t0, x0, save_at):
        self.times = []
        self.states = []
        self.save_at = None if save_at is None else np.asarray(save_at, dtype=np.float64)
        self.k = 0
        if self.save_at is None:
            self.push(t0, x0)
        else:
            while self.k < self.save_at.size and self.save_at[self.k] <= t0:
                self.push(self.save_at[self.k], x0)
                self.k += 1

    def push(self, t, x):
        self.times.append(float(t))
        self.states.append(np.array(x, dtype=np.float64))

    def emit_until(self, t_end, interp):
        """Record every pending save point ``<= t_end`` (save_at mode)."""
        if self.save_at is None:
            return
        while self.k < self.save_at.size and self.save_at[self.k] <= t_end:
            self.push(self.save_at[self.k], interp(self.save_at[self.k]))
            self.k += 1

    def next_save(self):
        if self.save_at is None or self.k >= self.save_at.size:
            return math.inf
        return self.save_at[self.k]

    def result(self, n_x):
        states = np.array(self.states).reshape(len(self.times), n_x)
        return np.array(self.times), states


def solve(
    rhs,
    x0,
    t_span,
    cfg: SolverConfig = SolverConfig(),
    events: Optional[EventSpec] = None,
    save_at=None,
    dense: bool = False,
) -> Trajectory:
    """Integrate ``dx/dt = rhs(t, x)`` over ``t_span``.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, x) -> dx/dt``.
    x0 : array_like
        Initial state (finite).
    t_span : (float, float)
        Increasing integration interval.
    cfg : SolverConfig
    events : EventSpec, optional
    save_at : array_like, optional
        Output times inside ``t_span``.  Without it every accepted step is
        recorded (including ``t0``).
    dense : bool
        Keep the piecewise interpolant (adaptive method only) in
        ``Trajectory.dense``.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 >= t0:
        raise ValueError(f"t_span must be increasing, got {t_span}")
    x = np.array(x0, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    if save_at is not None:
        save_at = np.asarray(save_at, dtype=np.float64).reshape(-1)
        if save_at.size and (save_at[0] < t0 - 1e-12 or save_at[-1] > t1 + 1e-12):
            raise ValueError("save_at must lie inside t_span")
        if save_at.size > 1 and not np.all(np.diff(save_at) > 0):
            raise ValueError("save_at must be strictly ascending")
    if cfg.method is Method.RK4_FIXED:
        if dense:
            raise ValueError("dense output needs the adaptive method")
        return _solve_rk4(rhs, x, t0, t1, cfg, events, save_at)
    return _solve_adaptive(rhs, x, t0, t1, cfg, events, save_at, dense)


def _solve_adaptive(rhs, x, t0, t1, cfg, events, save_at, dense):
    n_x = x.shape[0]
    rec = _Recorder(t0, x, save_at)
    dense_out = DenseOutput() if dense else None
    t = t0
    h = min(max(cfg.h0, cfg.h_min), cfg.h_max)
    k1 = rhs(t, x)
    z = events.indicator_fn(t, x) if events is not None else None
    event_times = []
    n_acc = n_rej = n_evals = 0
    n_evals += 1
    span = max(abs(t0), abs(t1), 1.0)
    while t < t1:
        remaining = t1 - t
        if remaining <= 4 * np.finfo(float).eps * span:
            break
        last = h >= remaining
        h_try = remaining if last else h
        if n_acc + n_rej >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
        x_new, err, h_next, K = _dopri_step(rhs, t, x, h_try, cfg.rtol, cfg.atol, k1)
        n_evals += 6
        if err > 1.0:
            n_rej += 1
            h = h_next
            if h < cfg.h_min:
                if not np.isfinite(err):
                    raise SolverError(f"non-finite state at t={t:.6g}")
                raise SolverError(f"step size underflow (h={h:.3g} < h_min={cfg.h_min:.3g}) at t={t:.6g}")
            continue
        n_acc += 1
        t_new = t1 if last else t + h_try

        def interp(tt, t_=t, h_=h_try, x_=x, K_=K):
            return _interp(t_, h_, x_, K_, tt)

        if events is not None:
            z_new = events.indicator_fn(t_new, x_new)
            idx = _crossings(z, z_new)
            if idx:
                t_e = _earliest_event(events, idx, t, t_new, lambda tt: x_new if tt == t_new else interp(tt))
                x_e = x_new if t_e == t_new else interp(t_e)
                if dense_out is not None:
                    dense_out.append(t, t_e, h_try, x, K)
                rec.emit_until(t_e, interp)
                x = np.array(events.handler(t_e, x_e), dtype=np.float64)
                _check_finite(x, t_e)
                event_times.append(t_e)
                t = t_e
                if save_at is None:
                    rec.push(t, x)
                k1 = rhs(t, x)
                z = events.indicator_fn(t, x)
                n_evals += 1
                h = min(max(h_try, cfg.h_min), cfg.h_max)
                continue
            z = z_new
        if dense_out is not None:
            dense_out.append(t, t_new, h_try, x, K)
        rec.emit_until(t_new, lambda tt: x_new if tt == t_new else interp(tt))
        t, x, k1 = t_new, x_new, K[6]
        if save_at is None:
            rec.push(t, x)
        if not last:
            h = min(max(h_next, cfg.h_min), cfg.h_max)
    rec.emit_until(t1, lambda tt: x)
    times, states = rec.result(n_x)
    stats = {"accepted": n_acc, "rejected": n_rej, "rhs_evals": n_evals, "events": len(event_times)}
    return Trajectory(times, states, event_times, stats, dense_out, x.copy())


def _solve_rk4(rhs, x, t0, t1, cfg, events, save_at):
    n_x = x.shape[0]
    rec = _Recorder(t0, x, save_at)
    h0 = cfg.h0
    t = t0
    k = 0  # grid index
    z = events.indicator_fn(t, x) if events is not None else None
    event_times = []
    n_steps = 0
    tol = 1e-9 * h0
    while t < t1 - tol:
        while t0 + (k + 1) * h0 <= t + tol:
            k += 1
        t_target = min(t0 + (k + 1) * h0, t1, rec.next_save())
        for cand in (t0 + (k + 1) * h0, t1, rec.next_save()):
            if abs(cand - t_target) <= tol:
                t_target = cand if cand != math.inf else t_target
        h = t_target - t
        if n_steps >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
        x_new = rk4_step(rhs, t, x, h)
        n_steps += 1
        if events is not None:
            z_new = events.indicator_fn(t_target, x_new)
            idx = _crossings(z, z_new)
            if idx:
                t_s, x_s = t, x

                def state_at(tt):
                    return x_s if tt <= t_s else rk4_step(rhs, t_s, x_s, tt - t_s)

                t_e = _earliest_event(events, idx, t, t_target, state_at)
                x_e = state_at(t_e)
                x = np.array(events.handler(t_e, x_e), dtype=np.float64)
                event_times.append(t_e)
                t = t_e
                if save_at is None:
                    rec.push(t, x)
                z = events.indicator_fn(t, x)
                continue
            z = z_new
        t, x = t_target, x_new
        if abs(t - (t0 + (k + 1) * h0)) <= tol:
            k += 1
        if save_at is None:
            rec.push(t, x)
        else:
            rec.emit_until(t + tol, lambda tt: x)
    rec.emit_until(t1 + tol, lambda tt: x)
    times, states = rec.result(n_x)
    stats = {"accepted": n_steps, "rejected": 0, "rhs_evals": 4 * n_steps, "events": len(event_times)}
    return Trajectory(times, states, event_times, stats, None, x.copy())
