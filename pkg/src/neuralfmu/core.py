"""Model-exchange / co-simulation instance contract.

The call names and lifecycle follow FMI 2.0: a model is described by an
immutable :class:`ModelDescription` and simulated through a stateful
:class:`ModelInstance` that moves through the phases

    Instantiated -> InitializationMode -> ContinuousMode -> Terminated

with :meth:`ModelInstance.reset` returning to ``Instantiated`` from anywhere.
Native models subclass :class:`ModelInstance` and fill in a handful of hooks;
everything that touches phases, causality and snapshots lives here.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import (
    CapabilityError,
    CausalityError,
    DescriptionError,
    NeuralFMUError,
    PhaseError,
)

#: Tolerance used to check that ``do_step(t, h)`` is called at the current time.
STEP_TIME_TOL = 1e-9


class UnknownVariableError(NeuralFMUError, LookupError):
    """A value reference or variable name does not resolve."""


class Causality(str, enum.Enum):
    PARAMETER = "parameter"
    INPUT = "input"
    OUTPUT = "output"
    LOCAL = "local"


class Variability(str, enum.Enum):
    CONSTANT = "constant"
    FIXED = "fixed"
    CONTINUOUS = "continuous"


class ModelKind(str, enum.Enum):
    ME = "ME"
    CS = "CS"
    BOTH = "both"

    def supports(self, kind: "ModelKind") -> bool:
        return self is ModelKind.BOTH or self is kind


class Phase(enum.Enum):
    INSTANTIATED = "Instantiated"
    INITIALIZATION = "InitializationMode"
    CONTINUOUS = "ContinuousMode"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class ScalarVariable:
    """One real-valued model variable."""

    name: str
    vr: int
    causality: Causality = Causality.LOCAL
    variability: Variability = Variability.CONTINUOUS
    start: Optional[float] = None
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "causality", Causality(self.causality))
        object.__setattr__(self, "variability", Variability(self.variability))
        if not isinstance(self.name, str) or not self.name:
            raise DescriptionError("variable name must be a non-empty string")
        if isinstance(self.vr, bool) or not isinstance(self.vr, (int, np.integer)) or self.vr < 0:
            raise DescriptionError(f"variable {self.name!r}: value reference must be an unsigned integer")
        object.__setattr__(self, "vr", int(self.vr))
        if self.start is not None:
            object.__setattr__(self, "start", float(self.start))


@dataclass(frozen=True)
class ModelDescription:
    """Static interface of a model.

    Validated on construction; an instance of this class always satisfies
    the pairing and resolution invariants, so downstream code never
    re-checks them.
    """

    model_name: str
    guid: str
    kind: ModelKind
    variables: tuple = ()
    state_vrs: tuple = ()
    derivative_vrs: tuple = ()
    input_vrs: tuple = ()
    output_vrs: tuple = ()
    provides_directional_derivative: bool = False
    can_get_set_state: bool = False
    n_event_indicators: int = 0
    description: str = ""
    _by_vr: dict = field(init=False, repr=False, compare=False)
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        try:
            set_(self, "kind", ModelKind(self.kind))
        except ValueError:
            raise DescriptionError(f"unknown model kind {self.kind!r}") from None
        set_(self, "variables", tuple(self.variables))
        for name in ("state_vrs", "derivative_vrs", "input_vrs", "output_vrs"):
            set_(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.model_name:
            raise DescriptionError("model_name must be non-empty")
        if not self.guid:
            raise DescriptionError("guid must be non-empty")
        if int(self.n_event_indicators) < 0:
            raise DescriptionError("n_event_indicators must be non-negative")
        set_(self, "n_event_indicators", int(self.n_event_indicators))
        set_(self, "provides_directional_derivative", bool(self.provides_directional_derivative))
        set_(self, "can_get_set_state", bool(self.can_get_set_state))

        by_vr, by_name = {}, {}
        for var in self.variables:
            if not isinstance(var, ScalarVariable):
                raise DescriptionError(f"expected ScalarVariable, got {type(var).__name__}")
            if var.vr in by_vr:
                raise DescriptionError(f"duplicate value reference {var.vr}")
            if var.name in by_name:
                raise DescriptionError(f"duplicate variable name {var.name!r}")
            by_vr[var.vr] = var
            by_name[var.name] = var
        set_(self, "_by_vr", by_vr)
        set_(self, "_by_name", by_name)

        if len(self.state_vrs) != len(self.derivative_vrs):
            raise DescriptionError(
                f"{len(self.state_vrs)} states but {len(self.derivative_vrs)} derivatives"
            )
        for name in ("state_vrs", "derivative_vrs", "input_vrs", "output_vrs"):
            vrs = getattr(self, name)
            if len(set(vrs)) != len(vrs):
                raise DescriptionError(f"{name} contains duplicates")
            for vr in vrs:
                if vr not in by_vr:
                    raise DescriptionError(f"{name}: dangling value reference {vr}")
        for vr in self.input_vrs:
            if by_vr[vr].causality is not Causality.INPUT:
                raise DescriptionError(f"input list names non-input variable {by_vr[vr].name!r}")

    @property
    def n_states(self) -> int:
        return len(self.state_vrs)

    def variable(self, vr: int) -> ScalarVariable:
        try:
            return self._by_vr[int(vr)]
        except (KeyError, TypeError, ValueError):
            raise UnknownVariableError(f"unknown value reference {vr!r}") from None

    def by_name(self, name: str) -> ScalarVariable:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownVariableError(f"unknown variable {name!r}") from None

    def vr(self, name: str) -> int:
        return self.by_name(name).vr

    def vrs(self, names: Sequence[str]) -> list:
        return [self.vr(n) for n in names]

    def start_vector(self, vrs: Sequence[int]) -> np.ndarray:
        return np.array(
            [0.0 if self.variable(v).start is None else self.variable(v).start for v in vrs],
            dtype=np.float64,
        )


@dataclass(frozen=True, eq=False)
class StateSnapshot:
    """Opaque full capture of an instance's mutable state."""

    lineage: object
    phase: Phase
    setup_done: bool
    t: float
    t_stop: Optional[float]
    x: np.ndarray
    u: np.ndarray
    params: dict
    mode: Any = None


_lineage_ids = itertools.count()


class ModelInstance:
    """Stateful model instance honoring the FMI-style lifecycle contract.

    Subclasses implement the model through these hooks:

    ``_derivatives()``
        state derivative at the current ``(t, x, u)``; ME models only.
    ``_derivative_jacobian()``
        ``d xdot / d [x, u]``, shape ``(n_x, n_x + n_u)``.
    ``_event_indicators()``
        vector of length ``n_event_indicators``.
    ``_handle_event()``
        update discrete mode at an event; may re-initialize ``self.x``.
    ``_value(vr)`` / ``_value_partials(vr)``
        computed variables outside states, derivatives, inputs and parameters.
    ``_mode_get()`` / ``_mode_set(mode)`` / ``_mode_reset()``
        discrete mode flags included in snapshots.
    ``_parameters_changed()``
        called whenever a parameter is written.
    """

    def __init__(self, description: ModelDescription, kind: ModelKind = ModelKind.ME):
        kind = ModelKind(kind)
        if kind is ModelKind.BOTH:
            raise DescriptionError("an instance is either ME or CS, not both")
        if not description.kind.supports(kind):
            raise DescriptionError(f"model {description.model_name!r} does not support {kind.value}")
        self.description = description
        self.kind = kind
        self._lineage = next(_lineage_ids)
        md = description
        self._state_index = {vr: i for i, vr in enumerate(md.state_vrs)}
        self._deriv_index = {vr: i for i, vr in enumerate(md.derivative_vrs)}
        self._input_index = {vr: i for i, vr in enumerate(md.input_vrs)}
        self._param_vrs = [v.vr for v in md.variables if v.causality is Causality.PARAMETER]
        self._set_start_values()

    # -- lifecycle ---------------------------------------------------------

    def _set_start_values(self):
        md = self.description
        self.phase = Phase.INSTANTIATED
        self._setup_done = False
        self.t = 0.0
        self.t_stop = None
        self.x = md.start_vector(md.state_vrs)
        self.u = md.start_vector(md.input_vrs)
        self.params = {vr: md.variable(vr).start for vr in self._param_vrs}
        self._cache = None
        self._mode_reset()
        self._parameters_changed()

    def _require(self, *phases: Phase, op: str):
        if self.phase not in phases:
            allowed = ", ".join(p.value for p in phases)
            raise PhaseError(f"{op} not allowed in {self.phase.value} (requires {allowed})")

    def _require_kind(self, kind: ModelKind, op: str):
        if self.kind is not kind:
            raise PhaseError(f"{op} requires a {kind.value} instance, this is {self.kind.value}")

    def setup_experiment(self, t_start: float = 0.0, t_stop: Optional[float] = None):
        self._require(Phase.INSTANTIATED, op="setup_experiment")
        t_start = float(t_start)
        if not np.isfinite(t_start):
            raise ValueError("t_start must be finite")
        if t_stop is not None and float(t_stop) < t_start:
            raise ValueError(f"t_stop {t_stop} < t_start {t_start}")
        self.t = t_start
        self.t_stop = None if t_stop is None else float(t_stop)
        self._setup_done = True
        self._cache = None

    def enter_initialization(self):
        self._require(Phase.INSTANTIATED, op="enter_initialization")
        if not self._setup_done:
            raise PhaseError("enter_initialization requires setup_experiment first")
        self.phase = Phase.INITIALIZATION

    def exit_initialization(self):
        self._require(Phase.INITIALIZATION, op="exit_initialization")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("initial states are not finite")
        self._initialize_mode()
        self.phase = Phase.CONTINUOUS
        self._cache = None

    def terminate(self):
        self._require(Phase.CONTINUOUS, op="terminate")
        self.phase = Phase.TERMINATED

    def reset(self):
        self._set_start_values()

    def initialize(self, t_start: float = 0.0, t_stop: Optional[float] = None, start: Optional[dict] = None):
        """Shorthand for setup, init-mode writes and exit (``start`` maps names to values)."""
        if self.phase is not Phase.INSTANTIATED:
            self.reset()
        self.setup_experiment(t_start, t_stop)
        self.enter_initialization()
        if start:
            names = list(start)
            self.set_real(self.description.vrs(names), [start[n] for n in names])
        self.exit_initialization()
        return self

    # -- variable access ---------------------------------------------------

    def _check_write(self, var: ScalarVariable):
        c = var.causality
        if self.phase is Phase.TERMINATED:
            raise PhaseError(f"cannot write {var.name!r} after terminate")
        if var.variability is Variability.CONSTANT:
            raise CausalityError(f"{var.name!r} is constant")
        if c is Causality.INPUT:
            return
        if c is Causality.PARAMETER:
            if self.phase is Phase.CONTINUOUS:
                raise CausalityError(f"parameter {var.name!r} is fixed after initialization")
            return
        if var.vr in self._state_index and self.phase in (Phase.INSTANTIATED, Phase.INITIALIZATION):
            # start values of states are settable before initialization completes
            return
        raise CausalityError(f"{c.value} variable {var.name!r} is read-only")

    def set_real(self, vrs: Sequence[int], values):
        vrs = list(vrs)
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if values.ndim != 1 or len(vrs) != values.shape[0]:
            raise ValueError(f"{len(vrs)} value references but {values.size} values")
        md = self.description
        targets = [md.variable(vr) for vr in vrs]
        for var in targets:
            self._check_write(var)
        if not np.all(np.isfinite(values)):
            raise ValueError("set_real values must be finite")
        params_touched = False
        for var, value in zip(targets, values):
            vr = var.vr
            if vr in self._state_index:
                self.x[self._state_index[vr]] = value
            elif vr in self._input_index:
                self.u[self._input_index[vr]] = value
            elif var.causality is Causality.PARAMETER:
                self.params[vr] = float(value)
                params_touched = True
        if params_touched:
            self._parameters_changed()
        self._cache = None

    def get_real(self, vrs: Sequence[int]) -> np.ndarray:
        out = np.empty(len(vrs))
        for k, vr in enumerate(vrs):
            out[k] = self._read(vr)
        return out

    def _read(self, vr: int) -> float:
        var = self.description.variable(vr)
        vr = var.vr
        if vr in self._state_index:
            return self.x[self._state_index[vr]]
        if vr in self._input_index:
            return self.u[self._input_index[vr]]
        if var.causality is Causality.PARAMETER:
            return self.params[vr]
        if vr in self._deriv_index and self.kind is ModelKind.ME:
            return self._cached_derivatives()[self._deriv_index[vr]]
        return float(self._value(vr))

    def get_real_by_name(self, names: Sequence[str]) -> np.ndarray:
        return self.get_real(self.description.vrs(names))

    def set_real_by_name(self, mapping: dict):
        names = list(mapping)
        self.set_real(self.description.vrs(names), [mapping[n] for n in names])

    def set_time(self, t: float):
        self._require(Phase.CONTINUOUS, op="set_time")
        self.t = float(t)
        self._cache = None

    def set_continuous_states(self, x):
        self._require_kind(ModelKind.ME, op="set_continuous_states")
        self._require(Phase.CONTINUOUS, op="set_continuous_states")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.x.shape:
            raise ValueError(f"expected {self.x.shape[0]} states, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("continuous states must be finite")
        self.x[:] = x
        self._cache = None

    def get_continuous_states(self) -> np.ndarray:
        return self.x.copy()

    def _cached_derivatives(self) -> np.ndarray:
        if self._cache is None:
            self._cache = np.asarray(self._derivatives(), dtype=np.float64)
        return self._cache

    def get_derivatives(self) -> np.ndarray:
        self._require_kind(ModelKind.ME, op="get_derivatives")
        self._require(Phase.CONTINUOUS, op="get_derivatives")
        return self._cached_derivatives().copy()

    def get_event_indicators(self) -> np.ndarray:
        self._require(Phase.CONTINUOUS, op="get_event_indicators")
        if self.description.n_event_indicators == 0:
            return np.zeros(0)
        return np.asarray(self._event_indicators(), dtype=np.float64)

    def handle_event(self) -> bool:
        """Resolve a discrete event at the current time and state.

        Compresses FMI's enterEventMode / newDiscreteStates /
        enterContinuousTimeMode sequence.  Returns ``True`` when the
        continuous states were re-initialized.
        """
        self._require_kind(ModelKind.ME, op="handle_event")
        self._require(Phase.CONTINUOUS, op="handle_event")
        before = self.x.copy()
        self._handle_event()
        self._cache = None
        return not np.array_equal(before, self.x)

    def do_step(self, t: float, h: float):
        self._require_kind(ModelKind.CS, op="do_step")
        self._require(Phase.CONTINUOUS, op="do_step")
        h = float(h)
        if not h > 0.0:
            raise ValueError(f"communication step must be positive, got {h}")
        if abs(float(t) - self.t) > STEP_TIME_TOL:
            raise ValueError(f"do_step at t={t} but instance is at t={self.t}")
        if self.t_stop is not None and self.t + h > self.t_stop + STEP_TIME_TOL:
            raise ValueError(f"step to {self.t + h} exceeds stop time {self.t_stop}")
        self._do_step(self.t, h)
        self._cache = None

    # -- directional derivatives -------------------------------------------

    def get_directional_derivative(self, unknown_vrs, known_vrs, seed) -> np.ndarray:
        """Return ``(d unknowns / d knowns) @ seed`` at the current state."""
        if not self.description.provides_directional_derivative:
            raise CapabilityError(f"{self.description.model_name} provides no directional derivatives")
        self._require(Phase.CONTINUOUS, Phase.INITIALIZATION, op="get_directional_derivative")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != (len(known_vrs),):
            raise ValueError(f"seed has shape {seed.shape}, expected ({len(known_vrs)},)")
        # direction in the joint (x, u) space
        n_x = self.x.shape[0]
        dz = np.zeros(n_x + self.u.shape[0])
        md = self.description
        for vr, s in zip(known_vrs, seed):
            var = md.variable(vr)
            if var.vr in self._state_index:
                dz[self._state_index[var.vr]] += s
            elif var.vr in self._input_index:
                dz[n_x + self._input_index[var.vr]] += s
            else:
                raise ValueError(f"known {var.name!r} must be a state or an input")
        return self._directional(list(unknown_vrs), dz)

    def _directional(self, unknown_vrs, dz) -> np.ndarray:
        n_x = self.x.shape[0]
        jac = None
        out = np.empty(len(unknown_vrs))
        md = self.description
        for k, vr in enumerate(unknown_vrs):
            var = md.variable(vr)
            if var.vr in self._deriv_index:
                if jac is None:
                    jac = self._derivative_jacobian()
                out[k] = jac[self._deriv_index[var.vr]] @ dz
            elif var.vr in self._state_index:
                out[k] = dz[self._state_index[var.vr]]
            elif var.vr in self._input_index:
                out[k] = dz[n_x + self._input_index[var.vr]]
            else:
                out[k] = self._value_partials(var.vr) @ dz
        return out

    # -- snapshots ---------------------------------------------------------

    def get_state(self) -> StateSnapshot:
        if not self.description.can_get_set_state:
            raise CapabilityError(f"{self.description.model_name} cannot get/set state")
        return StateSnapshot(
            lineage=self._lineage,
            phase=self.phase,
            setup_done=self._setup_done,
            t=self.t,
            t_stop=self.t_stop,
            x=self.x.copy(),
            u=self.u.copy(),
            params=dict(self.params),
            mode=self._mode_get(),
        )

    def set_state(self, snap: StateSnapshot):
        if not self.description.can_get_set_state:
            raise CapabilityError(f"{self.description.model_name} cannot get/set state")
        if not isinstance(snap, StateSnapshot) or snap.lineage != self._lineage:
            raise ValueError("snapshot belongs to a different instance")
        self.phase = snap.phase
        self._setup_done = snap.setup_done
        self.t = snap.t
        self.t_stop = snap.t_stop
        self.x = snap.x.copy()
        self.u = snap.u.copy()
        self.params = dict(snap.params)
        self._parameters_changed()
        self._mode_set(snap.mode)
        self._cache = None

    # -- hooks -------------------------------------------------------------

    def _derivatives(self) -> np.ndarray:
        raise NotImplementedError

    def _derivative_jacobian(self) -> np.ndarray:
        raise CapabilityError("model provides no Jacobian")

    def _event_indicators(self) -> np.ndarray:
        return np.zeros(0)

    def _handle_event(self):
        pass

    def _initialize_mode(self):
        pass

    def _do_step(self, t: float, h: float):
        raise NotImplementedError

    def _value(self, vr: int) -> float:
        raise UnknownVariableError(f"variable {self.description.variable(vr).name!r} has no value")

    def _value_partials(self, vr: int) -> np.ndarray:
        raise ValueError(f"no partial derivatives for {self.description.variable(vr).name!r}")

    def _mode_get(self):
        return None

    def _mode_set(self, mode):
        pass

    def _mode_reset(self):
        pass

    def _parameters_changed(self):
        pass


Factory = Callable[[ModelDescription, ModelKind], ModelInstance]


def instantiate(description: ModelDescription, factory: Factory, kind=None) -> ModelInstance:
    """Create a fresh instance in phase ``Instantiated`` with start values applied."""
    if not isinstance(description, ModelDescription):
        raise DescriptionError("instantiate needs a ModelDescription")
    if kind is None:
        kind = ModelKind.ME if description.kind is ModelKind.BOTH else description.kind
    try:
        kind = ModelKind(kind)
    except ValueError:
        raise DescriptionError(f"unknown model kind {kind!r}") from None
    return factory(description, kind)
