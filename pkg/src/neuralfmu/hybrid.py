"""Hybrid models: neural chains wrapped around ME or CS model instances.

An ME NeuralFMU computes ``xdot_nn = bottom(f_me(top(x_nn)))`` and hands it
to the ODE solver; in residual mode the bottom chain adds a correction
instead, ``xdot_nn = xdot_me + bottom(xdot_me)``.  A CS NeuralFMU maps
``u_nn -> top -> do_step -> bottom`` once per macro step.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ModelInstance
from .errors import SolverError, TrainingDivergence
from .models import PendulumParams, make_friction_pendulum, make_frictionless_pendulum, simulate_me
from .net import Chain, CSModelLayer, Dense, DenseLayer, MEModelLayer, backprop, chain_forward, init_params
from .odesolve import EventSpec, SolverConfig, Trajectory, solve
from .sensitivity import GradientMethod, JacobianProvider, loss_and_gradient, rollout

log = logging.getLogger(__name__)


def _split_nodes(nodes, layer_type):
    idx = [k for k, n in enumerate(nodes) if isinstance(n, layer_type)]
    if len(idx) != 1:
        raise ValueError(f"chain must contain exactly one {layer_type.__name__}, found {len(idx)}")
    k = idx[0]
    return list(nodes[:k]), nodes[k], list(nodes[k + 1 :])


class MENeuralFMU:
    """``top -> ME model -> bottom`` integrated by an ODE solver.

    Parameters
    ----------
    top, bottom : sequence of DenseLayer
        Chains before and after the model layer.  Either may be empty.
    model : ModelInstance or MEModelLayer
    solver_cfg : SolverConfig, optional
        Defaults to fixed-step RK4 with ``h = 0.01``.
    residual_mode : bool
        Add the bottom output to ``xdot_me`` instead of replacing it.
    """

    def __init__(
        self,
        top: Sequence[DenseLayer],
        model,
        bottom: Sequence[DenseLayer],
        solver_cfg: Optional[SolverConfig] = None,
        residual_mode: bool = False,
        t_start: float = 0.0,
        provider: Optional[JacobianProvider] = None,
    ):
        self.layer = model if isinstance(model, MEModelLayer) else MEModelLayer(model, provider)
        self.instance = self.layer.instance
        n_x = self.layer.n_in
        self.top = Chain(top, 0)
        self.bottom = Chain(bottom, self.top.n_params)
        for name, chain in (("top", self.top), ("bottom", self.bottom)):
            if chain.nodes and (chain.n_in != n_x or chain.n_out != n_x):
                raise ValueError(f"{name} chain must map {n_x} -> {n_x}, got {chain.n_in} -> {chain.n_out}")
        self.n_x = n_x
        self.n_params = self.top.n_params + self.bottom.n_params
        self.solver_cfg = SolverConfig.rk4(1e-2) if solver_cfg is None else solver_cfg
        self.residual_mode = bool(residual_mode)
        self.t_start = float(t_start)
        self.params = np.zeros(self.n_params)

    @classmethod
    def from_chain(cls, chain, **kw) -> "MENeuralFMU":
        nodes = chain.nodes if isinstance(chain, Chain) else list(chain)
        top, layer, bottom = _split_nodes(nodes, MEModelLayer)
        return cls(top, layer, bottom, **kw)

    @property
    def chains(self):
        return (self.top, self.bottom)

    def layout(self) -> list:
        return self.top.descriptor() + [{"kind": "me_model", "in": self.n_x, "out": self.n_x}] + self.bottom.descriptor()

    def init(self, scheme="NeutralResidual", rng_seed: int = 0) -> np.ndarray:
        self.params = init_params(self, scheme, rng_seed)
        return self.params

    # -- differentiable system interface ----------------------------------

    def begin(self, x0, params, t0=None):
        """Reset the model and initialize it at ``top(x0)``."""
        t0 = self.t_start if t0 is None else float(t0)
        x_me0, _ = chain_forward(self.top, np.asarray(x0, dtype=np.float64), params)
        inst = self.instance
        inst.reset()
        inst.setup_experiment(t0)
        inst.enter_initialization()
        inst.set_real(inst.description.state_vrs, x_me0)
        inst.exit_initialization()

    def rhs(self, t, x, params):
        self.instance.t = t
        x_me, _ = chain_forward(self.top, x, params)
        dx_me = self.layer.forward(x_me)
        y, _ = chain_forward(self.bottom, dx_me, params)
        return dx_me + y if self.residual_mode else y

    def rhs_taped(self, t, x, params):
        self.instance.t = t
        x_me, top_tape = chain_forward(self.top, x, params)
        dx_me = self.layer.forward(x_me)
        rec = self.layer.record(x_me)
        y, bottom_tape = chain_forward(self.bottom, dx_me, params)
        out = dx_me + y if self.residual_mode else y
        return out, (t, top_tape, rec, bottom_tape)

    def rhs_vjp(self, tape, g, gp):
        t, top_tape, rec, bottom_tape = tape
        gb, _ = backprop(bottom_tape, g, gp)
        if self.residual_mode:
            gb = gb + g
        self.instance.t = t
        g_me = self.layer.jacobian_at(rec).T @ gb
        gx, _ = backprop(top_tape, g_me, gp)
        return gx

    def event_spec(self, params) -> Optional[EventSpec]:
        """Model events seen through the top chain.

        A state jump of the model is mapped back as ``x_nn += dx_me``, which
        is exact when the top chain is a translation.
        """
        inst = self.instance
        if inst.description.n_event_indicators == 0:
            return None

        def indicators(t, x):
            inst.t = t
            x_me, _ = chain_forward(self.top, x, params)
            inst.set_continuous_states(x_me)
            return inst.get_event_indicators()

        def handler(t, x):
            inst.t = t
            x_me, _ = chain_forward(self.top, x, params)
            inst.set_continuous_states(x_me)
            if inst.handle_event():
                return x + (inst.get_continuous_states() - x_me)
            return x

        return EventSpec(indicators, handler)

    # -- evaluation --------------------------------------------------------

    def top_output(self, x, params=None):
        p = self.params if params is None else params
        return chain_forward(self.top, np.asarray(x, dtype=np.float64), p)[0]

    def correction(self, dx_me, params=None):
        """``xdot_nn - xdot_me`` for a given model derivative."""
        p = self.params if params is None else params
        dx_me = np.asarray(dx_me, dtype=np.float64)
        y, _ = chain_forward(self.bottom, dx_me, p)
        return y if self.residual_mode else y - dx_me


def me_neuralfmu_solve(nfmu: MENeuralFMU, x0, t_span, save_at=None, params=None, solver_cfg=None, dense=False) -> Trajectory:
    """Solve the NeuralFMU from ``x0`` over ``t_span`` (model events included)."""
    p = nfmu.params if params is None else np.asarray(params, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    nfmu.begin(x0, p, t_span[0])
    cfg = nfmu.solver_cfg if solver_cfg is None else solver_cfg
    return solve(lambda t, x: nfmu.rhs(t, x, p), x0, t_span, cfg, nfmu.event_spec(p), save_at, dense)


# -- CS NeuralFMU -----------------------------------------------------------------


class CSNeuralFMU:
    """``u_nn -> top -> do_step -> bottom`` once per macro step ``h``."""

    def __init__(self, top: Sequence[DenseLayer], model, bottom: Sequence[DenseLayer], h: Optional[float] = None, t_start: float = 0.0):
        if isinstance(model, CSModelLayer):
            self.layer = model
        else:
            if h is None:
                raise ValueError("macro step h is required")
            self.layer = CSModelLayer(model, h)
        self.instance = self.layer.instance
        self.h = self.layer.h
        self.top = Chain(top, 0)
        self.bottom = Chain(bottom, self.top.n_params)
        if self.top.nodes and self.top.n_out != self.layer.n_in:
            raise ValueError(f"top chain must end with {self.layer.n_in} outputs")
        if self.bottom.nodes and self.bottom.n_in != self.layer.n_out:
            raise ValueError(f"bottom chain must start with {self.layer.n_out} inputs")
        self.n_in = self.top.n_in if self.top.nodes else self.layer.n_in
        self.n_out = self.bottom.n_out if self.bottom.nodes else self.layer.n_out
        self.n_params = self.top.n_params + self.bottom.n_params
        self.t_start = float(t_start)
        self.params = np.zeros(self.n_params)

    @classmethod
    def from_chain(cls, chain, **kw) -> "CSNeuralFMU":
        nodes = chain.nodes if isinstance(chain, Chain) else list(chain)
        top, layer, bottom = _split_nodes(nodes, CSModelLayer)
        return cls(top, layer, bottom, **kw)

    @property
    def chains(self):
        return (self.top, self.bottom)

    def init(self, scheme="PaperInit", rng_seed: int = 0) -> np.ndarray:
        self.params = init_params(self, scheme, rng_seed)
        return self.params

    def begin(self, t_stop: Optional[float] = None):
        self.instance.initialize(self.t_start, t_stop)


def cs_neuralfmu_run(nfmu: CSNeuralFMU, u_sequence, n_steps: int, params=None) -> np.ndarray:
    """Reset the model and run ``n_steps`` macro steps; returns ``(n_steps, n_out)``."""
    p = nfmu.params if params is None else np.asarray(params, dtype=np.float64)
    n_steps = int(n_steps)
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    u = np.zeros((n_steps, nfmu.n_in)) if u_sequence is None else np.asarray(u_sequence, dtype=np.float64).reshape(-1, nfmu.n_in)
    if u.shape[0] < n_steps:
        raise ValueError(f"need {n_steps} input rows, got {u.shape[0]}")
    nfmu.begin()
    out = np.empty((n_steps, nfmu.n_out))
    for k in range(n_steps):
        u_cs, _ = chain_forward(nfmu.top, u[k], p)
        y_cs = nfmu.layer.forward(u_cs)
        out[k], _ = chain_forward(nfmu.bottom, y_cs, p)
    return out


# -- data and loss -------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Equidistant samples of a trajectory started at ``x0`` at ``t0``."""

    times: np.ndarray
    targets: np.ndarray
    x0: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        targets = np.asarray(self.targets, dtype=np.float64)
        x0 = np.asarray(self.x0, dtype=np.float64).reshape(-1)
        if targets.ndim == 1:
            targets = targets.reshape(times.size, -1)
        if targets.shape[0] != times.size:
            raise ValueError("one target row per sample time is required")
        if targets.size and targets.shape[1] != x0.size:
            raise ValueError("targets and x0 disagree on the state dimension")
        if not (np.all(np.isfinite(targets)) and np.all(np.isfinite(times)) and np.all(np.isfinite(x0))):
            raise ValueError("dataset values must be finite")
        if times.size > 1:
            dt = (times[-1] - times[0]) / (times.size - 1)
            grid = times[0] + dt * np.arange(times.size)
            if not dt > 0.0 or np.max(np.abs(times - grid)) > 1e-12 * max(1.0, abs(times[-1])):
                raise ValueError("sample times must be equidistant and ascending")
        if times.size and times[0] < self.t0:
            raise ValueError("samples must not precede t0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def n_samples(self) -> int:
        return self.times.size

    def loss(self, states) -> float:
        if self.n_samples == 0:
            return 0.0
        return float(np.mean((np.asarray(states) - self.targets) ** 2))

    def loss_grad(self, states) -> np.ndarray:
        if self.n_samples == 0:
            return np.zeros_like(self.targets)
        return 2.0 * (np.asarray(states) - self.targets) / self.targets.size

    def with_x0(self, x0) -> "Dataset":
        return Dataset(self.times, self.targets, x0, self.t0)


def mse_loss(traj: Trajectory, data: Dataset) -> float:
    """Mean over all samples and channels of the squared error."""
    if traj.times.shape != data.times.shape or np.max(np.abs(traj.times - data.times), initial=0.0) > 1e-9:
        raise ValueError("trajectory is not sampled at the dataset times")
    return data.loss(traj.states)


def sample_times(t_end: float = 4.0, n_samples: int = 400, t0: float = 0.0) -> np.ndarray:
    """``t0 + k * dt`` for ``k = 1..n_samples`` with ``dt = (t_end - t0) / n_samples``."""
    dt = (t_end - t0) / n_samples
    return t0 + dt * np.arange(1, n_samples + 1)


def reference_dataset(x0, t_end: float = 4.0, n_samples: int = 400, params: Optional[PendulumParams] = None, rtol: float = 1e-10) -> Dataset:
    """Sample the friction pendulum from ``x0`` with event-exact adaptive integration."""
    inst = make_friction_pendulum(params, s_start=float(x0[0]), v_start=float(x0[1])).instantiate()
    inst.initialize(0.0)
    times = sample_times(t_end, n_samples)
    traj = simulate_me(inst, (0.0, t_end), SolverConfig.adaptive(rtol, rtol * 1e-2), save_at=times)
    return Dataset(times, traj.states, x0)


def paper_topology(instance: ModelInstance, solver_cfg: Optional[SolverConfig] = None, provider=None) -> MENeuralFMU:
    """Dense(2,2) | model | Dense(2,8) Dense(8,8,tanh) Dense(8,2)."""
    return MENeuralFMU(
        [Dense(2, 2)],
        instance,
        [Dense(2, 8), Dense(8, 8, "tanh"), Dense(8, 2)],
        solver_cfg=solver_cfg,
        provider=provider,
    )


def paper_experiment(scheme="NeutralResidual", rng_seed: int = 0, fixed_h: float = 1e-2) -> MENeuralFMU:
    """The frictionless white-box model with anchor offset inside the Table-2 net."""
    inst = make_frictionless_pendulum(PendulumParams.fmu()).instantiate()
    nfmu = paper_topology(inst, SolverConfig.rk4(fixed_h))
    nfmu.init(scheme, rng_seed)
    return nfmu


# -- training ------------------------------------------------------------------


class Optimizer(str, enum.Enum):
    GRADIENT_DESCENT = "GradientDescent"
    ADAM = "Adam"


class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, p, g):
        return p - self.lr * g


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, p, g):
        if self.m is None:
            self.m = np.zeros_like(p)
            self.v = np.zeros_like(p)
        self.k += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.k)
        v_hat = self.v / (1.0 - self.beta2 ** self.k)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2500
    learning_rate: float = 1e-3
    optimizer: Optimizer = Optimizer.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gradient_method: GradientMethod = GradientMethod.DISCRETIZE_BACKPROP
    fixed_h: float = 1e-2
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "gradient_method", GradientMethod(self.gradient_method))
        if int(self.epochs) <= 0:
            raise ValueError("epochs must be positive")
        if not self.learning_rate >= 0.0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a non-negative number")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0.0):
            raise ValueError("invalid Adam coefficients")
        if not self.fixed_h > 0.0:
            raise ValueError("fixed_h must be positive")

    def make_optimizer(self):
        if self.optimizer is Optimizer.ADAM:
            return Adam(self.learning_rate, self.beta1, self.beta2, self.eps)
        return GradientDescent(self.learning_rate)


def train(
    nfmu: MENeuralFMU,
    dataset: Dataset,
    cfg: TrainConfig,
    params=None,
    on_epoch: Optional[Callable[[int, np.ndarray, float], None]] = None,
):
    """Run ``cfg.epochs`` full-trajectory gradient steps.

    Returns ``(params, loss_history)`` where ``loss_history[k]`` is the loss
    before update ``k``.  ``on_epoch(k, params, loss)`` is called after each
    loss evaluation with the parameters that produced it.
    """
    p = np.array(nfmu.params if params is None else params, dtype=np.float64)
    opt = cfg.make_optimizer()
    history = np.empty(cfg.epochs)
    t_wall = time.perf_counter()
    for k in range(cfg.epochs):
        try:
            loss, grad = loss_and_gradient(nfmu, dataset, p, cfg.gradient_method, cfg.fixed_h)
        except SolverError as exc:
            raise TrainingDivergence(f"rollout failed at epoch {k}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingDivergence(f"loss became {loss} at epoch {k}")
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise TrainingDivergence(f"non-finite gradient at epoch {k} (parameter {bad}), loss {loss:.6g}")
        history[k] = loss
        if on_epoch is not None:
            on_epoch(k, p, loss)
        if k % 100 == 0:
            log.info("epoch %d loss %.6e (%.1f s)", k, loss, time.perf_counter() - t_wall)
        p = opt.step(p, grad)
    nfmu.params = p
    return p, history


def evaluate_loss(nfmu: MENeuralFMU, dataset: Dataset, params=None) -> float:
    p = nfmu.params if params is None else params
    return dataset.loss(rollout(nfmu, dataset, p).states)


# -- extraction ------------------------------------------------------------------


def _mass(nfmu) -> float:
    md = nfmu.instance.description
    try:
        return float(md.by_name("mass.m").start)
    except LookupError:
        return 1.0


def extract_bottom_response(nfmu: MENeuralFMU, v_grid, s: float = 1.0, params=None) -> np.ndarray:
    """Force correction ``m * (xdot_nn[1] - xdot_me[1])`` at states ``(s, v)``.

    Each state passes through the top chain and the model; the bottom
    chain's change to the acceleration is scaled by the mass.
    """
    p = nfmu.params if params is None else params
    v_grid = np.asarray(v_grid, dtype=np.float64).reshape(-1)
    m = _mass(nfmu)
    out = np.empty(v_grid.size)
    if v_grid.size == 0:
        return out
    nfmu.begin(np.array([s, v_grid[0]]), p)
    for i, v in enumerate(v_grid):
        x_me = nfmu.top_output([s, v], p)
        dx_me = nfmu.layer.forward(x_me)
        out[i] = m * nfmu.correction(dx_me, p)[1]
    return out


def learned_friction(nfmu: MENeuralFMU, v_grid, s: float = 1.0, params=None) -> np.ndarray:
    """Friction force implied by the bottom chain: the negated correction."""
    return -extract_bottom_response(nfmu, v_grid, s, params)


def extract_top_response(nfmu: MENeuralFMU, states, params=None) -> np.ndarray:
    """``top(x) - x`` for every row of ``states``."""
    p = nfmu.params if params is None else params
    states = np.asarray(states, dtype=np.float64)
    if states.size == 0:
        return np.zeros((0, nfmu.n_x))
    states = states.reshape(-1, nfmu.n_x)
    return np.array([nfmu.top_output(x, p) - x for x in states])
