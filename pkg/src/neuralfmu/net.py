"""Feed-forward chains with reverse-mode gradients and embedded model layers.

A :class:`Chain` is an ordered list of nodes: :class:`DenseLayer`,
:class:`MEModelLayer` and :class:`CSModelLayer`.  Parameters live in one
flat float64 vector; each chain knows the absolute offset of its own block
so several chains (e.g. the top and bottom half of a NeuralFMU) can index
into a shared vector.  Weights are stored row-major ``(out, in)`` followed
by the bias.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import _kernels
from .core import ModelInstance, ModelKind
from .errors import SolverError
from .sensitivity import JacobianProvider, default_provider, model_jacobian


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    TANH = "tanh"


_ACT_CODE = {Activation.IDENTITY: _kernels.ACT_IDENTITY, Activation.TANH: _kernels.ACT_TANH}


@dataclass(frozen=True)
class DenseLayer:
    n_in: int
    n_out: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("dense layer dimensions must be positive")

    @property
    def n_params(self) -> int:
        return self.n_out * self.n_in + self.n_out


def Dense(n_in, n_out, activation="identity") -> DenseLayer:
    return DenseLayer(n_in, n_out, Activation(activation))


class MEModelLayer:
    """``x_me -> xdot_me`` through an ME instance in ContinuousMode."""

    n_params = 0

    def __init__(self, instance: ModelInstance, provider: Optional[JacobianProvider] = None):
        if instance.kind is not ModelKind.ME:
            raise ValueError("MEModelLayer needs an ME instance")
        self.instance = instance
        self.provider = default_provider(instance) if provider is None else provider
        self.n_in = self.n_out = instance.description.n_states

    def forward(self, x_me):
        if not np.all(np.isfinite(x_me)):
            raise SolverError(f"non-finite model state {x_me} at t={self.instance.t:.6g}")
        inst = self.instance
        inst.set_continuous_states(x_me)
        return inst.get_derivatives()

    def jacobian(self, x_me):
        self.instance.set_continuous_states(x_me)
        return model_jacobian(self.instance, self.provider)

    def record(self, x_me):
        """Tape entry for an evaluation at ``x_me``.

        Models with event indicators may switch discrete modes between the
        forward and the reverse pass, so their entry carries a snapshot.
        """
        md = self.instance.description
        snap = self.instance.get_state() if md.n_event_indicators and md.can_get_set_state else None
        return (np.array(x_me, dtype=np.float64), snap)

    def jacobian_at(self, rec):
        """Jacobian at a :meth:`record` entry, in the mode active when it was taken."""
        x_me, snap = rec
        if snap is None:
            return self.jacobian(x_me)
        inst = self.instance
        now = inst.get_state()
        try:
            inst.set_state(snap)
            return self.jacobian(x_me)
        finally:
            inst.set_state(now)


class CSModelLayer:
    """``u_cs -> y_cs(t + h)``: set inputs, one ``do_step``, read outputs.

    Stateful: every forward call advances the instance by ``h``.
    """

    n_params = 0

    def __init__(self, instance: ModelInstance, h: float, provider: Optional[JacobianProvider] = None):
        if instance.kind is not ModelKind.CS:
            raise ValueError("CSModelLayer needs a CS instance")
        if not h > 0.0:
            raise ValueError("macro step h must be positive")
        self.instance = instance
        self.h = float(h)
        self.provider = default_provider(instance) if provider is None else provider
        md = instance.description
        self.n_in = len(md.input_vrs)
        self.n_out = len(md.output_vrs)

    def forward(self, u_cs):
        inst = self.instance
        md = inst.description
        if self.n_in:
            inst.set_real(md.input_vrs, u_cs)
        inst.do_step(inst.t, self.h)
        return inst.get_real(md.output_vrs)


def cs_layer_forward(instance: ModelInstance, u_cs, h: float) -> np.ndarray:
    return CSModelLayer(instance, h).forward(np.asarray(u_cs, dtype=np.float64))


def me_layer_forward(instance: ModelInstance, x_me) -> np.ndarray:
    return MEModelLayer(instance).forward(np.asarray(x_me, dtype=np.float64))


def dense_forward(layer: DenseLayer, x, W, b) -> np.ndarray:
    """``act(W @ x + b)`` for one layer with explicit weights."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.n_in,):
        raise ValueError(f"dense layer expects {layer.n_in} inputs, got shape {x.shape}")
    z = np.asarray(W, dtype=np.float64).reshape(layer.n_out, layer.n_in) @ x + np.asarray(b, dtype=np.float64)
    return np.tanh(z) if layer.activation is Activation.TANH else z


@dataclass
class _DenseRun:
    spec: np.ndarray
    hist_len: int
    n_in: int
    n_out: int


class Chain:
    """Feed-forward chain over a flat parameter vector.

    ``offset`` is the absolute position of this chain's first parameter in
    the vector passed to :func:`chain_forward`.
    """

    def __init__(self, nodes: Sequence = (), offset: int = 0):
        self.nodes = list(nodes)
        self.offset = int(offset)
        prev = None
        for k, node in enumerate(self.nodes):
            if prev is not None and prev != node.n_in:
                raise ValueError(f"node {k} expects {node.n_in} inputs but receives {prev}")
            prev = node.n_out
        self.layer_offsets = []
        self.segments = []
        pos = self.offset
        run = []
        for node in self.nodes:
            self.layer_offsets.append(pos)
            if isinstance(node, DenseLayer):
                run.append((pos, node.n_in, node.n_out, _ACT_CODE[node.activation]))
            else:
                if run:
                    self.segments.append(self._make_run(run))
                    run = []
                self.segments.append(node)
            pos += node.n_params
        if run:
            self.segments.append(self._make_run(run))
        self.n_params = pos - self.offset

    @staticmethod
    def _make_run(rows):
        spec = np.array(rows, dtype=np.int64).reshape(-1, 4)
        return _DenseRun(spec, _kernels.hist_size(spec), int(spec[0, 1]), int(spec[-1, 2]))

    @property
    def n_in(self) -> Optional[int]:
        return self.nodes[0].n_in if self.nodes else None

    @property
    def n_out(self) -> Optional[int]:
        return self.nodes[-1].n_out if self.nodes else None

    @property
    def param_slice(self) -> slice:
        return slice(self.offset, self.offset + self.n_params)

    def dense_layers(self):
        """``(node_index, layer, offset)`` for every dense layer."""
        return [(k, n, o) for k, (n, o) in enumerate(zip(self.nodes, self.layer_offsets)) if isinstance(n, DenseLayer)]

    def unpack(self, params, k):
        """Weight matrix and bias of dense node ``k`` (views into ``params``)."""
        node, off = self.nodes[k], self.layer_offsets[k]
        W = params[off : off + node.n_out * node.n_in].reshape(node.n_out, node.n_in)
        b = params[off + node.n_out * node.n_in : off + node.n_params]
        return W, b

    def model_layers(self):
        return [n for n in self.nodes if not isinstance(n, DenseLayer)]

    def __len__(self):
        return len(self.nodes)

    def descriptor(self) -> list:
        out = []
        for node in self.nodes:
            if isinstance(node, DenseLayer):
                out.append({"kind": "dense", "in": node.n_in, "out": node.n_out, "activation": node.activation.value})
            else:
                kind = "me_model" if isinstance(node, MEModelLayer) else "cs_model"
                out.append({"kind": kind, "in": node.n_in, "out": node.n_out})
        return out


@dataclass
class Tape:
    chain: Chain
    params: np.ndarray
    records: List = field(default_factory=list)


_fwd = _kernels.dense_forward_kernel
_bwd = _kernels.dense_backward_kernel


def use_backend(name: Optional[str]) -> str:
    """Switch the dense kernels (``"numba"``, ``"numpy"`` or ``None`` for the env default)."""
    global _fwd, _bwd
    _fwd, _bwd, chosen = _kernels.select(name)
    return chosen


def chain_forward(chain: Chain, x, params):
    """Evaluate ``chain`` at ``x``; returns ``(y, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    if chain.nodes and x.shape != (chain.n_in,):
        raise ValueError(f"chain expects {chain.n_in} inputs, got shape {x.shape}")
    params = np.asarray(params, dtype=np.float64)
    tape = Tape(chain, params)
    y = x
    for seg in chain.segments:
        if isinstance(seg, _DenseRun):
            hist = np.empty(seg.hist_len)
            y = _fwd(params, seg.spec, y, hist)
            tape.records.append(hist)
        elif isinstance(seg, MEModelLayer):
            x_me = y
            y = seg.forward(x_me)
            tape.records.append(seg.record(x_me))
        else:
            inst = seg.instance
            pre = inst.get_state() if inst.description.can_get_set_state else None
            y = seg.forward(y)
            tape.records.append(pre)
    return (y.copy() if y is x else y), tape


def backprop(tape: Tape, upstream, grad: Optional[np.ndarray] = None):
    """Reverse sweep.

    Returns ``(input_grad, param_grads)``; ``param_grads`` has the length
    of the full parameter vector and is accumulated into ``grad`` when
    given.
    """
    chain = tape.chain
    g = np.array(upstream, dtype=np.float64)
    gp = np.zeros_like(tape.params) if grad is None else grad
    for seg, rec in zip(reversed(chain.segments), reversed(tape.records)):
        if isinstance(seg, _DenseRun):
            g = _bwd(tape.params, seg.spec, rec, g, gp)
        elif isinstance(seg, MEModelLayer):
            g = seg.jacobian_at(rec).T @ g
        else:
            g = _cs_vjp(seg, rec, g)
    return g, gp


def _cs_vjp(layer: CSModelLayer, pre_snapshot, g):
    inst = layer.instance
    if pre_snapshot is None:
        return model_jacobian(inst, layer.provider).T @ g
    post = inst.get_state()
    try:
        inst.set_state(pre_snapshot)
        jac = model_jacobian(inst, layer.provider, h=layer.h)
    finally:
        inst.set_state(post)
    return jac.T @ g


# -- initialization -----------------------------------------------------------


class InitScheme(str, enum.Enum):
    PAPER = "PaperInit"
    NEUTRAL_RESIDUAL = "NeutralResidual"


def init_params(chains, scheme="PaperInit", rng_seed: int = 0) -> np.ndarray:
    """Initial parameter vector for one chain, a sequence of chains sharing one
    vector, or an object with a ``chains`` attribute (e.g. a NeuralFMU, whose
    ``residual_mode`` is switched on by ``NeutralResidual``).

    ``PaperInit``: standard-normal weights, zero biases, the first dense
    layer set to the identity.  ``NeutralResidual``: additionally zeroes
    the last dense layer so a residual correction starts at exactly zero.
    """
    scheme = InitScheme(scheme)
    owner = None
    if hasattr(chains, "chains"):
        owner, chains = chains, chains.chains
    elif isinstance(chains, Chain):
        chains = [chains]
    n = max((c.offset + c.n_params for c in chains), default=0)
    params = np.zeros(n)
    rng = np.random.default_rng(rng_seed)
    layers = [(c, k, node) for c in chains for k, node, _ in c.dense_layers()]
    for c, k, node in layers:
        W, b = c.unpack(params, k)
        W[:] = rng.standard_normal((node.n_out, node.n_in))
        b[:] = 0.0
    if layers:
        c, k, node = layers[0]
        W, _ = c.unpack(params, k)
        W[:] = np.eye(node.n_out, node.n_in)
    if scheme is InitScheme.NEUTRAL_RESIDUAL and layers:
        c, k, node = layers[-1]
        W, b = c.unpack(params, k)
        W[:] = 0.0
        b[:] = 0.0
    if owner is not None and hasattr(owner, "residual_mode"):
        owner.residual_mode = scheme is InitScheme.NEUTRAL_RESIDUAL
    return params


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"NFMUCKPT"
_VERSION = 1


def save_checkpoint(path, params, layout: list, meta: Optional[dict] = None):
    """Binary checkpoint: magic, version, JSON layout descriptor, length-prefixed float64 vector."""
    params = np.ascontiguousarray(params, dtype="<f8")
    header = json.dumps({"layout": layout, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.tobytes())


def load_checkpoint(path):
    """Returns ``(params, layout, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        (n,) = struct.unpack_from("<Q", data, 16 + hlen)
        start = 24 + hlen
        if len(data) != start + 8 * n:
            raise ValueError("truncated checkpoint")
        params = np.frombuffer(data, dtype="<f8", count=n, offset=start).astype(np.float64)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint: {exc}") from None
    expected = sum(l["in"] * l["out"] + l["out"] for l in header["layout"] if l["kind"] == "dense")
    if expected != n:
        raise ValueError(f"layout needs {expected} parameters, file holds {n}")
    return params, header["layout"], header["meta"]
