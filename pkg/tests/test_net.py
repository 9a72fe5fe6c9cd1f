import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralfmu import _kernels
from neuralfmu.models import VR_S, VR_V, make_frictionless_pendulum, wrap_me_as_cs
from neuralfmu.sensitivity import JacobianProvider
from neuralfmu.net import (
    Chain,
    CSModelLayer,
    Dense,
    DenseLayer,
    MEModelLayer,
    backprop,
    chain_forward,
    cs_layer_forward,
    dense_forward,
    init_params,
    load_checkpoint,
    me_layer_forward,
    save_checkpoint,
    use_backend,
)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    if request.param == "numba" and not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    use_backend(request.param)
    yield request.param
    use_backend(None)


def fd_jacobians(chain, x, params, h=1e-6):
    """Central-difference d y / d x and d y / d params."""

    def f(xx, pp):
        return chain_forward(chain, xx, pp)[0]

    y = f(x, params)
    jx = np.empty((y.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        jx[:, i] = (f(x + e, params) - f(x - e, params)) / (2 * h)
    jp = np.empty((y.size, params.size))
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        jp[:, i] = (f(x, params + e) - f(x, params - e)) / (2 * h)
    return jx, jp


def reverse_jacobians(chain, x, params):
    y, tape = chain_forward(chain, x, params)
    rows_x, rows_p = [], []
    for k in range(y.size):
        g = np.zeros(y.size)
        g[k] = 1.0
        gx, gp = backprop(tape, g)
        rows_x.append(gx)
        rows_p.append(gp)
    return np.array(rows_x), np.array(rows_p)


# -- dense layers ------------------------------------------------------------------


def test_dense_identity_example():
    layer = Dense(2, 2)
    np.testing.assert_array_equal(dense_forward(layer, [0.5, 0.0], np.eye(2), [0.0, 0.0]), [0.5, 0.0])


def test_dense_tanh_example():
    layer = Dense(2, 1, "tanh")
    y = dense_forward(layer, [1.0, 2.0], [[0.5, -0.25]], [0.1])
    assert y[0] == pytest.approx(np.tanh(0.1))


def test_dense_shape_check():
    with pytest.raises(ValueError):
        dense_forward(Dense(3, 1), [1.0, 2.0], np.ones((1, 3)), [0.0])
    with pytest.raises(ValueError):
        DenseLayer(0, 2)


def test_chain_layout_and_offsets():
    chain = Chain([Dense(2, 8), Dense(8, 8, "tanh"), Dense(8, 2)], offset=6)
    assert chain.n_params == 24 + 72 + 18
    assert chain.layer_offsets == [6, 30, 102]
    assert chain.param_slice == slice(6, 120)
    assert chain.n_in == 2 and chain.n_out == 2


def test_chain_rejects_mismatched_nodes():
    with pytest.raises(ValueError):
        Chain([Dense(2, 3), Dense(2, 2)])


def test_chain_matches_layerwise_evaluation(backend):
    chain = Chain([Dense(3, 5, "tanh"), Dense(5, 4), Dense(4, 2, "tanh")])
    rng = np.random.default_rng(0)
    params = rng.standard_normal(chain.n_params)
    x = rng.standard_normal(3)
    y = x
    for k, node in enumerate(chain.nodes):
        W, b = chain.unpack(params, k)
        y = dense_forward(node, y, W, b)
    np.testing.assert_allclose(chain_forward(chain, x, params)[0], y, rtol=1e-14, atol=1e-15)


def test_empty_chain_is_identity():
    y, tape = chain_forward(Chain([]), np.array([1.0, 2.0]), np.zeros(0))
    np.testing.assert_array_equal(y, [1.0, 2.0])
    gx, gp = backprop(tape, np.array([3.0, 4.0]))
    np.testing.assert_array_equal(gx, [3.0, 4.0])


@st.composite
def random_chains(draw):
    widths = draw(st.lists(st.integers(1, 6), min_size=2, max_size=5))
    acts = draw(st.lists(st.sampled_from(["identity", "tanh"]), min_size=len(widths) - 1, max_size=len(widths) - 1))
    offset = draw(st.integers(0, 3))
    chain = Chain([Dense(a, b, act) for a, b, act in zip(widths, widths[1:], acts)], offset)
    seed = draw(st.integers(0, 2**32 - 1))
    return chain, seed


@settings(max_examples=100, deadline=None)
@given(random_chains())
def test_backprop_matches_finite_differences(case):
    chain, seed = case
    rng = np.random.default_rng(seed)
    params = rng.standard_normal(chain.offset + chain.n_params) * 0.7
    x = rng.standard_normal(chain.n_in)
    jx, jp = reverse_jacobians(chain, x, params)
    fx, fp = fd_jacobians(chain, x, params)
    np.testing.assert_allclose(jx, fx, atol=1e-6 * (1 + np.abs(fx).max()))
    np.testing.assert_allclose(jp, fp, atol=1e-6 * (1 + np.abs(fp).max()))
    # nothing outside this chain's block receives gradient
    assert np.all(jp[:, : chain.offset] == 0.0)


def test_backprop_accumulates_into_given_buffer():
    chain = Chain([Dense(2, 2, "tanh")])
    params = np.linspace(-1, 1, chain.n_params)
    _, tape = chain_forward(chain, np.array([0.3, -0.2]), params)
    _, once = backprop(tape, np.array([1.0, 0.5]))
    buf = np.zeros_like(params)
    backprop(tape, np.array([1.0, 0.5]), buf)
    backprop(tape, np.array([1.0, 0.5]), buf)
    np.testing.assert_allclose(buf, 2 * once)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_numba_and_numpy_agree(seed):
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    chain = Chain([Dense(2, 8), Dense(8, 8, "tanh"), Dense(8, 2)])
    rng = np.random.default_rng(seed)
    params, x, g = rng.standard_normal(chain.n_params), rng.standard_normal(2), rng.standard_normal(2)
    out = {}
    try:
        for name in ("numpy", "numba"):
            use_backend(name)
            y, tape = chain_forward(chain, x, params)
            out[name] = (y, *backprop(tape, g))
    finally:
        use_backend(None)
    for a, b in zip(out["numpy"], out["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_env_flag_selects_numpy():
    code = "from neuralfmu import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, NEURALFMU_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_unknown_backend():
    with pytest.raises(ValueError):
        use_backend("cuda")


# -- model layers --------------------------------------------------------------------


def test_me_layer_forward_example():
    inst = make_frictionless_pendulum().instantiate().initialize()
    np.testing.assert_allclose(me_layer_forward(inst, [0.5, 0.0]), [0.0, 6.0])


def test_me_layer_needs_me_instance():
    cs = wrap_me_as_cs(make_frictionless_pendulum()).instantiate().initialize()
    with pytest.raises(ValueError):
        MEModelLayer(cs)


def test_chain_through_model_matches_finite_differences(backend):
    inst = make_frictionless_pendulum().instantiate().initialize()
    chain = Chain([Dense(2, 3, "tanh"), Dense(3, 2), MEModelLayer(inst), Dense(2, 4, "tanh"), Dense(4, 2)])
    rng = np.random.default_rng(7)
    params = rng.standard_normal(chain.n_params)
    x = np.array([0.4, -0.3])
    jx, jp = reverse_jacobians(chain, x, params)
    fx, fp = fd_jacobians(chain, x, params)
    np.testing.assert_allclose(jx, fx, atol=1e-5 * (1 + np.abs(fx).max()))
    np.testing.assert_allclose(jp, fp, atol=1e-5 * (1 + np.abs(fp).max()))
    assert chain.descriptor()[2] == {"kind": "me_model", "in": 2, "out": 2}


def _force_driven_cs():
    bundle = wrap_me_as_cs(make_frictionless_pendulum(with_force_input=True))
    return bundle.instantiate().initialize(0.0)


def test_cs_layer_forward_example():
    inst = _force_driven_cs()
    y = cs_layer_forward(inst, [0.0], 0.1)
    assert y[0] == pytest.approx(0.529751, abs=1e-5)
    assert inst.t == pytest.approx(0.1)


def test_cs_layer_gradient_with_finite_differences_uses_macro_step():
    inst = _force_driven_cs()
    chain = Chain([Dense(1, 1), CSModelLayer(inst, 0.1, JacobianProvider.finite_difference(1e-3))])
    params = np.array([2.0, 0.0])
    y, tape = chain_forward(chain, np.array([0.5]), params)
    gx, gp = backprop(tape, np.array([1.0, 0.0]))
    # a constant force F over h adds F (1 - cos(w h)) / (m w^2) to the position
    dsdF = (1 - np.cos(np.sqrt(10.0) * 0.1)) / 10.0
    assert gx[0] == pytest.approx(2.0 * dsdF, rel=1e-4)
    assert gp[0] == pytest.approx(0.5 * dsdF, rel=1e-4)
    # the instance stays where the forward pass left it
    assert inst.t == pytest.approx(0.1)
    np.testing.assert_array_equal(inst.get_real([VR_S, VR_V]), y)


def test_cs_layer_gradient_with_directional_derivatives_is_instantaneous():
    inst = _force_driven_cs()
    chain = Chain([CSModelLayer(inst, 0.1)])
    _, tape = chain_forward(chain, np.array([1.0]), np.zeros(0))
    gx, _ = backprop(tape, np.array([1.0, 1.0]))
    # dy(t)/du(t) of the outputs s, v with respect to the force is zero
    assert gx[0] == 0.0


# -- init ------------------------------------------------------------------------------


def test_paper_init():
    top, bottom = Chain([Dense(2, 2)]), Chain([Dense(2, 8), Dense(8, 8, "tanh"), Dense(8, 2)], offset=6)
    p = init_params([top, bottom], "PaperInit", rng_seed=1)
    assert p.size == 120
    W, b = top.unpack(p, 0)
    np.testing.assert_array_equal(W, np.eye(2))
    for k, node, _ in bottom.dense_layers():
        W, b = bottom.unpack(p, k)
        assert np.all(b == 0.0) and np.all(W != 0.0)


def test_neutral_residual_init_zeroes_last_layer():
    chain = Chain([Dense(2, 2), Dense(2, 8), Dense(8, 2)])
    p = init_params(chain, "NeutralResidual", rng_seed=1)
    W, b = chain.unpack(p, 2)
    assert np.all(W == 0.0) and np.all(b == 0.0)
    np.testing.assert_array_equal(chain_forward(chain, np.array([0.3, 0.4]), p)[0], [0.0, 0.0])


def test_init_is_seeded():
    chain = Chain([Dense(2, 8), Dense(8, 2)])
    np.testing.assert_array_equal(init_params(chain, rng_seed=5), init_params(chain, rng_seed=5))
    assert not np.array_equal(init_params(chain, rng_seed=5), init_params(chain, rng_seed=6))


def test_unknown_init_scheme():
    with pytest.raises(ValueError):
        init_params(Chain([Dense(1, 1)]), "Xavier")


# -- checkpoints -------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    chain = Chain([Dense(2, 8), Dense(8, 8, "tanh"), Dense(8, 2)])
    params = np.random.default_rng(0).standard_normal(chain.n_params)
    path = tmp_path / "c.bin"
    save_checkpoint(path, params, chain.descriptor(), {"epoch": 3})
    back, layout, meta = load_checkpoint(path)
    np.testing.assert_array_equal(back, params)
    assert layout == chain.descriptor() and meta == {"epoch": 3}
    assert path.read_bytes()[:8] == b"NFMUCKPT"


def test_checkpoint_is_byte_stable(tmp_path):
    chain = Chain([Dense(2, 2)])
    p = np.arange(6.0)
    save_checkpoint(tmp_path / "a", p, chain.descriptor(), {"b": 1, "a": 2})
    save_checkpoint(tmp_path / "b", p, chain.descriptor(), {"a": 2, "b": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("damage", ["magic", "truncate", "count", "version"])
def test_checkpoint_corruption_detected(tmp_path, damage):
    chain = Chain([Dense(2, 2)])
    path = tmp_path / "c.bin"
    save_checkpoint(path, np.arange(6.0), chain.descriptor())
    data = bytearray(path.read_bytes())
    if damage == "magic":
        data[0:1] = b"X"
    elif damage == "truncate":
        data = data[:-3]
    elif damage == "version":
        data[8] = 9
    else:
        save_checkpoint(path, np.arange(5.0), chain.descriptor())
        data = bytearray(path.read_bytes())
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError):
        load_checkpoint(path)
