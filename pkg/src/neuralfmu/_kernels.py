"""Fused forward/backward kernels for runs of consecutive dense layers.

A run of dense layers is described by an int64 ``spec`` array with one row
``(param_offset, n_in, n_out, activation)`` per layer, where weights are
stored row-major (``n_out x n_in``) followed by the bias.  ``hist`` holds
the run input followed by every layer output, which is all the backward
pass needs (``tanh' = 1 - y**2``).

Two interchangeable implementations exist: loop kernels compiled with
numba and a vectorized numpy path.  Set ``NEURALFMU_NUMBA=0`` to force the
numpy path; it is also used when numba is not importable.
"""

from __future__ import annotations

import os

import numpy as np

ACT_IDENTITY = 0
ACT_TANH = 1


def hist_size(spec) -> int:
    return int(spec[0, 1] + spec[:, 2].sum()) if len(spec) else 0


# -- numpy path ----------------------------------------------------------------


def forward_numpy(p, spec, x, hist):
    hist[: x.shape[0]] = x
    pos = 0
    for row in spec:
        off, n_in, n_out, act = int(row[0]), int(row[1]), int(row[2]), int(row[3])
        W = p[off : off + n_out * n_in].reshape(n_out, n_in)
        b = p[off + n_out * n_in : off + n_out * n_in + n_out]
        z = W @ hist[pos : pos + n_in] + b
        if act == ACT_TANH:
            z = np.tanh(z)
        hist[pos + n_in : pos + n_in + n_out] = z
        pos += n_in
    return hist[pos : pos + int(spec[-1, 2])].copy() if len(spec) else x.copy()


def backward_numpy(p, spec, hist, gy, gp):
    ends = np.cumsum(np.concatenate(([spec[0, 1]], spec[:, 2])))
    g = gy
    for k in range(len(spec) - 1, -1, -1):
        off, n_in, n_out, act = (int(v) for v in spec[k])
        x_in = hist[ends[k] - n_in : ends[k]]
        if act == ACT_TANH:
            y = hist[ends[k] : ends[k] + n_out]
            g = g * (1.0 - y * y)
        W = p[off : off + n_out * n_in].reshape(n_out, n_in)
        gp[off : off + n_out * n_in] += np.outer(g, x_in).ravel()
        gp[off + n_out * n_in : off + n_out * n_in + n_out] += g
        g = W.T @ g
    return g


# -- numba path ----------------------------------------------------------------


def _forward_loops(p, spec, x, hist):
    n0 = x.shape[0]
    for i in range(n0):
        hist[i] = x[i]
    pos = 0
    n_out = n0
    for k in range(spec.shape[0]):
        off = spec[k, 0]
        n_in = spec[k, 1]
        n_out = spec[k, 2]
        act = spec[k, 3]
        boff = off + n_out * n_in
        for i in range(n_out):
            acc = p[boff + i]
            row = off + i * n_in
            for j in range(n_in):
                acc += p[row + j] * hist[pos + j]
            if act == 1:
                acc = np.tanh(acc)
            hist[pos + n_in + i] = acc
        pos += n_in
    out = np.empty(n_out)
    for i in range(n_out):
        out[i] = hist[pos + i]
    return out


def _backward_loops(p, spec, hist, gy, gp):
    n_layers = spec.shape[0]
    # end position of each layer's input block
    ends = np.empty(n_layers + 1, dtype=np.int64)
    ends[0] = spec[0, 1]
    for k in range(n_layers):
        ends[k + 1] = ends[k] + spec[k, 2]
    g = gy.copy()
    for k in range(n_layers - 1, -1, -1):
        off = spec[k, 0]
        n_in = spec[k, 1]
        n_out = spec[k, 2]
        act = spec[k, 3]
        xs = ends[k] - n_in
        if act == 1:
            for i in range(n_out):
                y = hist[ends[k] + i]
                g[i] = g[i] * (1.0 - y * y)
        boff = off + n_out * n_in
        gin = np.zeros(n_in)
        for i in range(n_out):
            gi = g[i]
            gp[boff + i] += gi
            row = off + i * n_in
            for j in range(n_in):
                gp[row + j] += gi * hist[xs + j]
                gin[j] += p[row + j] * gi
        g = gin
    return g


def _numba_wanted() -> bool:
    return os.environ.get("NEURALFMU_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


forward_numba = backward_numba = None
try:
    import numba as _numba

    forward_numba = _numba.njit(cache=True)(_forward_loops)
    backward_numba = _numba.njit(cache=True)(_backward_loops)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False


def select(backend=None):
    """Return ``(forward, backward, name)`` for ``backend`` in {None, "numba", "numpy"}."""
    if backend is None:
        backend = "numba" if (HAVE_NUMBA and _numba_wanted()) else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return forward_numba, backward_numba, "numba"
    if backend == "numpy":
        return forward_numpy, backward_numpy, "numpy"
    raise ValueError(f"unknown kernel backend {backend!r}")


dense_forward_kernel, dense_backward_kernel, BACKEND = select()
