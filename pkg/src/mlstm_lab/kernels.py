"""Fused per-window recurrence kernels with two interchangeable backends.

The sequential time loop is the only part of training that cannot be phrased
as large GEMMs, so exactly that part lives here, written in numba-compatible
numpy.  `get_kernels("numba")` returns @njit-compiled versions,
`get_kernels("numpy")` the same functions uncompiled; the default comes from
the MLSTM_LAB_BACKEND environment variable, falling back to numba when it is
importable.  Results agree to float rounding, so every correctness test can
run on either.

Conventions shared by all kernels:
  * arrays are time-major: xc/H/C/G are (T, B, k);
  * weights are (in, out) storage, a step is `row @ W`;
  * input contributions xc already include biases and embedding masks;
  * `mask` is the per-lane variational dropout mask for h_{t-1} (all-ones
    when dropout is off);
  * `one` is a scalar of the array dtype -- Python float literals would
    promote float32 math to float64 under numba;
  * gate columns are fused in the order [candidate, input, output, forget];
  * callers allocate every output array (out-params), keeping allocation
    policy and gradient accumulation outside the jit boundary.

Weight gradients are intentionally absent: they are whole-window GEMMs
(e.g. HM^T @ dXC) that the caller runs through BLAS after the kernel fills
the per-step pre-activation gradients dXC.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

try:
    import numba
    from numba.extending import register_jitable

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    numba = None
    _HAS_NUMBA = False

    def register_jitable(fn):
        return fn


ENV_BACKEND = "MLSTM_LAB_BACKEND"


def _rnn_forward(xc, wh, h0, mask, one, H):
    """h_t = tanh((h_{t-1} * mask) @ wh + xc_t); fills H (T, B, h)."""
    T = xc.shape[0]
    hm = h0 * mask
    for t in range(T):
        pre = np.dot(hm, wh) + xc[t]
        H[t] = np.tanh(pre)
        hm = H[t] * mask
    return H


def _rnn_backward(dH, H, wh, mask, one, dXC, dh0):
    """dXC_t = d(loss)/d(pre_t); dh0 = gradient w.r.t. the incoming state."""
    T = dH.shape[0]
    carry = np.zeros_like(dh0)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + carry
        dpre = dh * (one - H[t] * H[t])
        dXC[t] = dpre
        carry = np.dot(dpre, wh.T) * mask
    dh0[:] = carry
    return dh0


def _mrnn_forward(xcm, xch, m_wh, hm_w, h0, mask, one, MH, M, H):
    """m_t = xcm_t * (hm @ m_wh); h_t = tanh(m_t @ hm_w + xch_t)."""
    T = xcm.shape[0]
    hm = h0 * mask
    for t in range(T):
        mh = np.dot(hm, m_wh)
        MH[t] = mh
        m = xcm[t] * mh
        M[t] = m
        pre = np.dot(m, hm_w) + xch[t]
        H[t] = np.tanh(pre)
        hm = H[t] * mask
    return H


def _mrnn_backward(dH, H, MH, xcm, m_wh, hm_w, mask, one, dXCh, dXCm, dMH, dh0):
    T = dH.shape[0]
    carry = np.zeros_like(dh0)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + carry
        dpre = dh * (one - H[t] * H[t])
        dXCh[t] = dpre
        dm = np.dot(dpre, hm_w.T)
        dXCm[t] = dm * MH[t]
        dmh = dm * xcm[t]
        dMH[t] = dmh
        carry = np.dot(dmh, m_wh.T) * mask
    dh0[:] = carry
    return dh0


def _lstm_forward(xc, wh, h0, c0, mask, variant, one, TC, C, H, G):
    """Fused-gate LSTM window.

    variant 0: h = tanh(c) * o (TC records tanh(c));
    variant 1: h = tanh(c * o) (TC untouched, pass a dummy).
    """
    T = xc.shape[0]
    h = h0.shape[1]
    hm = h0 * mask
    c = c0.copy()
    for t in range(T):
        pre = np.dot(hm, wh) + xc[t]
        a = np.tanh(pre[:, 0 * h : 1 * h])
        i = one / (one + np.exp(-pre[:, 1 * h : 2 * h]))
        o = one / (one + np.exp(-pre[:, 2 * h : 3 * h]))
        f = one / (one + np.exp(-pre[:, 3 * h : 4 * h]))
        c = f * c + i * a
        G[t, :, 0 * h : 1 * h] = a
        G[t, :, 1 * h : 2 * h] = i
        G[t, :, 2 * h : 3 * h] = o
        G[t, :, 3 * h : 4 * h] = f
        C[t] = c
        if variant == 0:
            tc = np.tanh(c)
            TC[t] = tc
            H[t] = tc * o
        else:
            H[t] = np.tanh(c * o)
        hm = H[t] * mask
    return H


@register_jitable
def _lstm_gate_backward_step(dh, dc, G_t, C_t, TC_t, H_t, c_prev, variant, one, h):
    """Shared gate arithmetic: upstream (dh, dc) -> (dpre (B,4h), dc_prev).

    Callable both as plain numpy and from inside the jitted kernels."""
    a = G_t[:, 0 * h : 1 * h]
    i = G_t[:, 1 * h : 2 * h]
    o = G_t[:, 2 * h : 3 * h]
    f = G_t[:, 3 * h : 4 * h]
    if variant == 0:
        tc = TC_t
        do = dh * tc
        dcur = dh * o * (one - tc * tc) + dc
    else:
        dz = dh * (one - H_t * H_t)
        do = dz * C_t
        dcur = dz * o + dc
    di = dcur * a
    da = dcur * i
    df = dcur * c_prev
    dc_prev = dcur * f
    dpre = np.empty_like(G_t)
    dpre[:, 0 * h : 1 * h] = da * (one - a * a)
    dpre[:, 1 * h : 2 * h] = di * i * (one - i)
    dpre[:, 2 * h : 3 * h] = do * o * (one - o)
    dpre[:, 3 * h : 4 * h] = df * f * (one - f)
    return dpre, dc_prev


def _lstm_backward(dH, G, C, TC, H, c0, wh, mask, variant, one, dXC, dh0, dc0):
    T = dH.shape[0]
    h = dH.shape[2]
    carry = np.zeros_like(dh0)
    dc = np.zeros_like(dc0)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + carry
        c_prev = C[t - 1] if t > 0 else c0
        tc_t = TC[t] if variant == 0 else H[t]
        dpre, dc = _lstm_gate_backward_step(
            dh, dc, G[t], C[t], tc_t, H[t], c_prev, variant, one, h
        )
        dXC[t] = dpre
        carry = np.dot(dpre, wh.T) * mask
    dh0[:] = carry
    dc0[:] = dc
    return dh0


def _mlstm_forward(xcm, xcg, m_wh, wm, h0, c0, mask, variant, one, MH, M, TC, C, H, G):
    """LSTM whose four pre-activations all read the shared state m_t."""
    T = xcm.shape[0]
    h = h0.shape[1]
    hm = h0 * mask
    c = c0.copy()
    for t in range(T):
        mh = np.dot(hm, m_wh)
        MH[t] = mh
        m = xcm[t] * mh
        M[t] = m
        pre = np.dot(m, wm) + xcg[t]
        a = np.tanh(pre[:, 0 * h : 1 * h])
        i = one / (one + np.exp(-pre[:, 1 * h : 2 * h]))
        o = one / (one + np.exp(-pre[:, 2 * h : 3 * h]))
        f = one / (one + np.exp(-pre[:, 3 * h : 4 * h]))
        c = f * c + i * a
        G[t, :, 0 * h : 1 * h] = a
        G[t, :, 1 * h : 2 * h] = i
        G[t, :, 2 * h : 3 * h] = o
        G[t, :, 3 * h : 4 * h] = f
        C[t] = c
        if variant == 0:
            tc = np.tanh(c)
            TC[t] = tc
            H[t] = tc * o
        else:
            H[t] = np.tanh(c * o)
        hm = H[t] * mask
    return H


def _mlstm_backward(
    dH, G, C, TC, H, MH, xcm, c0, m_wh, wm, mask, variant, one,
    dXCg, dXCm, dMH, dh0, dc0,
):
    T = dH.shape[0]
    h = dH.shape[2]
    carry = np.zeros_like(dh0)
    dc = np.zeros_like(dc0)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + carry
        c_prev = C[t - 1] if t > 0 else c0
        tc_t = TC[t] if variant == 0 else H[t]
        dpre, dc = _lstm_gate_backward_step(
            dh, dc, G[t], C[t], tc_t, H[t], c_prev, variant, one, h
        )
        dXCg[t] = dpre
        dm = np.dot(dpre, wm.T)
        dXCm[t] = dm * MH[t]
        dmh = dm * xcm[t]
        dMH[t] = dmh
        carry = np.dot(dmh, m_wh.T) * mask
    dh0[:] = carry
    dc0[:] = dc
    return dh0


_KERNEL_NAMES = (
    "rnn_forward",
    "rnn_backward",
    "mrnn_forward",
    "mrnn_backward",
    "lstm_forward",
    "lstm_backward",
    "mlstm_forward",
    "mlstm_backward",
)

_SOURCES = {name: globals()["_" + name] for name in _KERNEL_NAMES}

_BACKENDS: dict[str, dict] = {}


def available_backends():
    return ("numba", "numpy") if _HAS_NUMBA else ("numpy",)


def default_backend():
    env = os.environ.get(ENV_BACKEND, "").strip().lower()
    if env:
        return env
    return "numba" if _HAS_NUMBA else "numpy"


def get_kernels(backend=None):
    """Kernel table {name: callable} for the requested backend."""
    backend = (backend or default_backend()).lower()
    if backend in _BACKENDS:
        return _BACKENDS[backend]
    if backend == "numpy":
        table = dict(_SOURCES)
    elif backend == "numba":
        if not _HAS_NUMBA:
            raise ConfigError("numba backend requested but numba is not installed")
        jit = numba.njit(cache=True, fastmath=False)
        table = {name: jit(fn) for name, fn in _SOURCES.items()}
    else:
        raise ConfigError(
            f"unknown backend {backend!r}; expected one of {available_backends()}"
        )
    _BACKENDS[backend] = table
    return table
