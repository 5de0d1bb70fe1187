"""Recurrent cell definitions: parameter schemas, initialization, parameter
accounting and single-step reference implementations.

Storage convention: every weight matrix is stored (in_dim, out_dim), so a step
is a row-vector product `y = x @ W` and a one-hot input contribution is the
row gather `W[x]`.  Gate blocks of the LSTM family are fused column-wise in a
fixed order [candidate, input, output, forget]; the forget-gate bias sits in
the last quarter of the fused bias.

The step functions here are the clarity-first reference path (single vector,
one timestep).  Training runs the batched window kernels in `sequence`, which
are tested against chained calls of these functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import scaled_orthogonal, uniform_fan_in
from .regularization import weight_norm_init_gains

ARCH_KINDS = ("vanilla-rnn", "tensor-rnn", "mrnn", "lstm", "stacked-lstm", "mlstm")
LSTM_VARIANTS = ("standard", "gate-inside-tanh")
LSTM_FAMILY = ("lstm", "stacked-lstm", "mlstm")

# fused gate column order
GATE_SLOTS = ("cand", "in", "out", "forget")


@dataclass(frozen=True)
class Arch:
    """Architecture request: kind plus dimensions.

    embed 0 means one-hot input (input weight rows indexed by symbol id);
    layers > 1 is only meaningful for stacked-lstm.
    """

    kind: str
    hidden: int
    layers: int = 1
    embed: int = 0
    lstm_variant: str = "standard"

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ConfigError(f"unknown architecture {self.kind!r}; expected one of {ARCH_KINDS}")
        if self.hidden < 1:
            raise ConfigError("hidden size must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.layers > 1 and self.kind != "stacked-lstm":
            raise ConfigError(f"layers > 1 is only supported for stacked-lstm, not {self.kind}")
        if self.embed < 0:
            raise ConfigError("embed must be >= 0")
        if self.lstm_variant not in LSTM_VARIANTS:
            raise ConfigError(
                f"unknown lstm variant {self.lstm_variant!r}; expected one of {LSTM_VARIANTS}"
            )

    @property
    def uses_cell(self):
        return self.kind in LSTM_FAMILY

    def input_dim(self, vocab_size):
        return self.embed if self.embed > 0 else vocab_size


@dataclass
class StepState:
    """Hidden (and, for the LSTM family, cell) state after one step."""

    h: np.ndarray
    c: np.ndarray | None = None


@dataclass(frozen=True)
class ParamCount:
    recurrent: int
    input: int
    output: int
    embedding: int
    bias_and_gain: int

    @property
    def total(self):
        return self.recurrent + self.input + self.output + self.embedding + self.bias_and_gain


def recurrent_tensor_names(arch):
    """Names of the square recurrent matrices, the weight-norm targets."""
    if arch.kind == "vanilla-rnn":
        return ["rnn_wh"]
    if arch.kind == "mrnn":
        return ["m_wh", "hm_w"]
    if arch.kind == "lstm":
        return ["gates_wh"]
    if arch.kind == "stacked-lstm":
        return [f"l{i}_gates_wh" for i in range(arch.layers)]
    if arch.kind == "mlstm":
        return ["m_wh", "gates_wm"]
    raise ConfigError(f"{arch.kind} has no weight-normalizable recurrent tensors")


def tensor_schema(arch, vocab_size):
    """Ordered (name, shape, init) schema for the architecture.

    init is one of: orth (square orthogonal blocks, column width h each),
    uniform (fan-in scaled uniform), zeros, lstm_bias (zeros with forget
    section 3).  The order fixes the rng draw sequence, so it is part of the
    determinism contract.
    """
    h, e, n = arch.hidden, arch.embed, vocab_size
    if n < 2:
        raise ConfigError("vocab must have at least 2 symbols")
    d = arch.input_dim(n)
    schema = []
    if e > 0:
        schema.append(("emb_w", (n, e), "uniform"))
    if arch.kind == "vanilla-rnn":
        schema += [
            ("rnn_wx", (d, h), "uniform"),
            ("rnn_wh", (h, h), "orth"),
            ("rnn_b", (h,), "zeros"),
        ]
    elif arch.kind == "tensor-rnn":
        if n > 64:
            raise ConfigError("tensor-rnn is an oracle architecture, vocab must be <= 64")
        schema += [
            ("whh_t", (n, h, h), "orth"),
            ("h_wx", (d, h), "uniform"),
            ("h_b", (h,), "zeros"),
        ]
    elif arch.kind == "mrnn":
        schema += [
            ("m_wx", (d, h), "uniform"),
            ("m_wh", (h, h), "orth"),
            ("h_wx", (d, h), "uniform"),
            ("hm_w", (h, h), "orth"),
            ("h_b", (h,), "zeros"),
        ]
    elif arch.kind == "lstm":
        schema += [
            ("gates_wx", (d, 4 * h), "uniform"),
            ("gates_wh", (h, 4 * h), "orth"),
            ("gates_b", (4 * h,), "lstm_bias"),
        ]
    elif arch.kind == "stacked-lstm":
        for layer in range(arch.layers):
            d_l = d if layer == 0 else h
            schema += [
                (f"l{layer}_gates_wx", (d_l, 4 * h), "uniform"),
                (f"l{layer}_gates_wh", (h, 4 * h), "orth"),
                (f"l{layer}_gates_b", (4 * h,), "lstm_bias"),
            ]
    elif arch.kind == "mlstm":
        schema += [
            ("m_wx", (d, h), "uniform"),
            ("m_wh", (h, h), "orth"),
            ("gates_wx", (d, 4 * h), "uniform"),
            ("gates_wm", (h, 4 * h), "orth"),
            ("gates_b", (4 * h,), "lstm_bias"),
        ]
    schema += [
        ("out_w", (h, n), "uniform"),
        ("out_b", (n,), "zeros"),
    ]
    return schema


def _init_tensor(shape, kind, h, init_scale, rng, dtype):
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "lstm_bias":
        b = np.zeros(shape, dtype=dtype)
        b[3 * h :] = 3.0
        return b
    if kind == "orth":
        if shape[-2] != h or shape[-1] % h:
            raise ConfigError(f"orthogonal init needs (h, k*h) blocks, got {shape}")
        lead = int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1
        blocks = [
            scaled_orthogonal(h, h, init_scale, rng)
            for _ in range(lead * (shape[-1] // h))
        ]
        out = np.concatenate(
            [np.concatenate(blocks[i : i + shape[-1] // h], axis=1)
             for i in range(0, len(blocks), shape[-1] // h)],
            axis=0,
        ).reshape(shape)
        return np.asarray(out, dtype=dtype)
    if kind == "uniform":
        return np.asarray(uniform_fan_in(shape[0], shape[1], rng), dtype=dtype)
    raise ConfigError(f"unknown init kind {kind}")


def init_params(arch, vocab_size, init_scale, rng, weight_norm=False, dtype=np.float32):
    """Draw a fresh parameter set.

    Square recurrent blocks are init_scale-scaled orthogonal; everything
    rectangular is fan-in uniform; biases zero except the forget section at 3.
    With weight_norm, each recurrent tensor keeps its drawn values as the
    direction and gains start at the column norms, leaving the effective
    matrix unchanged at init.
    """
    if init_scale <= 0:
        raise ConfigError("init_scale must be positive")
    params = {}
    for name, shape, kind in tensor_schema(arch, vocab_size):
        params[name] = _init_tensor(shape, kind, arch.hidden, init_scale, rng, dtype)
    if weight_norm:
        if arch.kind == "tensor-rnn":
            raise ConfigError("weight normalization is not defined for the tensor-rnn oracle")
        for name in recurrent_tensor_names(arch):
            params[name + "_g"] = np.asarray(
                weight_norm_init_gains(params[name]), dtype=dtype
            )
    return params


def param_count(arch, vocab_size, weight_norm=False):
    """Closed-form parameter accounting by category."""
    h, e, n = arch.hidden, arch.embed, vocab_size
    d = arch.input_dim(n)
    if arch.kind == "vanilla-rnn":
        rec, inp, bias = h * h, d * h, h
    elif arch.kind == "tensor-rnn":
        rec, inp, bias = n * h * h, d * h, h
    elif arch.kind == "mrnn":
        rec, inp, bias = 2 * h * h, 2 * d * h, h
    elif arch.kind == "lstm":
        rec, inp, bias = 4 * h * h, 4 * d * h, 4 * h
    elif arch.kind == "stacked-lstm":
        rec = arch.layers * 4 * h * h
        inp = 4 * d * h + (arch.layers - 1) * 4 * h * h
        bias = arch.layers * 4 * h
    elif arch.kind == "mlstm":
        rec, inp, bias = 5 * h * h, 5 * d * h, 4 * h
    gains = 0
    if weight_norm:
        gains = sum(4 * h if name.endswith("gates_wh") or name == "gates_wm" else h
                    for name in recurrent_tensor_names(arch))
    return ParamCount(
        recurrent=rec,
        input=inp,
        output=h * n,
        embedding=n * e,
        bias_and_gain=bias + n + gains,
    )


def _input_vec(params, x, wx_name):
    """Input contribution row: one-hot gather, or embedding then projection."""
    wx = params[wx_name]
    if "emb_w" in params:
        return params["emb_w"][x] @ wx
    return wx[x]


def rnn_step(params, h_prev, x):
    pre = h_prev @ params["rnn_wh"] + _input_vec(params, x, "rnn_wx") + params["rnn_b"]
    return StepState(h=np.tanh(pre))


def tensor_rnn_step(tensor_whh, params, h_prev, x):
    """Per-symbol transition oracle: one full (h, h) matrix per input symbol.

    tensor_whh: (N, h, h) stack; params supplies the shared input weight
    h_wx and bias h_b (mrnn naming, so factor-equivalence tests can reuse a
    parameter dict).
    """
    if not 0 <= x < tensor_whh.shape[0]:
        raise IndexError(f"symbol {x} out of range for tensor of {tensor_whh.shape[0]}")
    pre = h_prev @ tensor_whh[x] + _input_vec(params, x, "h_wx") + params["h_b"]
    return StepState(h=np.tanh(pre))


def mrnn_step(params, h_prev, x):
    m = _input_vec(params, x, "m_wx") * (h_prev @ params["m_wh"])
    pre = m @ params["hm_w"] + _input_vec(params, x, "h_wx") + params["h_b"]
    return m, StepState(h=np.tanh(pre))


def tensor_from_mrnn(params, vocab_size):
    """(N, h, h) stack equivalent to the mrnn factorization.

    In this storage orientation the per-symbol transition is
    m_wh @ diag(m_wx[x]) @ hm_w.
    """
    m_wx, m_wh, hm_w = params["m_wx"], params["m_wh"], params["hm_w"]
    if "emb_w" in params:
        cols = params["emb_w"] @ m_wx          # (N, h) gate rows per symbol
    else:
        cols = m_wx
    return np.stack([m_wh @ np.diag(cols[x]) @ hm_w for x in range(vocab_size)])


def _gate_math(pre, h, c_prev, variant):
    """(B?, 4h) pre-activations -> activations and new state."""
    a = np.tanh(pre[..., 0 * h : 1 * h])
    i = _sigmoid(pre[..., 1 * h : 2 * h])
    o = _sigmoid(pre[..., 2 * h : 3 * h])
    f = _sigmoid(pre[..., 3 * h : 4 * h])
    c = f * c_prev + i * a
    if variant == "standard":
        h_new = np.tanh(c) * o
    elif variant == "gate-inside-tanh":
        h_new = np.tanh(c * o)
    else:
        raise ConfigError(f"unknown lstm variant {variant!r}")
    return a, i, o, f, c, h_new


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_step(params, state_prev, x, variant="standard", prefix=""):
    h = state_prev.h.shape[-1]
    pre = (
        state_prev.h @ params[prefix + "gates_wh"]
        + _input_vec(params, x, prefix + "gates_wx")
        + params[prefix + "gates_b"]
    )
    _, _, _, _, c, h_new = _gate_math(pre, h, state_prev.c, variant)
    return StepState(h=h_new, c=c)


def mlstm_step(params, state_prev, x, variant="standard"):
    h = state_prev.h.shape[-1]
    m = _input_vec(params, x, "m_wx") * (state_prev.h @ params["m_wh"])
    pre = m @ params["gates_wm"] + _input_vec(params, x, "gates_wx") + params["gates_b"]
    _, _, _, _, c, h_new = _gate_math(pre, h, state_prev.c, variant)
    return m, StepState(h=h_new, c=c)


def zero_state(arch, batch=None, dtype=np.float32):
    """All-zero initial state: h (and c) shaped (layers, B, h) or (h,)."""
    if batch is None:
        shape = (arch.hidden,)
    else:
        shape = (arch.layers, batch, arch.hidden)
    h = np.zeros(shape, dtype=dtype)
    c = np.zeros(shape, dtype=dtype) if arch.uses_cell else None
    return StepState(h=h, c=c)
