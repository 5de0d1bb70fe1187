"""Whole-window forward/backward passes over batched lanes, plus the
finite-difference gradient checker.

Layout: lanes are the public leading axis (inputs and targets are (B, T),
returned logits (B, T, N)), but everything internal is time-major (T, B, k)
so each timestep is one contiguous GEMM.  The sequential per-step work runs
in a kernel from `kernels`; everything that can be phrased as a whole-window
GEMM (input contributions, weight gradients, the softmax head) happens here
through BLAS, identically for both kernel backends.

The Tape captures every array the backward pass reads, so backward never
recomputes activations and a forward replay from the tape's inputs and masks
is bitwise reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import Arch, StepState, init_params, recurrent_tensor_names
from .errors import ConfigError
from .kernels import get_kernels
from .numerics import LN2, make_rng
from .regularization import sample_masks, weight_norm_backward, weight_norm_effective

_VARIANT_CODE = {"standard": 0, "gate-inside-tanh": 1}


def effective_tensors(params, arch):
    """Resolve weight normalization: (plain tensor dict, normalized names)."""
    wn = [n for n in recurrent_tensor_names(arch) if n + "_g" in params]
    eff = {k: v for k, v in params.items() if not k.endswith("_g")}
    for name in wn:
        eff[name] = weight_norm_effective(params[name], params[name + "_g"])
    return eff, wn


@dataclass
class Tape:
    """Forward-pass record for one window; consumed by backward_sequence."""

    arch: Arch
    backend: str | None
    inputs: np.ndarray                    # (B, T) symbol ids
    x_tm: np.ndarray                      # (T, B) time-major ids
    state0_h: np.ndarray                  # (L, B, h)
    state0_c: np.ndarray | None
    mask_h: np.ndarray | None             # (B, L, h)
    mask_e: np.ndarray | None             # (B, e)
    out_masked: bool
    emb_rows: np.ndarray | None           # (T, B, e) after embedding mask
    xc_m: np.ndarray | None               # (T, B, h) multiplicative input path
    H: list = field(default_factory=list)     # per layer (T, B, h)
    C: list = field(default_factory=list)
    G: list = field(default_factory=list)     # per layer (T, B, 4h)
    TC: list = field(default_factory=list)    # tanh(c) per layer (standard variant)
    M: np.ndarray | None = None           # (T, B, h)
    MH: np.ndarray | None = None          # (T, B, h)
    h_out: np.ndarray | None = None       # (T, B, h) feeding the output layer
    logits: np.ndarray | None = None      # (T, B, N)


def _normalize_inputs(inputs):
    arr = np.asarray(inputs)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ConfigError("inputs must be a nonempty (B, T) index array")
    return arr.astype(np.int64, copy=False)


def _normalize_state0(arch, state0, batch, dtype):
    L, h = arch.layers, arch.hidden
    if state0 is None:
        h0 = np.zeros((L, batch, h), dtype=dtype)
        c0 = np.zeros((L, batch, h), dtype=dtype) if arch.uses_cell else None
        return h0, c0

    def expand(a, what):
        a = np.asarray(a, dtype=dtype)
        if a.ndim == 1:
            a = a[None, None, :]
        elif a.ndim == 2:
            a = a[None, :, :]
        try:
            return np.ascontiguousarray(np.broadcast_to(a, (L, batch, h)))
        except ValueError:
            raise ConfigError(f"{what} shape {a.shape} does not broadcast to {(L, batch, h)}")

    h0 = expand(state0.h, "initial hidden state")
    if arch.uses_cell:
        if state0.c is None:
            raise ConfigError(f"{arch.kind} needs a cell state")
        return h0, expand(state0.c, "initial cell state")
    return h0, None


def _normalize_masks(arch, masks, batch, dtype):
    if masks is None:
        return None, None
    L, h, e = arch.layers, arch.hidden, arch.embed

    def expand(a, trailing, what):
        a = np.asarray(a, dtype=dtype)
        while a.ndim < len(trailing):
            a = a[None]
        try:
            return np.ascontiguousarray(np.broadcast_to(a, trailing))
        except ValueError:
            raise ConfigError(f"{what} shape {a.shape} does not broadcast to {trailing}")

    mask_h = expand(masks.hidden_mask, (batch, L, h), "hidden mask")
    mask_e = None
    if e > 0:
        if masks.emb_mask is None:
            raise ConfigError("architecture has an embedding but masks carry no emb_mask")
        mask_e = expand(masks.emb_mask, (batch, e), "embedding mask")
    return mask_h, mask_e


def _ones_mask(batch, h, dtype):
    return np.ones((batch, h), dtype=dtype)


def forward_sequence(params, arch, state0, inputs, masks=None,
                     mask_output_path=True, backend=None):
    """Run one truncation window.

    Returns (tape, logits, state_final) with logits a (B, T, N) view onto the
    tape's time-major array; logits[b, t] predicts the symbol after
    inputs[b, t].  state_final carries (L, B, h) hidden (and cell) state for
    the next window.
    """
    if arch.kind == "tensor-rnn":
        raise ConfigError("tensor-rnn is a per-step oracle; sequences are not supported")
    eff, _ = effective_tensors(params, arch)
    kern = get_kernels(backend)
    dtype = eff["out_w"].dtype
    one = dtype.type(1.0)
    vocab = eff["out_w"].shape[1]

    inputs = _normalize_inputs(inputs)
    B, T = inputs.shape
    if inputs.min() < 0 or inputs.max() >= vocab:
        raise IndexError(f"input symbol out of range for vocab of {vocab}")
    x_tm = np.ascontiguousarray(inputs.T)
    h0, c0 = _normalize_state0(arch, state0, B, dtype)
    mask_h, mask_e = _normalize_masks(arch, masks, B, dtype)
    L, h = arch.layers, arch.hidden

    emb_rows = None
    if arch.embed > 0:
        emb_rows = eff["emb_w"][x_tm]                     # (T, B, e)
        if mask_e is not None:
            emb_rows = emb_rows * mask_e[None]
        flat_in = emb_rows.reshape(T * B, arch.embed)

        def in_contrib(wx, bias=None):
            xc = flat_in @ eff[wx]
            if bias is not None:
                xc += eff[bias]
            return np.ascontiguousarray(xc.reshape(T, B, -1))
    else:

        def in_contrib(wx, bias=None):
            xc = eff[wx][x_tm]                            # fresh (T, B, k)
            if bias is not None:
                xc += eff[bias]
            return xc

    def layer_mask(layer):
        if mask_h is None:
            return _ones_mask(B, h, dtype)
        return np.ascontiguousarray(mask_h[:, layer, :])

    tape = Tape(arch=arch, backend=backend, inputs=inputs, x_tm=x_tm,
                state0_h=h0, state0_c=c0, mask_h=mask_h, mask_e=mask_e,
                out_masked=False, emb_rows=emb_rows, xc_m=None)
    variant = _VARIANT_CODE[arch.lstm_variant]
    dummy_tc = np.zeros((0, 0, 0), dtype=dtype)

    if arch.kind == "vanilla-rnn":
        xc = in_contrib("rnn_wx", "rnn_b")
        H = np.empty((T, B, h), dtype=dtype)
        kern["rnn_forward"](xc, eff["rnn_wh"], h0[0], layer_mask(0), one, H)
        tape.H = [H]

    elif arch.kind == "mrnn":
        tape.xc_m = in_contrib("m_wx")
        xc_h = in_contrib("h_wx", "h_b")
        MH = np.empty((T, B, h), dtype=dtype)
        M = np.empty_like(MH)
        H = np.empty_like(MH)
        kern["mrnn_forward"](tape.xc_m, xc_h, eff["m_wh"], eff["hm_w"],
                             h0[0], layer_mask(0), one, MH, M, H)
        tape.MH, tape.M, tape.H = MH, M, [H]

    elif arch.kind == "mlstm":
        tape.xc_m = in_contrib("m_wx")
        xc_g = in_contrib("gates_wx", "gates_b")
        MH = np.empty((T, B, h), dtype=dtype)
        M = np.empty_like(MH)
        C = np.empty_like(MH)
        H = np.empty_like(MH)
        G = np.empty((T, B, 4 * h), dtype=dtype)
        TC = np.empty_like(MH) if variant == 0 else dummy_tc
        kern["mlstm_forward"](tape.xc_m, xc_g, eff["m_wh"], eff["gates_wm"],
                              h0[0], c0[0], layer_mask(0), variant, one,
                              MH, M, TC, C, H, G)
        tape.MH, tape.M = MH, M
        tape.H, tape.C, tape.G, tape.TC = [H], [C], [G], [TC]

    elif arch.kind in ("lstm", "stacked-lstm"):
        prefix = (lambda l: f"l{l}_") if arch.kind == "stacked-lstm" else (lambda l: "")
        below = None
        for layer in range(L):
            p = prefix(layer)
            if layer == 0:
                xc = in_contrib(p + "gates_wx", p + "gates_b")
            else:
                xc = below.reshape(T * B, h) @ eff[p + "gates_wx"]
                xc += eff[p + "gates_b"]
                xc = np.ascontiguousarray(xc.reshape(T, B, 4 * h))
            C = np.empty((T, B, h), dtype=dtype)
            H = np.empty_like(C)
            G = np.empty((T, B, 4 * h), dtype=dtype)
            TC = np.empty_like(C) if variant == 0 else dummy_tc
            kern["lstm_forward"](xc, eff[p + "gates_wh"], h0[layer], c0[layer],
                                 layer_mask(layer), variant, one, TC, C, H, G)
            tape.H.append(H)
            tape.C.append(C)
            tape.G.append(G)
            tape.TC.append(TC)
            below = H

    top = tape.H[-1]
    if mask_h is not None and mask_output_path:
        tape.h_out = top * mask_h[:, L - 1, :][None]
        tape.out_masked = True
    else:
        tape.h_out = top
    logits = tape.h_out.reshape(T * B, h) @ eff["out_w"] + eff["out_b"]
    tape.logits = np.ascontiguousarray(logits.reshape(T, B, vocab))

    h_f = np.stack([Hl[T - 1] for Hl in tape.H])
    c_f = np.stack([Cl[T - 1] for Cl in tape.C]) if tape.C else None
    state_final = StepState(h=h_f, c=c_f)
    return tape, tape.logits.transpose(1, 0, 2), state_final


def _masked_prevs(H, h0_layer, mask):
    """(T, B, h) of h_{t-1} * mask as the recurrent matrices consumed them."""
    HM = np.empty_like(H)
    np.multiply(h0_layer, mask, out=HM[0])
    if H.shape[0] > 1:
        np.multiply(H[:-1], mask[None], out=HM[1:])
    return HM


def _onehot(indices, n, dtype):
    flat = indices.reshape(-1)
    oh = np.zeros((flat.size, n), dtype=dtype)
    oh[np.arange(flat.size), flat] = 1
    return oh


def backward_sequence(params, arch, tape, targets):
    """Gradients of the window's mean cross-entropy (in bits) w.r.t. params.

    Returns (grads, dstate0): grads has exactly the keys of params; dstate0
    is the loss gradient w.r.t. the incoming state, reported for inspection
    and dropped across truncation boundaries by the trainer.
    """
    eff, wn = effective_tensors(params, arch)
    kern = get_kernels(tape.backend)
    dtype = eff["out_w"].dtype
    one = dtype.type(1.0)
    T, B, vocab = tape.logits.shape
    L, h = arch.layers, arch.hidden

    targets = _normalize_inputs(targets)
    if targets.shape != tape.inputs.shape:
        raise ConfigError(
            f"targets shape {targets.shape} does not match window {tape.inputs.shape}"
        )
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target symbol out of range for vocab of {vocab}")
    tgt_tm = np.ascontiguousarray(targets.T).reshape(-1)

    # d(mean bits)/d(logits) = (softmax - onehot) / (B*T*ln2)
    z = tape.logits.reshape(T * B, vocab)
    dlogits = np.exp(z - z.max(axis=1, keepdims=True))
    dlogits /= dlogits.sum(axis=1, keepdims=True)
    dlogits[np.arange(T * B), tgt_tm] -= one
    dlogits *= dtype.type(1.0 / (T * B * LN2))

    grads = {}
    grads["out_w"] = tape.h_out.reshape(T * B, h).T @ dlogits
    grads["out_b"] = dlogits.sum(axis=0)
    dH_top = (dlogits @ eff["out_w"].T).reshape(T, B, h)
    if tape.out_masked:
        dH_top = dH_top * tape.mask_h[:, L - 1, :][None]

    def layer_mask(layer):
        if tape.mask_h is None:
            return _ones_mask(B, h, dtype)
        return np.ascontiguousarray(tape.mask_h[:, layer, :])

    variant = _VARIANT_CODE[arch.lstm_variant]
    input_pairs = []   # (wx_name, bias_name, dXC_flat)
    dh0 = np.empty((L, B, h), dtype=dtype)
    dc0 = np.empty((L, B, h), dtype=dtype) if arch.uses_cell else None

    if arch.kind == "vanilla-rnn":
        H = tape.H[0]
        dXC = np.empty_like(H)
        kern["rnn_backward"](dH_top, H, eff["rnn_wh"], layer_mask(0), one, dXC, dh0[0])
        flat = dXC.reshape(T * B, h)
        HM = _masked_prevs(H, tape.state0_h[0], layer_mask(0))
        grads["rnn_wh"] = HM.reshape(T * B, h).T @ flat
        grads["rnn_b"] = flat.sum(axis=0)
        input_pairs.append(("rnn_wx", flat))

    elif arch.kind == "mrnn":
        H = tape.H[0]
        dXCh = np.empty_like(H)
        dXCm = np.empty_like(H)
        dMH = np.empty_like(H)
        kern["mrnn_backward"](dH_top, H, tape.MH, tape.xc_m, eff["m_wh"],
                              eff["hm_w"], layer_mask(0), one,
                              dXCh, dXCm, dMH, dh0[0])
        flat_h = dXCh.reshape(T * B, h)
        HM = _masked_prevs(H, tape.state0_h[0], layer_mask(0))
        grads["hm_w"] = tape.M.reshape(T * B, h).T @ flat_h
        grads["m_wh"] = HM.reshape(T * B, h).T @ dMH.reshape(T * B, h)
        grads["h_b"] = flat_h.sum(axis=0)
        input_pairs += [("h_wx", flat_h), ("m_wx", dXCm.reshape(T * B, h))]

    elif arch.kind == "mlstm":
        H, C, G, TC = tape.H[0], tape.C[0], tape.G[0], tape.TC[0]
        dXCg = np.empty_like(G)
        dXCm = np.empty_like(H)
        dMH = np.empty_like(H)
        kern["mlstm_backward"](dH_top, G, C, TC, H, tape.MH, tape.xc_m,
                               tape.state0_c[0], eff["m_wh"], eff["gates_wm"],
                               layer_mask(0), variant, one,
                               dXCg, dXCm, dMH, dh0[0], dc0[0])
        flat_g = dXCg.reshape(T * B, 4 * h)
        HM = _masked_prevs(H, tape.state0_h[0], layer_mask(0))
        grads["gates_wm"] = tape.M.reshape(T * B, h).T @ flat_g
        grads["m_wh"] = HM.reshape(T * B, h).T @ dMH.reshape(T * B, h)
        grads["gates_b"] = flat_g.sum(axis=0)
        input_pairs += [("gates_wx", flat_g), ("m_wx", dXCm.reshape(T * B, h))]

    elif arch.kind in ("lstm", "stacked-lstm"):
        prefix = (lambda l: f"l{l}_") if arch.kind == "stacked-lstm" else (lambda l: "")
        dH_l = dH_top
        for layer in range(L - 1, -1, -1):
            p = prefix(layer)
            H, C, G, TC = tape.H[layer], tape.C[layer], tape.G[layer], tape.TC[layer]
            dXC = np.empty_like(G)
            kern["lstm_backward"](dH_l, G, C, TC, H, tape.state0_c[layer],
                                  eff[p + "gates_wh"], layer_mask(layer), variant,
                                  one, dXC, dh0[layer], dc0[layer])
            flat = dXC.reshape(T * B, 4 * h)
            HM = _masked_prevs(H, tape.state0_h[layer], layer_mask(layer))
            grads[p + "gates_wh"] = HM.reshape(T * B, h).T @ flat
            grads[p + "gates_b"] = flat.sum(axis=0)
            if layer > 0:
                below = tape.H[layer - 1].reshape(T * B, h)
                grads[p + "gates_wx"] = below.T @ flat
                dH_l = (flat @ eff[p + "gates_wx"].T).reshape(T, B, h)
            else:
                input_pairs.append((p + "gates_wx", flat))
    else:
        raise ConfigError(f"backward not implemented for {arch.kind}")

    # input-path gradients: one-hot gather or embedding projection
    if arch.embed > 0:
        emb_flat = tape.emb_rows.reshape(T * B, arch.embed)
        d_emb = np.zeros_like(emb_flat)
        for wx_name, dflat in input_pairs:
            grads[wx_name] = emb_flat.T @ dflat
            d_emb += dflat @ eff[wx_name].T
        if tape.mask_e is not None:
            d_emb = (d_emb.reshape(T, B, arch.embed) * tape.mask_e[None]).reshape(
                T * B, arch.embed
            )
        onehot = _onehot(tape.x_tm, vocab, dtype)
        grads["emb_w"] = onehot.T @ d_emb
    else:
        onehot = _onehot(tape.x_tm, vocab, dtype)
        for wx_name, dflat in input_pairs:
            grads[wx_name] = onehot.T @ dflat

    for name in wn:
        dv, dg = weight_norm_backward(params[name], params[name + "_g"], grads[name])
        grads[name] = np.asarray(dv, dtype=dtype)
        grads[name + "_g"] = np.asarray(dg, dtype=dtype)

    missing = set(params) - set(grads)
    if missing:
        raise ConfigError(f"gradients missing for tensors: {sorted(missing)}")
    return grads, StepState(h=dh0, c=dc0)


def loss_bits(logits, targets):
    """Mean cross-entropy in bits, at float64, from (B, T, N) logits."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[-1]
    zf = z.reshape(-1, n)
    tgt = np.asarray(targets).reshape(-1)
    m = zf.max(axis=1)
    lse = m + np.log(np.exp(zf - m[:, None]).sum(axis=1))
    nats = lse - zf[np.arange(zf.shape[0]), tgt]
    return float(nats.mean() / LN2)


def per_position_bits(logits, targets):
    """(B, T) float64 matrix of -log2 p(target) from (B, T, N) logits."""
    z = np.asarray(logits, dtype=np.float64)
    b, t, n = z.shape
    zf = z.reshape(-1, n)
    tgt = np.asarray(targets).reshape(-1)
    m = zf.max(axis=1)
    lse = m + np.log(np.exp(zf - m[:, None]).sum(axis=1))
    nats = lse - zf[np.arange(zf.shape[0]), tgt]
    return (nats / LN2).reshape(b, t)


def finite_difference_grads(loss_at, params, delta=1e-5):
    """Central-difference gradient of loss_at() for every tensor in params.

    Perturbs entries in place; params are restored exactly afterwards.
    """
    out = {}
    for name in sorted(params):
        flat = params[name].reshape(-1)
        fd = np.empty(flat.shape, dtype=np.float64)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + delta
            up = loss_at()
            flat[idx] = keep - delta
            down = loss_at()
            flat[idx] = keep
            fd[idx] = (up - down) / (2 * delta)
        out[name] = fd.reshape(params[name].shape)
    return out


def relative_error(a, b, floor=1e-8):
    """|a - b| / max(floor, |a| + |b|) with |.| the 2-norm over each tensor."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - b) / max(floor, np.linalg.norm(a) + np.linalg.norm(b)))


def grad_check(arch, dims, seed, weight_norm=False, dropout=False, backend=None,
               delta=1e-5):
    """Worst relative error of analytic vs. central-difference gradients.

    dims is (vocab, hidden, window).  Runs at float64 with two lanes, a
    random nonzero initial state and, optionally, weight normalization and
    fixed dropout masks.  Every parameter tensor and the incoming-state
    gradient are compared by |a-b| / max(1e-8, |a|+|b|); the per-coordinate
    variant of the same formula sits below the float64 finite-difference
    noise floor for small-magnitude coordinates, so the comparison unit is
    the tensor.
    """
    n, h, t_len = dims
    if isinstance(arch, str):
        arch = Arch(kind=arch, hidden=h, layers=2 if arch == "stacked-lstm" else 1)
    if arch.hidden != h:
        raise ConfigError(f"dims hidden {h} does not match arch hidden {arch.hidden}")
    batch = 2
    rng = make_rng(seed)
    params = init_params(arch, n, 0.7, rng, weight_norm=weight_norm, dtype=np.float64)
    state0 = StepState(
        h=rng.standard_normal((arch.layers, batch, h)) * 0.5,
        c=rng.standard_normal((arch.layers, batch, h)) * 0.5 if arch.uses_cell else None,
    )
    inputs = rng.integers(0, n, size=(batch, t_len))
    targets = rng.integers(0, n, size=(batch, t_len))
    masks = None
    if dropout:
        masks = sample_masks(arch.embed, h, 0.25, rng, p_emb=0.4,
                             batch=batch, layers=arch.layers, dtype=np.float64)

    def loss_at():
        _, logits, _ = forward_sequence(params, arch, state0, inputs, masks,
                                        backend=backend)
        return loss_bits(logits, targets)

    tape, logits, _ = forward_sequence(params, arch, state0, inputs, masks,
                                       backend=backend)
    grads, dstate0 = backward_sequence(params, arch, tape, targets)

    fd = finite_difference_grads(loss_at, params, delta)
    worst = max(relative_error(grads[name], fd[name]) for name in params)

    state_tensors = {"state_h": state0.h}
    state_grads = {"state_h": dstate0.h}
    if arch.uses_cell:
        state_tensors["state_c"] = state0.c
        state_grads["state_c"] = dstate0.c
    fd_state = finite_difference_grads(loss_at, state_tensors, delta)
    for name in state_tensors:
        worst = max(worst, relative_error(state_grads[name], fd_state[name]))
    return worst
