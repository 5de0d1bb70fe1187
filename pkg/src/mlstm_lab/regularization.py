"""Variational dropout masks and weight normalization.

Dropout here is the variational flavour: one mask per truncation window,
reused at every timestep inside the window, resampled between windows.  Masks
use the inverted convention (surviving entries scaled by 1/(1-p)) so the
evaluation path applies no rescaling at all.

Weight normalization reparameterizes a square recurrent matrix as a direction
tensor v plus a per-output-unit gain g; the effective matrix has column j
(output unit j in this package's (in, out) storage) equal to
g_j * v[:, j] / ||v[:, j]||_2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_NORM_FLOOR = 1e-12


@dataclass
class DropoutMasks:
    """Masks for one truncation window.

    emb_mask: (e,) or (B, e) or None; hidden_mask: (h,) or (B, L, h).
    Entries are 0 or 1/(1-p).  The same arrays must be applied at every
    timestep of the window.
    """

    emb_mask: np.ndarray | None
    hidden_mask: np.ndarray
    rate: float
    rate_emb: float = field(default=0.0)


def _draw(shape, p, rng, dtype):
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype(1.0 - p)


def sample_masks(e, h, p, rng, p_emb=None, batch=None, layers=1, dtype=np.float64):
    """Fresh masks for one window.

    e: embedding width (0 = one-hot input, no embedding mask); h: hidden
    width; p: hidden drop rate; p_emb: embedding drop rate (defaults to p).
    batch=None gives the single-lane vector shapes; an integer gives per-lane
    masks (B, ...).  layers > 1 draws an independent hidden mask per layer.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    p_emb = p if p_emb is None else p_emb
    if not 0.0 <= p_emb < 1.0:
        raise ConfigError(f"embedding dropout rate must be in [0, 1), got {p_emb}")
    if batch is None:
        hid_shape = (h,) if layers == 1 else (layers, h)
        emb_shape = (e,)
    else:
        hid_shape = (batch, layers, h)
        emb_shape = (batch, e)
    hidden = _draw(hid_shape, p, rng, dtype)
    emb = _draw(emb_shape, p_emb, rng, dtype) if e else None
    return DropoutMasks(emb_mask=emb, hidden_mask=hidden, rate=p, rate_emb=p_emb)


def apply_hidden_mask(h_prev, masks):
    """h_prev * hidden_mask, broadcasting; identity when masks is None."""
    if masks is None:
        return h_prev
    m = masks.hidden_mask
    if m.shape[-1] != h_prev.shape[-1]:
        raise ConfigError(
            f"hidden mask width {m.shape[-1]} does not match state width {h_prev.shape[-1]}"
        )
    return h_prev * m


def weight_norm_effective(v, g):
    """Effective matrix with column j = g_j * v[:, j] / ||v[:, j]||.

    v: (in, out) direction storage; g: (out,) gains.  Raises on a degenerate
    (near-zero-norm) direction column, where the reparameterization is
    undefined.
    """
    v = np.asarray(v)
    g = np.asarray(g)
    if v.ndim != 2 or g.shape != (v.shape[1],):
        raise ConfigError(f"weight-norm shapes inconsistent: v {v.shape}, g {g.shape}")
    norms = np.sqrt(np.einsum("ij,ij->j", v, v))
    if np.any(norms < _NORM_FLOOR):
        raise ConfigError("weight-norm direction column has near-zero norm")
    return v * (g / norms)


def weight_norm_backward(v, g, d_eff):
    """Chain d(loss)/d(effective) back to (d_v, d_g).

    With n_j = ||v_j||, W_j = g_j v_j / n_j:
      d_g[j]   = (v_j . dW_j) / n_j
      d_v[:,j] = (g_j/n_j) dW_j - (g_j d_g[j] / n_j^2) v_j
    """
    norms = np.sqrt(np.einsum("ij,ij->j", v, v))
    d_g = np.einsum("ij,ij->j", v, d_eff) / norms
    d_v = d_eff * (g / norms) - v * (g * d_g / (norms * norms))
    return d_v, d_g


def weight_norm_init_gains(v):
    """Gains equal to current column norms, so the effective matrix is v."""
    return np.sqrt(np.einsum("ij,ij->j", v, v))
