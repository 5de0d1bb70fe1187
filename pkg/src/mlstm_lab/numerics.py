"""Core dense math: softmax, bit-measured cross entropy, scaled orthogonal
initialisation and categorical sampling.

Conventions used package-wide:

* the only numeric container is the numpy ndarray (2-D row-major for weights);
* "training" precision is float32, "verification" precision is float64 --
  finite-difference gradient checks are only meaningful at the latter;
* randomness always comes from an explicitly passed ``numpy.random.Generator``
  backed by PCG64, so a (seed, algorithm) pair reproduces the stream exactly
  on every platform.
"""
from __future__ import annotations

import enum

import numpy as np

LN2 = float(np.log(2.0))

RNG_ALGORITHM = "pcg64"


class Precision(enum.Enum):
    """Numeric width used for parameters and activations."""

    TRAINING = "training"
    VERIFICATION = "verification"

    @property
    def dtype(self):
        return np.float32 if self is Precision.TRAINING else np.float64

    @staticmethod
    def from_name(name):
        for p in Precision:
            if p.value == name:
                return p
        raise ValueError(f"unknown precision {name!r}; expected 'training' or 'verification'")


def make_rng(seed):
    """PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, n):
    """n independent child generators derived deterministically from seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def softmax(logits, axis=-1):
    """Probabilities exp(z_i)/sum_j exp(z_j), computed with max-subtraction.

    Subtracting the per-row maximum keeps exp() in range for any logit
    magnitude and makes the result stable under constant shifts.
    """
    z = np.asarray(logits)
    if z.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits)
    if z.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cross_entropy_bits(probs, target):
    """-log2(probs[target]).

    Returns +inf when the target has probability zero; the training loop
    treats any non-finite loss as a hard abort.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be a vector")
    if not 0 <= target < p.shape[0]:
        raise IndexError(f"target {target} out of range for {p.shape[0]} symbols")
    pt = p[target]
    if pt <= 0.0:
        return np.inf
    return float(-np.log2(pt))


def scaled_orthogonal(rows, cols, scale, rng, dtype=np.float64):
    """scale * Q with Q drawn Haar-uniform from the orthogonal group.

    Built from the QR decomposition of an iid standard-normal matrix, with the
    signs fixed so diag(R) > 0 (otherwise the distribution depends on the QR
    implementation).  Only square requests are supported: every recurrent
    matrix in this package is square.
    """
    if rows != cols:
        raise ValueError(f"scaled_orthogonal requires a square shape, got {rows}x{cols}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return np.asarray(scale * q, dtype=dtype)


def uniform_fan_in(fan_in, fan_out, rng, dtype=np.float64):
    """Uniform[-s, s] with s = 1/sqrt(fan_in), for non-square matrices."""
    s = 1.0 / np.sqrt(fan_in)
    return np.asarray(rng.uniform(-s, s, size=(fan_in, fan_out)), dtype=dtype)


def sample_categorical(probs, rng, temperature=1.0):
    """Index drawn from softmax(log(probs) / temperature).

    temperature 1 samples the given distribution; temperature -> 0 approaches
    argmax.  Deterministic given the generator state.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] == 0:
        raise ValueError("probs must be a nonempty vector")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ValueError("probs must be a valid distribution")
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    scaled = softmax(logp / temperature)
    u = rng.random()
    return int(np.searchsorted(np.cumsum(scaled), u, side="right").clip(0, p.shape[0] - 1))


def assert_finite(arr, what):
    """Raise ValueError when arr contains NaN/Inf; cheap guard for public ops."""
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in {what}")
