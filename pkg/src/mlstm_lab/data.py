"""Byte-level corpus loading, contiguous splits, and lane batching.

A corpus is the raw file bytes plus a vocabulary of the distinct byte values
present (sorted ascending, ids dense in [0, N)).  Splits are contiguous
zero-copy views sharing the full-file vocabulary.  Batching divides a split
into B equal contiguous lane segments; lane b streams its segment in adjacent
windows of T symbols so recurrent state carried between windows always sees
the next bytes of the same text.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError


def _build_lut(vocab):
    lut = np.full(256, -1, dtype=np.int16)
    lut[vocab.astype(np.intp)] = np.arange(len(vocab), dtype=np.int16)
    return lut


@dataclass(frozen=True)
class Corpus:
    """Raw bytes with their byte->id vocabulary.  Splits are also Corpus
    objects: slices of the same buffer keeping the full-file vocab."""

    raw: np.ndarray                      # (n,) uint8
    vocab: np.ndarray                    # (V,) uint8, ascending byte values
    source: str = ""
    lut: np.ndarray = field(default=None, repr=False)  # (256,) byte -> id

    def __post_init__(self):
        if self.lut is None:
            object.__setattr__(self, "lut", _build_lut(self.vocab))

    def __len__(self):
        return len(self.raw)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def view(self, start, stop, label=""):
        name = f"{self.source}[{start}:{stop}]" if not label else label
        return Corpus(raw=self.raw[start:stop], vocab=self.vocab,
                      source=name, lut=self.lut)

    def ids(self, start=0, stop=None):
        """Symbol ids for raw[start:stop], shape (m,) int64."""
        return self.lut[self.raw[start:stop]].astype(np.int64)

    def encode(self, data):
        """bytes -> ids; unknown bytes are a hard error."""
        arr = np.frombuffer(bytes(data), dtype=np.uint8)
        ids = self.lut[arr]
        if np.any(ids < 0):
            bad = int(arr[np.argmax(ids < 0)])
            raise DataError(f"byte 0x{bad:02x} not in the corpus vocabulary")
        return ids.astype(np.int64)

    def decode(self, ids):
        """ids -> bytes."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise DataError("symbol id outside the vocabulary")
        return self.vocab[ids].tobytes()


def corpus_from_bytes(data, source="<memory>"):
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    if raw.size == 0:
        raise DataError(f"empty corpus: {source}")
    vocab = np.unique(raw)
    return Corpus(raw=raw, vocab=vocab, source=source)


def load_corpus(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    return corpus_from_bytes(data, source=str(path))


def split(corpus, fractions=(0.9, 0.05, 0.05)):
    """Contiguous views at byte offsets floor(cumulative_fraction * length).

    The views share the full-file vocabulary so ids are stable across splits.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"split fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    n = len(corpus)
    bounds = [0]
    cum = 0.0
    for f in fractions[:-1]:
        cum += f
        bounds.append(int(np.floor(cum * n)))
    bounds.append(n)
    labels = ("train", "valid", "test")
    views = []
    for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        if b <= a:
            raise ConfigError(f"split {i} is empty at fractions {fractions} on {n} bytes")
        label = labels[i] if len(fractions) == 3 else f"split{i}"
        views.append(corpus.view(a, b, label=f"{corpus.source}:{label}"))
    return tuple(views)


def window_count(n, batch_lanes, window):
    """Windows per epoch: each of B lanes covers floor(n/B) bytes and yields
    one (input, target) pair per symbol except the lane's last byte."""
    seg = n // batch_lanes
    return max(0, (seg - 1) // window)


def make_batches(view, batch_lanes, window, start_window=0):
    """Yield (inputs, targets, window_index) over one pass of the split.

    inputs/targets are (B, T) int64; targets are inputs shifted one byte
    right within each lane; windows within a lane are adjacent.  Trailing
    bytes that do not fill a window are dropped.  start_window skips ahead
    (used when resuming mid-epoch).
    """
    n = len(view)
    if batch_lanes < 1 or window < 1:
        raise ConfigError("batch_lanes and window must be >= 1")
    if n < batch_lanes * (window + 1):
        raise ConfigError(
            f"split of {n} bytes cannot fill one window at "
            f"batch_lanes={batch_lanes}, window={window} (needs {batch_lanes * (window + 1)})")
    seg = n // batch_lanes
    n_windows = (seg - 1) // window
    lane_starts = np.arange(batch_lanes, dtype=np.int64) * seg   # (B,)
    offsets = np.arange(window, dtype=np.int64)                  # (T,)
    for w in range(start_window, n_windows):
        base = lane_starts[:, None] + w * window + offsets[None, :]  # (B,T)
        inputs = view.lut[view.raw[base]].astype(np.int64)
        targets = view.lut[view.raw[base + 1]].astype(np.int64)
        yield inputs, targets, w
