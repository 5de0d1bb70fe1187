"""Measurement tools over per-position loss streams.

Conventions: a loss vector entry ``losses[i]`` is the bits paid to predict
the byte at stream offset ``i + 1`` (offset 0 has no context and is never
scored).  Loss CSVs carry that byte offset in their ``position`` column.

The surprise set is the top ceil(0.1 * n) positions by loss (nearest-rank
90th-percentile threshold); every position whose loss ties the threshold is
included, so the set can exceed 10% under ties.  Offset-k means average the
losses k positions after each surprise position, skipping positions that run
off the end.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Corpus
from .errors import DataError

DELIMITERS = (0x20, 0x0A)   # space and newline end a word


@dataclass(frozen=True)
class SurpriseReport:
    threshold: float            # nearest-rank 90th percentile loss, bits
    surprise_mean: float        # mean loss over the surprise set
    offset_means: tuple         # mean loss k steps after a surprise, k = 1..len
    overall_mean: float         # mean over every scored position
    count: int                  # surprise-set size (>= ceil(0.1 n) under ties)
    n_positions: int            # scored stream length the set was drawn from


@dataclass(frozen=True)
class SurpriseGap:
    """Fieldwise differences a - b between two reports on the same stream."""

    n_positions: int
    threshold_gap: float
    surprise_gap: float
    overall_gap: float
    offset_gaps: tuple
    post_surprise_gap: float    # mean of the available offset gaps

    @property
    def recovery_ratio(self):
        """post-surprise gap over overall gap (symmetric under swapping)."""
        if self.post_surprise_gap is None or self.overall_gap == 0.0:
            return None
        return self.post_surprise_gap / self.overall_gap


def surprise_report(losses, offsets=4):
    losses = np.asarray(losses, dtype=np.float64).ravel()
    n = losses.size
    if n == 0:
        raise DataError("empty loss sequence")
    if n < 10:
        raise DataError(f"need at least 10 scored positions for a 10% set, got {n}")
    k = (n + 9) // 10   # ceil(n/10) in exact integer arithmetic
    threshold = float(np.sort(losses)[n - k])
    surprise_idx = np.flatnonzero(losses >= threshold)
    offset_means = []
    for off in range(1, offsets + 1):
        pos = surprise_idx + off
        pos = pos[pos < n]
        offset_means.append(float(losses[pos].mean()) if pos.size else None)
    return SurpriseReport(
        threshold=threshold,
        surprise_mean=float(losses[surprise_idx].mean()),
        offset_means=tuple(offset_means),
        overall_mean=float(losses.mean()),
        count=int(surprise_idx.size),
        n_positions=int(n),
    )


def shared_surprise_reports(losses_a, losses_b, offsets=4):
    """Reports for two models over one shared surprise set, drawn from the
    averaged per-position losses (the comparison protocol)."""
    a = np.asarray(losses_a, dtype=np.float64).ravel()
    b = np.asarray(losses_b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DataError(f"loss streams differ in length: {a.size} vs {b.size}")
    mean_report = surprise_report((a + b) / 2.0, offsets=offsets)
    shared = (a + b) / 2.0 >= mean_report.threshold
    idx = np.flatnonzero(shared)

    def rebuild(losses):
        offset_means = []
        for off in range(1, offsets + 1):
            pos = idx + off
            pos = pos[pos < losses.size]
            offset_means.append(float(losses[pos].mean()) if pos.size else None)
        return SurpriseReport(
            threshold=mean_report.threshold,
            surprise_mean=float(losses[idx].mean()),
            offset_means=tuple(offset_means),
            overall_mean=float(losses.mean()),
            count=int(idx.size),
            n_positions=int(losses.size),
        )

    return rebuild(a), rebuild(b)


def compare_surprise(report_a, report_b):
    if report_a.n_positions != report_b.n_positions:
        raise DataError(
            f"reports cover different stream lengths: "
            f"{report_a.n_positions} vs {report_b.n_positions}")
    gaps = []
    for x, y in zip(report_a.offset_means, report_b.offset_means):
        gaps.append(None if x is None or y is None else x - y)
    present = [g for g in gaps if g is not None]
    return SurpriseGap(
        n_positions=report_a.n_positions,
        threshold_gap=report_a.threshold - report_b.threshold,
        surprise_gap=report_a.surprise_mean - report_b.surprise_mean,
        overall_gap=report_a.overall_mean - report_b.overall_mean,
        offset_gaps=tuple(gaps),
        post_surprise_gap=float(np.mean(present)) if present else None,
    )


def bits_per_word(bits_per_symbol, n_symbols, n_words):
    """(bits/word, perplexity): bits_per_symbol * n_symbols / n_words, 2**that."""
    if n_symbols <= 0 or n_words <= 0:
        raise DataError("symbol and word counts must be positive")
    bpw = float(bits_per_symbol) * n_symbols / n_words
    return bpw, 2.0 ** bpw


@dataclass(frozen=True)
class WordScore:
    text: bytes       # the word's bytes, delimiter not included
    start: int        # byte offset of the word's first byte in the stream
    bits: float       # -log2 prob over its scored bytes plus its terminator


def split_words(raw):
    """Maximal runs of non-delimiter bytes as (start, end, terminator) with
    terminator the index of the single delimiter ending the word (None at EOF)."""
    raw = np.frombuffer(bytes(raw), dtype=np.uint8)
    is_delim = np.isin(raw, DELIMITERS)
    words = []
    n = raw.size
    i = 0
    while i < n:
        if is_delim[i]:
            i += 1
            continue
        j = i
        while j < n and not is_delim[j]:
            j += 1
        words.append((i, j, j if j < n else None))
        i = j + 1
    return words


def word_partition(raw, losses):
    """Split a loss stream into per-word scores plus stray bits.

    losses[i] scores the byte at offset i+1; offset 0 is never scored.  Every
    scored byte lands in exactly one word (its own bytes plus its single
    terminating delimiter) or in the stray bucket (extra delimiters), so the
    word bits and stray bits sum to losses.sum().
    """
    raw = bytes(raw)
    losses = np.asarray(losses, dtype=np.float64).ravel()
    n = len(raw)
    if losses.size != n - 1:
        raise DataError(f"{n}-byte text needs {n - 1} losses, got {losses.size}")

    def bits_at(p):       # loss of the byte at offset p (0 is unscored)
        return float(losses[p - 1]) if p >= 1 else 0.0

    scores = []
    used = np.zeros(n, dtype=bool)
    for start, end, term in split_words(raw):
        total = sum(bits_at(p) for p in range(start, end))
        used[start:end] = True
        if term is not None:
            total += bits_at(term)
            used[term] = True
        scores.append(WordScore(text=raw[start:end], start=start, bits=total))
    stray = sum(bits_at(p) for p in range(n) if not used[p])
    return scores, float(stray)


def word_scores(checkpoint, text, losses=None, backend=None):
    """Per-word bits for a byte string under a model's streaming context."""
    from .training import evaluate_stream   # local import: avoids a cycle

    raw = bytes(text)
    if losses is None:
        view = Corpus(raw=np.frombuffer(raw, dtype=np.uint8),
                      vocab=np.asarray(checkpoint.vocab, dtype=np.uint8),
                      source="<word-scores>")
        _mean, losses = evaluate_stream(checkpoint, view, backend=backend)
    scores, _stray = word_partition(raw, losses)
    return scores


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def emit_csv(obj, target):
    """Write plot/report data with a documented header and stable columns."""
    if hasattr(target, "write"):
        _emit(obj, target)
        return target
    with open(target, "w", newline="") as fh:
        _emit(obj, fh)
    return target


def _emit(obj, fh):
    from .training import TrainLog   # local import: avoids a cycle

    w = csv.writer(fh, lineterminator="\n")
    if isinstance(obj, SurpriseReport):
        w.writerow(["offset", "mean_bits"])
        for k, mean in enumerate(obj.offset_means, start=1):
            w.writerow([k, _fmt(mean)])
    elif isinstance(obj, TrainLog):
        obj.to_csv(fh)
    elif isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], WordScore):
        w.writerow(["word", "start", "bits"])
        for s in obj:
            w.writerow([s.text.decode("latin-1"), s.start, _fmt(s.bits)])
    elif isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], dict):
        cols = list(obj[0])
        w.writerow(cols)
        for row in obj:
            w.writerow([_fmt(row.get(c)) for c in cols])
    elif isinstance(obj, (list, tuple, np.ndarray)):
        losses = np.asarray(obj, dtype=np.float64).ravel()
        w.writerow(["position", "bits"])
        for i, v in enumerate(losses):
            w.writerow([i + 1, _fmt(float(v))])
    else:
        raise DataError(f"no CSV form for {type(obj).__name__}")


def load_loss_csv(source):
    """Read a position,bits CSV back into a loss vector ordered by position."""
    if hasattr(source, "read"):
        rows = list(csv.reader(source))
    else:
        with open(source, newline="") as fh:
            rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ("position", "bits"):
        raise DataError("loss CSV must start with header position,bits")
    pairs = sorted((int(p), float(b)) for p, b in rows[1:])
    return np.asarray([b for _p, b in pairs], dtype=np.float64)
