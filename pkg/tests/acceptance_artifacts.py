"""Build and cache the expensive artifacts behind the acceptance suite.

The desk-scale comparison trains two parameter-matched models (one
multiplicative, one plain LSTM) for three passes over the 8 MB corpus and
streams their test-split losses.  That costs tens of minutes, so results are
cached under tests/_cache and rebuilt only when absent.  Run this module
directly to pre-warm the cache:

    python -m tests.acceptance_artifacts
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from mlstm_lab.checkpoint import load_checkpoint
from mlstm_lab.data import load_corpus, split
from mlstm_lab.training import RunConfig, evaluate_stream, train

from .corpus_builder import CACHE_DIR, build_corpus

BACKEND = "numpy"   # faster of the two at these widths; identical for both models

BASE = dict(optimizer="adam", lr_start=1e-3, lr_min=1e-4,
            batch_lanes=32, window=225, epochs=3, eval_interval=1_000_000,
            patience=50, seed=0, split=[0.9, 0.05, 0.05])
MODELS = {
    "mlstm": RunConfig.from_dict({**BASE, "arch": "mlstm", "hidden": 256}),
    "lstm": RunConfig.from_dict({**BASE, "arch": "lstm", "hidden": 292}),
}


def _model_dir(name):
    return CACHE_DIR / f"c8-{name}"


def ensure_model(name, corpus, progress=None):
    """Train (or load) one desk-scale model; returns its cache directory."""
    out = _model_dir(name)
    meta_path = out / "meta.json"
    if meta_path.exists():
        return out
    out.mkdir(parents=True, exist_ok=True)
    config = MODELS[name]
    t0 = time.perf_counter()
    best, log = train(config, corpus, backend=BACKEND, progress=progress,
                      checkpoint_dir=str(out))
    train_wall = time.perf_counter() - t0
    log.to_csv(out / "train_log.csv")

    _train_v, _valid_v, test_v = split(corpus, config.split)
    test_bits, losses = evaluate_stream(best, test_v, backend=BACKEND)
    np.save(out / "test_losses.npy", losses)
    meta = {
        "name": name,
        "config": config.to_dict(),
        "best_valid_bits": best.meta["best_valid_bits"],
        "test_bits": test_bits,
        "steps": log.rows[-1]["step"],
        "train_wall_s": train_wall,
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return out


def ensure_all(progress=None):
    corpus_path = build_corpus()
    corpus = load_corpus(corpus_path)
    dirs = {name: ensure_model(name, corpus, progress=progress) for name in MODELS}
    return corpus_path, dirs


def load_artifacts():
    """(corpus_path, {name: {meta, ckpt, losses}}) — building anything missing."""
    corpus_path, dirs = ensure_all()
    out = {}
    for name, d in dirs.items():
        with open(d / "meta.json") as fh:
            meta = json.load(fh)
        out[name] = {
            "meta": meta,
            "ckpt": load_checkpoint(d / "best.ckpt"),
            "losses": np.load(d / "test_losses.npy"),
            "dir": d,
        }
    return corpus_path, out


if __name__ == "__main__":
    import sys

    def report(msg):
        print(msg, file=sys.stderr, flush=True)

    t0 = time.perf_counter()
    corpus_path, dirs = ensure_all(progress=report)
    report(f"corpus: {corpus_path}")
    for name, d in dirs.items():
        with open(d / "meta.json") as fh:
            meta = json.load(fh)
        report(f"{name}: valid {meta['best_valid_bits']:.4f} bits, "
               f"test {meta['test_bits']:.4f} bits, "
               f"{meta['steps']} steps, {meta['train_wall_s']:.0f}s")
    report(f"total {time.perf_counter() - t0:.0f}s")
