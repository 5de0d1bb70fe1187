"""Truncated-BPTT training: config schema, loop, evaluation, presets.

The loop streams contiguous windows per lane, carrying recurrent state across
windows and resetting it at epoch boundaries.  Per window it resamples the
variational dropout masks, runs forward/backward, and applies one optimizer
step.  Validation runs every `eval_interval` targets; the best-validation
snapshot is kept and training stops early after `patience` non-improving
evaluations.  Checkpoints carry optimizer state, rng state, and the live
recurrent state, so resuming in deterministic mode reproduces the
uninterrupted trajectory bitwise.
"""
from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .cells import ARCH_KINDS, LSTM_VARIANTS, Arch, StepState, init_params, zero_state
from .checkpoint import Checkpoint
from .data import make_batches, split, window_count
from .errors import ConfigError, DataError, NumericError
from .numerics import Precision, make_rng
from .optimizers import (make_optimizer, optimizer_from_parts, optimizer_step,
                         schedule_value)
from .regularization import sample_masks
from .sequence import forward_sequence, backward_sequence, loss_bits, per_position_bits

OPTIMIZERS = ("adam", "rmsprop-normalized")
PRECISIONS = ("training", "verification")


@dataclass(frozen=True)
class RunConfig:
    """One training run, serialisable to/from the JSON config file."""

    arch: str = "mlstm"
    hidden: int = 256
    layers: int = 1
    embed: int = 0
    lstm_variant: str = "standard"
    weight_norm: bool = False
    dropout_hidden: float = 0.0
    dropout_embed: float = 0.0
    dropout_output_path: bool = True
    optimizer: str = "adam"
    lr_start: float = 1e-3
    lr_min: float = 1e-4
    ell_start: float = 1e-3
    ell_end: float = 1e-5
    batch_lanes: int = 16
    window: int = 225
    epochs: int = 4
    eval_interval: int = 1_000_000
    patience: int = 10
    seed: int = 0
    init_scale: float = 1.0
    precision: str = "training"
    split: tuple = (0.9, 0.05, 0.05)
    total_steps: int = 0   # 0: derived as epochs * windows-per-epoch

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        if self.arch not in ARCH_KINDS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCH_KINDS}")
        if self.lstm_variant not in LSTM_VARIANTS:
            raise ConfigError(f"unknown lstm_variant {self.lstm_variant!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected {OPTIMIZERS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}; expected {PRECISIONS}")
        for name in ("hidden", "layers", "batch_lanes", "window", "epochs",
                     "eval_interval", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("embed", "seed", "total_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("dropout_hidden", "dropout_embed"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        if self.init_scale <= 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        if len(self.split) != 3:
            raise ConfigError(f"split needs three fractions, got {self.split}")

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dc_fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        out["split"] = list(self.split)
        return out

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)

    def arch_shape(self):
        return Arch(kind=self.arch, hidden=self.hidden, layers=self.layers,
                    embed=self.embed, lstm_variant=self.lstm_variant)

    @property
    def uses_dropout(self):
        return self.dropout_hidden > 0.0 or self.dropout_embed > 0.0


LOG_FIELDS = ("step", "chars_seen", "schedule", "train_bits", "valid_bits", "wall_s")


@dataclass
class TrainLog:
    """Append-only eval-point log; CSV header step,chars_seen,schedule,train_bits,valid_bits,wall_s."""

    rows: list = field(default_factory=list)

    def append(self, **row):
        if set(row) != set(LOG_FIELDS):
            raise ConfigError(f"log row needs fields {LOG_FIELDS}")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ConfigError("log steps must be strictly increasing")
        self.rows.append({k: row[k] for k in LOG_FIELDS})

    def to_csv(self, target):
        if hasattr(target, "write"):
            self._write(target)
            return
        with open(target, "w", newline="") as fh:
            self._write(fh)

    def _write(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in self.rows:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in LOG_FIELDS])

    def csv_text(self):
        buf = io.StringIO()
        self._write(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source):
        if hasattr(source, "read"):
            rows = list(csv.reader(source))
        else:
            with open(source, newline="") as fh:
                rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != LOG_FIELDS:
            raise DataError(f"log is missing header {','.join(LOG_FIELDS)}")
        log = cls()
        for raw in rows[1:]:
            vals = dict(zip(LOG_FIELDS, raw))
            log.append(step=int(vals["step"]), chars_seen=int(vals["chars_seen"]),
                       schedule=float(vals["schedule"]), train_bits=float(vals["train_bits"]),
                       valid_bits=float(vals["valid_bits"]), wall_s=float(vals["wall_s"]))
        return log

    def core_rows(self):
        """Rows without wall_s, the deterministic part of the log."""
        return [{k: r[k] for k in LOG_FIELDS if k != "wall_s"} for r in self.rows]


def _nonfinite_name(params, tape, grads=None):
    for name in sorted(params):
        if not np.all(np.isfinite(params[name])):
            return name
    if grads:
        for name in sorted(grads):
            if not np.all(np.isfinite(grads[name])):
                return f"grad:{name}"
    if tape is not None and not np.all(np.isfinite(tape.logits)):
        return "logits"
    return "loss"


def _snapshot(config, vocab, params, opt, rng, state, meta):
    run_tensors = {"run.state_h": state.h.copy()}
    if state.c is not None:
        run_tensors["run.state_c"] = state.c.copy()
    return Checkpoint(
        config=config.to_dict(),
        vocab=np.asarray(vocab, dtype=np.uint8).copy(),
        params={k: v.copy() for k, v in params.items()},
        opt_scalars=opt.scalars(),
        opt_tensors={k: v.copy() for k, v in opt.tensors().items()},
        run_tensors=run_tensors,
        rng_state=copy.deepcopy(rng.bit_generator.state),
        meta=dict(meta),
    )


def evaluate_batched(params, arch, view, batch_lanes, window, backend=None):
    """Mean bits/char over a split using the training lane layout (no dropout,
    state carried from zero, trailing remainder dropped).  Splits too small
    for the requested layout fall back to fewer lanes / a shorter window so
    evaluation stays possible at any scale."""
    n = len(view)
    if n < 2:
        raise DataError(f"split {view.source!r} is too short to evaluate ({n} bytes)")
    batch_lanes = max(1, min(batch_lanes, n // (window + 1)))
    if n < window + 1:
        window = n - 1
    state = zero_state(arch, batch=batch_lanes, dtype=params["out_w"].dtype)
    total = 0.0
    count = 0
    for inputs, targets, _w in make_batches(view, batch_lanes, window):
        tape, logits, state = forward_sequence(params, arch, state, inputs, backend=backend)
        per = per_position_bits(logits, targets)
        total += float(per.sum())
        count += per.size
    if count == 0:
        raise DataError(f"split {view.source!r} has no full evaluation window")
    return total / count


def evaluate_stream(checkpoint, view, backend=None, chunk=None):
    """Single-lane streaming evaluation: one pass, no dropout, state carried
    across the whole view from zero.  Returns (mean bits/char, per-position
    bits) where position p scores the byte at view offset p+1."""
    params = checkpoint.params
    arch = checkpoint.arch()
    lut = np.full(256, -1, dtype=np.int16)
    lut[np.asarray(checkpoint.vocab, dtype=np.intp)] = np.arange(len(checkpoint.vocab),
                                                                 dtype=np.int16)
    ids = lut[view.raw]
    if np.any(ids < 0):
        bad = int(view.raw[np.argmax(ids < 0)])
        raise DataError(f"byte 0x{bad:02x} in {view.source!r} is outside the model vocabulary")
    ids = ids.astype(np.int64)
    n = ids.size
    if n < 2:
        raise DataError(f"view {view.source!r} is too short to evaluate ({n} bytes)")
    if chunk is None:
        chunk = int(checkpoint.config.get("window", 225))
    state = zero_state(arch, batch=1, dtype=params["out_w"].dtype)
    losses = np.empty(n - 1, dtype=np.float64)
    for s in range(0, n - 1, chunk):
        e = min(s + chunk, n - 1)
        tape, logits, state = forward_sequence(params, arch, state,
                                               ids[None, s:e], backend=backend)
        losses[s:e] = per_position_bits(logits, ids[None, s + 1:e + 1])[0]
    return float(losses.mean()), losses


def train(config, corpus, backend=None, resume=None, progress=None,
          checkpoint_dir=None, max_evals=None):
    """Run (or resume) one training job; returns (best Checkpoint, TrainLog).

    max_evals interrupts the run after that many evaluations (a controlled
    stand-in for killing the process); it is not part of the config, so a
    resumed run still matches the uninterrupted one.
    """
    from .checkpoint import save_checkpoint  # file IO only needed when checkpoint_dir

    arch = config.arch_shape()
    dtype = Precision.from_name(config.precision).dtype
    train_view, valid_view, _test_view = split(corpus, config.split)
    B, T = config.batch_lanes, config.window
    wpe = window_count(len(train_view), B, T)
    if wpe < 1:
        raise ConfigError(
            f"training split of {len(train_view)} bytes cannot fill one window "
            f"at batch_lanes={B}, window={T}")
    total_steps = config.total_steps or config.epochs * wpe
    vocab = corpus.vocab
    n_vocab = len(vocab)

    if resume is not None:
        if resume.config != config.to_dict():
            raise ConfigError("resume checkpoint was produced by a different config")
        if not np.array_equal(resume.vocab, vocab):
            raise DataError("resume checkpoint vocabulary does not match the corpus")
        params = {k: v.copy() for k, v in resume.params.items()}
        opt = optimizer_from_parts(resume.opt_scalars,
                                   {k: v.copy() for k, v in resume.opt_tensors.items()})
        rng = make_rng(config.seed)
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        m = resume.meta
        step, chars_seen = m["step"], m["chars_seen"]
        epoch, window_next = m["epoch"], m["window"]
        evals_done, evals_since_best = m["evals_done"], m["evals_since_best"]
        best_valid = m["best_valid_bits"]
        train_sum, train_windows = m["train_bits_sum"], m["train_windows"]
        c = resume.run_tensors.get("run.state_c")
        state = StepState(h=resume.run_tensors["run.state_h"].copy(),
                          c=None if c is None else c.copy())
        best = resume
    else:
        rng = make_rng(config.seed)
        params = init_params(arch, n_vocab, config.init_scale, rng,
                             weight_norm=config.weight_norm, dtype=dtype)
        opt = make_optimizer(config.optimizer, params, config.lr_start, config.lr_min,
                             config.ell_start, config.ell_end, total_steps)
        step = chars_seen = epoch = window_next = 0
        evals_done = evals_since_best = 0
        best_valid = None
        train_sum, train_windows = 0.0, 0
        state = zero_state(arch, batch=B, dtype=dtype)
        best = None

    log = TrainLog()
    t0 = time.perf_counter()
    stop = False

    def run_eval(final=False):
        nonlocal evals_done, evals_since_best, best_valid, best, train_sum, train_windows, stop
        valid_bits = evaluate_batched(params, arch, valid_view, B, T, backend=backend)
        evals_done += 1
        sched = schedule_value(opt.schedule, opt.step)
        train_bits = train_sum / train_windows if train_windows else float("nan")
        train_sum, train_windows = 0.0, 0
        log.append(step=step, chars_seen=chars_seen, schedule=sched,
                   train_bits=train_bits, valid_bits=valid_bits,
                   wall_s=time.perf_counter() - t0)
        improved = best_valid is None or valid_bits < best_valid
        if improved:
            best_valid = valid_bits
            evals_since_best = 0
        else:
            evals_since_best += 1
        meta = {"step": step, "chars_seen": chars_seen, "epoch": epoch,
                "window": window_next, "evals_done": evals_done,
                "evals_since_best": evals_since_best, "best_valid_bits": best_valid,
                "valid_bits": valid_bits, "train_bits": train_bits,
                "train_bits_sum": train_sum, "train_windows": train_windows,
                "total_steps": total_steps}
        snap = _snapshot(config, vocab, params, opt, rng, state, meta)
        if improved:
            best = snap
        if checkpoint_dir is not None:
            save_checkpoint(snap, f"{checkpoint_dir}/latest.ckpt")
            if improved:
                save_checkpoint(snap, f"{checkpoint_dir}/best.ckpt")
        if progress:
            progress(f"step {step} chars {chars_seen} sched {sched:.3e} "
                     f"train {train_bits:.4f} valid {valid_bits:.4f} bits"
                     + (" *" if improved else ""))
        if not final and evals_since_best >= config.patience:
            stop = True
        if max_evals is not None and evals_done >= max_evals:
            stop = True

    while epoch < config.epochs and not stop:
        if window_next == 0:
            state = zero_state(arch, batch=B, dtype=dtype)
        for inputs, targets, w in make_batches(train_view, B, T, start_window=window_next):
            masks = None
            if config.uses_dropout:
                masks = sample_masks(arch.embed, arch.hidden, config.dropout_hidden,
                                     rng, p_emb=config.dropout_embed, batch=B,
                                     layers=arch.layers, dtype=dtype)
            tape, logits, state = forward_sequence(
                params, arch, state, inputs, masks=masks,
                mask_output_path=config.dropout_output_path, backend=backend)
            window_bits = loss_bits(logits, targets)
            if not np.isfinite(window_bits):
                name = _nonfinite_name(params, tape)
                raise NumericError(
                    f"non-finite loss at step {step + 1} (first bad tensor: {name})",
                    step=step + 1, tensor=name)
            grads, _ = backward_sequence(params, arch, tape, targets)
            optimizer_step(params, grads, opt)
            step += 1
            chars_seen += B * T
            train_sum += window_bits
            train_windows += 1
            window_next = w + 1
            if chars_seen >= (evals_done + 1) * config.eval_interval:
                run_eval()
                if stop:
                    break
        if not stop:
            epoch += 1
            window_next = 0

    if not log.rows or log.rows[-1]["step"] != step:
        run_eval(final=True)
    return best, log


PRESETS = {
    # Byte-level Wikipedia dump, no regularisation, early stopping only.
    "hutter-unreg": {
        "arch": "mlstm", "hidden": 1900, "embed": 0, "optimizer": "adam",
        "weight_norm": False, "dropout_hidden": 0.0, "dropout_embed": 0.0,
        "batch_lanes": 32, "window": 225, "epochs": 4,
        "eval_interval": 1_000_000, "patience": 10, "seed": 0,
    },
    # Same data with weight normalization and variational dropout.
    "hutter-wn-vd": {
        "arch": "mlstm", "hidden": 1900, "embed": 400, "optimizer": "adam",
        "weight_norm": True, "dropout_hidden": 0.2, "dropout_embed": 0.2,
        "batch_lanes": 32, "window": 225, "epochs": 8,
        "eval_interval": 1_000_000, "patience": 10, "seed": 0,
    },
    # Larger run: heavier embedding dropout.
    "hutter-large": {
        "arch": "mlstm", "hidden": 2800, "embed": 400, "optimizer": "adam",
        "weight_norm": True, "dropout_hidden": 0.2, "dropout_embed": 0.5,
        "batch_lanes": 32, "window": 225, "epochs": 8,
        "eval_interval": 1_000_000, "patience": 10, "seed": 0,
    },
    # 27-symbol lowercase corpus, desk-scale width.
    "text8-small": {
        "arch": "mlstm", "hidden": 450, "embed": 0, "optimizer": "adam",
        "weight_norm": False, "dropout_hidden": 0.0, "dropout_embed": 0.0,
        "batch_lanes": 32, "window": 225, "epochs": 4,
        "eval_interval": 1_000_000, "patience": 10, "seed": 0,
    },
    # Byte-level modelling of a small word-level benchmark set.
    "wikitext2-byte": {
        "arch": "mlstm", "hidden": 2800, "embed": 400, "optimizer": "adam",
        "weight_norm": False, "dropout_hidden": 0.5, "dropout_embed": 0.5,
        "batch_lanes": 32, "window": 225, "epochs": 8,
        "eval_interval": 1_000_000, "patience": 10, "seed": 0,
    },
}


def preset_config(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return RunConfig.from_dict(PRESETS[name])
