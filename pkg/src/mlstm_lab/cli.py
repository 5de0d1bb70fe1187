"""Command-line front end.

Exit codes: 0 success, 1 usage/config error, 2 data or IO error, 3 numeric
failure.  Progress goes to stderr; machine-readable output (JSON lines, CSV)
goes to stdout or to files named by flags.  Heavy imports happen after
argument parsing so ``--threads`` can pin the math libraries' thread pools
before they start.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

CONFIG_KEY_DOC = """\
config keys (JSON object; unknown keys are an error):
  arch                 one of vanilla-rnn, tensor-rnn, mrnn, lstm, stacked-lstm, mlstm
  hidden               recurrent width h
  layers               stacked-lstm depth (1 elsewhere)
  embed                embedding width e; 0 feeds one-hot bytes directly
  lstm_variant         'standard' (h = tanh(c) * o) or 'gate-inside-tanh' (h = tanh(c * o))
  weight_norm          scale recurrent matrices to learned per-column gains
  dropout_hidden       variational dropout rate on recurrent h (per lane, per window)
  dropout_embed        variational dropout rate on the embedding output
  dropout_output_path  also mask h on its path into the output logits
  optimizer            'adam' or 'rmsprop-normalized'
  lr_start, lr_min     Adam learning rate: linear decay endpoints
  ell_start, ell_end   rmsprop-normalized update length: geometric decay endpoints
  batch_lanes          B contiguous text lanes per window
  window               T symbols per truncated-backprop window
  epochs               passes over the training split
  eval_interval        validation cadence in training targets
  patience             non-improving evaluations before early stop
  seed                 rng seed (init, dropout masks)
  init_scale           scale for the orthogonal recurrent init
  precision            'training' (float32) or 'verification' (float64)
  split                train/valid/test fractions, e.g. [0.9, 0.05, 0.05]
  total_steps          schedule horizon; 0 derives epochs * windows-per-epoch
"""


def _parser():
    p = argparse.ArgumentParser(
        prog="mlstm-lab",
        description="Byte-level sequence-model laboratory: multiplicative "
                    "LSTM and baselines with hand-derived training.",
        epilog=CONFIG_KEY_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None,
                   help="pin BLAS/JIT thread pools; 1 gives bitwise determinism")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--backend", choices=("numba", "numpy"), default=None,
                        help="kernel backend (default: numba when available)")

    t = sub.add_parser("train", help="train a model on a byte corpus",
                       epilog=CONFIG_KEY_DOC,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--preset", help="built-in config name")
    t.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--data", required=True, help="corpus file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-evals", type=int, default=None,
                   help="stop after this many evaluations (for controlled interruption)")
    t.add_argument("--quiet", action="store_true")
    common(t)

    e = sub.add_parser("eval", help="streaming evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "valid", "test", "all"), default="test",
                   help="which config-defined split of --data to score")
    e.add_argument("--losses", help="write per-position bits CSV here")
    common(e)

    s = sub.add_parser("sample", help="generate bytes from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prime", default=None, help="text to condition on (UTF-8)")
    s.add_argument("--out", help="write bytes here instead of stdout")
    common(s)

    a = sub.add_parser("analyze", help="surprise-recovery report or word scores")
    a.add_argument("--losses", help="per-position loss CSV (position,bits)")
    a.add_argument("--ckpt", help="checkpoint to score --data with")
    a.add_argument("--losses-b", help="second loss CSV to compare against")
    a.add_argument("--ckpt-b", help="second checkpoint to compare against")
    a.add_argument("--data", help="corpus file (needed with --ckpt or --words)")
    a.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    a.add_argument("--offsets", type=int, default=4)
    a.add_argument("--shared-set", action="store_true",
                   help="draw one surprise set from the averaged losses of both models")
    a.add_argument("--words", action="store_true",
                   help="emit per-word bits instead of a surprise report")
    a.add_argument("--out", help="write the report/word CSV here")
    common(a)

    w = sub.add_parser("perplexity", help="bits/char to word perplexity")
    w.add_argument("--bits", type=float, required=True)
    w.add_argument("--symbols", type=int, required=True)
    w.add_argument("--words", type=int, required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    g.add_argument("--arch", required=True)
    g.add_argument("--hidden", type=int, required=True)
    g.add_argument("--vocab", type=int, required=True)
    g.add_argument("--window", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--layers", type=int, default=None)
    g.add_argument("--embed", type=int, default=0)
    g.add_argument("--weight-norm", action="store_true")
    g.add_argument("--dropout", action="store_true")
    g.add_argument("--tolerance", type=float, default=1e-5)
    common(g)

    v = sub.add_parser("sweep", help="size sweep: params vs test bits table")
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True, help="CSV file for the table")
    v.add_argument("--archs", default="mlstm,stacked-lstm",
                   help="comma-separated architecture list")
    v.add_argument("--hiddens", required=True, help="comma-separated widths")
    v.add_argument("--config", help="base JSON config file")
    v.add_argument("--preset", help="base built-in config")
    v.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    v.add_argument("--quiet", action="store_true")
    common(v)
    return p


def _pin_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _raw_config(args):
    """Merge preset, config file, and --set overrides into one raw dict."""
    from .errors import ConfigError, DataError
    from .training import PRESETS

    raw = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; "
                              f"available: {', '.join(sorted(PRESETS))}")
        raw.update(PRESETS[args.preset])
    if args.config:
        try:
            with open(args.config) as fh:
                raw.update(json.load(fh))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = _coerce(value)
    return raw


def _load_config(args):
    from .training import RunConfig

    return RunConfig.from_dict(_raw_config(args))


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _pick_view(corpus, config_split, which):
    from .data import split
    if which == "all":
        return corpus
    train_v, valid_v, test_v = split(corpus, config_split)
    return {"train": train_v, "valid": valid_v, "test": test_v}[which]


def _cmd_train(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_corpus
    from .training import train

    config = _load_config(args)
    corpus = load_corpus(args.data)
    os.makedirs(args.out, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    progress = None if args.quiet else _progress
    best, log = train(config, corpus, backend=args.backend, resume=resume,
                      progress=progress, checkpoint_dir=args.out,
                      max_evals=args.max_evals)
    log_path = os.path.join(args.out, "train_log.csv")
    log.to_csv(log_path)
    best_path = os.path.join(args.out, "best.ckpt")
    save_checkpoint(best, best_path)
    print(json.dumps({"best_valid_bits": best.meta.get("best_valid_bits"),
                      "steps": log.rows[-1]["step"] if log.rows else 0,
                      "checkpoint": best_path, "log": log_path}))
    return 0


def _cmd_eval(args):
    from .analysis import emit_csv
    from .checkpoint import load_checkpoint
    from .data import load_corpus
    from .training import evaluate_stream

    ckpt = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    view = _pick_view(corpus, ckpt.config.get("split", (0.9, 0.05, 0.05)), args.split)
    mean, losses = evaluate_stream(ckpt, view, backend=args.backend)
    if args.losses:
        emit_csv(losses, args.losses)
    print(json.dumps({"bits_per_char": mean, "positions": int(losses.size),
                      "split": args.split}))
    return 0


def _cmd_sample(args):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .cells import zero_state
    from .errors import ConfigError
    from .numerics import make_rng, sample_categorical, softmax
    from .sequence import forward_sequence

    ckpt = load_checkpoint(args.ckpt)
    if args.length < 1:
        raise ConfigError("--length must be >= 1")
    arch = ckpt.arch()
    params = ckpt.params
    rng = make_rng(args.seed)
    lut = np.full(256, -1, dtype=np.int16)
    lut[np.asarray(ckpt.vocab, dtype=np.intp)] = np.arange(len(ckpt.vocab), dtype=np.int16)

    if args.prime:
        prime = np.frombuffer(args.prime.encode("utf-8"), dtype=np.uint8)
        ids = lut[prime]
        if np.any(ids < 0):
            raise ConfigError("--prime contains bytes outside the model vocabulary")
        ids = ids.astype(np.int64)
    else:
        ids = np.zeros(1, dtype=np.int64)   # condition on the lowest vocab byte

    state = zero_state(arch, batch=1, dtype=params["out_w"].dtype)
    _tape, logits, state = forward_sequence(params, arch, state, ids[None, :],
                                            backend=args.backend)
    out = bytearray()
    last = logits[0, -1]
    for _ in range(args.length):
        probs = softmax(np.asarray(last, dtype=np.float64))
        sym = sample_categorical(probs, rng, temperature=args.temperature)
        out.append(int(ckpt.vocab[sym]))
        _tape, logits, state = forward_sequence(
            params, arch, state, np.asarray([[sym]], dtype=np.int64),
            backend=args.backend)
        last = logits[0, -1]
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(bytes(out))
    else:
        sys.stdout.buffer.write(bytes(out))
        sys.stdout.buffer.flush()
    return 0


def _losses_for(args, ckpt_flag, losses_flag):
    from .analysis import load_loss_csv
    from .checkpoint import load_checkpoint
    from .data import load_corpus
    from .errors import ConfigError
    from .training import evaluate_stream

    ckpt_path = getattr(args, ckpt_flag)
    losses_path = getattr(args, losses_flag)
    if losses_path:
        return load_loss_csv(losses_path), None
    if ckpt_path:
        if not args.data:
            raise ConfigError("--ckpt needs --data to score")
        ckpt = load_checkpoint(ckpt_path)
        corpus = load_corpus(args.data)
        view = _pick_view(corpus, ckpt.config.get("split", (0.9, 0.05, 0.05)), args.split)
        _mean, losses = evaluate_stream(ckpt, view, backend=args.backend)
        return losses, view
    return None, None


def _gap_json(gap):
    return {"n_positions": gap.n_positions, "threshold_gap": gap.threshold_gap,
            "surprise_gap": gap.surprise_gap, "overall_gap": gap.overall_gap,
            "offset_gaps": list(gap.offset_gaps),
            "post_surprise_gap": gap.post_surprise_gap,
            "recovery_ratio": gap.recovery_ratio}


def _report_json(r):
    return {"threshold": r.threshold, "surprise_mean": r.surprise_mean,
            "offset_means": list(r.offset_means), "overall_mean": r.overall_mean,
            "count": r.count, "n_positions": r.n_positions}


def _cmd_analyze(args):
    from .analysis import (compare_surprise, emit_csv, shared_surprise_reports,
                           surprise_report, word_partition, bits_per_word)
    from .errors import ConfigError

    losses_a, view_a = _losses_for(args, "ckpt", "losses")
    if losses_a is None:
        raise ConfigError("analyze needs --losses or --ckpt")

    if args.words:
        from .data import load_corpus
        if view_a is None:
            if not args.data:
                raise ConfigError("--words needs --data for the text")
            corpus = load_corpus(args.data)
            view_a2 = _pick_view(corpus, (0.9, 0.05, 0.05), args.split) \
                if args.split != "all" else corpus
            raw = view_a2.raw.tobytes()
        else:
            raw = view_a.raw.tobytes()
        scores, stray = word_partition(raw, losses_a)
        if args.out:
            emit_csv(scores, args.out)
        n_words = len(scores)
        total = float(losses_a.sum())
        bpw, ppl = bits_per_word(total / losses_a.size, losses_a.size, n_words)
        print(json.dumps({"n_words": n_words, "n_symbols": int(losses_a.size),
                          "total_bits": total, "stray_bits": stray,
                          "bits_per_word": bpw, "perplexity": ppl}))
        return 0

    losses_b, _view_b = _losses_for(args, "ckpt_b", "losses_b")
    if losses_b is None:
        report = surprise_report(losses_a, offsets=args.offsets)
        if args.out:
            emit_csv(report, args.out)
        print(json.dumps({"report": _report_json(report)}))
        return 0

    if args.shared_set:
        rep_a, rep_b = shared_surprise_reports(losses_a, losses_b, offsets=args.offsets)
    else:
        rep_a = surprise_report(losses_a, offsets=args.offsets)
        rep_b = surprise_report(losses_b, offsets=args.offsets)
    gap = compare_surprise(rep_a, rep_b)
    if args.out:
        emit_csv(rep_a, args.out)
    print(json.dumps({"report_a": _report_json(rep_a), "report_b": _report_json(rep_b),
                      "gap": _gap_json(gap)}))
    return 0


def _cmd_perplexity(args):
    from .analysis import bits_per_word

    bpw, ppl = bits_per_word(args.bits, args.symbols, args.words)
    print(json.dumps({"bits_per_word": bpw, "perplexity": ppl,
                      "symbols_per_word": args.symbols / args.words}))
    return 0


def _cmd_gradcheck(args):
    from .cells import Arch
    from .sequence import grad_check

    kind = args.arch
    layers = args.layers if args.layers is not None else (2 if kind == "stacked-lstm" else 1)
    arch = Arch(kind=kind, hidden=args.hidden, layers=layers, embed=args.embed)
    err = grad_check(arch, (args.vocab, args.hidden, args.window), args.seed,
                     weight_norm=args.weight_norm, dropout=args.dropout,
                     backend=args.backend)
    ok = err < args.tolerance
    print(json.dumps({"max_relative_error": err, "tolerance": args.tolerance,
                      "pass": bool(ok)}))
    return 0 if ok else 3


def _cmd_sweep(args):
    from .analysis import emit_csv
    from .cells import param_count
    from .data import load_corpus
    from .errors import ConfigError
    from .training import RunConfig, train

    archs = [a.strip() for a in args.archs.split(",") if a.strip()]
    hiddens = [int(x) for x in args.hiddens.split(",") if x.strip()]
    if not archs or not hiddens:
        raise ConfigError("sweep needs nonempty --archs and --hiddens")
    corpus = load_corpus(args.data)
    base = _raw_config(args)
    rows = []
    for kind in archs:
        for h in hiddens:
            config = RunConfig.from_dict({
                **base, "arch": kind, "hidden": h,
                "layers": 2 if kind == "stacked-lstm" else 1})
            best, log = train(config, corpus, backend=args.backend,
                              progress=None if args.quiet else _progress)
            counts = param_count(config.arch_shape(), len(corpus.vocab),
                                 weight_norm=config.weight_norm)
            last = log.rows[-1]
            rows.append({"arch": kind, "hidden": h, "params": counts.total,
                         "train_bits": last["train_bits"],
                         "valid_bits": best.meta["best_valid_bits"],
                         "steps": last["step"], "wall_s": last["wall_s"]})
            if not args.quiet:
                _progress(f"sweep {kind} h={h}: params {counts.total} "
                          f"valid {best.meta['best_valid_bits']:.4f} bits")
    emit_csv(rows, args.out)
    print(json.dumps({"rows": len(rows), "out": args.out}))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "analyze": _cmd_analyze,
    "perplexity": _cmd_perplexity,
    "gradcheck": _cmd_gradcheck,
    "sweep": _cmd_sweep,
}


def run(argv):
    """Dispatch one command; returns the process exit code."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        _pin_threads(args.threads)

    from .errors import ConfigError, DataError, NumericError
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
