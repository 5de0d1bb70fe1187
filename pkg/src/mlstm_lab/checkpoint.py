"""Checkpoint file format: save/load of params, optimizer state, and rng.

Layout: magic ``MLSTMCKPT``, one version byte, an 8-byte little-endian header
length, a canonical JSON header (sorted keys, no whitespace) holding the run
config, vocabulary, scalar state, and the tensor manifest
(name/shape/dtype/offset), then the raw little-endian tensor payloads in
manifest order.  Canonical JSON plus sorted manifest order makes
save -> load -> save byte-identical.

Tensor names: bare names are model parameters; ``opt.*`` belong to the
optimizer; ``run.*`` carry the live recurrent state needed to resume
mid-epoch bitwise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .cells import Arch, tensor_schema
from .errors import DataError

MAGIC = b"MLSTMCKPT"
VERSION = 1
_OPT_PREFIXES = ("opt.m.", "opt.v.", "opt.acc.")


@dataclass
class Checkpoint:
    config: dict                      # RunConfig as a plain JSON dict
    vocab: np.ndarray                 # (V,) uint8 byte values
    params: dict                      # name -> array
    opt_scalars: dict | None = None   # optimizer kind/step/schedule constants
    opt_tensors: dict = field(default_factory=dict)   # "opt.*" -> array
    run_tensors: dict = field(default_factory=dict)   # "run.*" -> array
    rng_state: dict | None = None     # bit-generator state dict
    meta: dict = field(default_factory=dict)  # step, chars_seen, best_valid_bits, ...

    def arch(self):
        c = self.config
        return Arch(kind=c["arch"], hidden=c["hidden"], layers=c.get("layers", 1),
                    embed=c.get("embed", 0),
                    lstm_variant=c.get("lstm_variant", "standard"))


def _le(arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(ckpt, path):
    tensors = {}
    tensors.update(ckpt.params)
    tensors.update(ckpt.opt_tensors)
    tensors.update(ckpt.run_tensors)
    manifest = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = _le(tensors[name])
        blob = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": arr.dtype.newbyteorder("<").str, "offset": offset})
        payloads.append(blob)
        offset += len(blob)
    header = {
        "config": ckpt.config,
        "vocab": [int(b) for b in ckpt.vocab],
        "tensors": manifest,
        "optimizer": ckpt.opt_scalars,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for part in payloads:
            fh.write(part)
    return path


def _expected_shapes(config, vocab_size):
    c = config
    arch = Arch(kind=c["arch"], hidden=c["hidden"], layers=c.get("layers", 1),
                embed=c.get("embed", 0), lstm_variant=c.get("lstm_variant", "standard"))
    return {name: tuple(shape) for name, shape, _init in tensor_schema(arch, vocab_size)}


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(MAGIC)
    if len(data) < head + 1 + 8:
        raise DataError(f"truncated checkpoint {path}: {len(data)} bytes at offset {len(data)}")
    if data[:head] != MAGIC:
        raise DataError(f"bad checkpoint magic in {path} at offset 0")
    version = data[head]
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path} (expected {VERSION})")
    (hlen,) = struct.unpack_from("<Q", data, head + 1)
    body = head + 1 + 8
    if len(data) < body + hlen:
        raise DataError(f"truncated checkpoint header in {path} at offset {len(data)}")
    try:
        header = json.loads(data[body:body + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}: {exc}") from exc
    payload_base = body + hlen
    payload = data[payload_base:]

    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        need = entry["offset"] + count * dt.itemsize
        if need > len(payload):
            raise DataError(
                f"truncated checkpoint payload for {entry['name']!r} in {path} "
                f"at offset {payload_base + entry['offset']}")
        arr = np.frombuffer(payload, dtype=dt, count=count,
                            offset=entry["offset"]).reshape(shape).copy()
        tensors[entry["name"]] = arr

    params, opt_tensors, run_tensors = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith(_OPT_PREFIXES):
            opt_tensors[name] = arr
        elif name.startswith("run."):
            run_tensors[name] = arr
        else:
            params[name] = arr

    vocab = np.asarray(header["vocab"], dtype=np.uint8)
    config = header["config"]
    expected = _expected_shapes(config, len(vocab))
    for name, shape in expected.items():
        got = params.get(name)
        if got is None:
            raise DataError(f"checkpoint {path} is missing tensor {name!r}")
        if got.shape != shape:
            raise DataError(
                f"shape manifest mismatch in {path}: {name!r} is {got.shape}, "
                f"config with vocab {len(vocab)} expects {shape}")
    for name, arr in params.items():
        if name in expected:
            continue
        if name.endswith("_g") and name[:-2] in expected:
            continue  # weight-norm gains ride along with their matrices
        raise DataError(f"unexpected tensor {name!r} in checkpoint {path}")
    for name, arr in opt_tensors.items():
        base = name.split(".", 2)[-1]
        if base not in params or params[base].shape != arr.shape:
            raise DataError(f"optimizer tensor {name!r} does not match parameters in {path}")

    return Checkpoint(config=config, vocab=vocab, params=params,
                      opt_scalars=header.get("optimizer"), opt_tensors=opt_tensors,
                      run_tensors=run_tensors, rng_state=header.get("rng_state"),
                      meta=header.get("meta", {}))
