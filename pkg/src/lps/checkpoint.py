"""Checkpoint files: magic, JSON header, raw little-endian array payload.

Layout::

    b"LPSCKPT\\x00" | uint64 LE header length | UTF-8 JSON header | payload

The header lists every array (name, dtype, shape, byte offset) plus the
SHA-256 of the payload, so truncation and corruption are detected on load.
Float arrays are stored as ``<f8``; boolean supports as ``|u1``.
"""
import hashlib
import json
import struct

import numpy as np

from .netcore import BiasSet, Head, NetworkSpec
from .partition import PartitionLedger, TaskSlice
from .trainer import Engine

MAGIC = b"LPSCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, corrupted or incompatible checkpoint."""


def _engine_arrays(engine):
    arrays = {}
    for i, b in enumerate(engine.biases.layers):
        arrays[f"bias/{i}"] = b
    for sl in engine.ledger.slices:
        t = sl.task_id
        for i in range(len(sl.weights)):
            arrays[f"task{t}/w{i}"] = sl.weights[i]
            arrays[f"task{t}/m{i}"] = sl.mask[i]
            arrays[f"task{t}/ws{i}"] = sl.weight_support[i]
            arrays[f"task{t}/ms{i}"] = sl.mask_support[i]
        arrays[f"task{t}/head_w"] = sl.head.weight
        arrays[f"task{t}/head_b"] = sl.head.bias
    return arrays


def save_checkpoint(path, engine, accuracy_rows=None, config_hash=None, extra=None):
    table, chunks, offset = [], [], 0
    for name, arr in _engine_arrays(engine).items():
        if arr.dtype == bool:
            data, dtype = arr.astype("|u1"), "|u1"
        else:
            data, dtype = arr.astype("<f8"), "<f8"
        raw = np.ascontiguousarray(data).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(engine.spec.layer_dims),
        "seed": engine.seed,
        "biases_frozen": engine.biases.frozen,
        "task_count": engine.ledger.task_count,
        "config_hash": config_hash,
        "accuracy_rows": [[float(v) for v in row] for row in (accuracy_rows or [])],
        "extra": extra or {},
        "arrays": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def read_checkpoint(path):
    """Return ``(header, arrays)`` after integrity checks."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    hlen, = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')}, "
                              f"expected {FORMAT_VERSION}")
    payload = raw[pos + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says "
                              f"{header['payload_bytes']} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch")
    arrays = {}
    for entry in header["arrays"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(bool) if entry["dtype"] == "|u1" else arr.astype(np.float64)
    return header, arrays


def load_checkpoint(path):
    """Rebuild an :class:`Engine`; returns ``(engine, header)``.

    Slices are re-committed through the ledger, so a checkpoint whose
    supports overlap is rejected rather than loaded.
    """
    header, arrays = read_checkpoint(path)
    spec = NetworkSpec(tuple(header["layer_dims"]))
    L = spec.layer_count
    try:
        biases = BiasSet([arrays[f"bias/{i}"] for i in range(L)], header["biases_frozen"])
        engine = Engine(spec, biases, PartitionLedger(spec.feature_shapes), header["seed"])
        for t in range(1, header["task_count"] + 1):
            sl = TaskSlice(
                t,
                [arrays[f"task{t}/w{i}"] for i in range(L)],
                [arrays[f"task{t}/m{i}"] for i in range(L)],
                Head(arrays[f"task{t}/head_w"], arrays[f"task{t}/head_b"]),
                [arrays[f"task{t}/ws{i}"] for i in range(L)],
                [arrays[f"task{t}/ms{i}"] for i in range(L)],
            )
            engine.ledger.commit_task(sl)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    if biases.frozen:
        for b in biases.layers:
            b.flags.writeable = False
    return engine, header
