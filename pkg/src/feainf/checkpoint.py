"""Single-file binary checkpoints.

Layout: b"FEIN", u32 version, u32 section count, then per section a u32
name length, the UTF-8 name, a u64 payload length and the payload.  Array
sections hold one serialized tensor; the ``meta`` section is UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .encoder import EncoderConfig
from .lfm import MaskBank
from .model import ClassifierWeights, ModelState, PrototypeSet
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"FEIN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _sections(model, train_config=None):
    meta = {
        "encoder": model.encoder_config.to_dict(),
        "eps": model.eps,
        "seed": model.seed,
        "bank": {"alpha": model.bank.alpha, "seed": model.bank.seed},
        "params": list(model.encoder_params),
        "train_config": asdict(train_config) if train_config is not None else None,
        "extra": model.extra,
    }
    yield "meta", json.dumps(meta, sort_keys=True).encode()
    for name, arr in model.encoder_params.items():
        yield "param/" + name, tensor_to_bytes(arr)
    yield "bank/masks", tensor_to_bytes(model.bank.masks)
    p = model.prototypes
    yield "proto/pos", tensor_to_bytes(p.pos)
    yield "proto/neg", tensor_to_bytes(p.neg)
    yield "proto/pos_source", tensor_to_bytes(p.pos_source)
    yield "proto/neg_source", tensor_to_bytes(p.neg_source)
    yield "head/pos", tensor_to_bytes(model.weights.pos)
    yield "head/neg", tensor_to_bytes(model.weights.neg)


def dumps(model, train_config=None):
    secs = list(_sections(model, train_config))
    out = [MAGIC, struct.pack("<II", VERSION, len(secs))]
    for name, payload in secs:
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def save(path, model, train_config=None):
    with open(path, "wb") as fh:
        fh.write(dumps(model, train_config))


def _read(buf, fmt, offset, what):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise CheckpointError(f"truncated checkpoint reading {what} at byte {offset}")
    return struct.unpack_from(fmt, buf, offset), offset + size


def loads(buf):
    """Parse checkpoint bytes; returns (ModelState, train-config dict or None)."""
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version, count), off = _read(buf, "<II", 4, "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    secs = {}
    for _ in range(count):
        (n,), off = _read(buf, "<I", off, "section name length")
        if off + n > len(buf):
            raise CheckpointError(f"truncated section name at byte {off}")
        name = bytes(buf[off:off + n]).decode()
        off += n
        (size,), off = _read(buf, "<Q", off, f"length of {name}")
        if off + size > len(buf):
            raise CheckpointError(f"section {name} truncated at byte {off}")
        secs[name] = bytes(buf[off:off + size])
        off += size
    try:
        meta = json.loads(secs["meta"].decode())

        def arr(name):
            a, _ = tensor_from_bytes(secs[name])
            return a

        cfg = EncoderConfig.from_dict(meta["encoder"])
        params = {k: arr("param/" + k) for k in meta["params"]}
        masks = arr("bank/masks")
        masks.setflags(write=False)
        bank = MaskBank(masks, meta["bank"]["alpha"], meta["bank"]["seed"])
        protos = PrototypeSet(arr("proto/pos"), arr("proto/neg"),
                              arr("proto/pos_source").astype(np.int64),
                              arr("proto/neg_source").astype(np.int64))
        weights = ClassifierWeights(arr("head/pos"), arr("head/neg"))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing section or field {exc}") from None
    model = ModelState(cfg, params, bank, protos, weights, eps=meta["eps"], seed=meta["seed"],
                       extra=meta.get("extra") or {})
    return model, meta.get("train_config")


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
