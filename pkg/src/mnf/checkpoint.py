"""Checkpoint container "mnf-v1".

Layout: 8-byte little-endian header length, then a UTF-8 JSON header, then
raw little-endian float64 parameter arrays concatenated in model parameter
order.  The header records the model spec, per-parameter names and shapes,
and mutable non-tensor state (dropout rates), so a load rebuilds the exact
model without consuming any randomness.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Rng
from .errors import ContractError, FormatError
from .model import Model, ModelSpec, init_model

FORMAT_NAME = "mnf-v1"


def save_checkpoint(model: Model, path):
    if model.spec is None:
        raise ContractError("checkpoint: model carries no spec; build it from one")
    params = model.parameters()
    header = {
        "format": FORMAT_NAME,
        "spec": model.spec.to_dict(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "dropout": [
            {"keep_prob": b.keep_prob, "learnable": b.learnable}
            for b in model.dropout_blocks()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw_len = fh.read(8)
        if len(raw_len) < 8:
            raise FormatError(f"checkpoint {path}: truncated before header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise FormatError(f"checkpoint {path}: truncated header "
                              f"({len(blob)} of {header_len} bytes)")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint {path}: unreadable header: {exc}") from exc
        if header.get("format") != FORMAT_NAME:
            raise FormatError(f"checkpoint {path}: format {header.get('format')!r}, "
                              f"expected {FORMAT_NAME!r}")
        spec = ModelSpec.from_dict(header["spec"])
        # the rng is never drawn from: every array is overwritten below
        model = init_model(spec, Rng(0))
        params = model.parameters()
        declared = header["params"]
        if len(declared) != len(params):
            raise FormatError(f"checkpoint {path}: {len(declared)} declared parameters, "
                              f"model has {len(params)}")
        for p, meta in zip(params, declared):
            if p.name != meta["name"] or list(p.shape) != list(meta["shape"]):
                raise FormatError(
                    f"checkpoint {path}: parameter mismatch, file has "
                    f"{meta['name']} {meta['shape']}, model expects {p.name} {list(p.shape)}")
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = fh.read(8 * count)
            if len(raw) < 8 * count:
                raise FormatError(f"checkpoint {path}: truncated in {meta['name']} "
                                  f"({len(raw)} of {8 * count} bytes)")
            p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"checkpoint {path}: trailing bytes after parameters")
    dropout_state = header.get("dropout", [])
    blocks = model.dropout_blocks()
    if len(dropout_state) != len(blocks):
        raise FormatError(f"checkpoint {path}: {len(dropout_state)} dropout records, "
                          f"model has {len(blocks)}")
    for block, state in zip(blocks, dropout_state):
        if block.learnable != bool(state["learnable"]):
            raise FormatError(f"checkpoint {path}: dropout learnability mismatch")
        if block.learnable:
            kp = float(state["keep_prob"])
            block.logit = float(np.log(kp) - np.log1p(-kp))
        else:
            block._keep_prob = float(state["keep_prob"])
    return model
