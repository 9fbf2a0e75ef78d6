"""Versioned binary checkpoints.

Layout (little-endian)::

    b"AEDC" | u32 version | 32-byte config hash | u32 len + JSON meta
    | u32 tensor count | per tensor: u16 len + name, u8 ndim, u32 dims..., f64 data
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from aed.cae import CaeParams, FrozenCae, init_cae
from aed.clf import ClfParams, init_clf
from aed.tensor import AdamState, Params, ShapeError

MAGIC = b"AEDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def _encode(meta: dict, tensors: dict[str, np.ndarray], chash: bytes) -> bytes:
    if len(chash) != 32:
        raise ValueError("config hash must be 32 bytes")
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), chash, struct.pack("<I", len(meta_b)), meta_b,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(order="C")]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(data: bytes, path) -> tuple[dict, dict[str, np.ndarray], bytes]:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an AEDC checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    chash = r.take(32)
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return meta, tensors, chash


def _params_payload(params: Params) -> tuple[dict[str, np.ndarray], dict]:
    tensors = dict(params.tensors)
    adam = {}
    for name, st in params.adam.items():
        tensors[f"adam.m/{name}"] = st.m
        tensors[f"adam.v/{name}"] = st.v
        adam[name] = [st.step, st.beta1, st.beta2, st.eps]
    return tensors, adam


def _restore_params(tensors: dict[str, np.ndarray], adam: dict) -> Params:
    plain = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    states = {}
    for name in (k for k in plain if k in adam):   # keep tensor order, meta keys are sorted
        step, b1, b2, eps = adam[name]
        states[name] = AdamState(tensors[f"adam.m/{name}"], tensors[f"adam.v/{name}"],
                                 int(step), b1, b2, eps)
    return Params(plain, states)


def to_bytes(model, chash: bytes = bytes(32)) -> bytes:
    if isinstance(model, CaeParams):
        tensors, adam = _params_payload(model.params)
        meta = {"kind": "cae", "stream": model.stream, "input_size": model.input_size,
                "widths": list(model.widths), "adam": adam}
    elif isinstance(model, ClfParams):
        tensors, adam = _params_payload(model.params)
        meta = {"kind": "clf", "stream": model.stream, "input_size": model.input_size,
                "widths": list(model.widths), "diff_mode": model.diff_mode, "adam": adam}
    elif isinstance(model, FrozenCae):
        tensors = model.tensors
        meta = {"kind": "cae-frozen", "stream": model.stream, "input_size": model.input_size,
                "widths": list(model.widths)}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    return _encode(meta, tensors, chash)


def from_bytes(data: bytes, path="<bytes>"):
    meta, tensors, chash = _decode(data, path)
    kind = meta.get("kind")
    widths = tuple(meta["widths"])
    if kind == "cae":
        model = CaeParams(meta["stream"], _restore_params(tensors, meta["adam"]),
                          meta["input_size"], widths)
    elif kind == "clf":
        model = ClfParams(meta["stream"], _restore_params(tensors, meta["adam"]),
                          meta["diff_mode"], meta["input_size"], widths)
    elif kind == "cae-frozen":
        model = FrozenCae(meta["stream"], tensors, meta["input_size"], widths)
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return model, chash


def save_checkpoint(model, path, chash: bytes = bytes(32)) -> None:
    """Whole-file atomic write."""
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    try:
        tmp.write_bytes(to_bytes(model, chash))
        os.replace(tmp, p)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {p}: {exc}") from exc


def load_checkpoint(path, stream: str | None = None, kind: str | None = None,
                    chash: bytes | None = None):
    """Load a checkpoint, optionally auditing it against the slot it will fill.

    ``stream``/``kind`` check the tensor shapes against a fresh model of that
    stream; ``chash`` checks the config hash.
    """
    model, got_hash = from_bytes(Path(path).read_bytes(), path)
    if chash is not None and got_hash != chash:
        raise CheckpointError(f"{path}: checkpoint was trained with a different config")
    if stream is not None:
        _audit_shapes(model, stream, kind, path)
    return model


def _audit_shapes(model, stream: str, kind: str | None, path) -> None:
    if isinstance(model, ClfParams):
        ref = init_clf(stream, 0, input_size=model.input_size, widths=model.widths).params.tensors
        got = model.params.tensors
    else:
        ref = init_cae(stream, 0, model.input_size, model.widths).params.tensors
        got = model.params.tensors if isinstance(model, CaeParams) else model.tensors
    if kind is not None and kind != ("clf" if isinstance(model, ClfParams) else "cae"):
        raise CheckpointError(f"{path}: expected a {kind} checkpoint")
    for name, arr in got.items():
        if name not in ref or ref[name].shape != arr.shape:
            want = ref[name].shape if name in ref else "absent"
            raise ShapeError(f"{path}: {name} has shape {arr.shape}, {stream} slot expects {want}")
