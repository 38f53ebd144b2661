"""Binary checkpoint container and the increment/model persistence on top.

Layout: magic bytes, u32 record count, then per record a u16 name length,
the utf-8 name, a u8 dtype code, a u8 ndim, u32 dims, and the raw row-major
payload. Everything little-endian, float64 only, no compression. A JSON
sidecar (<path>.meta.json) carries hyperparameters and seeds.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .numerics import Array
from .toy_diffusion import DenoiserParams, ModelDims, freeze_params
from .weight_decoupling import WeightIncrement

MAGIC = b"SEPME\x01"
_DTYPE_F64 = 0


class CheckpointFormatError(ValueError):
    """Raised when a file is not a valid checkpoint container."""


def save_arrays(path, arrays: Mapping[str, Array], metadata: Mapping | None = None) -> None:
    records = []
    for name, value in arrays.items():
        if not name:
            raise ValueError("array names must be non-empty")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"array name too long: {name!r}")
        # ascontiguousarray would promote 0-d scalars to 1-d; asarray keeps them
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim > 0xFF:
            raise ValueError("too many dimensions")
        records.append((raw, arr))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for raw, arr in records:
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    if metadata is not None:
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf[offset:offset + n], offset + n


def load_arrays(path) -> tuple[dict[str, Array], dict | None]:
    with open(path, "rb") as fh:
        buf = fh.read()
    head, off = _take(buf, 0, len(MAGIC), "magic bytes")
    if head != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a checkpoint")
    raw, off = _take(buf, off, 4, "record count")
    (count,) = struct.unpack("<I", raw)
    arrays: dict[str, Array] = {}
    for _ in range(count):
        raw, off = _take(buf, off, 2, "name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, name_len, "name")
        name = raw.decode("utf-8")
        if name in arrays:
            raise CheckpointFormatError(f"duplicate array name {name!r}")
        raw, off = _take(buf, off, 2, "dtype/ndim")
        dtype_code, ndim = struct.unpack("<BB", raw)
        if dtype_code != _DTYPE_F64:
            raise CheckpointFormatError(f"unknown dtype code {dtype_code}")
        raw, off = _take(buf, off, 4 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}I", raw)
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw, off = _take(buf, off, 8 * n_items, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        arr.flags.writeable = False
        arrays[name] = arr
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after the last record")
    meta_path = str(path) + ".meta.json"
    metadata = None
    try:
        with open(meta_path) as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        pass
    return arrays, metadata


# ---------------------------------------------------------------------------
# model parameters


def save_params(path, theta: DenoiserParams, metadata: Mapping | None = None) -> None:
    meta = dict(metadata or {})
    meta["kind"] = "theta"
    meta["timesteps"] = theta.timesteps
    meta["dims"] = {
        "data_dim": theta.dims.data_dim,
        "hidden_dim": theta.dims.hidden_dim,
        "token_dim": theta.dims.token_dim,
        "token_count": theta.dims.token_count,
        "attn_dim": theta.dims.attn_dim,
        "ffn_dim": theta.dims.ffn_dim,
        "blocks": theta.dims.blocks,
    }
    save_arrays(path, theta.values, meta)


def load_params(path) -> tuple[DenoiserParams, dict]:
    arrays, meta = load_arrays(path)
    if not meta or meta.get("kind") != "theta":
        raise CheckpointFormatError(f"{path}: missing model metadata sidecar")
    dims = ModelDims(**meta["dims"])
    return freeze_params(dims, int(meta["timesteps"]), arrays), meta


# ---------------------------------------------------------------------------
# increments; one concept per file


def save_increment(path, inc: WeightIncrement, metadata: Mapping | None = None) -> None:
    arrays: dict[str, Array] = {}
    suffix = "w" if inc.kind == "decoupled" else "dense"
    for layer, arr in inc.layers.items():
        arrays[f"inc/{inc.concept}/{layer}/{suffix}"] = arr
    if inc.kind == "decoupled":
        arrays[f"inc/{inc.concept}/S_p"] = inc.null_basis
        arrays["beta"] = np.float64(inc.scale)
    meta = dict(metadata or {})
    meta.update(
        kind="increment",
        concept=inc.concept,
        increment_kind=inc.kind,
        preserved=list(inc.preserved),
    )
    save_arrays(path, arrays, meta)


def load_increment(path) -> tuple[WeightIncrement, dict]:
    arrays, meta = load_arrays(path)
    if not meta or meta.get("kind") != "increment":
        raise CheckpointFormatError(f"{path}: missing increment metadata sidecar")
    concept = meta["concept"]
    kind = meta["increment_kind"]
    suffix = "w" if kind == "decoupled" else "dense"
    prefix = f"inc/{concept}/"
    layers = {}
    for name, arr in arrays.items():
        if name.startswith(prefix) and name.endswith(f"/{suffix}"):
            layers[name[len(prefix):-len(suffix) - 1]] = arr
    if not layers:
        raise CheckpointFormatError(f"{path}: no layer records for {concept!r}")
    if kind == "decoupled":
        basis = arrays.get(f"inc/{concept}/S_p")
        if basis is None or "beta" not in arrays:
            raise CheckpointFormatError(f"{path}: decoupled increment lacks S_p/beta")
        inc = WeightIncrement(concept=concept, kind=kind, layers=layers,
                              preserved=tuple(meta.get("preserved", ())),
                              null_basis=basis, scale=float(arrays["beta"]))
    else:
        inc = WeightIncrement(concept=concept, kind=kind, layers=layers,
                              preserved=tuple(meta.get("preserved", ())))
    return inc, meta
