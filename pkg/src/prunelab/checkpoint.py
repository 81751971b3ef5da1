"""Single-file tensor container.

Layout::

    u64 little-endian header length | JSON header (utf-8) | payload

The header maps tensor names to ``{dtype, shape, offset, length}`` with offsets
relative to the payload start, plus a ``__metadata__`` entry. Plain tensors
are little-endian row-major. Grouped-quantized matrices use dtype
``"u4-grouped"`` (``"u8-grouped"`` for N > 4) and carry a ``parts`` map with
the codes, scale and offset blobs, each a ``[offset, length]`` pair.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig

FORMAT = "prunelab-ckpt"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"),
           "u8": np.dtype("u1")}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _NAMES[np.dtype(dt.str.replace("=", "<"))]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray) -> tuple[int, int]:
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        off = self.size
        self.chunks.append(raw)
        self.size += len(raw)
        return off, len(raw)


def dump_tensors(tensors: dict, metadata: dict | None = None) -> bytes:
    from .quant import QuantGroupedMatrix

    w = _Writer()
    header: dict = {"__metadata__": {"format": FORMAT, "version": VERSION, **(metadata or {})}}
    for name in tensors:
        val = tensors[name]
        if isinstance(val, QuantGroupedMatrix):
            parts = {}
            for part, arr in (("codes", val.packed), ("a", val.scale), ("b", val.offset)):
                parts[part] = list(w.add(arr))
            start = parts["codes"][0]
            header[name] = {
                "dtype": "u4-grouped" if val.bits <= 4 else "u8-grouped",
                "shape": list(val.shape), "offset": start, "length": w.size - start,
                "L": val.n_blocks, "N": val.bits, "block_map": "contiguous",
                "scale_dtype": _dtype_tag(val.scale), "parts": parts,
            }
        else:
            arr = np.asarray(val)
            off, n = w.add(arr)
            header[name] = {"dtype": _dtype_tag(arr), "shape": list(arr.shape),
                            "offset": off, "length": n}
    blob = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(w.chunks)


def _array(payload: memoryview, off: int, n: int, tag: str, shape) -> np.ndarray:
    if tag not in _DTYPES:
        raise CheckpointError(f"unknown dtype {tag!r}")
    dt = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if count * dt.itemsize != n:
        raise CheckpointError(f"length {n} does not match shape {shape} of {tag}")
    return np.frombuffer(payload[off:off + n], dtype=dt).reshape(shape).copy()


def parse_tensors(raw: bytes) -> tuple[dict, dict]:
    """Inverse of :func:`dump_tensors`; returns (tensors, metadata)."""
    from .quant import QuantGroupedMatrix

    if len(raw) < 8:
        raise CheckpointError("file too short for header length prefix")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if hlen > len(raw) - 8:
        raise CheckpointError(f"header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(bytes(raw[8:8 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("header is not a JSON object")
    meta = header.pop("__metadata__", {})
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"unsupported container version {meta.get('version')}")
    payload = memoryview(raw)[8 + hlen:]
    spans = []
    for name, ent in header.items():
        try:
            off, n = int(ent["offset"]), int(ent["length"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"entry {name!r} lacks offset/length") from None
        if off < 0 or n < 0 or off + n > len(payload):
            raise CheckpointError(f"entry {name!r} runs past the payload (truncated file?)")
        spans.append((off, n, name))
    spans.sort()
    for (o1, n1, a), (o2, _, b) in zip(spans, spans[1:]):
        if o1 + n1 > o2:
            raise CheckpointError(f"entries {a!r} and {b!r} overlap")
    end = spans[-1][0] + spans[-1][1] if spans else 0
    if end != len(payload):
        raise CheckpointError(f"payload has {len(payload)} bytes, header accounts for {end}")

    out: dict = {}
    for name, ent in header.items():
        tag = ent.get("dtype")
        shape = tuple(ent.get("shape", ()))
        if tag in ("u4-grouped", "u8-grouped"):
            parts = ent["parts"]
            d_in, d_out = shape
            L, N = int(ent["L"]), int(ent["N"])
            stag = ent.get("scale_dtype", "f32")
            n_codes = d_out * ((d_in + 1) // 2) if N <= 4 else d_in * d_out
            packed = _array(payload, *parts["codes"], "u8", (n_codes,))
            a = _array(payload, *parts["a"], stag, (L, d_out))
            b = _array(payload, *parts["b"], stag, (L, d_out))
            out[name] = QuantGroupedMatrix(packed, (d_in, d_out), L, N, a, b)
        else:
            out[name] = _array(payload, int(ent["offset"]), int(ent["length"]), tag, shape)
    return out, meta


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dump_tensors(tensors, metadata))


def load_tensors(path) -> tuple[dict, dict]:
    return parse_tensors(Path(path).read_bytes())


def save_checkpoint(model: Model, path) -> None:
    from .quant import QuantLinear

    tensors: dict = {}
    adapters: dict = {}
    for name, val in model.params.items():
        if isinstance(val, QuantLinear):
            tensors[name] = val.q
            if val.adapter is not None:
                tensors[name + ".adapter_A"] = val.adapter.A
                tensors[name + ".adapter_B"] = val.adapter.B
                adapters[name] = {"s": val.adapter.s}
        else:
            tensors[name] = val
    meta = {"config": model.config.to_dict(), "adapters": adapters,
            "meta": {k: v for k, v in model.meta.items() if _jsonable(v)}}
    save_tensors(path, tensors, meta)


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def load_checkpoint(path) -> Model:
    from .quant import AdapterPair, QuantGroupedMatrix, QuantLinear

    tensors, meta = load_tensors(path)
    if "config" not in meta:
        raise CheckpointError("checkpoint metadata has no model config")
    cfg = ModelConfig.from_dict(meta["config"])
    adapters = meta.get("adapters", {})
    params: dict = {}
    for name, val in tensors.items():
        if name.endswith((".adapter_A", ".adapter_B")):
            continue
        if isinstance(val, QuantGroupedMatrix):
            ad = None
            if name in adapters:
                ad = AdapterPair(tensors[name + ".adapter_A"], tensors[name + ".adapter_B"],
                                 float(adapters[name]["s"]))
            params[name] = QuantLinear(val, ad)
        else:
            params[name] = val
    return Model(cfg, params, dict(meta.get("meta", {})))
