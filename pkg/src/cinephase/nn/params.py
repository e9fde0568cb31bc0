"""Named parameter collections and their on-disk format."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import FormatError, ShapeError

WEIGHTS_VERSION = 1


class ParamStore:
    """Ordered mapping of parameter name to array, with a gradient slot each.

    Gradient slots are ``None`` until a backward pass writes into them; the
    optimizer clears them again after every update.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray | None] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.values[name] = np.ascontiguousarray(value)
        self.grads[name] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        value = self.values[name]
        if grad.shape != value.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {value.shape}")
        if self.grads[name] is None:
            self.grads[name] = grad.astype(value.dtype, copy=True)
        else:
            self.grads[name] += grad

    def zero_grad(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out

    def astype(self, dtype) -> ParamStore:
        out = ParamStore()
        for name, value in self.values.items():
            out.add(name, value.astype(dtype))
        return out

    def update(self, other: ParamStore) -> None:
        for name, value in other.values.items():
            self.add(name, value)


def config_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def save_params(params: ParamStore, path, meta: dict | None = None) -> Path:
    """Write ``params`` as a JSON manifest plus one raw little-endian blob.

    The blob lives next to the manifest with the suffix ``.bin``.  Returns
    the manifest path.
    """
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, value in params.values.items():
        le = value.astype(value.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(value.shape),
                "dtype": value.dtype.name,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": WEIGHTS_VERSION,
        "blob": blob_path.name,
        "params": entries,
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_params(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read weights manifest ({exc})") from exc
    if manifest.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {manifest.get('version')!r}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    params = ParamStore()
    for entry in manifest["params"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise FormatError(f"{path}: parameter {entry['name']!r} runs past end of blob")
        arr = np.frombuffer(blob[start:start + n], dtype=dtype).reshape(entry["shape"])
        params.add(entry["name"], arr.astype(dtype.newbyteorder("=")))
    return params, manifest.get("meta", {})
