"""Study bundles: a directory holding one cine acquisition.

Layout::

    <dir>/meta.json          dimensions, fps, bit depth, angles, ids
    <dir>/frames.raw         little-endian grayscale frames, row-major
    <dir>/ecg.json           optional: {"fs": ..., "samples": [...]}
    <dir>/annotations.json   optional: {frame index: centreline annotation}
    <dir>/truth.json         optional: synthetic ground truth

JSON files are written with sorted keys and fixed indentation so that
loading and saving again reproduces every file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ecg import ECGTrace
from .errors import FormatError
from .vesselness import CenterlineAnnotation

META_FIELDS = {
    "width": int,
    "height": int,
    "fps": (int, float),
    "n_frames": int,
    "bit_depth": int,
}
OPTIONAL_META = {
    "primary_angle": (int, float),
    "secondary_angle": (int, float),
    "patient_id": str,
    "sequence_id": str,
}


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}") from exc


def _check_type(where: str, value, kind) -> None:
    # bool is an int subclass but never a valid number here
    if isinstance(value, bool) or not isinstance(value, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise FormatError(f"{where}: expected {names}, got {type(value).__name__}")


@dataclass
class StudyBundle:
    meta: dict
    frames: np.ndarray
    ecg: ECGTrace | None = None
    annotations: dict = field(default_factory=dict)
    truth: dict | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise FormatError(f"frames must be (n, height, width), got shape {self.frames.shape}")
        n, h, w = self.frames.shape
        depth = {np.dtype(np.uint8): 8, np.dtype(np.uint16): 16}.get(self.frames.dtype)
        if depth is None:
            raise FormatError(f"frames must be uint8 or uint16, got {self.frames.dtype}")
        self.meta = {**self.meta, "width": w, "height": h, "n_frames": n, "bit_depth": depth}
        validate_meta(self.meta)

    @property
    def id(self) -> str:
        return str(self.meta.get("sequence_id", ""))

    @property
    def fps(self) -> float:
        return float(self.meta["fps"])

    @property
    def n_frames(self) -> int:
        return int(self.meta["n_frames"])


def validate_meta(meta: dict, where: str = "meta") -> None:
    if not isinstance(meta, dict):
        raise FormatError(f"{where}: expected an object")
    for key, kind in META_FIELDS.items():
        if key not in meta:
            raise FormatError(f"{where}.{key}: missing")
        _check_type(f"{where}.{key}", meta[key], kind)
    for key, kind in OPTIONAL_META.items():
        if meta.get(key) is not None:
            _check_type(f"{where}.{key}", meta[key], kind)
    if meta["fps"] <= 0:
        raise FormatError(f"{where}.fps: must be positive, got {meta['fps']}")
    if meta["bit_depth"] not in (8, 16):
        raise FormatError(f"{where}.bit_depth: must be 8 or 16, got {meta['bit_depth']}")
    for key in ("width", "height", "n_frames"):
        if meta[key] < 1:
            raise FormatError(f"{where}.{key}: must be at least 1, got {meta[key]}")


def save_bundle(bundle: StudyBundle, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    dtype = "<u1" if bundle.meta["bit_depth"] == 8 else "<u2"
    (root / "meta.json").write_text(_dump(bundle.meta))
    (root / "frames.raw").write_bytes(np.ascontiguousarray(bundle.frames, dtype=dtype).tobytes())
    for name in ("ecg.json", "annotations.json", "truth.json"):
        (root / name).unlink(missing_ok=True)
    if bundle.ecg is not None:
        ecg = {"fs": float(bundle.ecg.fs), "samples": [float(v) for v in bundle.ecg.samples]}
        (root / "ecg.json").write_text(_dump(ecg))
    if bundle.annotations:
        ann = {str(k): a.to_dict() for k, a in sorted(bundle.annotations.items())}
        (root / "annotations.json").write_text(_dump(ann))
    if bundle.truth is not None:
        (root / "truth.json").write_text(_dump(bundle.truth))
    return root


def load_bundle(path) -> StudyBundle:
    root = Path(path)
    if not (root / "meta.json").is_file():
        raise FormatError(f"{root}: meta.json not found")
    meta = _read_json(root / "meta.json")
    validate_meta(meta)
    n, h, w = meta["n_frames"], meta["height"], meta["width"]
    bpp = meta["bit_depth"] // 8
    try:
        blob = (root / "frames.raw").read_bytes()
    except OSError as exc:
        raise FormatError(f"{root / 'frames.raw'}: cannot read ({exc.strerror})") from exc
    expected = n * h * w * bpp
    if len(blob) != expected:
        raise FormatError(
            f"{root / 'frames.raw'}: expected {expected} bytes ({n} frames x {h} x {w} x {bpp}), got {len(blob)}"
        )
    dtype = np.dtype("<u1" if bpp == 1 else "<u2")
    frames = np.frombuffer(blob, dtype=dtype).reshape(n, h, w).astype(dtype.newbyteorder("="))

    ecg = None
    if (root / "ecg.json").is_file():
        d = _read_json(root / "ecg.json")
        if not isinstance(d, dict) or "fs" not in d or "samples" not in d:
            raise FormatError(f"{root / 'ecg.json'}: needs 'fs' and 'samples'")
        _check_type("ecg.fs", d["fs"], (int, float))
        if not isinstance(d["samples"], list):
            raise FormatError("ecg.samples: expected a list")
        try:
            ecg = ECGTrace(np.asarray(d["samples"], dtype=np.float64), float(d["fs"]))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"ecg: {exc}") from exc

    annotations = {}
    if (root / "annotations.json").is_file():
        d = _read_json(root / "annotations.json")
        if not isinstance(d, dict):
            raise FormatError("annotations: expected an object keyed by frame index")
        for k, v in d.items():
            try:
                idx = int(k)
                annotations[idx] = CenterlineAnnotation.from_dict(v)
            except (TypeError, ValueError, KeyError, AttributeError) as exc:
                raise FormatError(f"annotations.{k}: {exc}") from exc
            if not 0 <= idx < n:
                raise FormatError(f"annotations.{k}: frame index outside 0..{n - 1}")

    truth = _read_json(root / "truth.json") if (root / "truth.json").is_file() else None
    return StudyBundle(meta, frames, ecg, annotations, truth)
