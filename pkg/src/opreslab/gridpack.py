"""On-disk datasets of input/label field pairs at one resolution.

Binary layout (little endian)::

    b"GPK1" | u32 dims | u32 resolution | u32 count
    inputs  float64[count * resolution**dims]   (row major)
    labels  float64[count * resolution**dims]

Metadata lives in a JSON sidecar next to the binary (``name.gpk`` ->
``name.json``) with keys ``pde``, ``params``, ``lowpass_limit``, ``seed``,
``lineage`` and ``created_at``. Navier-Stokes vorticity packs produced
elsewhere load through the same path.
"""
from __future__ import annotations

import datetime as _dt
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GPK1"
HEADER = struct.Struct("<4sIII")
SIDECAR_KEYS = ("pde", "params", "lowpass_limit", "seed", "lineage", "created_at")


class PackFormatError(ValueError):
    pass


@dataclass
class GridPack:
    inputs: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if self.inputs.shape != self.labels.shape:
            raise PackFormatError(f"inputs {self.inputs.shape} and labels {self.labels.shape} differ")
        if self.inputs.ndim not in (2, 3):
            raise PackFormatError(f"expected (count, N) or (count, N, N) arrays, got {self.inputs.shape}")
        if self.inputs.ndim == 3 and self.inputs.shape[1] != self.inputs.shape[2]:
            raise PackFormatError(f"2D fields must be square, got {self.inputs.shape[1:]}")
        for key in SIDECAR_KEYS:
            self.meta.setdefault(key, None)

    @property
    def dims(self) -> int:
        return self.inputs.ndim - 1

    @property
    def resolution(self) -> int:
        return self.inputs.shape[1]

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    def __len__(self) -> int:
        return self.count

    def subset(self, indices) -> "GridPack":
        idx = np.asarray(indices, dtype=np.int64)
        meta = dict(self.meta)
        meta["lineage"] = {**(self.meta.get("lineage") or {}), "subset": len(idx)}
        return GridPack(self.inputs[idx], self.labels[idx], meta)

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, self.dims, self.resolution, self.count)
        return head + self.inputs.astype("<f8").tobytes() + self.labels.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, meta: dict | None = None) -> "GridPack":
        if len(blob) < HEADER.size:
            raise PackFormatError("file shorter than the 16-byte header")
        magic, dims, res, count = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise PackFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if dims not in (1, 2):
            raise PackFormatError(f"unsupported dims {dims}")
        per = count * res ** dims
        expected = HEADER.size + 2 * 8 * per
        if len(blob) != expected:
            raise PackFormatError(f"payload is {len(blob)} bytes, header implies {expected}")
        data = np.frombuffer(blob, dtype="<f8", offset=HEADER.size).astype(np.float64)
        shape = (count,) + (res,) * dims
        return cls(data[:per].reshape(shape), data[per:].reshape(shape), dict(meta or {}))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _created_at(side: Path, meta: dict) -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc).isoformat()
    if side.exists():
        # keep the old stamp when nothing else changed, so reruns are byte-identical
        try:
            old = json.loads(side.read_text())
        except (OSError, ValueError):
            old = None
        if isinstance(old, dict) and old.get("created_at"):
            rest = {k: v for k, v in old.items() if k != "created_at"}
            if rest == json.loads(json.dumps({k: v for k, v in meta.items() if k != "created_at"})):
                return old["created_at"]
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def save_pack(pack: GridPack, path, no_clobber: bool = False) -> Path:
    """Write ``pack`` to ``path`` (``.gpk``) plus its JSON sidecar."""
    path = Path(path)
    if path.suffix != ".gpk":
        path = path.with_suffix(".gpk")
    if no_clobber and path.exists():
        raise FileExistsError(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    side = sidecar_path(path)
    meta = {k: pack.meta.get(k) for k in SIDECAR_KEYS}
    meta.update({k: v for k, v in pack.meta.items() if k not in SIDECAR_KEYS})
    meta["created_at"] = _created_at(side, meta)
    path.write_bytes(pack.to_bytes())
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    pack.meta = meta
    return path


def load_pack(path) -> GridPack:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pack not found: {path}")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    pack = GridPack.from_bytes(path.read_bytes(), meta)
    pack.meta.setdefault("source", str(path))
    return pack
