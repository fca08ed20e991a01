"""On-disk formats: the FC binary container and NIfTI-1 volumes.

FC container layout (``<name>.fc``)::

    bytes 0..7   ASCII magic  b"CAMFFC01"
    bytes 8..    rows * cols little-endian float32, row-major

with a sidecar ``<name>.fc.json`` holding ``{"rows": R, "cols": C, "dtype": "float32"}``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import nibabel as nib
import numpy as np

from camf.errors import DataError, MissingFileError, ShapeMismatchError

FC_MAGIC = b"CAMFFC01"


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_fc(path, matrix, extra: dict | None = None) -> Path:
    path = Path(path)
    mat = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if mat.ndim != 2:
        raise ShapeMismatchError(f"FC container holds 2D arrays, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(FC_MAGIC)
        fh.write(mat.tobytes(order="C"))
    header = dict(extra or {}, rows=int(mat.shape[0]), cols=int(mat.shape[1]), dtype="float32")
    _sidecar(path).write_text(json.dumps(header, sort_keys=True) + "\n")
    return path


def read_fc(path) -> np.ndarray:
    path = Path(path)
    side = _sidecar(path)
    if not path.is_file():
        raise MissingFileError(f"FC file not found: {path}")
    if not side.is_file():
        raise MissingFileError(f"FC sidecar not found: {side}")
    header = json.loads(side.read_text())
    if header.get("dtype") != "float32":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    rows, cols = int(header["rows"]), int(header["cols"])
    raw = path.read_bytes()
    if raw[:8] != FC_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:8]!r}")
    payload = raw[8:]
    if len(payload) != rows * cols * 4:
        raise ShapeMismatchError(
            f"{path}: payload holds {len(payload)} bytes, header says {rows}x{cols} float32"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_nifti(path, volume, dtype=np.float32, description: str = "") -> Path:
    path = Path(path)
    img = nib.Nifti1Image(np.asarray(volume, dtype=dtype), affine=np.eye(4))
    img.header.set_data_dtype(dtype)
    if description:
        img.header["descrip"] = description[:79].encode()
    nib.save(img, os.fspath(path))
    return path


def read_nifti(path, dtype=np.float32) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"NIfTI file not found: {path}")
    img = nib.load(os.fspath(path))
    return np.asarray(img.dataobj, dtype=dtype)
