"""Raw tensor archive (``.sfr``) and NIfTI reading.

Archive layout, all integers little-endian::

    magic    8 bytes   b"SFAERAW1"
    dtype    1 byte    code from DTYPE_CODES
    ndim     1 byte
    shape    ndim x uint64
    payload  prod(shape) items, C order, little-endian

A JSON sidecar (``<file>.json``) may carry free-form metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"SFAERAW1"
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
    5: np.dtype("<i8"),
    6: np.dtype("?"),
    7: np.dtype("<i2"),
    8: np.dtype("<u2"),
    9: np.dtype("i1"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


def write_raw(path, array, metadata: dict | None = None) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    le = arr.dtype.newbyteorder("<")
    code = _CODE_OF.get(le)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=le)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(payload.tobytes())
    if metadata is not None:
        sidecar(path).write_text(json.dumps(metadata, sort_keys=True, indent=2))
    return path


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    try:
        code, ndim = struct.unpack_from("<BB", data, 8)
        shape = struct.unpack_from(f"<{ndim}Q", data, 10)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    offset = 10 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - offset != count * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match header")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_metadata(path) -> dict:
    p = sidecar(path)
    return json.loads(p.read_text()) if p.exists() else {}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Return (data as float array in file axis order, voxel spacing)."""
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float64)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: not a readable NIfTI file ({exc})") from exc
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, spacing


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0)) -> Path:
    import nibabel as nib

    affine = np.diag([*spacing, 1.0])
    nib.save(nib.Nifti1Image(np.asarray(data), affine), str(path))
    return Path(path)
