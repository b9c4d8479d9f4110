"""Bit-exact raw array I/O for images and sinograms.

File layout (all integers little-endian):

====================  ========================================
bytes 0-7             magic ``DM4CTRAW``
u32                   format version (1)
u32                   ndim
u64 * ndim            dims, slowest axis first
u8                    kind: 0 = image, 1 = sinogram
f32 * prod(dims)      values, row-major, IEEE-754 little-endian
====================  ========================================

Sinograms additionally carry a text sidecar at ``<path>.geom`` with
``key = value`` lines describing the projection geometry (``angles`` as a
comma-separated list plus the detector parameters).  Writes go through a
temporary file in the same directory followed by an atomic rename, so a
crashed run never leaves a truncated artifact behind.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from ..grids import ImageGrid, ProjectionGeometry, Sinogram

__all__ = ["RawFormatError", "save_raw", "load_raw"]

MAGIC = b"DM4CTRAW"
_VERSION = 1
_KIND_IMAGE = 0
_KIND_SINOGRAM = 1
_MAX_DIM = 2**32  # per-axis sanity cap; files this large are never legitimate


class RawFormatError(ValueError):
    """Raised for malformed raw files (bad magic, truncation, bad dims)."""


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(values: np.ndarray, kind: int) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    header = MAGIC + struct.pack("<II", _VERSION, values.ndim)
    header += struct.pack(f"<{values.ndim}Q", *values.shape)
    header += struct.pack("<B", kind)
    return header + values.tobytes()


def _geometry_sidecar(geometry: ProjectionGeometry) -> str:
    angle_text = ",".join(repr(float(a)) for a in geometry.angles)
    lines = [
        f"detector_count = {geometry.detector_count}",
        f"detector_pitch = {float(geometry.detector_pitch)!r}",
        f"detector_offset = {float(geometry.detector_offset)!r}",
        f"angles = {angle_text}",
    ]
    return "\n".join(lines) + "\n"


def save_raw(path: str, obj: ImageGrid | Sinogram) -> None:
    """Serialize an image or sinogram (plus geometry sidecar) to ``path``."""
    if isinstance(obj, ImageGrid):
        _atomic_write(path, _encode(obj.values, _KIND_IMAGE))
    elif isinstance(obj, Sinogram):
        _atomic_write(path, _encode(obj.values, _KIND_SINOGRAM))
        sidecar = _geometry_sidecar(obj.geometry).encode("utf-8")
        _atomic_write(path + ".geom", sidecar)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def _parse_sidecar(path: str) -> ProjectionGeometry:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise RawFormatError(f"sinogram sidecar missing: {path}") from None
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RawFormatError(f"malformed sidecar line: {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        angles = np.array([float(a) for a in fields["angles"].split(",")])
        return ProjectionGeometry(
            angles=angles,
            detector_count=int(fields["detector_count"]),
            detector_pitch=float(fields["detector_pitch"]),
            detector_offset=float(fields["detector_offset"]),
        )
    except KeyError as exc:
        raise RawFormatError(f"sidecar missing key {exc}") from None


def load_raw(path: str) -> ImageGrid | Sinogram:
    """Read a raw file back; sinograms also reattach their geometry."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise RawFormatError("file too short for a raw header")
    if blob[: len(MAGIC)] != MAGIC:
        raise RawFormatError(
            f"bad magic {blob[:len(MAGIC)]!r}; not a DM4CTRAW file"
        )
    offset = len(MAGIC)
    version, ndim = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != _VERSION:
        raise RawFormatError(f"unsupported format version {version}")
    if ndim == 0 or ndim > 8:
        raise RawFormatError(f"implausible ndim {ndim}")
    if len(blob) < offset + 8 * ndim + 1:
        raise RawFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    if any(d == 0 or d > _MAX_DIM for d in dims):
        raise RawFormatError(f"dimension overflow in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > 2**34:
        raise RawFormatError(f"payload of {count} values exceeds sanity cap")
    (kind,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    expected = offset + 4 * count
    if len(blob) != expected:
        raise RawFormatError(
            f"truncated payload: file has {len(blob)} bytes, header implies {expected}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    values = values.reshape(dims).astype(np.float64)
    if kind == _KIND_IMAGE:
        return ImageGrid(values)
    if kind == _KIND_SINOGRAM:
        geometry = _parse_sidecar(path + ".geom")
        return Sinogram(values, geometry)
    raise RawFormatError(f"unknown kind byte {kind}")
