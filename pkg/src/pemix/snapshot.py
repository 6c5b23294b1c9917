"""
PEQS snapshot files.

Layout (little endian)::

    b"PEQS"  u32 version (= 1)
    f64 L    f64 h    u32 Nx   u32 Ny   u32 Nz   u32 m_sobolev   f64 delta
    coefficients as f64 (re, im) pairs, loop order c, m, n, k with
        m = -Nx/2+1 .. Nx/2,  n = -Ny/2+1 .. Ny/2,  k = 0 .. Nz-1
    [f64 timestamp]   (trajectory checkpoints only)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .spectral import GridSpec, SpectralField

__all__ = ["SnapshotError", "read_snapshot", "write_snapshot"]

MAGIC = b"PEQS"
VERSION = 1
_HEADER = struct.Struct("<4sIddIIIId")


class SnapshotError(ValueError):
    """Malformed or incompatible snapshot file."""


def _order(g: GridSpec):
    # storage index of the signed wavenumbers -N/2+1 .. N/2
    mi = np.arange(-g.Nx // 2 + 1, g.Nx // 2 + 1) % g.Nx
    ni = np.arange(-g.Ny // 2 + 1, g.Ny // 2 + 1) % g.Ny
    return mi, ni


def encode(f: SpectralField, timestamp: Optional[float] = None) -> bytes:
    g = f.grid
    head = _HEADER.pack(MAGIC, VERSION, g.L, g.h, g.Nx, g.Ny, g.Nz, g.m_sobolev, g.delta)
    mi, ni = _order(g)
    body = np.ascontiguousarray(f.coeffs[:, mi][:, :, ni]).astype("<c16").tobytes()
    tail = b"" if timestamp is None else struct.pack("<d", timestamp)
    return head + body + tail


def decode(data: bytes) -> Tuple[SpectralField, Optional[float]]:
    if len(data) < _HEADER.size:
        raise SnapshotError("file shorter than the header")
    magic, version, L, h, Nx, Ny, Nz, m, delta = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotError(f"unsupported version {version}")
    try:
        g = GridSpec(L=L, h=h, Nx=Nx, Ny=Ny, Nz=Nz, m_sobolev=m, delta=delta)
    except ValueError as exc:
        raise SnapshotError(f"invalid grid in header: {exc}") from exc
    n = 2 * Nx * Ny * Nz * 16
    rest = len(data) - _HEADER.size
    if rest not in (n, n + 8):
        raise SnapshotError(f"expected {n} or {n + 8} payload bytes, found {rest}")
    body = np.frombuffer(data, dtype="<c16", count=n // 16, offset=_HEADER.size)
    body = body.reshape(2, Nx, Ny, Nz)
    mi, ni = _order(g)
    coeffs = np.empty(g.shape, dtype=complex)
    coeffs[:, mi[:, None], ni[None, :], :] = body
    stamp = struct.unpack_from("<d", data, _HEADER.size + n)[0] if rest == n + 8 else None
    return SpectralField(coeffs, g), stamp


def write_snapshot(path: Union[str, Path], f: SpectralField,
                   timestamp: Optional[float] = None) -> None:
    """Write ``f`` (and a checkpoint time, if given) in the PEQS format."""
    Path(path).write_bytes(encode(f, timestamp))


def read_snapshot(path: Union[str, Path]) -> Tuple[SpectralField, Optional[float]]:
    """Read a PEQS file; returns the field and the timestamp (None if absent)."""
    return decode(Path(path).read_bytes())
