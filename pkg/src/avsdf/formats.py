"""Little-endian binary files: external bodies, grids, point and SDF arrays."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, NonRigidTransform

BODY_MAGIC = b"AVSB"
GRID_MAGIC = b"AVSG"
POINTS_MAGIC = b"AVSP"
SDF_MAGIC = b"AVSD"
VERSION = 1
RIGID_TOL = 1e-4


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    def header(self, magic: bytes):
        got = self.take(4)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("I")
        if version != VERSION:
            raise FormatError(f"unsupported {self.what} version {version}")

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"trailing bytes in {self.what} file")


def _read(path, what: str) -> _Reader:
    return _Reader(Path(path).read_bytes(), what)


def _le(a, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


# --------------------------------------------------------------------------
# external body


@dataclass
class ExternalBody:
    transforms: np.ndarray  # (K, 3, 4) float64, canonical to world
    boxes: np.ndarray  # (K, 6) float32: min xyz, max xyz
    points: np.ndarray  # (K, n, 3) float32 canonical
    gt: np.ndarray | None = None  # (count, 4) float32, world xyz + sdf

    @property
    def num_parts(self) -> int:
        return self.transforms.shape[0]


def write_body(path, ext: ExternalBody) -> None:
    K, n = ext.points.shape[:2]
    parts = [BODY_MAGIC, struct.pack("<III", VERSION, K, n)]
    for k in range(K):
        parts.append(_le(ext.transforms[k].reshape(12), "f8"))
        parts.append(_le(ext.boxes[k], "f4"))
        parts.append(_le(ext.points[k], "f4"))
    if ext.gt is not None:
        parts.append(struct.pack("<Q", len(ext.gt)))
        parts.append(_le(ext.gt, "f4"))
    Path(path).write_bytes(b"".join(parts))


def read_body(path, expected_parts: int | None = 15) -> ExternalBody:
    """Parse an external body file.

    ``expected_parts=None`` accepts whatever part count the header declares.
    """
    r = _read(path, "body")
    r.header(BODY_MAGIC)
    K, n = r.unpack("II")
    if expected_parts is not None and K != expected_parts:
        raise DimensionMismatch(f"body file has {K} parts, expected {expected_parts}")
    tf = np.empty((K, 3, 4))
    boxes = np.empty((K, 6), np.float32)
    pts = np.empty((K, n, 3), np.float32)
    for k in range(K):
        tf[k] = r.array("f8", 12).reshape(3, 4)
        boxes[k] = r.array("f4", 6)
        pts[k] = r.array("f4", 3 * n).reshape(n, 3)
    gt = None
    if r.pos < len(r.buf):
        (count,) = r.unpack("Q")
        gt = r.array("f4", 4 * count).reshape(count, 4)
    r.done()
    R = tf[:, :, :3]
    resid = np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(3)).max() if K else 0.0
    if resid > RIGID_TOL or (K and np.any(np.abs(np.linalg.det(R) - 1) > RIGID_TOL)):
        raise NonRigidTransform(f"transform orthonormality residual {resid:.3g} exceeds {RIGID_TOL}")
    if np.any(boxes[:, :3] >= boxes[:, 3:]):
        raise FormatError("box min corner must be below max corner")
    return ExternalBody(tf, boxes, pts, gt)


# --------------------------------------------------------------------------
# grid, points, sdf


def write_grid(path, bounds: np.ndarray, values: np.ndarray) -> None:
    """``values`` indexed [z, y, x] so the flat order is x-fastest."""
    r = values.shape[0]
    if values.shape != (r, r, r):
        raise DimensionMismatch("grid values must be a cube")
    head = GRID_MAGIC + struct.pack("<II", VERSION, r) + _le(np.asarray(bounds).reshape(6), "f4")
    Path(path).write_bytes(head + _le(values.reshape(-1), "f4"))


def read_grid(path):
    """Return ``(bounds (2, 3), values (r, r, r))``."""
    rd = _read(path, "grid")
    rd.header(GRID_MAGIC)
    (res,) = rd.unpack("I")
    bounds = rd.array("f4", 6).reshape(2, 3)
    values = rd.array("f4", res ** 3).reshape(res, res, res)
    rd.done()
    return bounds, values


GRID_HEADER_BYTES = 4 + 4 + 4 + 24


def write_points(path, points: np.ndarray) -> None:
    pts = np.asarray(points).reshape(-1, 3)
    Path(path).write_bytes(POINTS_MAGIC + struct.pack("<IQ", VERSION, len(pts)) + _le(pts, "f4"))


def read_points(path) -> np.ndarray:
    r = _read(path, "points")
    r.header(POINTS_MAGIC)
    (n,) = r.unpack("Q")
    pts = r.array("f4", 3 * n).reshape(n, 3)
    r.done()
    return pts


def write_sdf(path, values: np.ndarray) -> None:
    v = np.asarray(values).reshape(-1)
    Path(path).write_bytes(SDF_MAGIC + struct.pack("<IQ", VERSION, len(v)) + _le(v, "f4"))


def read_sdf(path) -> np.ndarray:
    r = _read(path, "sdf")
    r.header(SDF_MAGIC)
    (n,) = r.unpack("Q")
    v = r.array("f4", n)
    r.done()
    return v
