"""Binary ``TGRD`` histogram files plus CSV and PNG export.

Layout (little-endian)::

    magic   4 bytes  b"TGRD"
    version u32
    H, W, N_f, d     u32 each
    t0, dt, c        f64 each
    payload          f32 planes [intensity, grad_1 .. grad_d], each H x W x N_f row-major
"""
from __future__ import annotations

import csv
import io
import os
import struct

import numpy as np

from .estimators import TransientHistogram
from .temporal import FrameSpec

MAGIC = b"TGRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII3d")


class HistogramFormatError(ValueError):
    pass


def encode_histogram(h: TransientHistogram) -> bytes:
    H, W, Nf = h.intensity.shape
    d = h.grad.shape[0]
    head = _HEADER.pack(MAGIC, VERSION, H, W, Nf, d, float(h.frames.t0), float(h.frames.dt), float(h.c))
    planes = np.concatenate([h.intensity[None], h.grad.reshape(d, H, W, Nf)], axis=0)
    return head + np.ascontiguousarray(planes, dtype="<f4").tobytes()


def decode_histogram(data: bytes) -> TransientHistogram:
    if len(data) < _HEADER.size:
        raise HistogramFormatError("file too short for a TGRD header")
    magic, version, H, W, Nf, d, t0, dt, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise HistogramFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise HistogramFormatError(f"unsupported TGRD version {version}")
    n = (1 + d) * H * W * Nf
    if len(data) - _HEADER.size != 4 * n:
        raise HistogramFormatError(f"payload is {len(data) - _HEADER.size} bytes, expected {4 * n}")
    planes = np.frombuffer(data, dtype="<f4", count=n, offset=_HEADER.size).reshape(1 + d, H, W, Nf)
    frames = FrameSpec(Nf, dt, t0, W, H)
    return TransientHistogram(planes[0].astype(np.float32), planes[1:].astype(np.float32), frames, c)


def write_histogram(path, h: TransientHistogram) -> None:
    data = encode_histogram(h)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_histogram(path) -> TransientHistogram:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_histogram(data)
    except HistogramFormatError as exc:
        raise HistogramFormatError(f"{os.fspath(path)}: {exc}") from None


def to_csv(h: TransientHistogram, nonzero_only: bool = False) -> str:
    """Rows ``pixel, row, col, frame, time, intensity, grad_1..grad_d``."""
    H, W, Nf = h.intensity.shape
    d = h.grad.shape[0]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pixel", "row", "col", "frame", "time", "intensity"] + [f"grad_{i + 1}" for i in range(d)])
    flat_i = h.intensity.reshape(H * W, Nf)
    flat_g = h.grad.reshape(d, H * W, Nf)
    for p in range(H * W):
        for l in range(Nf):
            vals = [float(flat_i[p, l])] + [float(flat_g[i, p, l]) for i in range(d)]
            if nonzero_only and not any(vals):
                continue
            t = h.frames.t0 + l * h.frames.dt
            w.writerow([p, p // W, p % W, l, repr(float(t))] + [repr(x) for x in vals])
    return buf.getvalue()


def tonemap(plane: np.ndarray, signed: bool = False, peak: float | None = None, gamma: float = 2.2) -> np.ndarray:
    """8-bit image: grey for intensity, red/blue for signed data."""
    x = np.asarray(plane, dtype=np.float64)
    if peak is None:
        peak = float(np.max(np.abs(x))) if x.size else 0.0
    s = np.zeros_like(x) if peak <= 0 else x / peak
    if not signed:
        g = np.clip(s, 0.0, 1.0) ** (1.0 / gamma)
        return np.round(g * 255.0).astype(np.uint8)
    a = np.clip(np.abs(s), 0.0, 1.0) ** (1.0 / gamma)
    img = np.zeros(x.shape + (3,), dtype=np.float64)
    img[..., 0] = np.where(s > 0, a, 0.0)
    img[..., 2] = np.where(s < 0, a, 0.0)
    return np.round(img * 255.0).astype(np.uint8)


def write_frame_pngs(h: TransientHistogram, directory, plane="intensity", prefix: str = "frame") -> list:
    """One PNG per frame sharing a single exposure; returns the written paths."""
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    data = h.intensity if plane == "intensity" else h.grad[int(plane)]
    signed = plane != "intensity"
    peak = float(np.max(np.abs(data))) if data.size else 0.0
    paths = []
    for l in range(data.shape[-1]):
        img = tonemap(data[..., l], signed=signed, peak=peak)
        p = os.path.join(directory, f"{prefix}_{l:04d}.png")
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths
