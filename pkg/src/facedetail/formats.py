"""On-disk formats: binary PPM/PGM, raw array sidecars and JSON helpers.

All writers are byte-deterministic: no timestamps, fixed float formatting,
little-endian raw arrays.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A file does not conform to the expected format."""


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats to 0..255, clamping and rounding half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    data = to_uint8(pixels)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 array, got shape {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write a grayscale P5 image; ``maxval`` 65535 stores 16-bit big-endian."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if v.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {v.shape}")
    q = np.floor(v * maxval + 0.5)
    if maxval > 255:
        raw = q.astype(">u2").tobytes()
    else:
        raw = q.astype(np.uint8).tobytes()
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raw)


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.float64))


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header") from exc
    return data[pos + 1:], w, h, maxval


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an HxWx3 float array in [0,1]."""
    body, w, h, maxval = _read_netpbm(path, b"P6")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * 3
    if len(body) < n * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype, count=n)
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into an HxW float array in [0,1]."""
    body, w, h, maxval = _read_netpbm(path, b"P5")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h
    if len(body) < n * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype, count=n)
    return arr.reshape(h, w).astype(np.float64) / maxval


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_arrays(sidecar, arrays: dict[str, np.ndarray]) -> dict:
    """Concatenate arrays into one raw little-endian file.

    Returns the layout table ``{name: {offset, shape, dtype}}`` that
    :func:`load_arrays` needs; callers embed it in their JSON.
    """
    layout = {}
    offset = 0
    with open(sidecar, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dt = np.dtype(arr.dtype).newbyteorder("<")
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            layout[name] = {"offset": offset, "shape": list(arr.shape), "dtype": dt.str}
            fh.write(raw)
            offset += len(raw)
    return layout


def load_arrays(sidecar, layout: dict) -> dict[str, np.ndarray]:
    data = Path(sidecar).read_bytes()
    out = {}
    for name, info in layout.items():
        dt = np.dtype(info["dtype"])
        count = int(np.prod(info["shape"], dtype=np.int64))
        end = info["offset"] + count * dt.itemsize
        if end > len(data):
            raise FormatError(f"{sidecar}: array {name!r} truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=info["offset"])
        out[name] = arr.reshape(info["shape"]).astype(dt.newbyteorder("="))
    return out


def json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
