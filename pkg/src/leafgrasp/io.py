"""File formats: depth maps, PBM masks, JSON documents and CSV tables."""
from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedInput

DEPTH_MAGIC = b"DPTH"
_HEADER = struct.Struct("<4sII")


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- depth

def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    _atomic_write(path, _HEADER.pack(DEPTH_MAGIC, w, h) + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedInput(f"{path}: truncated depth header")
    magic, w, h = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise MalformedInput(f"{path}: bad depth magic {magic!r}")
    if len(data) != _HEADER.size + 4 * w * h:
        raise MalformedInput(f"{path}: expected {w}x{h} float32 payload, got {len(data) - _HEADER.size} bytes")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------- masks

def write_pbm(path, mask: np.ndarray) -> None:
    """Binary PBM (P4); 1 bits are mask members."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    body = np.packbits(mask, axis=1).tobytes()
    _atomic_write(path, f"P4\n{w} {h}\n".encode() + body)


def _pbm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise MalformedInput("truncated PBM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # one whitespace byte separates header and raster


def read_pbm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        (magic, w, h), start = _pbm_tokens(data, 3)
        w, h = int(w), int(h)
    except (ValueError, IndexError) as exc:
        raise MalformedInput(f"{path}: bad PBM header") from exc
    if magic != b"P4":
        raise MalformedInput(f"{path}: not a binary PBM (magic {magic!r})")
    row = (w + 7) // 8
    raster = data[start:start + row * h]
    if len(raster) != row * h:
        raise MalformedInput(f"{path}: truncated PBM raster")
    bits = np.unpackbits(np.frombuffer(raster, dtype=np.uint8).reshape(h, row), axis=1)
    return bits[:, :w].astype(bool)


# ---------------------------------------------------------------- json / csv

def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    _atomic_write(path, dumps(obj).encode())


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: {exc}") from exc


def write_csv(path, header, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedInput(f"{path}: empty CSV")
    return rows[0], rows[1:]


def fmt(x) -> str:
    """CSV cell: blank for missing, repr-exact floats otherwise."""
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------- ply

def write_ply(path, vertices: np.ndarray, colors: np.ndarray, edges: np.ndarray | None = None) -> None:
    """ASCII PLY with per-vertex RGB and optional edge list."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    edges = np.zeros((0, 2), dtype=int) if edges is None else np.asarray(edges, dtype=int).reshape(-1, 2)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             f"element edge {len(edges)}", "property int vertex1", "property int vertex2", "end_header"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(vertices, colors)]
    lines += [f"{a} {b}" for a, b in edges]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_ply_counts(path) -> dict[str, int]:
    """Element counts from a PLY header."""
    counts = {}
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MalformedInput(f"{path}: not a PLY file")
        for line in fh:
            parts = line.decode().split()
            if parts[:1] == ["element"]:
                counts[parts[1]] = int(parts[2])
            if parts[:1] == ["end_header"]:
                return counts
    raise MalformedInput(f"{path}: missing end_header")
