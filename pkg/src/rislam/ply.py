"""Minimal PLY point-cloud reader/writer.

Supports the subset this project produces and consumes: a single `vertex`
element with scalar float/double properties, in ASCII or little-endian
binary form. Comments are preserved on read so scan metadata can ride along.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


class PlyError(ValueError):
    pass


@dataclass
class PlyData:
    properties: dict[str, np.ndarray]
    comments: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.properties[name]

    def __len__(self) -> int:
        first = next(iter(self.properties.values()), np.empty(0))
        return len(first)


def read_ply(path) -> PlyData:
    with open(path, "rb") as f:
        return _read(f, str(path))


def _read(f: io.BufferedReader, name: str) -> PlyData:
    def next_line() -> str:
        raw = f.readline()
        if not raw:
            raise PlyError(f"{name}: truncated header")
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise PlyError(f"{name}: not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    comments: list[str] = []
    in_vertex = False
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment":
            comments.append(line[len("comment ") :] if len(line) > 8 else "")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyError(f"{name}: list properties unsupported")
            if parts[1] not in _DTYPES:
                raise PlyError(f"{name}: unsupported property type {parts[1]}")
            props.append((parts[2], _DTYPES[parts[1]]))

    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"{name}: unsupported format {fmt}")
    if count is None or not props:
        raise PlyError(f"{name}: missing vertex element")

    dtype = np.dtype([(p, t) for p, t in props])
    if fmt == "binary_little_endian":
        raw = f.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise PlyError(f"{name}: truncated vertex data")
        table = np.frombuffer(raw, dtype=dtype, count=count)
    else:
        text = f.read().decode("ascii", errors="replace")
        flat = np.array(text.split(), dtype=float)
        if flat.size != count * len(props):
            raise PlyError(f"{name}: expected {count * len(props)} values, got {flat.size}")
        cols = flat.reshape(count, len(props))
        table = np.zeros(count, dtype=dtype)
        for i, (p, _) in enumerate(props):
            table[p] = cols[:, i]

    return PlyData({p: np.ascontiguousarray(table[p]) for p, _ in props}, comments)


def write_ply(path, properties: dict[str, np.ndarray], comments: tuple[str, ...] = ()) -> None:
    """Write a binary little-endian PLY with float32 scalar properties."""
    names = list(properties)
    if not names:
        raise PlyError("no properties to write")
    n = len(properties[names[0]])
    for p in names:
        if len(properties[p]) != n:
            raise PlyError("property length mismatch")
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property float {p}" for p in names]
    header.append("end_header")
    table = np.zeros(n, dtype=np.dtype([(p, "<f4") for p in names]))
    for p in names:
        table[p] = properties[p]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(table.tobytes())
