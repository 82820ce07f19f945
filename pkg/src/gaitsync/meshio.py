"""PLY and OBJ readers/writers for point clouds and triangle meshes.

PLY: ``ascii 1.0`` and ``binary_little_endian 1.0``; vertices are written as
float32 ``x y z``, faces as ``list uchar int vertex_indices``.
OBJ: only ``v`` and ``f`` records are understood; faces are 1-based on disk.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriMesh

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class MeshFormatError(ValueError):
    """Base class for file-format problems; ``offset`` is a byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MalformedHeaderError(MeshFormatError):
    pass


class IndexOutOfRangeError(MeshFormatError):
    pass


class TruncatedPayloadError(MeshFormatError):
    pass


# -- PLY ---------------------------------------------------------------------

def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise MalformedHeaderError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise MalformedHeaderError("missing end_header", len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, list_count_dtype|None)], line offset)
    pos = 0
    for raw in data[:end].split(b"\n"):
        line_offset = pos
        pos += len(raw) + 1
        tok = raw.decode("ascii", "replace").strip().split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise MalformedHeaderError(f"unsupported format line {' '.join(tok[1:])!r}", line_offset)
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append((tok[1], int(tok[2]), [], line_offset))
            except (IndexError, ValueError):
                raise MalformedHeaderError("bad element line", line_offset) from None
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeaderError("property before any element", line_offset)
            try:
                if tok[1] == "list":
                    prop = (tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]])
                else:
                    prop = (tok[2], _PLY_TYPES[tok[1]], None)
            except (IndexError, KeyError):
                raise MalformedHeaderError("bad property line", line_offset) from None
            elements[-1][2].append(prop)
        else:
            raise MalformedHeaderError(f"unknown header keyword {tok[0]!r}", line_offset)
    if fmt is None:
        raise MalformedHeaderError("missing format line", 0)
    return fmt, elements, body_start


def _read_ascii_body(data: bytes, elements, body_start: int):
    out = {}
    # keep byte offsets of each line for error reporting
    lines = []
    pos = body_start
    for raw in data[body_start:].split(b"\n"):
        if raw.strip():
            lines.append((pos, raw.decode("ascii", "replace").split()))
        pos += len(raw) + 1
    li = 0
    for name, count, props, _ in elements:
        rows = []
        for _ in range(count):
            if li >= len(lines):
                raise TruncatedPayloadError(f"expected {count} {name} records", len(data))
            off, tok = lines[li]
            li += 1
            row = {}
            j = 0
            try:
                for pname, dt, cdt in props:
                    if cdt is None:
                        row[pname] = float(tok[j])
                        j += 1
                    else:
                        n = int(tok[j])
                        row[pname] = [int(float(t)) for t in tok[j + 1:j + 1 + n]]
                        if len(row[pname]) != n:
                            raise IndexError
                        j += 1 + n
            except (IndexError, ValueError):
                raise TruncatedPayloadError(f"short {name} record", off) from None
            rows.append((off, row))
        out[name] = rows
    return out


def _read_binary_body(data: bytes, elements, body_start: int):
    out = {}
    pos = body_start
    for name, count, props, _ in elements:
        if all(cdt is None for _, _, cdt in props):
            dt = np.dtype([(p, "<" + d) for p, d, _ in props])
            need = dt.itemsize * count
            if pos + need > len(data):
                raise TruncatedPayloadError(f"{name} block needs {need} bytes", len(data))
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            out[name] = arr
            pos += need
            continue
        rows = []
        for _ in range(count):
            start = pos
            row = {}
            for pname, d, cdt in props:
                if cdt is None:
                    size = np.dtype(d).itemsize
                    if pos + size > len(data):
                        raise TruncatedPayloadError(f"short {name} record", start)
                    row[pname] = float(np.frombuffer(data, "<" + d, 1, pos)[0])
                    pos += size
                else:
                    csize = np.dtype(cdt).itemsize
                    if pos + csize > len(data):
                        raise TruncatedPayloadError(f"short {name} record", start)
                    n = int(np.frombuffer(data, "<" + cdt, 1, pos)[0])
                    pos += csize
                    size = np.dtype(d).itemsize * n
                    if pos + size > len(data):
                        raise TruncatedPayloadError(f"short {name} list", start)
                    row[pname] = np.frombuffer(data, "<" + d, n, pos).astype(int).tolist()
                    pos += size
            rows.append((start, row))
        out[name] = rows
    return out


def _read_ply(path):
    data = Path(path).read_bytes()
    fmt, elements, body_start = _parse_ply_header(data)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MalformedHeaderError("no vertex element", 0)
    vprops = [p[0] for p in elements[names.index("vertex")][2]]
    if not all(c in vprops for c in "xyz"):
        raise MalformedHeaderError("vertex element lacks x/y/z", elements[names.index("vertex")][3])
    body = (_read_ascii_body if fmt == "ascii" else _read_binary_body)(data, elements, body_start)
    vb = body["vertex"]
    if isinstance(vb, np.ndarray):
        verts = np.stack([vb["x"], vb["y"], vb["z"]], axis=1).astype(np.float64)
    else:
        verts = np.array([[r["x"], r["y"], r["z"]] for _, r in vb], dtype=np.float64).reshape(-1, 3)
    faces = []
    for off, row in body.get("face", []):
        idx = row.get("vertex_indices", row.get("vertex_index"))
        if idx is None:
            raise MalformedHeaderError("face element lacks vertex_indices", 0)
        if any(i < 0 or i >= len(verts) for i in idx):
            raise IndexOutOfRangeError(f"face index out of range in {idx}", off)
        if len(idx) < 3:
            raise MeshFormatError("face with fewer than 3 vertices", off)
        for k in range(1, len(idx) - 1):
            faces.append((idx[0], idx[k], idx[k + 1]))
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_ply(path, verts, faces, binary: bool):
    verts = np.asarray(verts, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(verts)}", "property float x", "property float y", "property float z"]
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(verts.tobytes())
            if len(faces):
                rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = faces
                fh.write(rec.tobytes())
        else:
            for v in verts.tolist():
                fh.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n".encode("ascii"))
            for f in faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# -- OBJ ---------------------------------------------------------------------

def _read_obj(path):
    data = Path(path).read_bytes()
    verts, faces = [], []
    pending = []
    pos = 0
    warned = set()
    for raw in data.split(b"\n"):
        off = pos
        pos += len(raw) + 1
        tok = raw.decode("utf-8", "replace").split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshFormatError("bad vertex record", off) from None
            if len(verts[-1]) != 3:
                raise TruncatedPayloadError("vertex record needs 3 coordinates", off)
        elif tok[0] == "f":
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError:
                raise MeshFormatError("bad face record", off) from None
            if len(idx) < 3:
                raise TruncatedPayloadError("face record needs 3 indices", off)
            pending.append((off, idx))
        elif tok[0] not in warned:
            warned.add(tok[0])
            log.warning("ignoring OBJ directive %r", tok[0])
    n = len(verts)
    for off, idx in pending:
        idx = [i - 1 if i > 0 else n + i for i in idx]
        if any(i < 0 or i >= n for i in idx):
            raise IndexOutOfRangeError("face index out of range", off)
        for k in range(1, len(idx) - 1):
            faces.append((idx[0], idx[k], idx[k + 1]))
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_obj(path, verts, faces):
    with open(path, "w") as fh:
        for v in np.asarray(verts, dtype=np.float32).tolist():
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in np.asarray(faces).reshape(-1, 3) + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


# -- public ------------------------------------------------------------------

def _format_of(path, fmt):
    if fmt is not None:
        return fmt.lower()
    ext = os.path.splitext(str(path))[1].lower().lstrip(".")
    if ext not in ("ply", "obj"):
        raise ValueError(f"cannot infer format from {path!r}")
    return ext


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    fmt = _format_of(path, fmt)
    verts, faces = _read_ply(path) if fmt == "ply" else _read_obj(path)
    return TriMesh(verts, faces)


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    fmt = _format_of(path, fmt)
    verts, _ = _read_ply(path) if fmt == "ply" else _read_obj(path)
    return PointCloud(verts)


def save_mesh(path, mesh: TriMesh, fmt: str | None = None, binary: bool = True) -> None:
    fmt = _format_of(path, fmt)
    if fmt == "ply":
        _write_ply(path, mesh.vertices, mesh.faces, binary)
    else:
        _write_obj(path, mesh.vertices, mesh.faces)


def save_cloud(path, cloud: PointCloud, fmt: str | None = None, binary: bool = True) -> None:
    fmt = _format_of(path, fmt)
    if fmt == "ply":
        _write_ply(path, cloud.points, np.zeros((0, 3), dtype=int), binary)
    else:
        _write_obj(path, cloud.points, np.zeros((0, 3), dtype=int))
