"""PLY point-cloud reader/writer and OBJ/OFF mesh readers.

The PLY vertex element may carry ``x y z`` (float32), ``nx ny nz`` (float32),
``gt`` (uchar), ``region`` (int) and any extra scalar properties such as
``score`` or salience debug fields. Binary little-endian, binary big-endian
and ASCII encodings are read; writing supports binary little-endian and ASCII.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import FormatError
from .geometry import Mesh, PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _vertex_table(cloud: PointCloud, extra: Optional[Mapping[str, np.ndarray]]):
    cols = [("x", cloud.points[:, 0], "f4"), ("y", cloud.points[:, 1], "f4"),
            ("z", cloud.points[:, 2], "f4")]
    if cloud.normals is not None:
        cols += [(c, cloud.normals[:, i], "f4") for i, c in enumerate(("nx", "ny", "nz"))]
    if cloud.gt_label is not None:
        cols.append(("gt", cloud.gt_label, "u1"))
    if cloud.region_id is not None:
        cols.append(("region", cloud.region_id, "i4"))
    for name, values in (extra or {}).items():
        values = np.asarray(values).reshape(-1)
        if len(values) != len(cloud):
            raise ValueError(f"extra property {name!r} has wrong length")
        code = values.dtype.str[1:]
        if code not in _NP_TO_PLY:
            code = "f4" if values.dtype.kind == "f" else "i4"
        cols.append((name, values, code))
    return cols


def ply_bytes(cloud: PointCloud, extra: Optional[Mapping[str, np.ndarray]] = None,
              binary: bool = True) -> bytes:
    cols = _vertex_table(cloud, extra)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {_NP_TO_PLY[code]} {name}" for name, _, code in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(name, "<" + code) for name, _, code in cols])
        table = np.empty(len(cloud), dtype=dtype)
        for name, values, _ in cols:
            table[name] = values
        return head + table.tobytes()
    lines = []
    for i in range(len(cloud)):
        parts = []
        for _, values, code in cols:
            v = values[i]
            parts.append(repr(float(np.float32(v))) if code[0] == "f" else str(int(v)))
        lines.append(" ".join(parts))
    return head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def write_ply(path, cloud: PointCloud, extra: Optional[Mapping[str, np.ndarray]] = None,
              binary: bool = True) -> None:
    atomic_write_bytes(path, ply_bytes(cloud, extra, binary))


def _parse_header(f) -> Tuple[str, list]:
    if f.readline().strip() != b"ply":
        raise FormatError("missing 'ply' magic")
    fmt, elements = None, []
    while True:
        line = f.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply_table(path) -> Dict[str, np.ndarray]:
    """All scalar vertex properties of a PLY file as named arrays."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        body = f.read()
    if not elements or elements[0][0] != "vertex":
        raise FormatError("first PLY element must be 'vertex'")
    name, count, props = elements[0]
    if any(isinstance(t, tuple) for _, t in props):
        raise FormatError("list properties on vertices are not supported")
    if fmt == "ascii":
        text = body.decode("ascii").split("\n")
        rows = [ln.split() for ln in text[:count]]
        if len(rows) < count or any(len(r) < len(props) for r in rows):
            raise FormatError("truncated ASCII PLY vertex data")
        out = {}
        for j, (pname, code) in enumerate(props):
            col = [r[j] for r in rows]
            out[pname] = np.array(col, dtype=np.float64 if code[0] == "f" else np.int64).astype(code)
        return out
    order = "<" if fmt == "binary_little_endian" else ">"
    dtype = np.dtype([(pname, order + code) for pname, code in props])
    if len(body) < dtype.itemsize * count:
        raise FormatError("truncated binary PLY vertex data")
    table = np.frombuffer(body, dtype=dtype, count=count)
    return {pname: table[pname].astype(code) for pname, code in props}


def read_ply(path) -> Tuple[PointCloud, Dict[str, np.ndarray]]:
    """Read a PLY cloud; returns the cloud plus any non-standard properties."""
    table = read_ply_table(path)
    for c in "xyz":
        if c not in table:
            raise FormatError(f"PLY lacks vertex property {c!r}")
    pts = np.stack([table.pop(c) for c in "xyz"], axis=1).astype(np.float64)
    normals = None
    if all(c in table for c in ("nx", "ny", "nz")):
        normals = np.stack([table.pop(c) for c in ("nx", "ny", "nz")], axis=1).astype(np.float64)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    gt = table.pop("gt", None)
    region = table.pop("region", None)
    return PointCloud(pts, normals, gt, region), table


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) != 3:
                    raise FormatError("only triangular OBJ faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_off(path) -> Mesh:
    with open(path) as f:
        tokens = [ln.split("#")[0].split() for ln in f]
    tokens = [t for t in tokens if t]
    if not tokens or not tokens[0][0].endswith("OFF"):
        raise FormatError("missing OFF magic")
    head = tokens[0][1:] if len(tokens[0]) > 1 else tokens[1]
    body = tokens[1:] if len(tokens[0]) > 1 else tokens[2:]
    nv, nf = int(head[0]), int(head[1])
    verts = [[float(x) for x in t[:3]] for t in body[:nv]]
    faces = []
    for t in body[nv:nv + nf]:
        if int(t[0]) != 3:
            raise FormatError("only triangular OFF faces are supported")
        faces.append([int(x) for x in t[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".off":
        return read_off(path)
    raise FormatError(f"unsupported mesh format {suffix!r}")
