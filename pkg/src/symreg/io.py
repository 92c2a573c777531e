"""Readers and writers for XYZ, PLY and CRSF files.

CRSF layout (little-endian): ``b"CRSF"``, u32 version (1), u32 rows N,
u32 columns C, then ``N*C`` float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from symreg.errors import FormatError
from symreg.geometry import PointCloud, as_cloud

CRSF_MAGIC = b"CRSF"
CRSF_VERSION = 1
_CRSF_HEADER = struct.Struct("<4sIII")

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


# --- XYZ -------------------------------------------------------------------

def read_xyz(path, id: str | None = None) -> PointCloud:
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            tokens = s.split()
            if len(tokens) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}", "bad_xyz")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a number", "bad_xyz") from None
    if not rows:
        raise FormatError(f"{path}: no points", "empty_cloud")
    return PointCloud(np.array(rows), path.stem if id is None else id)


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, as_cloud(cloud).points, fmt="%.17g")


# --- PLY -------------------------------------------------------------------

class _Element:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.props: list[tuple] = []  # (name, dtype) or (name, count_dtype, item_dtype)

    @property
    def has_lists(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError(f"{path}: missing 'ply' magic", "bad_magic")
    fmt = None
    elements: list[_Element] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError(f"{path}: header has no end_header", "bad_header")
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        try:
            if key == "format":
                fmt = tokens[1]
            elif key == "element":
                elements.append(_Element(tokens[1], int(tokens[2])))
            elif key == "property":
                if not elements:
                    raise FormatError(f"{path}: property before element", "bad_header")
                if tokens[1] == "list":
                    elements[-1].props.append((tokens[4], _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]))
                else:
                    elements[-1].props.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif key == "end_header":
                break
            else:
                raise FormatError(f"{path}: unknown header line {raw!r}", "bad_header")
        except (IndexError, KeyError, ValueError):
            raise FormatError(f"{path}: malformed header line {raw!r}", "bad_header") from None
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}", "unsupported_format")
    return fmt, elements


def _read_ascii(fh, elements, path):
    tokens = fh.read().split()
    pos = 0
    out = {}
    for el in elements:
        cols = {p[0]: [] for p in el.props if len(p) == 2}
        for _ in range(el.count):
            for p in el.props:
                try:
                    if len(p) == 3:
                        n = int(tokens[pos])
                        if pos + n >= len(tokens):
                            raise IndexError
                        pos += 1 + n
                    else:
                        cols[p[0]].append(float(tokens[pos]))
                        pos += 1
                except IndexError:
                    raise FormatError(f"{path}: truncated {el.name} data", "truncated") from None
                except ValueError:
                    raise FormatError(f"{path}: bad number in {el.name} data", "bad_number") from None
        if pos > len(tokens):
            raise FormatError(f"{path}: truncated {el.name} data", "truncated")
        out[el.name] = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
        if el.name == "vertex":
            break
    return out


def _read_binary(fh, elements, path, endian):
    data = fh.read()
    pos = 0
    out = {}
    for el in elements:
        if not el.has_lists:
            dt = np.dtype([(p[0], endian + p[1]) for p in el.props])
            nbytes = dt.itemsize * el.count
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: truncated {el.name} data", "truncated")
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            pos += nbytes
            out[el.name] = {name: arr[name].astype(np.float64) for name in dt.names}
        else:
            cols = {p[0]: [] for p in el.props if len(p) == 2}
            try:
                for _ in range(el.count):
                    for p in el.props:
                        if len(p) == 3:
                            cdt = np.dtype(endian + p[1])
                            n = int(np.frombuffer(data, cdt, 1, pos)[0])
                            pos += cdt.itemsize + n * np.dtype(p[2]).itemsize
                        else:
                            dt = np.dtype(endian + p[1])
                            cols[p[0]].append(float(np.frombuffer(data, dt, 1, pos)[0]))
                            pos += dt.itemsize
            except ValueError:
                raise FormatError(f"{path}: truncated {el.name} data", "truncated") from None
            if pos > len(data):
                raise FormatError(f"{path}: truncated {el.name} data", "truncated")
            out[el.name] = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
        if el.name == "vertex":
            break
    return out


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    """All scalar vertex properties of a PLY file, keyed by name."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        if not any(el.name == "vertex" for el in elements):
            raise FormatError(f"{path}: no vertex element", "missing_xyz")
        if fmt == "ascii":
            data = _read_ascii(fh, elements, path)
        else:
            data = _read_binary(fh, elements, path, "<" if fmt == "binary_little_endian" else ">")
    return data["vertex"]


def read_ply(path, id: str | None = None) -> PointCloud:
    path = Path(path)
    vertex = read_ply_vertices(path)
    if not all(k in vertex for k in "xyz"):
        raise FormatError(f"{path}: vertex element lacks x/y/z", "missing_xyz")
    pts = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(np.float64)
    if len(pts) == 0:
        raise FormatError(f"{path}: no points", "empty_cloud")
    return PointCloud(pts, path.stem if id is None else id)


def write_ply(path, cloud: PointCloud, labels=None) -> None:
    """ASCII PLY with double coordinates; ``labels`` adds an int ``label`` property."""
    pts = as_cloud(cloud).points
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z"]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        lines.append("property int label")
    lines.append("end_header")
    body = []
    for i, p in enumerate(pts):
        row = " ".join(repr(float(v)) for v in p)
        if labels is not None:
            row += f" {int(labels[i])}"
        body.append(row)
    Path(path).write_text("\n".join(lines + body) + "\n", encoding="ascii")


def read_cloud(path, id: str | None = None) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file", "missing_file")
    if path.suffix.lower() == ".ply":
        return read_ply(path, id)
    return read_xyz(path, id)


def write_cloud(path, cloud: PointCloud) -> None:
    if Path(path).suffix.lower() == ".ply":
        write_ply(path, cloud)
    else:
        write_xyz(path, cloud)


# --- CRSF ------------------------------------------------------------------

def write_crsf(path, matrix) -> None:
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if m.ndim != 2:
        raise FormatError(f"CRSF payload must be 2-D, got shape {m.shape}", "bad_shape")
    with open(path, "wb") as fh:
        fh.write(_CRSF_HEADER.pack(CRSF_MAGIC, CRSF_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_crsf(path) -> np.ndarray:
    """Raw float32 matrix from a CRSF file; no finiteness or norm checks."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file", "missing_file")
    data = path.read_bytes()
    if len(data) < _CRSF_HEADER.size:
        raise FormatError(f"{path}: truncated header", "truncated")
    magic, version, n, c = _CRSF_HEADER.unpack_from(data)
    if magic != CRSF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", "bad_magic")
    if version != CRSF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", "bad_version")
    expected = _CRSF_HEADER.size + 4 * n * c
    if len(data) != expected:
        code = "truncated" if len(data) < expected else "trailing_data"
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}", code)
    return np.frombuffer(data, dtype="<f4", offset=_CRSF_HEADER.size).reshape(n, c).astype(np.float32)
