"""PLY point cloud codec (ASCII and binary little-endian).

Canonical vertex schema: x, y, z as 32-bit floats plus the optional label
properties organ_class (uchar), plant_id (int), occluded (uchar). Any
other vertex property found in a file is kept, dtype and all, and written
back on save so unknown properties survive a round-trip.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFileError
from .geom import PointCloud

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
_PLY_NAMES = {v: k for k, v in [
    ("char", "i1"), ("uchar", "u1"), ("short", "i2"), ("ushort", "u2"),
    ("int", "i4"), ("uint", "u4"), ("float", "f4"), ("double", "f8"),
]}

_LABEL_PROPS = {"organ_class": "u1", "plant_id": "i4", "occluded": "u1"}


def _parse_header(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise DataFileError(path, "not a PLY file (missing 'ply' magic)", line=1)
    fmt = None
    props = []  # (name, dtype_code)
    count = None
    in_vertex = False
    header_end = None
    for ln, raw in enumerate(lines[1:], start=2):
        parts = raw.strip().split()
        if not parts:
            continue
        kw = parts[0]
        if kw == "comment":
            continue
        if kw == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise DataFileError(path, f"unsupported PLY format {' '.join(parts[1:])!r}", line=ln)
            fmt = parts[1]
        elif kw == "element":
            if len(parts) != 3:
                raise DataFileError(path, "malformed element declaration", line=ln)
            if parts[1] == "vertex":
                in_vertex = True
                try:
                    count = int(parts[2])
                except ValueError:
                    raise DataFileError(path, f"bad vertex count {parts[2]!r}", line=ln)
            else:
                raise DataFileError(path, f"unsupported element {parts[1]!r} (point cloud files carry vertices only)", line=ln)
        elif kw == "property":
            if not in_vertex:
                raise DataFileError(path, "property outside the vertex element", line=ln)
            if parts[1] == "list":
                raise DataFileError(path, "list properties are not supported for vertices", line=ln)
            if len(parts) != 3:
                raise DataFileError(path, "malformed property declaration", line=ln)
            tname, pname = parts[1], parts[2]
            if tname not in _PLY_TYPES:
                raise DataFileError(path, f"unknown property type {tname!r}", line=ln)
            props.append((pname, _PLY_TYPES[tname]))
        elif kw == "end_header":
            header_end = ln
            break
        else:
            raise DataFileError(path, f"unknown header keyword {kw!r}", line=ln)
    if header_end is None:
        raise DataFileError(path, "missing end_header")
    if fmt is None:
        raise DataFileError(path, "missing format declaration")
    if count is None:
        raise DataFileError(path, "missing vertex element")
    names = [p for p, _ in props]
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise DataFileError(path, f"vertex element lacks the {coord!r} property")
    if len(set(names)) != len(names):
        raise DataFileError(path, "duplicate vertex property names")
    return fmt, count, props, header_end


def load_ply(path) -> PointCloud:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror}")
    end_marker = b"end_header\n"
    pos = blob.find(end_marker)
    if pos < 0:
        raise DataFileError(path, "missing end_header")
    header_text = blob[: pos + len(end_marker)]
    try:
        header_lines = header_text.decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise DataFileError(path, "header is not ASCII")
    fmt, count, props, header_end = _parse_header(header_lines, path)
    payload = blob[pos + len(end_marker):]
    dtype = np.dtype([(name, "<" + code) for name, code in props])

    if fmt == "binary_little_endian":
        expected = dtype.itemsize * count
        if len(payload) < expected:
            raise DataFileError(path, f"payload truncated: expected {expected} bytes for {count} vertices, found {len(payload)}")
        if len(payload) > expected:
            raise DataFileError(path, f"payload has {len(payload) - expected} trailing bytes beyond the declared {count} vertices")
        rows = np.frombuffer(payload, dtype=dtype, count=count)
    else:
        text_rows = payload.decode("ascii", errors="replace").splitlines()
        data_rows = [(i, r) for i, r in enumerate(text_rows) if r.strip()]
        if len(data_rows) != count:
            raise DataFileError(path, f"expected {count} vertex rows, found {len(data_rows)}",
                                line=header_end + len(text_rows))
        rows = np.empty(count, dtype=dtype)
        for out_i, (i, r) in enumerate(data_rows):
            fields = r.split()
            if len(fields) != len(props):
                raise DataFileError(path, f"expected {len(props)} values per vertex, found {len(fields)}",
                                    line=header_end + i + 1)
            try:
                for (name, _), value in zip(props, fields):
                    rows[out_i][name] = float(value)
            except ValueError:
                raise DataFileError(path, f"non-numeric vertex value in {r!r}", line=header_end + i + 1)

    points = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
    known = {"x", "y", "z"}
    kwargs = {}
    extras = {}
    for name, code in props:
        if name in known:
            continue
        if name == "organ_class":
            kwargs["organ"] = rows[name].astype(np.uint8)
        elif name == "plant_id":
            kwargs["plant_id"] = rows[name].astype(np.int32)
        elif name == "occluded":
            kwargs["occluded"] = rows[name].astype(np.uint8)
        else:
            extras[name] = np.array(rows[name])
    try:
        return PointCloud(points, extras=extras, **kwargs)
    except ValueError as e:
        raise DataFileError(path, str(e))


def _cloud_properties(cloud: PointCloud):
    """Ordered (name, dtype_code, values) triples for serialization."""
    pts32 = cloud.points.astype("<f4")
    cols = [("x", "f4", pts32[:, 0]), ("y", "f4", pts32[:, 1]), ("z", "f4", pts32[:, 2])]
    if cloud.organ is not None:
        cols.append(("organ_class", "u1", cloud.organ))
    if cloud.plant_id is not None:
        cols.append(("plant_id", "i4", cloud.plant_id))
    if cloud.occluded is not None:
        cols.append(("occluded", "u1", cloud.occluded))
    for name in sorted(cloud.extras):
        values = np.asarray(cloud.extras[name])
        code = values.dtype.newbyteorder("=").str.lstrip("<>=|")
        if code not in _PLY_NAMES:
            raise ValueError(f"extra property {name!r} has unsupported dtype {values.dtype}")
        cols.append((name, code, values))
    return cols


def save_ply(path, cloud: PointCloud, binary: bool = True):
    path = Path(path)
    cols = _cloud_properties(cloud)
    n = len(cloud)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {_PLY_NAMES[code]} {name}" for name, code, _ in cols]
    header.append("end_header")
    header_blob = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        dtype = np.dtype([(name, "<" + code) for name, code, _ in cols])
        rows = np.empty(n, dtype=dtype)
        for name, _, values in cols:
            rows[name] = values
        path.write_bytes(header_blob + rows.tobytes())
    else:
        lines = []
        for i in range(n):
            fields = []
            for _, code, values in cols:
                v = values[i]
                fields.append(f"{float(v):.9g}" if code in ("f4", "f8") else str(int(v)))
            lines.append(" ".join(fields))
        path.write_bytes(header_blob + ("\n".join(lines) + "\n").encode("ascii"))
