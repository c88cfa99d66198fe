"""OBJ triangle mesh codec (v/f records, fan triangulation on load)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFileError
from .geom import TriangleMesh


def load_obj(path) -> TriangleMesh:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror}")

    vertices = []
    faces = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise DataFileError(path, "vertex record needs 3 coordinates", line=ln)
            try:
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError:
                raise DataFileError(path, f"non-numeric vertex coordinate in {line!r}", line=ln)
        elif tag == "f":
            if len(parts) < 4:
                raise DataFileError(path, "face record needs at least 3 vertices", line=ln)
            idx = []
            for token in parts[1:]:
                head = token.split("/")[0]
                try:
                    i = int(head)
                except ValueError:
                    raise DataFileError(path, f"bad face index {token!r}", line=ln)
                if i < 1:
                    raise DataFileError(path, f"face index {i} is not 1-based positive", line=ln)
                idx.append(i - 1)
            # fan rule for polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l", "p"):
            continue
        else:
            raise DataFileError(path, f"unknown OBJ record {tag!r}", line=ln)

    if not vertices:
        raise DataFileError(path, "OBJ file has no vertices")
    if not faces:
        raise DataFileError(path, "OBJ file has no faces")
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64)
    if tris.max() >= len(verts):
        bad = int(tris.max())
        raise DataFileError(path, f"face index {bad + 1} exceeds vertex count {len(verts)}")
    return TriangleMesh(verts, tris)


def save_obj(path, mesh: TriangleMesh):
    path = Path(path)
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")
