"""File formats: OBJ / binary PLY meshes and clouds, PFM depth maps, PNG masks."""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .geom import TriangleMesh


# ---------------------------------------------------------------------------
# OBJ


def format_obj(mesh: TriangleMesh, groups: list[tuple[str, int]] | None = None) -> str:
    """Serialize vertex and face lines. ``groups`` lists ``(name, face_count)`` runs."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    faces = mesh.faces + 1
    if groups:
        start = 0
        for name, count in groups:
            lines.append(f"g {name}")
            lines.extend(f"f {a} {b} {c}" for a, b, c in faces[start:start + count])
            start += count
    else:
        lines.extend(f"f {a} {b} {c}" for a, b, c in faces)
    return "\n".join(lines) + "\n"


def write_obj(path, mesh: TriangleMesh, groups=None) -> None:
    Path(path).write_text(format_obj(mesh, groups), encoding="utf-8")


def parse_obj(text: str) -> TriangleMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise FormatError(f"OBJ line {lineno}: {exc}") from None
    if any(len(v) != 3 for v in verts):
        raise FormatError("OBJ vertex with fewer than 3 coordinates")
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_obj(path) -> TriangleMesh:
    return parse_obj(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# PLY (binary little endian)

_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def write_ply(path, vertices, faces=None) -> None:
    """Write a binary little-endian PLY; ``faces=None`` writes a point cloud."""
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    f = None
    if faces is not None:
        f = np.asarray(faces, dtype="<i4").reshape(-1, 3)
        header += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    buf.write(v.tobytes())
    if f is not None:
        rec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        rec["n"] = 3
        rec["idx"] = f
        buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read vertices and (possibly empty) triangle faces from a binary LE PLY."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in [h.strip() for h in header]:
        raise FormatError("only binary_little_endian PLY is supported")
    elements: list[tuple[str, int, list]] = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
    pos = body_start
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if all(p[0] != "list" for p in props):
            dtype = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            pos += dtype.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            continue
        out = []
        for _ in range(count):
            row = []
            for p in props:
                if p[0] == "list":
                    cfmt, ifmt = "<" + _PLY_TYPES[p[1]], "<" + _PLY_TYPES[p[2]]
                    (n,) = struct.unpack_from(cfmt, data, pos)
                    pos += struct.calcsize(cfmt)
                    vals = struct.unpack_from(f"<{n}{ifmt[1]}", data, pos)
                    pos += struct.calcsize(ifmt) * n
                    row.append(vals)
                else:
                    fmt = "<" + _PLY_TYPES[p[0]]
                    pos += struct.calcsize(fmt)
            out.append(row)
        if name == "face":
            tris = []
            for row in out:
                idx = row[0]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return verts, faces


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    if path.suffix.lower() == ".ply":
        v, f = read_ply(path)
        return TriangleMesh(v, f)
    raise FormatError(f"unsupported mesh format: {path.suffix}")


def write_mesh(path, mesh: TriangleMesh) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, mesh.vertices, mesh.faces)
    else:
        write_obj(path, mesh)


def read_geometry(path):
    """Mesh if the file has faces, otherwise an ``(N, 3)`` point array."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        v, f = read_ply(path)
        return TriangleMesh(v, f) if len(f) else v
    return read_obj(path)


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM. Rows are stored bottom-to-top."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        nl = data.index(b"\n", pos)
        fields.extend(data[pos:nl].split())
        pos = nl + 1
    if fields[0] != b"Pf":
        raise FormatError("only single-channel PFM ('Pf') is supported")
    w, h, scale = int(fields[1]), int(fields[2]), float(fields[3])
    endian = "<" if scale < 0 else ">"
    arr = np.frombuffer(data, dtype=endian + "f4", count=w * h, offset=pos)
    return np.flipud(arr.reshape(h, w)).astype(np.float64)


# ---------------------------------------------------------------------------
# PNG masks / images


def write_mask_png(path, mask: np.ndarray) -> None:
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def write_image_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def read_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            im = im.convert("RGB")
        return np.asarray(im).copy()
