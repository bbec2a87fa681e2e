"""Heightfield to triangle mesh conversion and Wavefront OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagegeo import DepthMap, ForegroundMask, FormatError


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) float64
    normals: np.ndarray  # (N, 3) unit vectors
    triangles: np.ndarray  # (M, 3) int64, counter-clockwise seen from +z

    def __post_init__(self):
        for name, dtype in (("vertices", np.float64), ("normals", np.float64), ("triangles", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1, 3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.normals) != len(self.vertices):
            raise ValueError("need exactly one normal per vertex")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized face normals, twice the triangle area in length."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals; isolated vertices get +z."""
    normals = np.zeros((len(vertices), 3))
    if len(triangles):
        v = vertices[triangles]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        for corner in range(3):
            np.add.at(normals, triangles[:, corner], fn)
    length = np.linalg.norm(normals, axis=1)
    flat = length <= 1e-300
    normals[flat] = (0.0, 0.0, 1.0)
    length[flat] = 1.0
    return normals / length[:, None]


def heightfield_to_mesh(z: DepthMap, mask: ForegroundMask, pixel_size: float = 1.0) -> TriangleMesh:
    """Triangulate the foreground of a depth map.

    Pixel (row, col) becomes the vertex (col, H - 1 - row, z) scaled by
    ``pixel_size`` in x and y, so +y points toward the top row. Every 2x2 block
    of foreground pixels is split into two triangles along whichever diagonal
    has the smaller depth jump.
    """
    fg = mask.data
    z.check_foreground(mask)
    h, w = fg.shape
    index = np.full(fg.shape, -1, dtype=np.int64)
    rows, cols = np.nonzero(fg)
    index[rows, cols] = np.arange(rows.size)
    vertices = np.column_stack(
        [cols * pixel_size, (h - 1 - rows) * pixel_size, z.data[rows, cols]]
    ).astype(np.float64)

    # quad corners: a=(r,c) b=(r,c+1) c=(r+1,c) d=(r+1,c+1)
    quad = fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1] & fg[1:, 1:]
    qr, qc = np.nonzero(quad)
    a, b = index[qr, qc], index[qr, qc + 1]
    c, d = index[qr + 1, qc], index[qr + 1, qc + 1]
    zz = z.data
    jump_ad = np.abs(zz[qr, qc] - zz[qr + 1, qc + 1])
    jump_bc = np.abs(zz[qr, qc + 1] - zz[qr + 1, qc])
    use_ad = jump_ad <= jump_bc
    t1 = np.where(use_ad[:, None], np.column_stack([a, c, d]), np.column_stack([a, c, b]))
    t2 = np.where(use_ad[:, None], np.column_stack([a, d, b]), np.column_stack([b, c, d]))
    tris = np.empty((2 * len(qr), 3), dtype=np.int64)
    tris[0::2], tris[1::2] = t1, t2

    if len(tris):
        v = vertices[tris]
        area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
        tris = tris[area2 > 0]
    return TriangleMesh(vertices, vertex_normals(vertices, tris), tris)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = []
    for x, y, zc in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {zc:.9g}")
    for x, y, zc in mesh.normals:
        lines.append(f"vn {x:.9g} {y:.9g} {zc:.9g}")
    for i, j, k in mesh.triangles + 1:
        lines.append(f"f {i}//{i} {j}//{j} {k}//{k}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_obj(path) -> TriangleMesh:
    """Read the subset of OBJ written by :func:`save_obj` (plus plain ``f a b c`` faces).

    Polygons with more than three corners are fan-triangulated. Missing or
    mismatched vertex normals are recomputed from the faces.
    """
    verts, norms, faces, face_normals = [], [], [], []
    with open(path, encoding="ascii", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(t) for t in parts[1:4]])
                elif parts[0] == "vn":
                    norms.append([float(t) for t in parts[1:4]])
                elif parts[0] == "f":
                    refs = [p.split("/") for p in parts[1:]]
                    vi = [int(r[0]) for r in refs]
                    ni = [int(r[2]) if len(r) > 2 and r[2] else None for r in refs]
                    for k in range(1, len(vi) - 1):
                        faces.append([vi[0], vi[k], vi[k + 1]])
                        face_normals.append([ni[0], ni[k], ni[k + 1]])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    n = len(vertices)
    tris = np.array(faces, dtype=np.int64).reshape(-1, 3)
    tris = np.where(tris < 0, tris + n, tris - 1)  # negative indices are relative
    same_index = all(fn == f for f, fn in zip(faces, face_normals))
    if len(norms) == n and same_index:
        normals = np.array(norms, dtype=np.float64).reshape(-1, 3)
        length = np.linalg.norm(normals, axis=1)
        if (length > 0).all():
            return TriangleMesh(vertices, normals / length[:, None], tris)
    return TriangleMesh(vertices, vertex_normals(vertices, tris), tris)
