"""Orbit cameras and a z-buffered rasterizer producing normal-colored geometry images.

World frame: +y is up. An orbit camera at azimuth 0 and elevation 0 sits on
the +z side of its target looking along -z; azimuth turns it toward +x.
Covered pixels are colored (n + 1) / 2 where n is the interpolated unit normal
in camera space (x right, y up, z toward the viewer) or in world space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagegeo import RgbImage
from .surface import TriangleMesh

DEFAULT_AZIMUTHS = (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
DEFAULT_ELEVATION = 0.0
INPUT_AZIMUTH = 10.0
INPUT_ELEVATION = 10.0

_WHITE = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class CameraPose:
    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    distance: float = 2.0
    projection: str = "orthographic"  # or "perspective"
    fov_deg: float = 40.0  # vertical field of view, perspective only
    ortho_extent: float = 2.0  # visible height in scene units, orthographic only
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("camera distance must be positive")
        if self.projection not in ("orthographic", "perspective"):
            raise ValueError(f"unknown projection {self.projection!r}")
        if self.projection == "perspective" and not 0.0 < self.fov_deg < 180.0:
            raise ValueError("fov must lie in (0, 180) degrees")
        if self.projection == "orthographic" and not self.ortho_extent > 0:
            raise ValueError("orthographic extent must be positive")
        object.__setattr__(self, "target", tuple(float(t) for t in self.target))

    @property
    def near(self) -> float:
        return self.distance * 1e-3

    @property
    def far(self) -> float:
        return self.distance * 1e3


@dataclass(frozen=True)
class RenderConfig:
    width: int = 320
    height: int = 320
    background: tuple = _WHITE
    color_space: str = "camera"  # or "world"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.color_space not in ("camera", "world"):
            raise ValueError(f"unknown color space {self.color_space!r}")
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")


def orbit_direction(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Unit vector from the target toward an orbit camera."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])


def camera_position(pose: CameraPose) -> np.ndarray:
    return np.asarray(pose.target) + pose.distance * orbit_direction(pose.azimuth_deg, pose.elevation_deg)


def camera_basis(pose: CameraPose) -> np.ndarray:
    """Rows are the camera right, up and back (toward the viewer) axes in world coordinates."""
    back = orbit_direction(pose.azimuth_deg, pose.elevation_deg)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-12:
        # looking straight up or down: keep azimuth continuity
        az = math.radians(pose.azimuth_deg)
        right = np.array([math.cos(az), 0.0, -math.sin(az)])
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return np.stack([right, true_up, back])


def view_matrix(pose: CameraPose) -> np.ndarray:
    basis = camera_basis(pose)
    m = np.eye(4)
    m[:3, :3] = basis
    m[:3, 3] = -basis @ camera_position(pose)
    return m


def projection_matrix(pose: CameraPose, aspect: float = 1.0) -> np.ndarray:
    near, far = pose.near, pose.far
    p = np.zeros((4, 4))
    if pose.projection == "perspective":
        f = 1.0 / math.tan(math.radians(pose.fov_deg) / 2.0)
        p[0, 0] = f / aspect
        p[1, 1] = f
        p[2, 2] = -(far + near) / (far - near)
        p[2, 3] = -2.0 * far * near / (far - near)
        p[3, 2] = -1.0
    else:
        half = pose.ortho_extent / 2.0
        p[0, 0] = 1.0 / (half * aspect)
        p[1, 1] = 1.0 / half
        # depth is kept monotone but never clipped for orthographic views
        p[2, 2] = -1.0 / far
        p[3, 3] = 1.0
    return p


def camera_from_orbit(pose: CameraPose, aspect: float = 1.0) -> np.ndarray:
    """Composed 4x4 world-to-clip transform of an orbit camera."""
    return projection_matrix(pose, aspect) @ view_matrix(pose)


# ---------------------------------------------------------------- rasterization

_EDGE_EPS = 1e-9
_MAX_FRAGMENT_BATCH = 1 << 22


def _fragments(ndc: np.ndarray, tris: np.ndarray, width: int, height: int):
    """Enumerate covered pixel centers for each triangle.

    Returns pixel index, triangle index and barycentric weights for every
    candidate fragment. Triangles are bucketed by bounding-box size so that
    each bucket is processed as one dense array.
    """
    sx = (ndc[:, 0] + 1.0) * 0.5 * width
    sy = (1.0 - ndc[:, 1]) * 0.5 * height
    tx, ty = sx[tris], sy[tris]
    x0 = np.clip(np.ceil(tx.min(axis=1) - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(tx.max(axis=1) - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(ty.min(axis=1) - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(ty.max(axis=1) - 0.5), -1, height - 1).astype(np.int64)
    span = np.maximum(x1 - x0 + 1, y1 - y0 + 1)
    visible = (x1 >= x0) & (y1 >= y0)

    out_pix, out_tri, out_bary = [], [], []
    size = 1
    remaining = visible.copy()
    while remaining.any():
        sel = np.nonzero(remaining & (span <= size))[0]
        remaining[sel] = False
        if sel.size:
            offs = np.arange(size)
            chunk = max(1, _MAX_FRAGMENT_BATCH // (size * size))
            for start in range(0, sel.size, chunk):
                ids = sel[start:start + chunk]
                px = x0[ids, None, None] + offs[None, None, :]
                py = y0[ids, None, None] + offs[None, :, None]
                cx, cy = px + 0.5, py + 0.5
                ax, ay = tx[ids, 0, None, None], ty[ids, 0, None, None]
                bx, by = tx[ids, 1, None, None], ty[ids, 1, None, None]
                qx, qy = tx[ids, 2, None, None], ty[ids, 2, None, None]
                # screen y points down, so front faces have negative screen area
                area = (bx - ax) * (qy - ay) - (qx - ax) * (by - ay)
                with np.errstate(divide="ignore", invalid="ignore"):
                    w0 = ((bx - cx) * (qy - cy) - (qx - cx) * (by - cy)) / area
                    w1 = ((qx - cx) * (ay - cy) - (ax - cx) * (qy - cy)) / area
                w2 = 1.0 - w0 - w1  # NaN weights from zero-area slivers fail every test below
                inside = (
                    (w0 >= -_EDGE_EPS) & (w1 >= -_EDGE_EPS) & (w2 >= -_EDGE_EPS)
                    & (px <= x1[ids, None, None]) & (py <= y1[ids, None, None])
                )
                t_idx, r_idx, c_idx = np.nonzero(inside)
                out_pix.append(py[t_idx, r_idx, 0] * width + px[t_idx, 0, c_idx])
                out_tri.append(ids[t_idx])
                out_bary.append(np.column_stack([w0[inside], w1[inside], w2[inside]]))
        size *= 2
    if not out_pix:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3))
    return np.concatenate(out_pix), np.concatenate(out_tri), np.concatenate(out_bary)


def rasterize(mesh: TriangleMesh, pose: CameraPose, width: int, height: int):
    """Z-buffer the mesh; returns (triangle id map with -1 for empty, barycentric map)."""
    tri_map = np.full(height * width, -1, dtype=np.int64)
    bary_map = np.zeros((height * width, 3))
    if mesh.is_empty:
        return tri_map.reshape(height, width), bary_map.reshape(height, width, 3)
    m = camera_from_orbit(pose, width / height)
    hom = np.column_stack([mesh.vertices, np.ones(len(mesh.vertices))]) @ m.T
    w = hom[:, 3]
    tris = mesh.triangles
    keep = np.ones(len(tris), dtype=bool)
    if pose.projection == "perspective":
        keep &= (w[tris] > pose.near).all(axis=1)
    safe_w = np.where(np.abs(w) > 0, w, 1.0)
    ndc = hom[:, :3] / safe_w[:, None]
    v = ndc[tris]
    area = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (
        v[:, 2, 0] - v[:, 0, 0]
    ) * (v[:, 1, 1] - v[:, 0, 1])
    keep &= area > 0  # counter-clockwise in NDC faces the camera
    tri_ids = np.nonzero(keep)[0]
    pix, local, bary = _fragments(ndc, tris[tri_ids], width, height)
    if pix.size == 0:
        return tri_map.reshape(height, width), bary_map.reshape(height, width, 3)
    tid = tri_ids[local]
    depth = (bary * ndc[tris[tid], 2]).sum(axis=1)
    # nearest fragment wins; equal depths resolve to the earlier triangle
    order = np.lexsort((tid, depth, pix))
    pix, tid, bary, depth = pix[order], tid[order], bary[order], depth[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, tid, bary = pix[first], tid[first], bary[first]
    if pose.projection == "perspective":
        # screen-space weights -> perspective-correct weights
        inv_w = 1.0 / w[tris[tid]]
        bary = bary * inv_w
        bary /= bary.sum(axis=1, keepdims=True)
    tri_map[pix] = tid
    bary_map[pix] = bary
    return tri_map.reshape(height, width), bary_map.reshape(height, width, 3)


def render_geometry_image(
    mesh: TriangleMesh, pose: CameraPose, cfg: RenderConfig = RenderConfig()
) -> RgbImage:
    """Render ``mesh`` from ``pose`` with normal-based coloring on a flat background."""
    image = np.empty((cfg.height, cfg.width, 3))
    image[:] = np.asarray(cfg.background, dtype=np.float64)
    tri_map, bary_map = rasterize(mesh, pose, cfg.width, cfg.height)
    covered = tri_map >= 0
    if not covered.any():
        return RgbImage(image)
    tid = tri_map[covered]
    corners = mesh.triangles[tid]
    n = np.einsum("fk,fkc->fc", bary_map[covered], mesh.normals[corners])
    length = np.linalg.norm(n, axis=1)
    flat = length < 1e-12
    if flat.any():
        fn = mesh.face_normals()[tid[flat]]
        n[flat] = fn
        length[flat] = np.linalg.norm(fn, axis=1)
    n /= np.where(length > 0, length, 1.0)[:, None]
    if cfg.color_space == "camera":
        n = n @ camera_basis(pose).T
    image[covered] = (n + 1.0) / 2.0
    return RgbImage(image)


# ---------------------------------------------------------------- multi-view


def place_in_world(mesh: TriangleMesh, input_pose: CameraPose | None = None) -> TriangleMesh:
    """Center a camera-frame mesh at the origin and orient it as seen from ``input_pose``.

    A heightfield mesh is expressed in the frame of the camera that captured
    the input view. Rotating it by that camera's basis puts it in the world
    frame used by orbit cameras; with no input pose the frames coincide.
    """
    if len(mesh.vertices) == 0:
        return mesh
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    rot = np.eye(3) if input_pose is None else camera_basis(input_pose).T
    return TriangleMesh((mesh.vertices - center) @ rot.T, mesh.normals @ rot.T, mesh.triangles)


def fit_pose(
    mesh: TriangleMesh,
    azimuth_deg: float,
    elevation_deg: float,
    projection: str = "orthographic",
    margin: float = 1.05,
) -> CameraPose:
    """Orbit pose around the mesh's bounding-box center that keeps the whole mesh in view."""
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max()) if len(mesh.vertices) else 1.0
    radius = max(radius, 1e-9)
    if projection == "perspective":
        fov = 40.0
        dist = margin * radius / math.sin(math.radians(fov) / 2.0)
        return CameraPose(azimuth_deg, elevation_deg, dist, "perspective", fov_deg=fov, target=tuple(center))
    return CameraPose(
        azimuth_deg, elevation_deg, 3.0 * radius, "orthographic",
        ortho_extent=2.0 * margin * radius, target=tuple(center),
    )


def render_multiview(
    mesh: TriangleMesh,
    azimuths=DEFAULT_AZIMUTHS,
    elevation: float = DEFAULT_ELEVATION,
    cfg: RenderConfig = RenderConfig(),
    input_pose: CameraPose | None = None,
    projection: str = "orthographic",
) -> list[RgbImage]:
    """One geometry image per azimuth at a shared elevation.

    All views share one framing so that the object keeps its scale across
    views. ``input_pose`` places the mesh in the world as in :func:`place_in_world`.
    """
    azimuths = list(azimuths)
    if not azimuths:
        raise ValueError("need at least one azimuth")
    world = place_in_world(mesh, input_pose) if input_pose is not None else mesh
    base = fit_pose(world, 0.0, elevation, projection)
    poses = [
        CameraPose(a, elevation, base.distance, base.projection, base.fov_deg, base.ortho_extent, base.target)
        for a in azimuths
    ]
    return [render_geometry_image(world, pose, cfg) for pose in poses]
