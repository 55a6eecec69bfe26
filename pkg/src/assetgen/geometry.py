"""Meshes, cameras, and a software rasterizer for RGB + point-map rendering.

Conventions:
  - canonical frame: tight bounding box centered at the origin, max extent 1,
    so every vertex lies in [-0.5, 0.5]^3
  - world up is +Y; azimuth rotates about +Y, elevation lifts toward +Y
  - camera space: x right, y down, z forward (pixel row v grows downward);
    pixel (row, col) has center (col + 0.5, row + 0.5)
  - point maps store canonical coordinates affinely mapped from [-0.5, 0.5]
    to [0.05, 0.95]; background pixels are exactly 0.0 in all channels
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

POINTMAP_LO = 0.05
POINTMAP_HI = 0.95
POINTMAP_BG_THRESHOLD = 0.025

DEFAULT_FOV_DEG = 40.0
DEFAULT_ELEVATION_DEG = 20.0
DEFAULT_RADIUS = 2.2
DEFAULT_IMAGE_SIZE = 32

_Z_NEAR = 0.05
_AMBIENT = 0.3


class GeometryError(ValueError):
    pass


def encode_pointmap(canonical: np.ndarray) -> np.ndarray:
    """Map canonical [-0.5, 0.5] coordinates to stored [0.05, 0.95] values."""
    return POINTMAP_LO + (POINTMAP_HI - POINTMAP_LO) * (canonical + 0.5)


def decode_pointmap(stored: np.ndarray) -> np.ndarray:
    return (stored - POINTMAP_LO) / (POINTMAP_HI - POINTMAP_LO) - 0.5


@dataclass
class Mesh:
    """Triangle mesh with per-vertex RGB colors in [0, 1]."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int
    colors: np.ndarray  # (V, 3) float64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != len(self.vertices):
            raise GeometryError("one color per vertex required")
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle index out of range")


@dataclass
class Pose:
    """Rigid transform: world = r @ canonical + t."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.r.T @ self.r, np.eye(3), atol=1e-6):
            raise GeometryError("pose rotation is not orthonormal")
        if abs(np.linalg.det(self.r) - 1.0) > 1e-6:
            raise GeometryError("pose rotation determinant != +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_angles(azimuth_deg: float, elevation_deg: float = 0.0,
                    roll_deg: float = 0.0, translation=None) -> "Pose":
        """Compose roll (about +Z), elevation (about +X), azimuth (about +Y)."""
        az, el, ro = (math.radians(v) for v in (azimuth_deg, elevation_deg, roll_deg))
        ry = np.array([[math.cos(az), 0, math.sin(az)], [0, 1, 0], [-math.sin(az), 0, math.cos(az)]])
        rx = np.array([[1, 0, 0], [0, math.cos(el), -math.sin(el)], [0, math.sin(el), math.cos(el)]])
        rz = np.array([[math.cos(ro), -math.sin(ro), 0], [math.sin(ro), math.cos(ro), 0], [0, 0, 1]])
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        return Pose(ry @ rx @ rz, t)


@dataclass
class Camera:
    """Pinhole camera; ``extrinsic`` maps world to camera coordinates."""

    focal: float
    cx: float
    cy: float
    height: int
    width: int
    extrinsic: Pose

    def __post_init__(self):
        if self.focal <= 0 or self.height <= 0 or self.width <= 0:
            raise GeometryError("camera needs positive focal length and extents")

    @property
    def eye(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.extrinsic.r.T @ self.extrinsic.t

    @staticmethod
    def look_at(eye, target=(0.0, 0.0, 0.0), height=DEFAULT_IMAGE_SIZE,
                width=DEFAULT_IMAGE_SIZE, fov_deg=DEFAULT_FOV_DEG) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise GeometryError("camera eye coincides with target")
        forward = forward / norm
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:  # looking straight up/down
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / rn
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        t = -r @ eye
        focal = (height / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return Camera(focal, width / 2.0, height / 2.0, height, width, Pose(r, t))

    def project(self, world_pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ((N,2) pixel coords u,v; (N,) camera-space depth)."""
        cam = world_pts @ self.extrinsic.r.T + self.extrinsic.t
        z = cam[:, 2]
        uv = np.stack([self.focal * cam[:, 0] / z + self.cx,
                       self.focal * cam[:, 1] / z + self.cy], axis=1)
        return uv, z


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (h, w, 3) float32 in [0, 1]
    pointmap: np.ndarray  # (h, w, 3) float32, stored coords or exact 0
    mask: np.ndarray  # (h, w) bool

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.pointmap = np.asarray(self.pointmap, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)


def normalize_mesh(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """Center the tight bounding box at the origin and scale max extent to 1.

    Returns the normalized mesh and the (3, 4) affine that maps original
    coordinates to canonical ones.
    """
    if len(mesh.triangles) == 0:
        raise GeometryError("mesh has no triangles")
    v = mesh.vertices
    a, b, c = (v[mesh.triangles[:, k]] for k in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if not (areas > 1e-12).any():
        raise GeometryError("mesh has no triangle with nonzero area")
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 1e-12:
        raise GeometryError("mesh is degenerate (zero extent)")
    center = (lo + hi) / 2.0
    scale = 1.0 / extent
    transform = np.concatenate([np.eye(3) * scale, (-scale * center)[:, None]], axis=1)
    out = Mesh((v - center) * scale, mesh.triangles.copy(), mesh.colors.copy())
    return out, transform


def sample_views(n: int, elevation_deg: float = DEFAULT_ELEVATION_DEG,
                 radius: float = DEFAULT_RADIUS, height: int = DEFAULT_IMAGE_SIZE,
                 width: int = DEFAULT_IMAGE_SIZE, fov_deg: float = DEFAULT_FOV_DEG) -> list[Camera]:
    """Cameras at azimuths 360*k/n degrees, all looking at the origin."""
    if n < 1:
        raise GeometryError(f"need at least one view, got {n}")
    cams = []
    el = math.radians(elevation_deg)
    for k in range(n):
        az = math.radians(360.0 * k / n)
        eye = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        cams.append(Camera.look_at(eye, height=height, width=width, fov_deg=fov_deg))
    return cams


def rasterize(mesh: Mesh, camera: Camera, pose: Pose) -> RenderOutput:
    """Perspective-correct z-buffered rasterization.

    Covered pixels get the barycentric-interpolated canonical coordinate
    (stored via ``encode_pointmap``) and the interpolated vertex color under
    headlight shading max(ambient, face_normal . view_dir). Triangles are
    processed in index order with a strict depth test, which makes exact-tie
    resolution deterministic. An off-screen object just yields an empty mask.
    """
    h, w = camera.height, camera.width
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    pm = np.zeros((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    zbuf = np.full((h, w), np.inf)

    world = mesh.vertices @ pose.r.T + pose.t
    uv, z = camera.project(world)
    eye = camera.eye

    cols = (np.arange(w) + 0.5)[None, :]
    rows = (np.arange(h) + 0.5)[:, None]

    for tri in mesh.triangles:
        ia, ib, ic = int(tri[0]), int(tri[1]), int(tri[2])
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= _Z_NEAR or zb <= _Z_NEAR or zc <= _Z_NEAR:
            continue
        pa, pb, pc = uv[ia], uv[ib], uv[ic]
        area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(area) < 1e-12:
            continue
        x0 = max(int(math.floor(min(pa[0], pb[0], pc[0]) - 0.5)), 0)
        x1 = min(int(math.ceil(max(pa[0], pb[0], pc[0]) + 0.5)), w - 1)
        y0 = max(int(math.floor(min(pa[1], pb[1], pc[1]) - 0.5)), 0)
        y1 = min(int(math.ceil(max(pa[1], pb[1], pc[1]) + 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue

        px = cols[:, x0 : x1 + 1]
        py = rows[y0 : y1 + 1, :]
        # signed sub-areas; sign matches `area` for interior pixels
        w0 = (pc[0] - pb[0]) * (py - pb[1]) - (pc[1] - pb[1]) * (px - pb[0])
        w1 = (pa[0] - pc[0]) * (py - pc[1]) - (pa[1] - pc[1]) * (px - pc[0])
        w2 = (pb[0] - pa[0]) * (py - pa[1]) - (pb[1] - pa[1]) * (px - pa[0])
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue

        b0 = w0 / area
        b1 = w1 / area
        b2 = w2 / area
        inv_z = b0 / za + b1 / zb + b2 / zc
        depth = 1.0 / inv_z
        tile = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        win = inside & (depth < tile)
        if not win.any():
            continue

        wa, wb, wc = world[ia], world[ib], world[ic]
        normal = np.cross(wb - wa, wc - wa)
        nn = np.linalg.norm(normal)
        if nn < 1e-15:
            continue
        normal /= nn
        view = eye - (wa + wb + wc) / 3.0
        view /= np.linalg.norm(view)
        shade = min(max(_AMBIENT, float(normal @ view)), 1.0)

        ca, cb, cc = mesh.colors[ia], mesh.colors[ib], mesh.colors[ic]
        va, vb, vc = mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]
        # perspective-correct attribute interpolation
        pw = np.stack([b0 / za, b1 / zb, b2 / zc], axis=-1) * depth[..., None]
        color = pw @ np.stack([ca, cb, cc]) * shade
        canon = pw @ np.stack([va, vb, vc])

        tile[win] = depth[win]
        y_idx, x_idx = np.nonzero(win)
        rgb[y0 + y_idx, x0 + x_idx] = color[win]
        pm[y0 + y_idx, x0 + x_idx] = encode_pointmap(canon[win])
        mask[y0 + y_idx, x0 + x_idx] = True

    return RenderOutput(np.clip(rgb, 0.0, 1.0), pm, mask)


def render_viewset(mesh: Mesh, n: int, **camera_kwargs) -> list[RenderOutput]:
    """Render n orbit views of the canonical mesh with identity object pose."""
    pose = Pose.identity()
    return [rasterize(mesh, cam, pose) for cam in sample_views(n, **camera_kwargs)]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def save_obj(path, mesh: Mesh):
    """OBJ restricted to v/f records; vertex colors appended as `v x y z r g b`."""
    lines = []
    for v, c in zip(mesh.vertices, mesh.colors):
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, cols, tris = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:7]]
            verts.append(vals[:3])
            cols.append(vals[3:6] if len(vals) >= 6 else [0.7, 0.7, 0.7])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            tris.append(idx)
    if not verts:
        raise GeometryError(f"{path}: no vertices found")
    return Mesh(np.array(verts), np.array(tris), np.array(cols))


def write_png(path, image: np.ndarray):
    """Write a float image in [0, 1] (h,w,3) or a boolean mask as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        data = (arr * 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    else:
        data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path)
