"""Synthetic training data: procedural assets, composed scenes, filtering, storage.

Every sample is generated with an exactly known object pose, so the
re-render checks that gate acceptance (mask IoU, masked appearance distance)
pass by construction on clean data and reject perturbed poses in tests.

Container format: a directory holding ``manifest.txt`` (plain key=value
header plus the caption table) and ``records.bin`` (fixed-stride binary
sample blocks, each ending in a crc32 of its payload). Image planes are raw
little-endian float32; the pose is float64 so round-trips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    DEFAULT_IMAGE_SIZE,
    Mesh,
    Pose,
    RenderOutput,
    normalize_mesh,
    rasterize,
    render_viewset,
    sample_views,
)

DATASET_VERSION = 1
DEFAULT_IOU_THRESHOLD = 0.9
DEFAULT_APPEARANCE_THRESHOLD = 0.3
DEFAULT_MAX_MASK_AREA_RATIO = 0.9


class DatasetError(Exception):
    """Raised on malformed containers: bad version, truncation, checksum."""


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionTemplate:
    template_id: int
    style_id: int
    phrase: str


_PHRASES = [
    "a toy object on a soft gradient backdrop",
    "a small sculpture in front of a smooth gradient",
    "a toy object on a checkerboard floor",
    "a small sculpture resting on checkered tiles",
    "a toy object against colorful static",
    "a small sculpture in front of speckled noise",
    "a decorative object over a dusk gradient",
    "a figurine floating before a two-tone gradient",
    "a decorative object on a coarse checkerboard",
    "a figurine on a fine checker pattern",
    "a decorative object amid bright noise",
    "a figurine against dim random speckle",
    "a plaything over a pale gradient wash",
    "an ornament in front of a muted gradient",
    "a plaything on a high-contrast checkerboard",
    "an ornament buried in television snow",
]

# style kind cycles gradient / checker / noise; palette varies with style id
CAPTIONS: list[CaptionTemplate] = [
    CaptionTemplate(i, i % 8, _PHRASES[i]) for i in range(len(_PHRASES))
]


def make_background(style_id: int, height: int, width: int) -> np.ndarray:
    """Deterministic background image for a style id (no pose dependence)."""
    rng = np.random.default_rng([9000, int(style_id)])
    kind = style_id % 3
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    if kind == 0:  # vertical gradient
        ramp = np.linspace(0.0, 1.0, height)[:, None, None]
        img = c0[None, None, :] * (1 - ramp) + c1[None, None, :] * ramp
        img = np.broadcast_to(img, (height, width, 3)).copy()
    elif kind == 1:  # checkerboard
        cell = 4 if style_id % 2 == 0 else 8
        yy, xx = np.mgrid[0:height, 0:width]
        checker = ((yy // cell + xx // cell) % 2).astype(np.float64)
        img = c0 * (1 - checker[..., None]) + c1 * checker[..., None]
    else:  # per-pixel noise
        img = rng.uniform(0.0, 1.0, size=(height, width, 3))
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# procedural assets
# ---------------------------------------------------------------------------


def _box() -> tuple[np.ndarray, np.ndarray]:
    # 24 vertices (4 per face) with outward winding
    faces = [
        ((0, 0, 1), (1, 0, 0), (0, 1, 0)),
        ((0, 0, -1), (-1, 0, 0), (0, 1, 0)),
        ((1, 0, 0), (0, 0, -1), (0, 1, 0)),
        ((-1, 0, 0), (0, 0, 1), (0, 1, 0)),
        ((0, 1, 0), (1, 0, 0), (0, 0, -1)),
        ((0, -1, 0), (1, 0, 0), (0, 0, 1)),
    ]
    verts, tris = [], []
    for n, u, v in faces:
        n, u, v = np.array(n, float), np.array(u, float), np.array(v, float)
        base = len(verts)
        for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            verts.append(0.5 * n + 0.5 * su * u + 0.5 * sv * v)
        tris.append([base, base + 1, base + 2])
        tris.append([base, base + 2, base + 3])
    return np.array(verts), np.array(tris)


def _sphere(rings: int = 9, segs: int = 14) -> tuple[np.ndarray, np.ndarray]:
    verts, tris = [], []
    for i in range(rings + 1):
        theta = np.pi * i / rings
        for j in range(segs):
            phi = 2 * np.pi * j / segs
            verts.append([
                0.5 * np.sin(theta) * np.cos(phi),
                0.5 * np.cos(theta),
                0.5 * np.sin(theta) * np.sin(phi),
            ])
    for i in range(rings):
        for j in range(segs):
            a = i * segs + j
            b = i * segs + (j + 1) % segs
            c = (i + 1) * segs + j
            d = (i + 1) * segs + (j + 1) % segs
            if i > 0:
                tris.append([a, b, c])
            if i < rings - 1:
                tris.append([b, d, c])
    return np.array(verts), np.array(tris)


def _cylinder(segs: int = 14) -> tuple[np.ndarray, np.ndarray]:
    verts, tris = [], []
    for y in (0.5, -0.5):
        for j in range(segs):
            phi = 2 * np.pi * j / segs
            verts.append([0.5 * np.cos(phi), y, 0.5 * np.sin(phi)])
    top_c = len(verts)
    verts.append([0.0, 0.5, 0.0])
    bot_c = len(verts)
    verts.append([0.0, -0.5, 0.0])
    for j in range(segs):
        jn = (j + 1) % segs
        tris.append([j, segs + jn, segs + j])
        tris.append([j, jn, segs + jn])
        tris.append([top_c, jn, j])
        tris.append([bot_c, segs + j, segs + jn])
    return np.array(verts), np.array(tris)


def _cone(segs: int = 14) -> tuple[np.ndarray, np.ndarray]:
    verts = [[0.5 * np.cos(2 * np.pi * j / segs), -0.5, 0.5 * np.sin(2 * np.pi * j / segs)]
             for j in range(segs)]
    apex = len(verts)
    verts.append([0.0, 0.5, 0.0])
    center = len(verts)
    verts.append([0.0, -0.5, 0.0])
    tris = []
    for j in range(segs):
        jn = (j + 1) % segs
        tris.append([apex, jn, j])
        tris.append([center, j, jn])
    return np.array(verts), np.array(tris)


_PRIMITIVES = (_box, _sphere, _cylinder, _cone)


@dataclass
class Asset:
    id: int
    mesh: Mesh  # normalized
    seed: int


def gen_asset(seed: int) -> Asset:
    """Composite of 2..5 colored primitives, merged and normalized.

    Regeneration from the same seed is bit-identical; per-primitive two-tone
    color gradients keep assets visually distinguishable.
    """
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 11])
    n_prims = int(rng.integers(2, 6))
    all_v, all_t, all_c = [], [], []
    offset = 0
    for _ in range(n_prims):
        kind = int(rng.integers(0, len(_PRIMITIVES)))
        verts, tris = _PRIMITIVES[kind]()
        scale = rng.uniform(0.3, 0.9, size=3)
        if kind == 1:  # keep spheres round-ish
            scale[:] = scale.mean()
        rot = Pose.from_angles(rng.uniform(0, 360), rng.uniform(-60, 60), rng.uniform(0, 360)).r
        shift = rng.uniform(-0.4, 0.4, size=3)
        verts = (verts * scale) @ rot.T + shift
        c0 = rng.uniform(0.15, 1.0, size=3)
        c1 = rng.uniform(0.15, 1.0, size=3)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        s = verts @ axis
        s = (s - s.min()) / max(s.max() - s.min(), 1e-9)
        colors = c0[None, :] * (1 - s[:, None]) + c1[None, :] * s[:, None]
        all_v.append(verts)
        all_t.append(tris + offset)
        all_c.append(colors)
        offset += len(verts)
    mesh = Mesh(np.concatenate(all_v), np.concatenate(all_t), np.concatenate(all_c))
    mesh, _ = normalize_mesh(mesh)
    return Asset(id=int(seed), mesh=mesh, seed=int(seed))


# ---------------------------------------------------------------------------
# scene composition and filtering
# ---------------------------------------------------------------------------


def target_camera(height: int = DEFAULT_IMAGE_SIZE, width: int = DEFAULT_IMAGE_SIZE):
    """The fixed scene camera: identical to condition view 0."""
    return sample_views(1, height=height, width=width)[0]


def compose_scene(mesh: Mesh, pose: Pose, style_id: int, camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render the posed object over a procedural background.

    Returns (rgb, pointmap, mask); the point map keeps canonical coordinates
    at covered pixels and exact 0 elsewhere (backgrounds carry no geometry).
    """
    render = rasterize(mesh, camera, pose)
    bg = make_background(style_id, camera.height, camera.width)
    rgb = np.where(render.mask[..., None], render.rgb, bg)
    return rgb.astype(np.float32), render.pointmap, render.mask


def sample_pose(rng: np.random.Generator, frame_extent: float = 1.6) -> Pose:
    """Random scene pose: free azimuth, modest elevation/roll, ~10% frame jitter."""
    jitter = 0.1 * frame_extent
    return Pose.from_angles(
        azimuth_deg=rng.uniform(0.0, 360.0),
        elevation_deg=rng.uniform(-10.0, 40.0),
        roll_deg=rng.uniform(-15.0, 15.0),
        translation=[rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter), 0.0],
    )


@dataclass
class TrainingSample:
    asset_id: int
    asset_seed: int
    views: list[RenderOutput]
    target_rgb: np.ndarray
    target_pm: np.ndarray
    pose: Pose
    caption_id: int
    iou: float
    appearance: float

    @property
    def target_mask(self) -> np.ndarray:
        """Foreground mask recovered from the point-map background sentinel."""
        return self.target_pm.max(axis=-1) > 0.025


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def masked_rgb_distance(rgb_a, mask_a, rgb_b, mask_b) -> float:
    """RMSE over the union of masks; rgb in [0,1] so the result is normalized."""
    union = np.logical_or(mask_a, mask_b)
    if not union.any():
        return 0.0
    diff = (rgb_a[union] - rgb_b[union]).astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def filter_sample(sample: TrainingSample, iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                  appearance_threshold: float = DEFAULT_APPEARANCE_THRESHOLD,
                  mesh: Mesh | None = None) -> tuple[bool, float, float]:
    """Re-render the asset at the stored pose and gate on IoU + appearance.

    Accept iff IoU(target mask, re-rendered mask) >= iou_threshold and the
    masked normalized RMSE between target rgb and the re-render is at most
    appearance_threshold.
    """
    if mesh is None:
        mesh = gen_asset(sample.asset_seed).mesh
    h, w = sample.target_rgb.shape[:2]
    cam = target_camera(h, w)
    rerender = rasterize(mesh, cam, sample.pose)
    iou = mask_iou(sample.target_mask, rerender.mask)
    both = np.logical_and(sample.target_mask, rerender.mask)
    if both.any():
        diff = (sample.target_rgb[both] - rerender.rgb[both]).astype(np.float64)
        dist = float(np.sqrt(np.mean(diff * diff)))
    else:
        dist = 1.0
    accept = iou >= iou_threshold and dist <= appearance_threshold
    return accept, iou, dist


def generate_dataset(master_seed: int, count: int, n_views: int = 4,
                     poses_per_asset: int = 4, height: int = DEFAULT_IMAGE_SIZE,
                     width: int = DEFAULT_IMAGE_SIZE,
                     max_mask_area_ratio: float = DEFAULT_MAX_MASK_AREA_RATIO,
                     iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                     appearance_threshold: float = DEFAULT_APPEARANCE_THRESHOLD,
                     max_attempts: int = 20) -> list[TrainingSample]:
    """Fully reproducible generation: every random draw derives from the
    master seed and the sample index, so regeneration is byte-identical."""
    samples: list[TrainingSample] = []
    cam = target_camera(height, width)
    asset_cache: dict[int, tuple[Asset, list[RenderOutput]]] = {}
    for i in range(count):
        asset_idx = i // poses_per_asset
        if asset_idx not in asset_cache:
            seed = int(np.random.default_rng([master_seed, 1, asset_idx]).integers(0, 2**31))
            asset = gen_asset(seed)
            views = render_viewset(asset.mesh, n_views, height=height, width=width)
            asset_cache[asset_idx] = (asset, views)
        asset, views = asset_cache[asset_idx]
        sample = None
        for attempt in range(max_attempts):
            rng = np.random.default_rng([master_seed, 2, i, attempt])
            caption_id = int(rng.integers(0, len(CAPTIONS)))
            pose = sample_pose(rng)
            rgb, pm, mask = compose_scene(asset.mesh, pose, CAPTIONS[caption_id].style_id, cam)
            area_ratio = mask.mean()
            if not mask.any() or area_ratio > max_mask_area_ratio:
                continue
            cand = TrainingSample(asset.id, asset.seed, views, rgb, pm, pose, caption_id, 0.0, 0.0)
            ok, iou, dist = filter_sample(cand, iou_threshold, appearance_threshold, mesh=asset.mesh)
            if not ok:
                continue
            cand.iou, cand.appearance = iou, dist
            sample = cand
            break
        if sample is None:
            raise DatasetError(f"sample {i}: no acceptable pose in {max_attempts} attempts")
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def _record_stride(height: int, width: int, n_views: int) -> int:
    plane = height * width * 3 * 4
    mask_bytes = height * width
    return 3 * 4 + 12 * 8 + 2 * 4 + 2 * plane + n_views * (2 * plane + mask_bytes) + 4


def write_dataset(path, samples: list[TrainingSample]):
    """Write manifest.txt + records.bin under ``path`` (a directory)."""
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    h, w = samples[0].target_rgb.shape[:2]
    n_views = len(samples[0].views)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"version={DATASET_VERSION}",
        f"height={h}",
        f"width={w}",
        f"n_views={n_views}",
        f"count={len(samples)}",
        f"caption_count={len(CAPTIONS)}",
    ]
    for cap in CAPTIONS:
        lines.append(f"caption.{cap.template_id}={cap.style_id}|{cap.phrase}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")

    with open(root / "records.bin", "wb") as f:
        for s in samples:
            body = bytearray()
            body += struct.pack("<III", s.asset_id, s.asset_seed, s.caption_id)
            body += np.ascontiguousarray(s.pose.r, dtype="<f8").tobytes()
            body += np.ascontiguousarray(s.pose.t, dtype="<f8").tobytes()
            body += struct.pack("<ff", s.iou, s.appearance)
            body += np.ascontiguousarray(s.target_rgb, dtype="<f4").tobytes()
            body += np.ascontiguousarray(s.target_pm, dtype="<f4").tobytes()
            for view in s.views:
                body += np.ascontiguousarray(view.rgb, dtype="<f4").tobytes()
                body += np.ascontiguousarray(view.pointmap, dtype="<f4").tobytes()
                body += np.ascontiguousarray(view.mask, dtype=np.uint8).tobytes()
            f.write(bytes(body))
            f.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.txt"
    if not mpath.exists():
        raise DatasetError(f"{path}: missing manifest.txt")
    meta: dict = {"captions": {}}
    for line in mpath.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("caption."):
            cid = int(key.split(".", 1)[1])
            style, _, phrase = value.partition("|")
            meta["captions"][cid] = CaptionTemplate(cid, int(style), phrase)
        else:
            meta[key] = int(value)
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: dataset version {meta.get('version')}, expected {DATASET_VERSION}")
    return meta


def read_dataset(path) -> tuple[list[TrainingSample], dict]:
    meta = read_manifest(path)
    h, w, n_views, count = meta["height"], meta["width"], meta["n_views"], meta["count"]
    stride = _record_stride(h, w, n_views)
    blob = (Path(path) / "records.bin").read_bytes()
    if len(blob) != count * stride:
        raise DatasetError(
            f"{path}: records.bin holds {len(blob)} bytes, expected {count * stride} (truncated?)")
    plane = h * w * 3
    samples = []
    for i in range(count):
        block = blob[i * stride : (i + 1) * stride]
        body, (crc,) = block[:-4], struct.unpack("<I", block[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise DatasetError(f"{path}: checksum failure in sample {i}")
        off = 0
        asset_id, asset_seed, caption_id = struct.unpack_from("<III", body, off)
        off += 12
        r = np.frombuffer(body, "<f8", 9, off).reshape(3, 3).copy()
        off += 72
        t = np.frombuffer(body, "<f8", 3, off).copy()
        off += 24
        iou, dist = struct.unpack_from("<ff", body, off)
        off += 8
        target_rgb = np.frombuffer(body, "<f4", plane, off).reshape(h, w, 3).copy()
        off += plane * 4
        target_pm = np.frombuffer(body, "<f4", plane, off).reshape(h, w, 3).copy()
        off += plane * 4
        views = []
        for _ in range(n_views):
            rgb = np.frombuffer(body, "<f4", plane, off).reshape(h, w, 3).copy()
            off += plane * 4
            pm = np.frombuffer(body, "<f4", plane, off).reshape(h, w, 3).copy()
            off += plane * 4
            mask = np.frombuffer(body, np.uint8, h * w, off).reshape(h, w).astype(bool)
            off += h * w
            views.append(RenderOutput(rgb, pm, mask))
        samples.append(TrainingSample(asset_id, asset_seed, views, target_rgb, target_pm,
                                      Pose(r, t), caption_id, iou, dist))
    return samples, meta
