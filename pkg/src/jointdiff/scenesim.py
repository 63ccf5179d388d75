"""Synthetic driving scenes: boxes on a ground plane seen by a LiDAR and a camera ring.

Both sensors share one ray/scene intersection routine, so the LiDAR returns,
the rendered images and the depth maps agree exactly.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (CameraParams, CameraRig, LidarSpec, RangeImage, spherical_to_cart)

CATEGORIES = ("car", "truck", "pedestrian", "barrier")
CATEGORY_PROBS = (0.5, 0.15, 0.2, 0.15)
# (length, width, height) priors in meters
SIZE_PRIORS = {
    "car": (4.5, 1.9, 1.6),
    "truck": (7.0, 2.5, 3.0),
    "pedestrian": (0.6, 0.6, 1.7),
    "barrier": (2.0, 0.3, 1.0),
}
CATEGORY_TINT = {
    "car": (0.9, 0.25, 0.2),
    "truck": (0.25, 0.4, 0.9),
    "pedestrian": (0.25, 0.85, 0.3),
    "barrier": (0.95, 0.75, 0.15),
}
GROUND_TINT = (0.55, 0.55, 0.55)
GROUND_ALBEDO = 0.5

BRIGHTNESS_TAGS = ("day", "dusk", "night")
WEATHER_TAGS = ("clear", "fog")
TAG_VOCAB = BRIGHTNESS_TAGS + WEATHER_TAGS
BRIGHTNESS = {"day": 1.0, "dusk": 0.6, "night": 0.3}
FOG_DISTANCE = 30.0
FOG_GREY = 0.6
AMBIENT = 0.3

SKY_ID = -1
GROUND_ID = -2


class SceneGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class SimConfig:
    num_beams: int = 16
    min_elevation_deg: float = -15.0
    max_elevation_deg: float = 5.0
    azimuth_bins: int = 256
    r_max: float = 40.0
    sensor_height: float = 1.8
    num_views: int = 4
    image_width: int = 64
    image_height: int = 32
    hfov_deg: float = 100.0
    camera_offset: float = 1.0
    camera_dz: float = -0.3
    min_boxes: int = 2
    max_boxes: int = 8
    placement_radius: float = 20.0
    ego_clearance: float = 3.0
    fog_prob: float = 0.25
    max_attempts: int = 1000

    def lidar_spec(self) -> LidarSpec:
        return LidarSpec.uniform(self.num_beams, self.min_elevation_deg, self.max_elevation_deg,
                                 self.azimuth_bins, self.r_max)

    def camera_rig(self) -> CameraRig:
        cams = []
        for k in range(self.num_views):
            yaw = 2 * np.pi * k / self.num_views
            center = (self.camera_offset * np.cos(yaw), self.camera_offset * np.sin(yaw), self.camera_dz)
            cams.append(CameraParams.looking_along(yaw, center, self.hfov_deg,
                                                   self.image_width, self.image_height))
        return CameraRig(cams)


@dataclass
class OrientedBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    category: str
    albedo: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError("box sizes must be positive")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def category_id(self) -> int:
        return CATEGORIES.index(self.category)

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        """``(8, 3)`` corners ordered by box-frame sign pattern ``---, --+, ..., +++``."""
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        local = signs * (self.size / 2.0)
        return local @ self.rotation().T + self.center

    def footprint(self) -> np.ndarray:
        """``(4, 2)`` ground-plane polygon in counter-clockwise order."""
        hl, hw = self.size[0] / 2, self.size[1] / 2
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        rot = self.rotation()[:2, :2]
        return local @ rot.T + self.center[:2]


@dataclass
class SceneSpec:
    seed: int
    ground_z: float
    boxes: list[OrientedBox]
    tags: tuple[str, str]
    sun_direction: np.ndarray


@dataclass(eq=False)
class SceneRecord:
    range_image: RangeImage
    images: np.ndarray
    depth_gt: np.ndarray
    boxes: list[OrientedBox]
    tags: tuple[str, ...]
    rig: CameraRig
    lidar: LidarSpec


# --------------------------------------------------------------------------
# Scene generation
# --------------------------------------------------------------------------

def footprints_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons given as ``(N, 2)`` vertex arrays."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for e in edges:
            axis = np.array([-e[1], e[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def generate_scene(seed: int, params: SimConfig) -> SceneSpec:
    rng = np.random.default_rng(seed)
    count = int(rng.integers(params.min_boxes, params.max_boxes + 1))
    ground_z = -params.sensor_height
    boxes: list[OrientedBox] = []
    attempts = 0
    while len(boxes) < count:
        attempts += 1
        if attempts > params.max_attempts:
            raise SceneGenerationError(
                f"could not place {count} boxes within {params.max_attempts} attempts (seed {seed})")
        cat = CATEGORIES[int(rng.choice(len(CATEGORIES), p=CATEGORY_PROBS))]
        size = np.array(SIZE_PRIORS[cat]) * rng.uniform(0.9, 1.1, size=3)
        radius = params.placement_radius * np.sqrt(rng.uniform(0.0, 1.0))
        angle = rng.uniform(-np.pi, np.pi)
        yaw = rng.uniform(-np.pi, np.pi)
        albedo = rng.uniform(0.1, 0.9)
        center = np.array([radius * np.cos(angle), radius * np.sin(angle), ground_z + size[2] / 2])
        box = OrientedBox(center, size, yaw, cat, albedo)
        if radius < params.ego_clearance + 0.5 * np.hypot(size[0], size[1]):
            continue
        fp = box.footprint()
        if any(footprints_overlap(fp, other.footprint()) for other in boxes):
            continue
        boxes.append(box)
    brightness = BRIGHTNESS_TAGS[int(rng.integers(len(BRIGHTNESS_TAGS)))]
    weather = "fog" if rng.uniform() < params.fog_prob else "clear"
    sun_az = rng.uniform(-np.pi, np.pi)
    sun_el = rng.uniform(np.deg2rad(20), np.deg2rad(70))
    sun = spherical_to_cart([1.0, sun_az, sun_el])
    return SceneSpec(seed, ground_z, boxes, (brightness, weather), sun)


# --------------------------------------------------------------------------
# Ray casting
# --------------------------------------------------------------------------

@dataclass
class RayHits:
    distance: np.ndarray  # inf on miss
    normal: np.ndarray
    surface: np.ndarray  # box index, GROUND_ID or SKY_ID

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.distance)


def intersect_rays(origins, directions, scene: SceneSpec, max_distance: float = np.inf) -> RayHits:
    """Nearest intersection of rays with the ground plane and the scene boxes.

    ``directions`` need not be unit length; distances are in units of the
    direction vector's length.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.broadcast_to(o, d.shape)
    n = d.shape[0]
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    surface = np.full(n, SKY_ID, dtype=np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = (scene.ground_z - o[:, 2]) / d[:, 2]
    ok = (d[:, 2] < 0) & (t_ground > 0)
    best = np.where(ok, t_ground, best)
    normal[ok] = (0.0, 0.0, 1.0)
    surface[ok] = GROUND_ID

    for bi, box in enumerate(scene.boxes):
        rot = box.rotation()
        lo_ = (o - box.center) @ rot
        ld = d @ rot
        half = box.size / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-half - lo_) * inv
            t2 = (half - lo_) * inv
        # axis-parallel rays: inside the slab -> (-inf, inf), outside -> empty
        parallel = ld == 0
        inside = np.abs(lo_) <= half
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < best)
        if not np.any(hit):
            continue
        axis = tmin.argmax(axis=1)
        idx = np.nonzero(hit)[0]
        ln = np.zeros((idx.size, 3))
        ln[np.arange(idx.size), axis[idx]] = -np.sign(ld[idx, axis[idx]])
        best[idx] = t_near[idx]
        normal[idx] = ln @ rot.T
        surface[idx] = bi

    miss = best > max_distance
    best[miss] = np.inf
    normal[miss] = 0.0
    surface[miss] = SKY_ID
    return RayHits(best, normal, surface)


def _albedo_and_tint(scene: SceneSpec, surface: np.ndarray):
    albedo = np.zeros(surface.shape)
    tint = np.zeros(surface.shape + (3,))
    ground = surface == GROUND_ID
    albedo[ground] = GROUND_ALBEDO
    tint[ground] = GROUND_TINT
    for bi, box in enumerate(scene.boxes):
        m = surface == bi
        albedo[m] = box.albedo
        tint[m] = CATEGORY_TINT[box.category]
    return albedo, tint


def lidar_ray_directions(spec: LidarSpec) -> np.ndarray:
    """Unit directions ``(H, W, 3)`` of every (beam, azimuth bin center) ray."""
    theta = spec.bin_center_azimuths()
    phi = spec.beam_elevations
    sph = np.stack(np.broadcast_arrays(np.ones((phi.size, theta.size)), theta[None, :], phi[:, None]), -1)
    return spherical_to_cart(sph)


def raycast_lidar(scene: SceneSpec, spec: LidarSpec) -> RangeImage:
    dirs = lidar_ray_directions(spec).reshape(-1, 3)
    hits = intersect_rays(np.zeros(3), dirs, scene, max_distance=spec.r_max)
    albedo, _ = _albedo_and_tint(scene, hits.surface)
    cos_inc = np.abs((hits.normal * dirs).sum(axis=1))
    img = RangeImage.empty(spec)
    h = hits.hit
    vals = img.values.reshape(-1, 2)
    vals[h, 0] = hits.distance[h] / spec.r_max
    vals[h, 1] = np.clip(albedo[h] * cos_inc[h], 0.0, 1.0)
    return img


def camera_rays(cam: CameraParams, u, v):
    """World-frame origin and (non-unit) directions for pixel coordinates; the direction has camera z = 1."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    dc = pix @ np.linalg.inv(cam.intrinsics).T
    return cam.center, dc @ cam.rotation


def sky_color(directions: np.ndarray) -> np.ndarray:
    unit = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    s = np.clip(unit[..., 2], 0.0, 1.0)[..., None]
    horizon = np.array([0.75, 0.82, 0.92])
    zenith = np.array([0.25, 0.45, 0.85])
    return horizon * (1 - s) + zenith * s


def shade(scene: SceneSpec, origins, directions) -> tuple[np.ndarray, np.ndarray]:
    """Colors and camera-axis parameters for rays whose direction has unit camera z.

    Returns ``(colors (N, 3), t (N,))``; ``t`` is the z-depth, inf for sky.
    """
    hits = intersect_rays(origins, directions, scene)
    albedo, tint = _albedo_and_tint(scene, hits.surface)
    lam = np.clip(hits.normal @ scene.sun_direction, 0.0, None)
    color = (albedo * (AMBIENT + (1 - AMBIENT) * lam))[:, None] * tint
    sky = ~hits.hit
    color[sky] = sky_color(directions[sky])
    if scene.tags[1] == "fog":
        dist = hits.distance * np.linalg.norm(directions, axis=-1)
        mix = 1.0 - np.exp(-dist / FOG_DISTANCE)
        color = color * (1 - mix)[:, None] + FOG_GREY * mix[:, None]
    color = color * BRIGHTNESS[scene.tags[0]]
    return np.clip(color, 0.0, 1.0), hits.distance


def render_views(scene: SceneSpec, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(V, H, W, 3)`` images and ``(V, H, W)`` z-depth maps (inf = sky)."""
    h, w = rig.image_shape
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    images = np.empty((len(rig), h, w, 3))
    depth = np.empty((len(rig), h, w))
    for i, cam in enumerate(rig):
        origin, dirs = camera_rays(cam, uu.ravel(), vv.ravel())
        color, t = shade(scene, origin, dirs)
        images[i] = color.reshape(h, w, 3)
        # direction has camera z = 1, so the ray parameter is the z-depth
        depth[i] = t.reshape(h, w)
    return images, depth


def camera_depth_at(scene: SceneSpec, cam: CameraParams, u, v) -> np.ndarray:
    """Exact z-depth seen through sub-pixel positions ``(u, v)``."""
    origin, dirs = camera_rays(cam, np.atleast_1d(u), np.atleast_1d(v))
    return intersect_rays(origin, dirs, scene).distance


def simulate(scene: SceneSpec, params: SimConfig) -> SceneRecord:
    spec = params.lidar_spec()
    rig = params.camera_rig()
    images, depth = render_views(scene, rig)
    return SceneRecord(raycast_lidar(scene, spec), images.astype(np.float32), depth.astype(np.float32),
                       list(scene.boxes), tuple(scene.tags), rig, spec)


def make_record(seed: int, params: SimConfig) -> SceneRecord:
    return simulate(generate_scene(seed, params), params)


# --------------------------------------------------------------------------
# Dataset files
# --------------------------------------------------------------------------

MAGIC = b"XDS1"
VERSION = 1


def encode_record(rec: SceneRecord) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    spec = rec.lidar
    out.append(struct.pack("<IId", spec.num_beams, spec.num_azimuth_bins, spec.r_max))
    out.append(spec.beam_elevations.astype("<f8").tobytes())
    out.append(struct.pack("<I", len(rec.rig)))
    for cam in rec.rig:
        out.append(cam.rotation.astype("<f8").tobytes())
        out.append(cam.translation.astype("<f8").tobytes())
        out.append(cam.intrinsics.astype("<f8").tobytes())
        out.append(struct.pack("<II", cam.width, cam.height))
    out.append(rec.range_image.values.astype("<f4").tobytes())
    for v in range(len(rec.rig)):
        out.append(np.asarray(rec.images[v], dtype="<f4").tobytes())
        out.append(np.asarray(rec.depth_gt[v], dtype="<f4").tobytes())
    out.append(struct.pack("<I", len(rec.boxes)))
    for b in rec.boxes:
        out.append(b.center.astype("<f8").tobytes())
        out.append(b.size.astype("<f8").tobytes())
        out.append(struct.pack("<dId", b.yaw, b.category_id, b.albedo))
    out.append(struct.pack("<I", len(rec.tags)))
    out.append(np.array([TAG_VOCAB.index(t) for t in rec.tags], dtype="<u4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(
                f"{self.name}: truncated in section '{section}' at byte {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def array(self, dtype: str, count: int, section: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, section), dtype=dt).copy()


def decode_record(data: bytes, name: str = "<bytes>") -> SceneRecord:
    rd = _Reader(data, name)
    if rd.take(4, "magic") != MAGIC:
        raise DatasetFormatError(f"{name}: bad magic at byte 0")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise DatasetFormatError(f"{name}: unsupported version {version} at byte 4")
    h, w, r_max = rd.unpack("<IId", "lidar spec")
    elev = rd.array("<f8", h, "beam elevations")
    spec = LidarSpec(elev, w, r_max)
    (nv,) = rd.unpack("<I", "camera count")
    cams = []
    for i in range(nv):
        sec = f"camera {i}"
        rot = rd.array("<f8", 9, sec).reshape(3, 3)
        t = rd.array("<f8", 3, sec)
        k = rd.array("<f8", 9, sec).reshape(3, 3)
        cw, ch = rd.unpack("<II", sec)
        cams.append(CameraParams(rot, t, k, cw, ch))
    rig = CameraRig(cams)
    rimg = RangeImage(rd.array("<f4", h * w * 2, "range image").reshape(h, w, 2), spec)
    ch, cw = rig.image_shape
    images = np.empty((nv, ch, cw, 3), dtype=np.float32)
    depth = np.empty((nv, ch, cw), dtype=np.float32)
    for i in range(nv):
        images[i] = rd.array("<f4", ch * cw * 3, f"image {i}").reshape(ch, cw, 3)
        depth[i] = rd.array("<f4", ch * cw, f"depth {i}").reshape(ch, cw)
    (nb,) = rd.unpack("<I", "box count")
    boxes = []
    for i in range(nb):
        sec = f"box {i}"
        center = rd.array("<f8", 3, sec)
        size = rd.array("<f8", 3, sec)
        yaw, cat, albedo = rd.unpack("<dId", sec)
        if cat >= len(CATEGORIES):
            raise DatasetFormatError(f"{name}: bad category id {cat} before byte {rd.pos}")
        boxes.append(OrientedBox(center, size, yaw, CATEGORIES[cat], albedo))
    (nt,) = rd.unpack("<I", "tag count")
    tag_ids = rd.array("<u4", nt, "tags")
    if np.any(tag_ids >= len(TAG_VOCAB)):
        raise DatasetFormatError(f"{name}: bad tag id before byte {rd.pos}")
    if rd.pos != len(data):
        raise DatasetFormatError(f"{name}: {len(data) - rd.pos} trailing bytes at byte {rd.pos}")
    tags = tuple(TAG_VOCAB[i] for i in tag_ids)
    return SceneRecord(rimg, images, depth, boxes, tags, rig, spec)


def write_dataset(records: Sequence[SceneRecord], directory) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, rec in enumerate(records):
        name = f"scene_{i:06d}.xds"
        (directory / name).write_bytes(encode_record(rec))
        names.append(name)
    (directory / "manifest.txt").write_text("".join(n + "\n" for n in names))
    return names


def read_dataset(directory) -> list[SceneRecord]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DatasetFormatError(f"{directory}: missing manifest.txt")
    names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    return [decode_record((directory / n).read_bytes(), n) for n in names]


# --------------------------------------------------------------------------
# Inspection images
# --------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def export_ppm(rec: SceneRecord, directory, stem: str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for v in range(rec.images.shape[0]):
        p = directory / f"{stem}_view{v}.ppm"
        write_ppm(p, rec.images[v])
        paths.append(p)
    p = directory / f"{stem}_range.pgm"
    # flip so the highest beam is the top row
    write_pgm(p, rec.range_image.values[::-1, :, 0])
    paths.append(p)
    return paths
