"""Coordinate mathematics shared by the simulator, the networks and the metrics.

Conventions
-----------
* World/ego frame: LiDAR at the origin, z up.
* Spherical coordinates ``(r, theta, phi)``: ``theta = atan2(y, x)`` is the
  in-plane azimuth in ``[-pi, pi)`` and ``phi`` the elevation above the xy-plane.
  The inverse uses ``x = r cos(phi) cos(theta)``, ``y = r cos(phi) sin(theta)``.
* Camera frame: x right, y down, z forward.  ``p_cam = R p + t``.
* Normalized grid coordinates follow the align-corners convention: ``0`` is the
  first cell center and ``1`` the last one along each axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
EMPTY_THRESHOLD = 1e-4
MIN_DEPTH = 1e-6


# --------------------------------------------------------------------------
# Spherical <-> Cartesian
# --------------------------------------------------------------------------

def wrap_angle(theta):
    """Map angles into ``[-pi, pi)``."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TWO_PI) - np.pi
    # mod can round up to exactly 2*pi for tiny negative inputs
    return np.where(out >= np.pi, out - TWO_PI, out)


def cart_to_spherical(p) -> np.ndarray:
    """``(..., 3)`` Cartesian points to ``(..., 3)`` rows of ``(r, theta, phi)``."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    r = np.sqrt(x * x + y * y + z * z)
    theta = wrap_angle(np.arctan2(y, x))
    phi = np.arctan2(z, rho)
    return np.stack([r, theta, phi], axis=-1)


def spherical_to_cart(s) -> np.ndarray:
    """``(..., 3)`` rows of ``(r, theta, phi)`` to Cartesian points."""
    s = np.asarray(s, dtype=np.float64)
    r, theta, phi = s[..., 0], s[..., 1], s[..., 2]
    c = np.cos(phi)
    return np.stack([r * c * np.cos(theta), r * c * np.sin(theta), r * np.sin(phi)], axis=-1)


# --------------------------------------------------------------------------
# Sensors
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LidarSpec:
    beam_elevations: np.ndarray
    num_azimuth_bins: int
    r_max: float

    def __post_init__(self):
        elev = np.asarray(self.beam_elevations, dtype=np.float64)
        if elev.ndim != 1 or elev.size < 1:
            raise ValueError("beam_elevations must be a non-empty 1-D table")
        if elev.size > 1 and np.any(np.diff(elev) <= 0):
            raise ValueError("beam_elevations must be strictly increasing")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if self.num_azimuth_bins < 1:
            raise ValueError("num_azimuth_bins must be positive")
        elev.setflags(write=False)
        object.__setattr__(self, "beam_elevations", elev)

    @classmethod
    def uniform(cls, num_beams: int, min_deg: float, max_deg: float,
                num_azimuth_bins: int, r_max: float) -> "LidarSpec":
        elev = np.deg2rad(np.linspace(min_deg, max_deg, num_beams))
        return cls(elev, num_azimuth_bins, r_max)

    @property
    def num_beams(self) -> int:
        return int(self.beam_elevations.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.num_beams, self.num_azimuth_bins

    @property
    def azimuth_step(self) -> float:
        return TWO_PI / self.num_azimuth_bins

    def bin_center_azimuths(self, width: Optional[int] = None) -> np.ndarray:
        w = self.num_azimuth_bins if width is None else width
        return -np.pi + (np.arange(w) + 0.5) * TWO_PI / w

    def beam_index(self, phi) -> np.ndarray:
        """Fractional beam index of elevation ``phi`` (linear in the beam table)."""
        if self.num_beams == 1:
            return np.zeros_like(np.asarray(phi, dtype=np.float64))
        return np.interp(phi, self.beam_elevations, np.arange(self.num_beams, dtype=np.float64))

    def elevation_at(self, beam_index) -> np.ndarray:
        """Inverse of :meth:`beam_index`; extrapolates linearly past the end beams."""
        b = np.asarray(beam_index, dtype=np.float64)
        elev = self.beam_elevations
        if elev.size == 1:
            return np.full_like(b, elev[0])
        out = np.interp(b, np.arange(elev.size), elev)
        lo_slope = elev[1] - elev[0]
        hi_slope = elev[-1] - elev[-2]
        out = np.where(b < 0, elev[0] + b * lo_slope, out)
        return np.where(b > elev.size - 1, elev[-1] + (b - (elev.size - 1)) * hi_slope, out)

    def key(self) -> bytes:
        return self.beam_elevations.tobytes() + np.array(
            [self.num_azimuth_bins, self.r_max], dtype=np.float64).tobytes()


@dataclass(eq=False)
class RangeImage:
    """``H x W x 2`` grid of normalized (range, intensity); empty pixels are ``(0, 0)``."""

    values: np.ndarray
    spec: LidarSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (*self.spec.shape, 2):
            raise ValueError(f"range image shape {self.values.shape} does not match {self.spec.shape}")

    @classmethod
    def empty(cls, spec: LidarSpec) -> "RangeImage":
        return cls(np.zeros((*spec.shape, 2), dtype=np.float32), spec)

    @property
    def ranges(self) -> np.ndarray:
        return self.values[..., 0].astype(np.float64) * self.spec.r_max

    def occupied(self) -> np.ndarray:
        return self.values[..., 0] > EMPTY_THRESHOLD


@dataclass(eq=False)
class CameraParams:
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be a proper rotation matrix")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def looking_along(cls, yaw: float, center, hfov_deg: float, width: int, height: int,
                      pitch: float = 0.0) -> "CameraParams":
        """Camera at ``center`` whose optical axis points at azimuth ``yaw`` (tilted down by ``pitch``)."""
        cy_, sy_ = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        forward = np.array([cp * cy_, cp * sy_, -sp])
        right = np.array([sy_, -cy_, 0.0])
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        f = (width / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
        k = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
        t = -rot @ np.asarray(center, dtype=np.float64)
        return cls(rot, t, k, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def key(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.rotation, self.translation, self.intrinsics)) + \
            np.array([self.width, self.height], dtype=np.int64).tobytes()


@dataclass(eq=False)
class CameraRig:
    """Cameras in ring order; view ``v``'s left neighbour is ``v + 1`` (counter-clockwise)."""

    cameras: list[CameraParams] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("a rig needs at least two cameras")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i: int) -> CameraParams:
        return self.cameras[i]

    def __iter__(self):
        return iter(self.cameras)

    def left_of(self, v: int) -> int:
        return (v + 1) % len(self.cameras)

    def right_of(self, v: int) -> int:
        return (v - 1) % len(self.cameras)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.cameras[0].height, self.cameras[0].width

    def key(self) -> bytes:
        return b"".join(c.key() for c in self.cameras)


# --------------------------------------------------------------------------
# Range-image codec
# --------------------------------------------------------------------------

def azimuth_to_column(theta, width: int) -> np.ndarray:
    col = np.floor((np.asarray(theta) + np.pi) / TWO_PI * width).astype(np.int64)
    return np.clip(col, 0, width - 1)


def points_to_range_image(points, intensities, spec: LidarSpec) -> RangeImage:
    """Bin points into a range image; the nearest return wins each pixel."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    img = RangeImage.empty(spec)
    if points.shape[0] == 0:
        return img
    sph = cart_to_spherical(points)
    r, theta, phi = sph[:, 0], sph[:, 1], sph[:, 2]
    elev = spec.beam_elevations
    row = np.abs(phi[:, None] - elev[None, :]).argmin(axis=1)
    if elev.size > 1:
        half_lo = 0.5 * (elev[1] - elev[0])
        half_hi = 0.5 * (elev[-1] - elev[-2])
    else:
        half_lo = half_hi = np.inf
    keep = (r <= spec.r_max) & (r > 0) & (phi >= elev[0] - half_lo) & (phi <= elev[-1] + half_hi)
    row, r, theta, inten = row[keep], r[keep], theta[keep], intensities[keep]
    col = azimuth_to_column(theta, spec.num_azimuth_bins)
    # far-to-near so the nearest return is written last
    order = np.argsort(-r, kind="stable")
    img.values[row[order], col[order], 0] = r[order] / spec.r_max
    img.values[row[order], col[order], 1] = inten[order]
    return img


def range_image_to_points(img: RangeImage) -> tuple[np.ndarray, np.ndarray]:
    """Decode occupied pixels to ``(N, 3)`` points at bin-center rays plus ``(N,)`` intensities."""
    spec = img.spec
    rows, cols = np.nonzero(img.occupied())
    r = img.values[rows, cols, 0].astype(np.float64) * spec.r_max
    theta = spec.bin_center_azimuths()[cols]
    phi = spec.beam_elevations[rows]
    pts = spherical_to_cart(np.stack([r, theta, phi], axis=-1))
    return pts.reshape(-1, 3), img.values[rows, cols, 1].astype(np.float64)


# --------------------------------------------------------------------------
# Pinhole camera
# --------------------------------------------------------------------------

def _rotate(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    # flatten so the product runs as one 2-D matmul
    return (p.reshape(-1, 3) @ m.T).reshape(p.shape)


def _image_plane(pc: np.ndarray, cam: CameraParams):
    d = pc[..., 2]
    safe = np.where(np.abs(d) > MIN_DEPTH, d, MIN_DEPTH)
    k = cam.intrinsics
    u = (k[0, 0] * pc[..., 0] + k[0, 1] * pc[..., 1] + k[0, 2] * d) / safe
    v = (k[1, 0] * pc[..., 0] + k[1, 1] * pc[..., 1] + k[1, 2] * d) / safe
    valid = (d > MIN_DEPTH) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    return u, v, d, valid


def project_points(points, cam: CameraParams):
    """Vectorized projection: returns ``u, v, d, valid`` arrays."""
    p = np.asarray(points, dtype=np.float64)
    return _image_plane(_rotate(p, cam.rotation) + cam.translation, cam)


def project_to_camera(p, cam: CameraParams) -> tuple[float, float, float, bool]:
    u, v, d, valid = project_points(np.asarray(p, dtype=np.float64).reshape(3), cam)
    return float(u), float(v), float(d), bool(valid)


def backproject_points(u, v, d, cam: CameraParams) -> np.ndarray:
    u, v, d = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, d)))
    if np.any(d <= 0):
        raise ValueError("backprojection needs positive depth")
    pix = np.stack([u * d, v * d, d], axis=-1)
    pc = np.linalg.solve(cam.intrinsics, pix.reshape(-1, 3).T).T.reshape(pix.shape)
    return (pc - cam.translation) @ cam.rotation


def backproject_pixel(u: float, v: float, d: float, cam: CameraParams) -> np.ndarray:
    return backproject_points(u, v, d, cam).reshape(3)


# --------------------------------------------------------------------------
# Sampling helpers
# --------------------------------------------------------------------------

def lid_bins(min_val: float, max_val: float, count: int) -> np.ndarray:
    """Linear-increasing discretization: bin widths grow linearly with the index."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 < min_val < max_val:
        raise ValueError("need 0 < min_val < max_val")
    k = np.arange(1, count + 1, dtype=np.float64)
    return min_val + (max_val - min_val) * k * (k + 1) / (count * (count + 1))


def bilinear_weights(x, y, height: int, width: int, wrap: bool = False):
    """Corner indices and weights for continuous grid-index coordinates.

    Returns ``(rows, cols, weights)`` each of shape ``(..., 4)``.  Coordinates
    must already be inside the grid (or wrapped horizontally when ``wrap``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if wrap:
        x = np.mod(x, width)
        x0 = np.minimum(np.floor(x), width - 1)
        fx = x - x0
        x0 = x0.astype(np.int64)
        x1 = (x0 + 1) % width
    else:
        x0 = np.clip(np.floor(x), 0, max(width - 2, 0))
        fx = np.clip(x - x0, 0.0, 1.0)
        x0 = x0.astype(np.int64)
        x1 = np.minimum(x0 + 1, width - 1)
    y0 = np.clip(np.floor(y), 0, max(height - 2, 0))
    fy = np.clip(y - y0, 0.0, 1.0)
    y0 = y0.astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    rows = np.stack([y0, y0, y1, y1], axis=-1)
    cols = np.stack([x0, x1, x0, x1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return rows, cols, w


def normalized_to_index(u, v, height: int, width: int):
    return np.asarray(u, dtype=np.float64) * (width - 1), np.asarray(v, dtype=np.float64) * (height - 1)


def bilinear_sample(grid, u: float, v: float, wrap: bool = False):
    """Sample an ``H x W x C`` grid at normalized ``(u, v)``.

    Returns ``(value, valid)``; out-of-range coordinates give a zero vector and
    ``valid=False``.  With ``wrap`` the horizontal axis is circular.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[..., None]
    h, w, c = grid.shape
    if not (0.0 <= v <= 1.0) or (not wrap and not 0.0 <= u <= 1.0):
        return np.zeros(c), False
    x, y = normalized_to_index(u, v, h, w)
    rows, cols, wts = bilinear_weights(x, y, h, w, wrap=wrap)
    value = (grid[rows, cols] * wts[:, None]).sum(axis=0)
    return value, True


def _to_normalized(index, n: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.float64)
    if n == 1:
        return np.zeros_like(index)
    return index / (n - 1)


def camera_grid_coords(u_pix, v_pix, cam: CameraParams, grid_hw: tuple[int, int]):
    """Pixel coordinates to normalized coordinates on an ``h x w`` grid over the image."""
    h, w = grid_hw
    cx = np.clip(np.asarray(u_pix) * w / cam.width - 0.5, 0, w - 1)
    cy = np.clip(np.asarray(v_pix) * h / cam.height - 0.5, 0, h - 1)
    return _to_normalized(cx, w), _to_normalized(cy, h)


def range_grid_coords(theta, phi, spec: LidarSpec, grid_hw: tuple[int, int]):
    """Angles to normalized coordinates on an ``h x w`` grid over the range image.

    The horizontal coordinate may exceed 1 on the wrap-around seam; it is only
    meaningful with circular sampling.
    """
    h, w = grid_hw
    col = np.mod((np.asarray(theta) + np.pi) / TWO_PI * w - 0.5, w)
    beam = spec.beam_index(phi)
    row = np.clip((beam + 0.5) * h / spec.num_beams - 0.5, 0, h - 1)
    return _to_normalized(col, w), _to_normalized(row, h)


def range_cell_angles(spec: LidarSpec, grid_hw: tuple[int, int]):
    """Ray angles ``(theta[w], phi[h])`` at the cell centers of an ``h x w`` range grid."""
    h, w = grid_hw
    theta = spec.bin_center_azimuths(w)
    beam = (np.arange(h) + 0.5) * spec.num_beams / h - 0.5
    return theta, spec.elevation_at(beam)


def camera_cell_pixels(cam: CameraParams, grid_hw: tuple[int, int]):
    """Pixel coordinates ``(u[w], v[h])`` of the cell centers of an ``h x w`` camera grid."""
    h, w = grid_hw
    return (np.arange(w) + 0.5) * cam.width / w, (np.arange(h) + 0.5) * cam.height / h


# --------------------------------------------------------------------------
# Epipolar sample sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpipolarSample:
    """One candidate point along an epipolar line.

    ``coords`` holds one normalized ``(u, v)`` per entry of ``view_ids`` for a
    camera target, or a single entry for a range-image target.  ``pixels``
    mirrors it in raw units (camera pixels, or ``(theta, phi)`` radians).
    """

    metric: float
    valid: bool
    view_ids: tuple[int, ...]
    coords: tuple[tuple[float, float], ...]
    pixels: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class EpipolarSampleSet:
    samples: tuple[EpipolarSample, ...]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, k: int) -> EpipolarSample:
        return self.samples[k]

    @property
    def metrics(self) -> np.ndarray:
        return np.array([s.metric for s in self.samples])

    @property
    def valid(self) -> np.ndarray:
        return np.array([s.valid for s in self.samples], dtype=bool)


def cam_from_ray_table(theta, phi, rig: CameraRig, radii, cam_grid: Optional[tuple[int, int]] = None):
    """Project points at ``radii`` along LiDAR rays into every camera.

    ``theta``/``phi`` have shape ``(N,)``.  Returns arrays of shape ``(N, R, V)``
    for ``u, v, d, visible`` and ``(N, R, V, 2)`` normalized grid coordinates.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    n, nr = theta.size, radii.size
    # camera coordinates are affine in the radius: rotate each unit ray once
    dirs = spherical_to_cart(np.stack([np.ones_like(theta), theta, phi], axis=-1))
    nv = len(rig)
    u = np.empty((n, nr, nv))
    v = np.empty_like(u)
    d = np.empty_like(u)
    vis = np.empty(u.shape, dtype=bool)
    coords = np.empty((n, nr, nv, 2))
    for i, cam in enumerate(rig):
        pc = radii[None, :, None] * _rotate(dirs, cam.rotation)[:, None, :] + cam.translation
        u[..., i], v[..., i], d[..., i], vis[..., i] = _image_plane(pc, cam)
        grid = cam_grid if cam_grid is not None else (cam.height, cam.width)
        cu, cv = camera_grid_coords(u[..., i], v[..., i], cam, grid)
        coords[..., i, 0], coords[..., i, 1] = cu, cv
    return u, v, d, vis, coords


def _cam_sample_set(radii, u, v, vis, coords) -> EpipolarSampleSet:
    samples = []
    for k, r in enumerate(radii):
        ids = tuple(int(i) for i in np.nonzero(vis[k])[0])
        samples.append(EpipolarSample(
            metric=float(r), valid=bool(ids), view_ids=ids,
            coords=tuple((float(coords[k, i, 0]), float(coords[k, i, 1])) for i in ids),
            pixels=tuple((float(u[k, i]), float(v[k, i])) for i in ids)))
    return EpipolarSampleSet(tuple(samples))


def epipolar_cam_from_ray(theta: float, phi: float, rig: CameraRig, count: int,
                          r_caps: tuple[float, float],
                          cam_grid: Optional[tuple[int, int]] = None) -> EpipolarSampleSet:
    radii = lid_bins(r_caps[0], r_caps[1], count)
    u, v, _, vis, coords = cam_from_ray_table([theta], [phi], rig, radii, cam_grid)
    return _cam_sample_set(radii, u[0], v[0], vis[0], coords[0])


def epipolar_cam_from_range(row: int, col: int, spec: LidarSpec, rig: CameraRig, count: int,
                            r_caps: tuple[float, float],
                            range_grid: Optional[tuple[int, int]] = None,
                            cam_grid: Optional[tuple[int, int]] = None) -> EpipolarSampleSet:
    """Epipolar samples in the cameras for the range-grid cell ``(row, col)``."""
    grid = range_grid if range_grid is not None else spec.shape
    if not (0 <= row < grid[0] and 0 <= col < grid[1]):
        raise IndexError(f"cell ({row}, {col}) outside range grid {grid}")
    theta, phi = range_cell_angles(spec, grid)
    return epipolar_cam_from_ray(theta[col], phi[row], rig, count, r_caps, cam_grid)


def range_from_pixel_table(u, v, cam: CameraParams, spec: LidarSpec, depths,
                           range_grid: Optional[tuple[int, int]] = None):
    """Backproject pixels at ``depths`` and express the points in the range view.

    ``u``/``v`` have shape ``(N,)``.  Returns ``(theta, phi, r, valid)`` of shape
    ``(N, D)`` and normalized range-grid coordinates of shape ``(N, D, 2)``.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    uu, dd = np.broadcast_arrays(u[:, None], depths[None, :])
    vv = np.broadcast_to(v[:, None], dd.shape)
    pts = backproject_points(uu, vv, dd, cam)
    sph = cart_to_spherical(pts)
    r, theta, phi = sph[..., 0], sph[..., 1], sph[..., 2]
    elev = spec.beam_elevations
    valid = (phi >= elev[0]) & (phi <= elev[-1])
    grid = range_grid if range_grid is not None else spec.shape
    cu, cv = range_grid_coords(theta, phi, spec, grid)
    return theta, phi, r, valid, np.stack([cu, cv], axis=-1)


def epipolar_range_from_pixel(u: float, v: float, cam_index: int, rig: CameraRig, spec: LidarSpec,
                              count: int, d_caps: tuple[float, float],
                              range_grid: Optional[tuple[int, int]] = None) -> EpipolarSampleSet:
    """Epipolar samples on the range image for pixel ``(u, v)`` of camera ``cam_index``."""
    cam = rig[cam_index]
    if not (0 <= u <= cam.width and 0 <= v <= cam.height):
        raise IndexError(f"pixel ({u}, {v}) outside image")
    depths = lid_bins(d_caps[0], d_caps[1], count)
    theta, phi, _, valid, coords = range_from_pixel_table([u], [v], cam, spec, depths, range_grid)
    samples = []
    for k, d in enumerate(depths):
        samples.append(EpipolarSample(
            metric=float(d), valid=bool(valid[0, k]), view_ids=(),
            coords=((float(coords[0, k, 0]), float(coords[0, k, 1])),),
            pixels=((float(theta[0, k]), float(phi[0, k])),)))
    return EpipolarSampleSet(tuple(samples))


def polyline_at(metrics: Sequence[float], points, value: float) -> np.ndarray:
    """Piecewise-linear interpolation of ``points`` (``(K, 2)``) parametrized by ``metrics``."""
    points = np.asarray(points, dtype=np.float64)
    return np.array([np.interp(value, metrics, points[:, j]) for j in range(points.shape[1])])
