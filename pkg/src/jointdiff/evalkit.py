"""Depth alignment, BEV distribution distances and multi-view overlap consistency."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import CameraRig, LidarSpec, RangeImage, backproject_points, project_points, range_image_to_points

BEV_BINS = 16
BEV_EXTENT = 20.0
JSD_EPS = 1e-12
REPORT_KEYS = ("das", "mmd", "jsd", "overlap", "img_mmd", "n_scenes")


class EmptySetError(ValueError):
    pass


# --------------------------------------------------------------------------
# Depth alignment
# --------------------------------------------------------------------------

def landing_disparities(range_image: RangeImage, depth_ref: np.ndarray, rig: CameraRig):
    """Disparities ``(projected, reference)`` at every valid landing pixel over all views."""
    pts, _ = range_image_to_points(range_image)
    proj, ref = [], []
    for v, cam in enumerate(rig):
        u, vv, d, ok = project_points(pts, cam)
        if not ok.any():
            continue
        rows = np.minimum(vv[ok].astype(np.int64), cam.height - 1)
        cols = np.minimum(u[ok].astype(np.int64), cam.width - 1)
        r = depth_ref[v][rows, cols]
        fin = np.isfinite(r) & (r > 0)
        proj.append(1.0 / d[ok][fin])
        ref.append(1.0 / r[fin])
    if not proj:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(proj), np.concatenate(ref)


def das(range_image: RangeImage, depth_ref: np.ndarray, rig: CameraRig, spec: Optional[LidarSpec] = None):
    """Mean absolute disparity error after median-ratio scale normalization; ``None`` if nothing lands."""
    proj, ref = landing_disparities(range_image, depth_ref, rig)
    if proj.size == 0:
        return None
    scale = np.median(ref / proj)
    return float(np.mean(np.abs(scale * proj - ref)))


def mean_das(range_images: Sequence[np.ndarray], depth_refs: Sequence[np.ndarray], rig: CameraRig,
             spec: LidarSpec) -> Optional[float]:
    scores = [das(RangeImage(r, spec), d, rig, spec) for r, d in zip(range_images, depth_refs, strict=True)]
    scores = [s for s in scores if s is not None]
    return float(np.mean(scores)) if scores else None


# --------------------------------------------------------------------------
# Distribution distances
# --------------------------------------------------------------------------

def bev_histogram(points: np.ndarray, bins: int = BEV_BINS, extent: float = BEV_EXTENT) -> np.ndarray:
    """Normalized ``bins x bins`` occupancy over ``[-extent, extent]^2``; all zeros if no point falls inside."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hist, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=[[-extent, extent], [-extent, extent]])
    total = hist.sum()
    return hist / total if total > 0 else hist


def range_bev(range_image: np.ndarray, spec: LidarSpec) -> np.ndarray:
    pts, _ = range_image_to_points(RangeImage(range_image, spec))
    return bev_histogram(pts)


def _flatten_set(items) -> np.ndarray:
    arr = np.asarray([np.asarray(h, dtype=np.float64).reshape(-1) for h in items])
    if arr.shape[0] == 0:
        raise EmptySetError("empty set")
    return arr


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    iu = np.triu_indices(len(pooled), k=1)
    dist = np.sqrt(_sq_dists(pooled, pooled)[iu])
    sigma = float(np.median(dist)) if dist.size else 0.0
    return sigma if sigma > 0 else 1.0


def mmd(set_a, set_b, sigma: Optional[float] = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel and median-distance bandwidth.

    Equal-size sets use the paired U-statistic
    ``1/(m(m-1)) sum_{i != j} [k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i)]``,
    which is exactly zero for identical sets; unequal sizes use the standard
    unbiased estimator.
    """
    a, b = _flatten_set(set_a), _flatten_set(set_b)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise EmptySetError("each set needs at least two elements")
    sigma = median_bandwidth(a, b) if sigma is None else sigma
    kern = lambda x, y: np.exp(-_sq_dists(x, y) / (2.0 * sigma * sigma))  # noqa: E731
    kaa, kbb, kab = kern(a, a), kern(b, b), kern(a, b)
    off = lambda k: k.sum() - np.trace(k)  # noqa: E731
    if m == n:
        h = kaa + kbb - kab - kab.T
        return float(off(h) / (m * (m - 1)))
    return float(off(kaa) / (m * (m - 1)) + off(kbb) / (n * (n - 1)) - 2.0 * kab.mean())


def jsd(set_a, set_b, eps: float = JSD_EPS) -> float:
    """Jensen-Shannon divergence (natural log) between the two mean histograms."""
    p = _flatten_set(set_a).mean(0) + eps
    q = _flatten_set(set_b).mean(0) + eps
    p, q = p / p.sum(), q / q.sum()
    mid = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log(p / mid)) + 0.5 * np.sum(q * np.log(q / mid)))


def luminance_features(images: np.ndarray, grid: int = 8) -> np.ndarray:
    """Per-scene vector of ``grid x grid`` mean-pooled luminance of every view; ``images (B, V, H, W, 3)``."""
    img = np.asarray(images, dtype=np.float64)
    lum = img @ np.array([0.299, 0.587, 0.114])
    b, v, h, w = lum.shape
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} not divisible by {grid}")
    pooled = lum.reshape(b, v, grid, h // grid, grid, w // grid).mean(axis=(3, 5))
    return pooled.reshape(b, -1)


def img_mmd(images_a: np.ndarray, images_b: np.ndarray) -> float:
    return mmd(luminance_features(images_a), luminance_features(images_b))


# --------------------------------------------------------------------------
# Multi-view overlap
# --------------------------------------------------------------------------

def overlap_consistency(images: np.ndarray, rig: CameraRig, depth_ref: np.ndarray,
                        occlusion_tol: float = 0.05) -> Optional[float]:
    """``1 -`` mean absolute RGB difference over pixels seen by a neighbouring view.

    Surface pixels are backprojected with the reference depth and kept only
    when the neighbour's reference depth at the landing pixel agrees within
    ``occlusion_tol`` (relative); sky pixels are transferred by direction and
    kept when the neighbour also sees sky there.  ``None`` if nothing overlaps.
    """
    images = np.asarray(images, dtype=np.float64)
    h, w = rig.image_shape
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    diffs = []
    for v, cam in enumerate(rig):
        d = depth_ref[v].ravel()
        colors = images[v].reshape(-1, 3)
        surface = np.isfinite(d)
        pts = backproject_points(uu[surface], vv[surface], d[surface], cam)
        pix = np.stack([uu, vv, np.ones_like(uu)], -1) @ np.linalg.inv(cam.intrinsics).T
        sky_dirs = pix[~surface] @ cam.rotation          # world-frame ray directions
        for nb in {rig.left_of(v), rig.right_of(v)} - {v}:
            other = rig[nb]
            nd = depth_ref[nb]
            nimg = images[nb]
            u2, v2, d2, ok = project_points(pts, other)
            rows = np.minimum(v2[ok].astype(np.int64), h - 1)
            cols = np.minimum(u2[ok].astype(np.int64), w - 1)
            ref = nd[rows, cols]
            agree = np.isfinite(ref) & (np.abs(ref - d2[ok]) <= occlusion_tol * d2[ok])
            src = colors[surface][ok][agree]
            diffs.append(np.abs(src - nimg[rows[agree], cols[agree]]).mean(-1))
            if sky_dirs.size:
                dc = sky_dirs @ other.rotation.T
                front = dc[:, 2] > 0
                hom = dc[front] @ other.intrinsics.T
                su, sv = hom[:, 0] / hom[:, 2], hom[:, 1] / hom[:, 2]
                inside = (su >= 0) & (su < w) & (sv >= 0) & (sv < h)
                sr = sv[inside].astype(np.int64)
                sc = su[inside].astype(np.int64)
                sky_nb = np.isinf(nd[sr, sc])
                src = colors[~surface][front][inside][sky_nb]
                diffs.append(np.abs(src - nimg[sr[sky_nb], sc[sky_nb]]).mean(-1))
    allp = np.concatenate(diffs) if diffs else np.zeros(0)
    if allp.size == 0:
        return None
    return float(1.0 - allp.mean())


def mean_overlap(images: Sequence[np.ndarray], depth_refs: Sequence[np.ndarray], rig: CameraRig) -> Optional[float]:
    scores = [overlap_consistency(i, rig, d) for i, d in zip(images, depth_refs, strict=True)]
    scores = [s for s in scores if s is not None]
    return float(np.mean(scores)) if scores else None


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def evaluate(sample_ranges: np.ndarray, sample_images: np.ndarray, depth_refs: Sequence[np.ndarray],
             reference_ranges: np.ndarray, reference_images: np.ndarray, rig: CameraRig,
             spec: LidarSpec) -> dict[str, float]:
    """All metrics for one set of samples against a set of reference scenes.

    ``depth_refs`` are the simulator depth maps of the scenes the samples were
    conditioned on.
    """
    bev_s = [range_bev(r, spec) for r in sample_ranges]
    bev_r = [range_bev(r, spec) for r in reference_ranges]
    return {
        "das": mean_das(sample_ranges, depth_refs, rig, spec),
        "mmd": mmd(bev_s, bev_r),
        "jsd": jsd(bev_s, bev_r),
        "overlap": mean_overlap(sample_images, depth_refs, rig),
        "img_mmd": img_mmd(sample_images, reference_images),
        "n_scenes": len(sample_ranges),
    }


def format_report(values: Mapping[str, object]) -> str:
    lines = []
    keys = [k for k in REPORT_KEYS if k in values] + sorted(k for k in values if k not in REPORT_KEYS)
    for k in keys:
        v = values[k]
        if v is None:
            text = "undefined"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{k}={text}")
    return "\n".join(lines) + "\n"


def write_report(values: Mapping[str, object], path) -> None:
    Path(path).write_text(format_report(values))


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out
