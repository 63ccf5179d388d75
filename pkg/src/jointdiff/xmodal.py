"""Zero-gated epipolar cross-attention between the range branch and the camera branch."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .geometry import (
    CameraRig,
    LidarSpec,
    bilinear_weights,
    cam_from_ray_table,
    camera_cell_pixels,
    lid_bins,
    normalized_to_index,
    range_cell_angles,
    range_from_pixel_table,
)
from .netblocks import MLP, NUM_SITES, CrossAttention, Gate, fourier_embed, gated_residual, group_norm

SAMPLE_COUNTS = (12, 8, 6, 8, 12)
CAPS = (1.0, 40.0)
MODES = ("attn", "avg")


class SiteOrderError(RuntimeError):
    pass


@dataclass
class SamplingTable:
    """Input-independent epipolar sampling operator for one pair of grid resolutions.

    ``matrix`` maps flattened source features to per-(cell, sample) features;
    ``valid`` is ``(cells, samples)`` (or ``(views, cells, samples)`` for the
    camera side).
    """

    matrix: SparseOperator
    valid: np.ndarray
    metrics: np.ndarray
    coords: np.ndarray
    visible: Optional[np.ndarray] = None


class SparseOperator:
    """Fixed sparse matrix with its transpose, both in CSR form, for fast apply and backprop."""

    def __init__(self, rows, cols, vals, shape, dtype):
        idx = torch.as_tensor(np.stack([rows, cols]), dtype=torch.int64)
        coo = torch.sparse_coo_tensor(idx, torch.as_tensor(vals, dtype=dtype), shape,
                                      check_invariants=True).coalesce()
        self.shape = tuple(shape)
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Sparse CSR tensor support is in beta")
            self.forward_csr = coo.to_sparse_csr()
            self.transpose_csr = coo.t().coalesce().to_sparse_csr()

    def to_dense(self) -> torch.Tensor:
        return self.forward_csr.to_dense()

    def __matmul__(self, x: torch.Tensor) -> torch.Tensor:
        return _SparseApply.apply(x, self)


class _SparseApply(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, op):
        ctx.op = op
        return op.forward_csr @ x

    @staticmethod
    def backward(ctx, grad):
        return ctx.op.transpose_csr @ grad, None


def _sparse(rows, cols, vals, shape, dtype) -> SparseOperator:
    return SparseOperator(rows, cols, vals, shape, dtype)


def c2l_table(rig: CameraRig, spec: LidarSpec, range_hw, cam_hw, count: int, caps,
              dtype=torch.float32) -> SamplingTable:
    """Camera-to-LiDAR table: range cell ``n`` (row-major), sample ``k`` -> views' grid cells."""
    h, w = range_hw
    hc, wc = cam_hw
    theta, phi = range_cell_angles(spec, range_hw)
    th = np.broadcast_to(theta[None, :], (h, w)).reshape(-1)
    ph = np.broadcast_to(phi[:, None], (h, w)).reshape(-1)
    radii = lid_bins(caps[0], caps[1], count)
    _, _, _, vis, coords = cam_from_ray_table(th, ph, rig, radii, cam_hw)
    n_vis = vis.sum(axis=-1)
    x, y = normalized_to_index(coords[..., 0], coords[..., 1], hc, wc)
    rr, cc, ww = bilinear_weights(x, y, hc, wc)
    nv = len(rig)
    share = np.where(vis, 1.0 / np.maximum(n_vis, 1)[..., None], 0.0)
    row_idx = np.broadcast_to(np.arange(h * w * count).reshape(h * w, count, 1, 1), rr.shape)
    col_idx = np.arange(nv).reshape(1, 1, nv, 1) * (hc * wc) + rr * wc + cc
    vals = ww * share[..., None]
    keep = vals != 0
    matrix = _sparse(row_idx[keep], col_idx[keep], vals[keep], (h * w * count, nv * hc * wc), dtype)
    return SamplingTable(matrix, n_vis > 0, radii, coords, vis)


def l2c_table(rig: CameraRig, spec: LidarSpec, range_hw, cam_hw, count: int, caps,
              dtype=torch.float32) -> SamplingTable:
    """LiDAR-to-camera table: (view, cell, sample) -> range grid cells with horizontal wrap."""
    h, w = range_hw
    hc, wc = cam_hw
    depths = lid_bins(caps[0], caps[1], count)
    nv, nc = len(rig), hc * wc
    valid = np.empty((nv, nc, count), dtype=bool)
    coords = np.empty((nv, nc, count, 2))
    for v, cam in enumerate(rig):
        up, vp = camera_cell_pixels(cam, cam_hw)
        uu = np.broadcast_to(up[None, :], (hc, wc)).reshape(-1)
        vv = np.broadcast_to(vp[:, None], (hc, wc)).reshape(-1)
        _, _, _, valid[v], coords[v] = range_from_pixel_table(uu, vv, cam, spec, depths, range_hw)
    x, y = normalized_to_index(coords[..., 0], coords[..., 1], h, w)
    rr, cc, ww = bilinear_weights(x, y, h, w, wrap=True)
    row_idx = np.broadcast_to(np.arange(nv * nc * count).reshape(nv, nc, count, 1), rr.shape)
    col_idx = rr * w + cc
    vals = np.where(valid[..., None], ww, 0.0)
    keep = vals != 0
    matrix = _sparse(row_idx[keep], col_idx[keep], vals[keep], (nv * nc * count, h * w), dtype)
    return SamplingTable(matrix, valid, depths, coords)


class XModalSite(nn.Module):
    """Both exchange directions at one matched UNet site."""

    def __init__(self, site: int, range_ch: int, cam_ch: int, count: int, caps=CAPS,
                 num_freqs: int = 6, mode: str = "attn"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown xmodal mode {mode!r}")
        if count < 1:
            raise ValueError("sample count must be positive")
        self.site, self.count, self.caps, self.mode = site, count, tuple(caps), mode
        self.range_ch, self.cam_ch = range_ch, cam_ch
        self.num_freqs = num_freqs
        self.mlp_r = MLP(2 * num_freqs, cam_ch, cam_ch)
        self.mlp_d = MLP(2 * num_freqs, range_ch, range_ch)
        self.attn_cr = CrossAttention(range_ch, cam_ch, range_ch)
        self.attn_rc = CrossAttention(cam_ch, range_ch, cam_ch)
        # pre-attention normalization keeps logits O(1) whatever the UNet feature scale
        self.norm_r = group_norm(range_ch)
        self.norm_c = group_norm(cam_ch)
        self.gate_cr = Gate()
        self.gate_rc = Gate()
        self._tables: dict = {}

    def clamp(self, clamped: bool = True) -> None:
        self.gate_cr.clamped = clamped
        self.gate_rc.clamped = clamped

    @property
    def clamped(self) -> bool:
        return self.gate_cr.clamped and self.gate_rc.clamped

    def table(self, kind: str, rig: CameraRig, spec: LidarSpec, range_hw, cam_hw, dtype) -> SamplingTable:
        key = (kind, rig.key(), spec.key(), tuple(range_hw), tuple(cam_hw), dtype)
        if key not in self._tables:
            build = c2l_table if kind == "c2l" else l2c_table
            self._tables[key] = build(rig, spec, range_hw, cam_hw, self.count, self.caps, dtype)
        return self._tables[key]

    def metric_embedding(self, mlp: MLP, metrics: np.ndarray, dtype) -> torch.Tensor:
        x = torch.as_tensor(metrics / self.caps[1], dtype=dtype)
        return mlp(fourier_embed(x, self.num_freqs))

    def _epipolar_attend(self, attn: CrossAttention, queries: torch.Tensor, source: torch.Tensor,
                         tab: SamplingTable, metric: torch.Tensor) -> torch.Tensor:
        """Masked attention of every query cell over its epipolar samples.

        ``queries (B, N, Cq)``, ``source (B, M, Ckv)`` flattened snapshot cells,
        ``metric (K, Ckv)`` metric tokens.  Sampled tokens are
        ``S @ source + metric``; since the key/value projections are linear and
        bias-free, the source is projected before sampling, which is cheaper
        and mathematically identical.
        """
        b, n, _ = queries.shape
        k_cnt = self.count
        width = attn.width
        mask = torch.as_tensor(tab.valid.reshape(n, k_cnt))

        def sample(proj):
            src = proj(source)                                   # (B, M, W)
            m = src.shape[1]
            flat = src.permute(1, 0, 2).reshape(m, b * width)
            out = (tab.matrix @ flat).reshape(n, k_cnt, b, width).permute(2, 0, 1, 3)
            return out + proj(metric)

        v = sample(attn.to_v)
        any_valid = mask.any(-1).to(queries.dtype)[None, :, None]
        if self.mode == "attn":
            k = sample(attn.to_k)
            q = attn.to_q(queries)
            logits = (k * q[:, :, None, :]).sum(-1) / math.sqrt(width)
            logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
            wts = torch.softmax(logits, dim=-1) * mask
        else:
            # average epipolar condition: uniform weights over the valid samples
            maskf = mask.to(queries.dtype)
            wts = (maskf / maskf.sum(-1, keepdim=True).clamp(min=1)).expand(b, n, k_cnt)
        ctx = (wts[..., None] * v).sum(-2)
        return attn.to_out(ctx) * any_valid

    def cam_to_lidar(self, z_r: torch.Tensor, cam_snap: torch.Tensor, rig: CameraRig,
                     spec: LidarSpec) -> torch.Tensor:
        """Condition range features ``(B, Cr, h, w)`` on camera snapshots ``(B*V, Cc, hc, wc)``."""
        if self.gate_cr.clamped:
            return z_r
        b, cr, h, w = z_r.shape
        nv = len(rig)
        bv, cc, hc, wc = cam_snap.shape
        if bv != b * nv or cc != self.cam_ch or cr != self.range_ch:
            raise ValueError(f"site {self.site}: snapshot shape {tuple(cam_snap.shape)} does not match "
                             f"registration (B*V={b * nv}, Cc={self.cam_ch}, Cr={self.range_ch})")
        tab = self.table("c2l", rig, spec, (h, w), (hc, wc), z_r.dtype)
        source = self.norm_c(cam_snap).reshape(b, nv, cc, hc * wc).transpose(2, 3).reshape(b, nv * hc * wc, cc)
        metric = self.metric_embedding(self.mlp_r, tab.metrics, z_r.dtype)
        queries = self.norm_r(z_r).flatten(2).transpose(1, 2)
        y = self._epipolar_attend(self.attn_cr, queries, source, tab, metric)
        return gated_residual(z_r, y.transpose(1, 2).reshape(b, cr, h, w), self.gate_cr)

    def lidar_to_cam(self, z_c: torch.Tensor, range_snap: torch.Tensor, rig: CameraRig,
                     spec: LidarSpec) -> torch.Tensor:
        """Condition camera features ``(B*V, Cc, hc, wc)`` on the range snapshot ``(B, Cr, h, w)``."""
        if self.gate_rc.clamped:
            return z_c
        b, cr, h, w = range_snap.shape
        nv = len(rig)
        bv, cc, hc, wc = z_c.shape
        if bv != b * nv or cc != self.cam_ch or cr != self.range_ch:
            raise ValueError(f"site {self.site}: snapshot shape {tuple(range_snap.shape)} does not match "
                             f"registration (B*V={bv}, Cc={self.cam_ch}, Cr={self.range_ch})")
        tab = self.table("l2c", rig, spec, (h, w), (hc, wc), z_c.dtype)
        n = hc * wc
        source = self.norm_r(range_snap).flatten(2).transpose(1, 2)
        metric = self.metric_embedding(self.mlp_d, tab.metrics, z_c.dtype)
        queries = self.norm_c(z_c).reshape(b, nv, cc, n).transpose(2, 3).reshape(b, nv * n, cc)
        y = self._epipolar_attend(self.attn_rc, queries, source, tab, metric)
        y = y.reshape(b, nv, n, cc).transpose(2, 3)
        return gated_residual(z_c, y.reshape(bv, cc, hc, wc), self.gate_rc)

    def exchange(self, h_r: torch.Tensor, h_c: torch.Tensor, rig: CameraRig, spec: LidarSpec):
        """Snapshot both entry features, then update each side from the other's snapshot only."""
        range_snap, cam_snap = h_r, h_c
        return self.cam_to_lidar(h_r, cam_snap, rig, spec), self.lidar_to_cam(h_c, range_snap, rig, spec)


class XModal(nn.Module):
    """The five exchange sites shared by the joint model."""

    def __init__(self, rig: CameraRig, spec: LidarSpec, range_channels: Sequence[int],
                 cam_channels: Sequence[int], counts: Sequence[int] = SAMPLE_COUNTS, caps=CAPS,
                 num_freqs: int = 6, mode: str = "attn"):
        super().__init__()
        if not (len(range_channels) == len(cam_channels) == len(counts) == NUM_SITES):
            raise ValueError(f"need {NUM_SITES} sites")
        if list(counts) != list(counts)[::-1]:
            raise ValueError("sample counts must be symmetric between down and up sites")
        self.rig, self.spec = rig, spec
        self.sites = nn.ModuleList(
            XModalSite(i, rc, cc, n, caps, num_freqs, mode)
            for i, (rc, cc, n) in enumerate(zip(range_channels, cam_channels, counts)))

    def clamp(self, clamped: bool = True) -> None:
        for s in self.sites:
            s.clamp(clamped)

    def gates(self) -> list[Gate]:
        return [g for s in self.sites for g in (s.gate_cr, s.gate_rc)]

    def exchange_at_site(self, site: int, h_r: torch.Tensor, h_c: torch.Tensor):
        return self.sites[site].exchange(h_r, h_c, self.rig, self.spec)

    def cam_to_lidar_condition(self, site: int, z_r, cam_snap):
        return self.sites[site].cam_to_lidar(z_r, cam_snap, self.rig, self.spec)

    def lidar_to_cam_condition(self, site: int, z_c, range_snap):
        return self.sites[site].lidar_to_cam(z_c, range_snap, self.rig, self.spec)
