"""Box and scene-tag condition tokens for the range and camera branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .geometry import MIN_DEPTH, CameraParams, CameraRig, LidarSpec, cart_to_spherical, project_points
from .netblocks import MLP, fourier_embed
from .scenesim import BRIGHTNESS_TAGS, CATEGORIES, WEATHER_TAGS, OrientedBox

NUM_TAG_SLOTS = 2
MAX_BOXES = 8
NUM_SLOTS = NUM_TAG_SLOTS + MAX_BOXES
TAG, BOX, NULL = "tag", "box", "null"


def range_view_corner_features(box: OrientedBox, spec: LidarSpec, num_freqs: int = 6) -> np.ndarray:
    """Fourier features of the 8 corners in normalized ``(r, theta, phi)``, flattened to ``8*3*2L``."""
    sph = cart_to_spherical(box.corners())
    norm = sph / np.array([spec.r_max, np.pi, np.pi / 2])
    return fourier_embed(norm, num_freqs).reshape(-1)


def perspective_corners(box: OrientedBox, cam: CameraParams) -> np.ndarray:
    """``(8, 3)`` projected ``(u, v, d)``; corners at or behind the camera plane are clamped to ``d = 1e-6``."""
    pc = box.corners() @ cam.rotation.T + cam.translation
    pc[:, 2] = np.maximum(pc[:, 2], MIN_DEPTH)
    hom = pc @ cam.intrinsics.T
    return np.stack([hom[:, 0] / pc[:, 2], hom[:, 1] / pc[:, 2], pc[:, 2]], axis=-1)


def perspective_corner_features(box: OrientedBox, cam: CameraParams, d_max: float,
                                num_freqs: int = 6) -> np.ndarray:
    uvd = perspective_corners(box, cam)
    norm = uvd / np.array([cam.width, cam.height, d_max])
    return fourier_embed(norm, num_freqs).reshape(-1)


def visible_boxes_for_view(boxes: Sequence[OrientedBox], cam: CameraParams) -> list[OrientedBox]:
    """Boxes with at least one corner landing inside the image in front of the camera."""
    out = []
    for b in boxes:
        _, _, _, ok = project_points(b.corners(), cam)
        if ok.any():
            out.append(b)
    return out


@dataclass
class SceneConditions:
    """Numeric condition inputs for a batch of ``B`` scenes seen by ``V`` cameras."""

    tag_ids: np.ndarray          # (B, 2) brightness id, weather id
    range_feats: np.ndarray      # (B, 8, 288)
    range_cats: np.ndarray       # (B, 8)
    range_valid: np.ndarray      # (B, 8)
    cam_feats: np.ndarray        # (B, V, 8, 288)
    cam_cats: np.ndarray         # (B, V, 8)
    cam_valid: np.ndarray        # (B, V, 8)

    @property
    def batch_size(self) -> int:
        return self.tag_ids.shape[0]

    def select(self, idx) -> "SceneConditions":
        return SceneConditions(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, items: Sequence["SceneConditions"]) -> "SceneConditions":
        return cls(*(np.concatenate([getattr(i, f) for i in items]) for f in cls.__dataclass_fields__))


def build_conditions(scenes: Sequence[tuple[Sequence[OrientedBox], Sequence[str]]], spec: LidarSpec,
                     rig: CameraRig, d_max: float, num_freqs: int = 6) -> SceneConditions:
    b, nv = len(scenes), len(rig)
    feat = 8 * 3 * 2 * num_freqs
    tag_ids = np.zeros((b, 2), dtype=np.int64)
    rf = np.zeros((b, MAX_BOXES, feat))
    rc = np.zeros((b, MAX_BOXES), dtype=np.int64)
    rv = np.zeros((b, MAX_BOXES), dtype=bool)
    cf = np.zeros((b, nv, MAX_BOXES, feat))
    cc = np.zeros((b, nv, MAX_BOXES), dtype=np.int64)
    cv = np.zeros((b, nv, MAX_BOXES), dtype=bool)
    for i, (boxes, tags) in enumerate(scenes):
        if len(boxes) > MAX_BOXES:
            raise ValueError(f"at most {MAX_BOXES} boxes per scene")
        tag_ids[i] = (BRIGHTNESS_TAGS.index(tags[0]), WEATHER_TAGS.index(tags[1]))
        for j, box in enumerate(boxes):
            rf[i, j] = range_view_corner_features(box, spec, num_freqs)
            rc[i, j] = box.category_id
            rv[i, j] = True
        for v, cam in enumerate(rig):
            for j, box in enumerate(visible_boxes_for_view(boxes, cam)):
                cf[i, v, j] = perspective_corner_features(box, cam, d_max, num_freqs)
                cc[i, v, j] = box.category_id
                cv[i, v, j] = True
    return SceneConditions(tag_ids, rf, rc, rv, cf, cc, cv)


def conditions_for_records(records, d_max: float, num_freqs: int = 6) -> SceneConditions:
    rec0 = records[0]
    return build_conditions([(r.boxes, r.tags) for r in records], rec0.lidar, rec0.rig, d_max, num_freqs)


def draw_drop_flags(batch: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """``(B, 2)`` keep flags for the tag group and the box group, drawn independently."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("drop rate must be in [0, 1]")
    return rng.uniform(size=(batch, 2)) >= rate


@dataclass
class ConditionTokens:
    """One scene's token stream: 2 tag slots followed by 8 box slots."""

    tokens: torch.Tensor        # (10, dim)
    mask: torch.Tensor          # (10,) slot holds a real condition
    provenance: tuple[str, ...]


def drop_conditions(tokens: ConditionTokens, rate: float, rng: np.random.Generator,
                    null_token: torch.Tensor) -> ConditionTokens:
    keep_tags, keep_boxes = draw_drop_flags(1, rate, rng)[0]
    out = tokens.tokens.clone()
    mask = tokens.mask.clone()
    prov = list(tokens.provenance)
    groups = ((slice(0, NUM_TAG_SLOTS), keep_tags), (slice(NUM_TAG_SLOTS, NUM_SLOTS), keep_boxes))
    for sl, keep in groups:
        if not keep:
            out[sl] = null_token
            mask[sl] = False
            for k in range(sl.start, sl.stop):
                prov[k] = NULL
    return ConditionTokens(out, mask, tuple(prov))


class BoxEncoder(nn.Module):
    def __init__(self, feat_dim: int, dim: int):
        super().__init__()
        self.category = nn.Embedding(len(CATEGORIES), dim)
        self.mlp_p = MLP(feat_dim, dim, dim)
        self.mlp_b = MLP(2 * dim, dim, dim)

    def forward(self, feats: torch.Tensor, cats: torch.Tensor) -> torch.Tensor:
        return self.mlp_b(torch.cat([self.category(cats), self.mlp_p(feats)], dim=-1))


class ConditionEncoder(nn.Module):
    """Learned tag tables, a shared null token and one box encoder per branch."""

    def __init__(self, dim: int = 64, num_freqs: int = 6):
        super().__init__()
        feat = 8 * 3 * 2 * num_freqs
        self.brightness = nn.Embedding(len(BRIGHTNESS_TAGS), dim)
        self.weather = nn.Embedding(len(WEATHER_TAGS), dim)
        self.null_token = nn.Parameter(torch.zeros(1, dim))
        self.range_boxes = BoxEncoder(feat, dim)
        self.cam_boxes = BoxEncoder(feat, dim)
        self.dim = dim

    def _assemble(self, tag_tok, box_tok, box_valid, keep):
        """``tag_tok (..., 2, D)``, ``box_tok (..., 8, D)`` -> ``(..., 10, D)`` with nulls filled in."""
        null = self.null_token.to(tag_tok.dtype)
        keep_tags = keep[..., 0, None, None]
        keep_boxes = keep[..., 1, None, None]
        tags = torch.where(keep_tags, tag_tok, null)
        boxes = torch.where(box_valid[..., None] & keep_boxes, box_tok, null)
        return torch.cat([tags, boxes], dim=-2)

    def tag_tokens(self, tag_ids: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.brightness(tag_ids[..., 0]), self.weather(tag_ids[..., 1])], dim=-2)

    def forward(self, cond: SceneConditions, keep: Optional[np.ndarray] = None,
                dtype: Optional[torch.dtype] = None):
        """Returns range tokens ``(B, 10, D)`` and camera tokens ``(B*V, 10, D)``.

        ``keep`` holds per-scene ``(keep_tags, keep_boxes)`` flags; ``None``
        keeps everything.
        """
        dtype = dtype or self.null_token.dtype
        b = cond.batch_size
        nv = cond.cam_feats.shape[1]
        keep_t = torch.ones(b, 2, dtype=torch.bool) if keep is None else torch.as_tensor(keep, dtype=torch.bool)
        tags = self.tag_tokens(torch.as_tensor(cond.tag_ids)).to(dtype)
        rbox = self.range_boxes(torch.as_tensor(cond.range_feats, dtype=dtype), torch.as_tensor(cond.range_cats))
        range_tokens = self._assemble(tags, rbox, torch.as_tensor(cond.range_valid), keep_t)
        cbox = self.cam_boxes(torch.as_tensor(cond.cam_feats, dtype=dtype), torch.as_tensor(cond.cam_cats))
        cam_tokens = self._assemble(tags[:, None].expand(b, nv, 2, self.dim), cbox,
                                    torch.as_tensor(cond.cam_valid), keep_t[:, None].expand(b, nv, 2))
        return range_tokens, cam_tokens.reshape(b * nv, NUM_SLOTS, self.dim)

    def null_tokens(self, b: int, nv: int):
        null = self.null_token
        return null.expand(b, NUM_SLOTS, self.dim), null.expand(b * nv, NUM_SLOTS, self.dim)

    def scene_tokens(self, cond: SceneConditions, index: int = 0, view: Optional[int] = None) -> ConditionTokens:
        """Single-scene token stream with provenance, for inspection and per-sample dropping."""
        sub = cond.select(slice(index, index + 1))
        rt, ct = self(sub)
        if view is None:
            tokens, valid = rt[0], sub.range_valid[0]
        else:
            tokens, valid = ct[view], sub.cam_valid[0, view]
        prov = (TAG, TAG) + tuple(BOX if v else NULL for v in valid)
        mask = torch.tensor([True, True] + [bool(v) for v in valid])
        return ConditionTokens(tokens, mask, prov)
