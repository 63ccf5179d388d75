"""Noise schedule, joint objective, guided ancestral sampling and the three training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditionEncoder, SceneConditions, conditions_for_records, draw_drop_flags
from .geometry import CameraRig, LidarSpec
from .netblocks import (
    NUM_SITES,
    ParamStore,
    RangeVAE,
    RngState,
    UNet,
    UNetSpec,
    init_module,
    vae_loss,
)
from .xmodal import CAPS, SAMPLE_COUNTS, SiteOrderError, XModal

STAGES = ("vae", "range_ldm", "joint")


class PrerequisiteError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Schedule and forward process
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by ``t - 1`` for ``t = 1..T``."""

    betas: np.ndarray
    alphas: np.ndarray
    alphabar: np.ndarray

    @property
    def T(self) -> int:
        return self.betas.size

    def ab(self, t) -> np.ndarray:
        """``alphabar_t`` with the convention ``alphabar_0 = 1``."""
        t = np.asarray(t)
        return np.where(t > 0, self.alphabar[np.maximum(t, 1) - 1], 1.0)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _bcast(v: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(v, dtype=like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`` with one ``t`` per leading-axis item."""
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != input shape {tuple(x0.shape)}")
    ab = sched.ab(np.broadcast_to(np.asarray(t), (x0.shape[0],)))
    return _bcast(np.sqrt(ab), x0) * x0 + _bcast(np.sqrt(1.0 - ab), x0) * eps


def cfg_combine(eps_cond, eps_uncond, scale: float):
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("guidance inputs differ in shape")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sampling_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Uniformly strided, strictly decreasing, ending at 1."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}]")
    if num_steps == 1:
        return np.array([T])
    ts = np.round(np.linspace(T, 1, num_steps)).astype(np.int64)
    assert np.all(np.diff(ts) < 0) and ts[-1] == 1
    return ts


# --------------------------------------------------------------------------
# Model container
# --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    base_channels: int = 32
    multipliers: tuple[int, int] = (1, 2)
    latent_channels: int = 4
    vae_channels: tuple[int, int] = (32, 64)
    cond_dim: int = 64
    fourier_freqs: int = 6
    time_width: int = 64
    sample_counts: tuple[int, ...] = SAMPLE_COUNTS
    caps: tuple[float, float] = CAPS
    interview_levels: tuple[str, ...] = ("down1", "mid", "up1")
    xmodal: str = "attn"          # attn | avg | off (gates clamped shut)
    num_timesteps: int = 1000


class JointModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rig: CameraRig, spec: LidarSpec):
        super().__init__()
        self.cfg, self.rig, self.spec = cfg, rig, spec
        self.num_views = len(rig)
        self.vae = RangeVAE(cfg.vae_channels, cfg.latent_channels)
        self.cond = ConditionEncoder(cfg.cond_dim, cfg.fourier_freqs)
        common = dict(base_channels=cfg.base_channels, multipliers=cfg.multipliers, cond_dim=cfg.cond_dim,
                      time_freqs=cfg.fourier_freqs, time_width=cfg.time_width)
        self.range_unet = UNet(UNetSpec(cfg.latent_channels, circular=True, **common))
        self.cam_unet = UNet(UNetSpec(3, circular=False, num_views=self.num_views,
                                      interview_levels=cfg.interview_levels, **common))
        mode = "attn" if cfg.xmodal == "off" else cfg.xmodal
        self.xmodal = XModal(rig, spec, self.range_unet.site_channels, self.cam_unet.site_channels,
                             cfg.sample_counts, cfg.caps, cfg.fourier_freqs, mode)
        if cfg.xmodal == "off":
            self.xmodal.clamp(True)
        self.schedule = make_schedule(cfg.num_timesteps)

    @property
    def d_max(self) -> float:
        return self.cfg.caps[1]

    def conditions(self, records) -> SceneConditions:
        return conditions_for_records(records, self.d_max, self.cfg.fourier_freqs)

    def tfeat(self, unet: UNet, t: torch.Tensor) -> torch.Tensor:
        return unet.time_features(t, self.cfg.num_timesteps)

    def encode_range(self, r: torch.Tensor, eps: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Scaled latent of range images; the mean when ``eps`` is ``None``."""
        mean, logvar = self.vae.encode(r)
        z = mean if eps is None else self.vae.reparameterize(mean, logvar, eps)
        return z * self.vae.latent_scale

    def decode_range(self, z: torch.Tensor) -> torch.Tensor:
        return self.vae.decode(z / self.vae.latent_scale)

    @property
    def min_return(self) -> float:
        """Normalized range below which a generated cell counts as empty (the lower range cap)."""
        return self.cfg.caps[0] / self.spec.r_max

    def latent_shape(self) -> tuple[int, int, int]:
        h, w = self.spec.shape
        return self.cfg.latent_channels, h // 2, w // 2


def build_model(cfg: ModelConfig, rig: CameraRig, spec: LidarSpec, seed: int) -> JointModel:
    model = JointModel(cfg, rig, spec)
    init_module(model, seed)
    return model


# --------------------------------------------------------------------------
# Denoising
# --------------------------------------------------------------------------

def joint_denoise(model: JointModel, z_t: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
                  tok_r: torch.Tensor, tok_c: torch.Tensor, trace: Optional[list] = None):
    """Run both UNets in lockstep, exchanging features at all five sites.

    ``z_t`` is ``(B, C, h, w)``, ``x_t`` is ``(B*V, 3, H, W)``, ``t`` is ``(B,)``.
    """
    nv = model.num_views
    t_c = t.repeat_interleave(nv)
    gen_r = model.range_unet.staged(z_t, model.tfeat(model.range_unet, t), tok_r)
    gen_c = model.cam_unet.staged(x_t, model.tfeat(model.cam_unet, t_c), tok_c)
    site_r, h_r = next(gen_r)
    site_c, h_c = next(gen_c)
    out_r = out_c = None
    for expected in range(NUM_SITES):
        if site_r != expected or site_c != expected:
            raise SiteOrderError(f"branches reached sites {site_r}/{site_c}, expected {expected}")
        h_r, h_c = model.xmodal.exchange_at_site(expected, h_r, h_c)
        if trace is not None:
            trace.append(("exchange", expected))
        try:
            site_r, h_r = gen_r.send(h_r)
        except StopIteration as stop:
            out_r = stop.value
        try:
            site_c, h_c = gen_c.send(h_c)
        except StopIteration as stop:
            out_c = stop.value
    if out_r is None or out_c is None:
        raise SiteOrderError("a branch declared more than the expected sites")
    return out_r, out_c


def range_denoise(model: JointModel, z_t, t, tok_r):
    return model.range_unet(z_t, model.tfeat(model.range_unet, t), tok_r)


# --------------------------------------------------------------------------
# Training objective
# --------------------------------------------------------------------------

@dataclass
class Batch:
    range_images: torch.Tensor     # (B, 2, H, W) in [0, 1]
    images: torch.Tensor           # (B*V, 3, H, W) in [-1, 1]
    cond: SceneConditions

    @property
    def size(self) -> int:
        return self.range_images.shape[0]


def make_batch(model: JointModel, records) -> Batch:
    r = np.stack([rec.range_image.values.transpose(2, 0, 1) for rec in records])
    imgs = np.stack([rec.images for rec in records])
    b, nv, h, w, _ = imgs.shape
    x = imgs.transpose(0, 1, 4, 2, 3).reshape(b * nv, 3, h, w) * 2.0 - 1.0
    return Batch(torch.as_tensor(r, dtype=torch.float32), torch.as_tensor(x, dtype=torch.float32),
                 model.conditions(records))


@dataclass
class LossParts:
    total: torch.Tensor
    range: torch.Tensor
    camera: Optional[torch.Tensor]


Denoiser = Callable[..., tuple]


def training_loss(model: JointModel, batch: Batch, rng: np.random.Generator, stage: str = "joint",
                  drop_rate: float = 0.25, denoiser: Optional[Denoiser] = None) -> LossParts:
    """Epsilon-prediction loss.

    Draw order from ``rng``: ``t`` per scene, VAE noise, range noise, camera
    noise (joint stage only), then the two condition-drop flags per scene.
    """
    if stage not in ("range_ldm", "joint"):
        raise ValueError(f"training_loss covers the diffusion stages, not {stage!r}")
    sched = model.schedule
    b = batch.size
    lat = (b,) + model.latent_shape()
    t_np = rng.integers(1, sched.T + 1, size=b)
    eps_vae = torch.as_tensor(rng.standard_normal(lat), dtype=torch.float32)
    eps_r = torch.as_tensor(rng.standard_normal(lat), dtype=torch.float32)
    eps_c = None
    if stage == "joint":
        eps_c = torch.as_tensor(rng.standard_normal(tuple(batch.images.shape)), dtype=torch.float32)
    keep = draw_drop_flags(b, drop_rate, rng)
    with torch.no_grad():
        z0 = model.encode_range(batch.range_images, eps_vae)
    t = torch.as_tensor(t_np)
    z_t = q_sample(z0, t_np, eps_r, sched)
    tok_r, tok_c = model.cond(batch.cond, keep)
    if stage == "range_ldm":
        pred_r = (denoiser or (lambda m, z, tt, tr: range_denoise(m, z, tt, tr)))(model, z_t, t, tok_r)
        loss_r = F.mse_loss(pred_r, eps_r)
        return LossParts(loss_r, loss_r, None)
    x_t = q_sample(batch.images, np.repeat(t_np, model.num_views), eps_c, sched)
    pred_r, pred_c = (denoiser or joint_denoise)(model, z_t, x_t, t, tok_r, tok_c)
    loss_r = F.mse_loss(pred_r, eps_r)
    loss_c = F.mse_loss(pred_c, eps_c)
    return LossParts(loss_r + loss_c, loss_r, loss_c)


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def _noise(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(shape), dtype=torch.float32)


def noise_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent per-modality noise streams: ``SeedSequence([seed, 0])`` range, ``[seed, 1]`` camera."""
    return (np.random.default_rng(np.random.SeedSequence([seed, 0])),
            np.random.default_rng(np.random.SeedSequence([seed, 1])))


def posterior_step(x: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
                   noise: Optional[torch.Tensor], clip: Optional[float] = None) -> torch.Tensor:
    """Ancestral step from ``t`` to ``t_prev`` with variance ``beta_tilde``."""
    ab_t, ab_p = float(sched.ab(t)), float(sched.ab(t_prev))
    x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
    if t_prev == 0:
        return x0
    alpha = ab_t / ab_p
    beta = 1.0 - alpha
    c0 = math.sqrt(ab_p) * beta / (1.0 - ab_t)
    ct = math.sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab_t)
    var = beta * (1.0 - ab_p) / (1.0 - ab_t)
    return c0 * x0 + ct * x + math.sqrt(var) * noise


@dataclass
class SampleOutput:
    range_images: np.ndarray      # (B, H, W, 2)
    images: np.ndarray            # (B, V, H, W, 3)
    timesteps: np.ndarray


def _to_range_np(r: torch.Tensor, min_return: float) -> np.ndarray:
    """Decoder output to range images.

    The decoder never emits an exact zero, so cells whose normalized range is
    below ``min_return`` are read as no-return (both channels zeroed).
    """
    out = r.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy().astype(np.float64)
    out[out[..., 0] < min_return] = 0.0
    return out


def _to_images_np(x: torch.Tensor, b: int, nv: int) -> np.ndarray:
    img = ((x.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0)
    _, c, h, w = img.shape
    return img.reshape(b, nv, c, h, w).permute(0, 1, 3, 4, 2).numpy().astype(np.float64)


def _guided(fn, cond_args, null_args, scale: float):
    """Evaluate ``fn`` on conditional (and null, unless ``scale == 1``) tokens and combine."""
    if scale == 1.0:
        return fn(*cond_args)
    both = [torch.cat([a, b_]) for a, b_ in zip(cond_args, null_args)]
    out = fn(*both)
    if isinstance(out, tuple):
        return tuple(cfg_combine(*o.chunk(2), scale) for o in out)
    return cfg_combine(*out.chunk(2), scale)


@torch.no_grad()
def sample_joint(model: JointModel, cond: SceneConditions, num_steps: int = 100, cfg_scale: float = 1.0,
                 seed: int = 0, streams=None, trace: Optional[list] = None) -> SampleOutput:
    """Lockstep ancestral sampling of both modalities with classifier-free guidance."""
    sched = model.schedule
    b, nv = cond.batch_size, model.num_views
    h, w = model.rig.image_shape
    rng_r, rng_c = streams or noise_streams(seed)
    lat = (b,) + model.latent_shape()
    cam = (b * nv, 3, h, w)
    z = _noise(rng_r, lat)
    x = _noise(rng_c, cam)
    tok_r, tok_c = model.cond(cond)
    null_r, null_c = model.cond.null_tokens(b, nv)
    ts = sampling_timesteps(sched.T, num_steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        tt = torch.full((b,), int(t))

        def run(zz, xx, tr, tc, tvec=tt):
            reps = zz.shape[0] // b
            return joint_denoise(model, zz, xx, tvec.repeat(reps), tr, tc, trace)

        eps_r, eps_c = _guided(run, (z, x, tok_r, tok_c), (z, x, null_r, null_c), cfg_scale)
        nz = _noise(rng_r, lat) if t_prev else None
        nx = _noise(rng_c, cam) if t_prev else None
        z = posterior_step(z, eps_r, int(t), t_prev, sched, nz)
        x = posterior_step(x, eps_c, int(t), t_prev, sched, nx, clip=1.0)
    return SampleOutput(_to_range_np(model.decode_range(z), model.min_return), _to_images_np(x, b, nv), ts)


def _snapshots(unet: UNet, x0: torch.Tensor, tfeat: torch.Tensor, tokens: torch.Tensor) -> list[torch.Tensor]:
    """Site-entry features of one clean forward pass with identity hooks."""
    snaps: list[torch.Tensor] = []

    def keep(h):
        snaps.append(h)
        return h

    unet(x0, tfeat, tokens, {s: keep for s in range(NUM_SITES)})
    return snaps


Probe = Callable[[str, torch.Tensor, torch.Tensor], None]


@torch.no_grad()
def sample_cross_modal(model: JointModel, direction: str, given: np.ndarray, cond: SceneConditions,
                       num_steps: int = 100, cfg_scale: float = 1.0, seed: int = 0,
                       probe: Optional[Probe] = None) -> SampleOutput:
    """Zero-shot conditional generation of one modality given the other.

    ``direction`` is ``"l2c"`` (``given`` = range images ``(B, H, W, 2)``) or
    ``"c2l"`` (``given`` = images ``(B, V, H, W, 3)``).  The given branch is
    run once at ``t = 0`` on the clean input; its site features are reused at
    every denoising step of the target branch.
    """
    if direction not in ("l2c", "c2l"):
        raise ValueError(f"direction must be l2c or c2l, got {direction!r}")
    sched = model.schedule
    b, nv = cond.batch_size, model.num_views
    h, w = model.rig.image_shape
    rng_r, rng_c = noise_streams(seed)
    tok_r, tok_c = model.cond(cond)
    null_r, null_c = model.cond.null_tokens(b, nv)
    t0 = torch.zeros(b, dtype=torch.int64)
    guided = cfg_scale != 1.0
    xm = model.xmodal
    ts = sampling_timesteps(sched.T, num_steps)

    if direction == "c2l":
        x0 = torch.as_tensor(np.asarray(given).transpose(0, 1, 4, 2, 3).reshape(b * nv, 3, h, w),
                             dtype=torch.float32) * 2.0 - 1.0
        enc_t = t0.repeat_interleave(nv)
        if probe is not None:
            probe("camera", enc_t, x0)
        tf_c = model.tfeat(model.cam_unet, enc_t)
        snaps = _snapshots(model.cam_unet, x0, tf_c, tok_c)
        if guided:
            nsnaps = _snapshots(model.cam_unet, x0, tf_c, null_c)
            snaps = [torch.cat([a, n]) for a, n in zip(snaps, nsnaps)]
        lat = (b,) + model.latent_shape()
        z = _noise(rng_r, lat)
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0

            def run(zz, tr, tvec=torch.full((b,), int(t))):
                hooks = {s: (lambda hh, s=s: xm.cam_to_lidar_condition(s, hh, snaps[s])) for s in range(NUM_SITES)}
                tv = tvec.repeat(zz.shape[0] // b)
                return model.range_unet(zz, model.tfeat(model.range_unet, tv), tr, hooks)

            eps = _guided(run, (z, tok_r), (z, null_r), cfg_scale)
            z = posterior_step(z, eps, int(t), t_prev, sched, _noise(rng_r, lat) if t_prev else None)
        r = _to_range_np(model.decode_range(z), model.min_return)
        return SampleOutput(r, np.asarray(given, dtype=np.float64), ts)

    r_given = torch.as_tensor(np.asarray(given).transpose(0, 3, 1, 2), dtype=torch.float32)
    z0 = model.encode_range(r_given)
    if probe is not None:
        probe("range", t0, z0)
    tf_r = model.tfeat(model.range_unet, t0)
    snaps = _snapshots(model.range_unet, z0, tf_r, tok_r)
    if guided:
        nsnaps = _snapshots(model.range_unet, z0, tf_r, null_r)
        snaps = [torch.cat([a, n]) for a, n in zip(snaps, nsnaps)]
    cam = (b * nv, 3, h, w)
    x = _noise(rng_c, cam)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0

        def run(xx, tc, tvec=torch.full((b * nv,), int(t))):
            hooks = {s: (lambda hh, s=s: xm.lidar_to_cam_condition(s, hh, snaps[s])) for s in range(NUM_SITES)}
            tv = tvec.repeat(xx.shape[0] // (b * nv))
            return model.cam_unet(xx, model.tfeat(model.cam_unet, tv), tc, hooks)

        eps = _guided(run, (x, tok_c), (x, null_c), cfg_scale)
        x = posterior_step(x, eps, int(t), t_prev, sched, _noise(rng_c, cam) if t_prev else None, clip=1.0)
    return SampleOutput(np.asarray(given, dtype=np.float64), _to_images_np(x, b, nv), ts)


def sample_in_chunks(fn, cond: SceneConditions, chunk: int, **kwargs) -> SampleOutput:
    """Apply a sampler to fixed-size chunks of scenes; chunk ``k`` uses seed ``seed * 1_000_003 + k``."""
    seed = kwargs.pop("seed", 0)
    given = kwargs.pop("given", None)
    parts = []
    for k, start in enumerate(range(0, cond.batch_size, chunk)):
        idx = slice(start, start + chunk)
        extra = {} if given is None else {"given": given[idx]}
        parts.append(fn(cond=cond.select(idx), seed=seed * 1_000_003 + k, **extra, **kwargs))
    return SampleOutput(np.concatenate([p.range_images for p in parts]),
                        np.concatenate([p.images for p in parts]), parts[0].timesteps)


# --------------------------------------------------------------------------
# Training stages
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    drop_rate: float = 0.25
    seed: int = 0
    probe_size: int = 8
    log_every: int = 50
    grad_clip: float = 1.0


@dataclass
class TrainResult:
    store: ParamStore
    losses: list[float] = field(default_factory=list)
    probe: list[tuple[int, float]] = field(default_factory=list)


STAGE_ID = {s: i + 1 for i, s in enumerate(STAGES)}
PROBE_COUNTER = 1 << 40


def trainable_parameters(model: JointModel, stage: str) -> list[tuple[str, nn.Parameter]]:
    if stage == "vae":
        prefixes = ("vae.",)
    elif stage == "range_ldm":
        prefixes = ("range_unet.", "cond.brightness.", "cond.weather.", "cond.null_token", "cond.range_boxes.")
    elif stage == "joint":
        prefixes = ("range_unet.", "cam_unet.", "cond.", "xmodal.")
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return [(n, p) for n, p in model.named_parameters() if n.startswith(prefixes)]


def stage_of(store: ParamStore) -> int:
    if "meta.stage" not in store.entries:
        return 0
    return int(store.entries["meta.stage"].reshape(-1)[0])


def check_prerequisites(stage: str, prior: Optional[ParamStore]) -> None:
    need = STAGE_ID[stage] - 1
    if need == 0:
        return
    have = 0 if prior is None else stage_of(prior)
    if have < need:
        raise PrerequisiteError(f"stage {stage!r} needs a stage-{STAGES[need - 1]!r} checkpoint "
                                f"(got {'none' if prior is None else 'stage ' + str(have)})")


def _stage_loss(model: JointModel, stage: str, records, rng: np.random.Generator, drop_rate: float):
    if stage == "vae":
        batch = make_batch(model, records)
        lat = (len(records),) + model.latent_shape()
        eps = torch.as_tensor(rng.standard_normal(lat), dtype=torch.float32)
        return vae_loss(model.vae, batch.range_images, eps)[0]
    return training_loss(model, make_batch(model, records), rng, stage, drop_rate).total


@torch.no_grad()
def probe_loss(model: JointModel, stage: str, records, tcfg: TrainConfig) -> float:
    """Loss on a fixed probe batch with fixed draws; comparable across steps."""
    rng = RngState(tcfg.seed, PROBE_COUNTER).generator()
    return float(_stage_loss(model, stage, records[: tcfg.probe_size], rng, tcfg.drop_rate))


@torch.no_grad()
def calibrate_latent_scale(model: JointModel, records, chunk: int = 32) -> float:
    """Set the latent scale to the inverse std of encoder means over ``records``."""
    model.vae.latent_scale.fill_(1.0)
    means = []
    for i in range(0, len(records), chunk):
        r = make_batch(model, records[i:i + chunk]).range_images
        means.append(model.vae.encode(r)[0])
    std = float(torch.cat(means).std())
    model.vae.latent_scale.fill_(1.0 / max(std, 1e-8))
    return 1.0 / max(std, 1e-8)


def _adam_to_store(store: ParamStore, opt: torch.optim.Adam, named) -> None:
    for name, p in named:
        st = opt.state.get(p)
        if not st:
            continue
        store.add(f"adam.{name}.exp_avg", st["exp_avg"].numpy())
        store.add(f"adam.{name}.exp_avg_sq", st["exp_avg_sq"].numpy())
        store.add(f"adam.{name}.step", np.asarray(float(st["step"])))


def _adam_from_store(store: ParamStore, opt: torch.optim.Adam, named) -> None:
    for name, p in named:
        key = f"adam.{name}.exp_avg"
        if key not in store.entries:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(store.entries[f"adam.{name}.step"])),
            "exp_avg": torch.from_numpy(store.entries[key].copy()),
            "exp_avg_sq": torch.from_numpy(store.entries[f"adam.{name}.exp_avg_sq"].copy()),
        }


def snapshot_store(model: JointModel, stage: str, step: int, rng: RngState,
                   opt: Optional[torch.optim.Adam] = None, named=None) -> ParamStore:
    store = ParamStore(step=step, rng=RngState(rng.key, rng.counter))
    store.update_from_module(model, "model.")
    store.add("meta.stage", np.asarray(float(STAGE_ID[stage])))
    if opt is not None:
        _adam_to_store(store, opt, named)
    return store


def load_model_state(model: JointModel, store: ParamStore) -> None:
    store.load_into_module(model, "model.")


def train_stage(stage: str, model: JointModel, records: Sequence, tcfg: TrainConfig,
                prior: Optional[ParamStore] = None, resume: Optional[ParamStore] = None,
                stop_at: Optional[int] = None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train one stage with Adam; returns the final checkpoint and logged losses.

    ``prior`` is the previous stage's checkpoint (loaded into ``model``);
    ``resume`` continues a partially-trained run of this stage bit-exactly.
    Step ``n`` draws its batch and noise from ``SeedSequence([seed, n])``.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    check_prerequisites(stage, prior)
    if prior is not None:
        load_model_state(model, prior)
    named = trainable_parameters(model, stage)
    for p in model.parameters():
        p.requires_grad_(False)
    for _, p in named:
        p.requires_grad_(True)
    opt = torch.optim.Adam([p for _, p in named], lr=tcfg.lr)
    rng = RngState(tcfg.seed, 0)
    result = TrainResult(ParamStore())
    if resume is not None:
        if stage_of(resume) != STAGE_ID[stage]:
            raise PrerequisiteError("resume checkpoint belongs to another stage")
        load_model_state(model, resume)
        _adam_from_store(resume, opt, named)
        rng = RngState(resume.rng.key, resume.rng.counter)
    else:
        result.probe.append((0, probe_loss(model, stage, records, tcfg)))
    end = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)
    n = len(records)
    model.train()
    while rng.counter < end:
        step = rng.counter
        gen = rng.advance()
        idx = gen.choice(n, size=min(tcfg.batch, n), replace=False)
        loss = _stage_loss(model, stage, [records[i] for i in idx], gen, tcfg.drop_rate)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if tcfg.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for _, p in named], tcfg.grad_clip)
        opt.step()
        result.losses.append(loss.item())
        if log is not None and (step % tcfg.log_every == 0 or step + 1 == end):
            log(f"stage={stage} step={step} loss={loss.item():.6f}")
    model.eval()
    if stage == "vae" and rng.counter >= tcfg.steps:
        calibrate_latent_scale(model, records)
    if rng.counter >= tcfg.steps:
        result.probe.append((rng.counter, probe_loss(model, stage, records, tcfg)))
    for p in model.parameters():
        p.requires_grad_(True)
    result.store = snapshot_store(model, stage, rng.counter, rng, opt, named)
    return result
