"""Trainable blocks, the range-image VAE, the two UNet denoisers and checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class MissingHookError(KeyError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# Primitive blocks
# --------------------------------------------------------------------------

def fourier_embed(x, num_freqs: int = 6):
    """``[sin(2^l pi x), cos(2^l pi x)]`` for ``l < num_freqs``, interleaved on the last axis."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    if isinstance(x, torch.Tensor):
        freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype, device=x.device)) * math.pi
        ang = x[..., None] * freqs
        return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    x = np.asarray(x, dtype=np.float64)
    ang = x[..., None] * (2.0 ** np.arange(num_freqs)) * np.pi
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape, 2 * num_freqs)


def circular_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
                    stride: int = 1, padding: Optional[int] = None, circular: bool = True) -> torch.Tensor:
    """Cross-correlation with wrap-around padding on the width axis and zeros on the height axis."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    ph = weight.shape[-2] // 2 if padding is None else padding
    pw = weight.shape[-1] // 2 if padding is None else padding
    if circular:
        if pw:
            x = F.pad(x, (pw, pw, 0, 0), mode="circular")
        return F.conv2d(x, weight, bias, stride=stride, padding=(ph, 0))
    return F.conv2d(x, weight, bias, stride=stride, padding=(ph, pw))


def he_init_(weight: torch.Tensor, generator: torch.Generator) -> None:
    fan_in = weight[0].numel()
    with torch.no_grad():
        weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, circular: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.stride = stride
        self.circular = circular

    def forward(self, x):
        return circular_conv2d(x, self.weight, self.bias, self.stride, circular=self.circular)


class Linear(nn.Linear):
    pass


def group_norm(ch: int) -> nn.GroupNorm:
    groups = 8 if ch % 8 == 0 else 1
    return nn.GroupNorm(groups, ch)


class Gate(nn.Module):
    """Zero-initialized scalar gate: ``x + tanh(alpha) * y``.

    ``clamped`` pins the gate shut permanently (used for the no-cross-modality
    ablation); ``alpha`` then never receives gradient.
    """

    def __init__(self):
        super().__init__()
        self.alpha = nn.Parameter(torch.zeros(()))
        self.clamped = False

    def scale(self) -> torch.Tensor:
        if self.clamped:
            return torch.zeros((), dtype=self.alpha.dtype)
        return torch.tanh(self.alpha)

    def forward(self, x, y):
        return gated_residual(x, y, self)


def gated_residual(x, y, gate: Gate):
    if x.shape != y.shape:
        raise ValueError(f"gated residual shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return x + gate.scale() * y


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention with learned projections.

    ``mask`` (broadcastable to ``(..., N, M)``) marks usable keys; query rows
    with no usable key return exactly zero.
    """

    def __init__(self, q_dim: int, kv_dim: int, width: Optional[int] = None):
        super().__init__()
        width = width or q_dim
        self.to_q = Linear(q_dim, width, bias=False)
        self.to_k = Linear(kv_dim, width, bias=False)
        self.to_v = Linear(kv_dim, width, bias=False)
        self.to_out = Linear(width, q_dim)
        self.width = width

    def forward(self, queries, keys_values, mask: Optional[torch.Tensor] = None):
        if keys_values.shape[-2] < 1:
            raise ValueError("attention needs at least one key")
        q = self.to_q(queries)
        k = self.to_k(keys_values)
        v = self.to_v(keys_values)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(self.width)
        if mask is None:
            return self.to_out(torch.softmax(logits, dim=-1) @ v)
        mask = mask.expand(logits.shape)
        logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
        weights = torch.softmax(logits, dim=-1) * mask
        any_valid = mask.any(dim=-1, keepdim=True).to(q.dtype)
        return self.to_out(weights @ v) * any_valid


class MLP(nn.Sequential):
    def __init__(self, din: int, dhidden: int, dout: int):
        super().__init__(Linear(din, dhidden), nn.SiLU(), Linear(dhidden, dout))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, circular: bool, temb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = group_norm(cin)
        self.conv1 = Conv(cin, cout, 3, circular=circular)
        self.norm2 = group_norm(cout)
        self.conv2 = Conv(cout, cout, 3, circular=circular)
        self.skip = Conv(cin, cout, 1) if cin != cout else None
        self.has_temb = temb_dim is not None

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.has_temb:
            h = h + temb[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: int, circular: bool):
        super().__init__()
        self.conv = Conv(cin, cout, 3, stride=2, circular=circular)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int, circular: bool):
        super().__init__()
        self.conv = Conv(ch, ch, 3, circular=circular)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def grid_to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def tokens_to_grid(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], h, w)


class ConditionAttention(nn.Module):
    def __init__(self, ch: int, cond_dim: int):
        super().__init__()
        self.norm = group_norm(ch)
        self.attn = CrossAttention(ch, cond_dim, ch)

    def forward(self, x, tokens, mask=None):
        b, c, h, w = x.shape
        q = grid_to_tokens(self.norm(x))
        out = self.attn(q, tokens, None if mask is None else mask[:, None, :])
        return x + tokens_to_grid(out, h, w)


class InterViewAttention(nn.Module):
    """Each view's left half attends to the left neighbour's right half and vice versa."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = group_norm(ch)
        self.attn = CrossAttention(ch, ch, ch)
        self.gate = Gate()

    def forward(self, x, num_views: int):
        bv, c, h, w = x.shape
        b = bv // num_views
        half = w // 2
        z = self.norm(x).reshape(b, num_views, c, h, w)
        left, right = z[..., :half], z[..., half:]
        # view v's left neighbour is v + 1, its right neighbour v - 1
        right_of_left_nb = right.roll(-1, dims=1)
        left_of_right_nb = left.roll(1, dims=1)

        def attend(q, kv):
            qq = q.reshape(bv, c, h, -1)
            kk = kv.reshape(bv, c, h, -1)
            out = self.attn(grid_to_tokens(qq), grid_to_tokens(kk))
            return tokens_to_grid(out, h, qq.shape[-1])

        y = torch.cat([attend(left, right_of_left_nb), attend(right, left_of_right_nb)], dim=-1)
        return gated_residual(x, y, self.gate)


# --------------------------------------------------------------------------
# Range-image VAE
# --------------------------------------------------------------------------

class RangeVAE(nn.Module):
    """Circular-convolution VAE: ``(2, H, W)`` range images to ``(latent, H/2, W/2)`` latents."""

    def __init__(self, channels: tuple[int, int] = (32, 64), latent_channels: int = 4):
        super().__init__()
        c0, c1 = channels
        self.enc_in = Conv(2, c0, 3, circular=True)
        self.enc_block0 = ResBlock(c0, c0, circular=True)
        self.enc_down = Downsample(c0, c0, circular=True)
        self.enc_block1 = ResBlock(c0, c1, circular=True)
        self.enc_norm = group_norm(c1)
        self.enc_out = Conv(c1, 2 * latent_channels, 3, circular=True)
        self.dec_in = Conv(latent_channels, c1, 3, circular=True)
        self.dec_block1 = ResBlock(c1, c1, circular=True)
        self.dec_up = Upsample(c1, circular=True)
        self.dec_block0 = ResBlock(c1, c0, circular=True)
        self.dec_norm = group_norm(c0)
        self.dec_out = Conv(c0, 2, 3, circular=True)
        self.latent_channels = latent_channels
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, r: torch.Tensor):
        h = self.enc_in(r)
        h = self.enc_block0(h)
        h = self.enc_down(h)
        h = self.enc_block1(h)
        h = self.enc_out(F.silu(self.enc_norm(h)))
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    @staticmethod
    def reparameterize(mean, logvar, eps):
        return mean + torch.exp(0.5 * logvar) * eps

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.dec_in(z)
        h = self.dec_block1(h)
        h = self.dec_up(h)
        h = self.dec_block0(h)
        return torch.sigmoid(self.dec_out(F.silu(self.dec_norm(h))))


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean over latent elements (and batch) of ``KL(N(mean, exp(logvar)) || N(0, 1))``."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


KL_WEIGHT = 1e-4


def vae_loss(vae: RangeVAE, r: torch.Tensor, eps: torch.Tensor):
    """Returns ``(total, recon, kl)``; ``total = recon + 1e-4 * kl``."""
    mean, logvar = vae.encode(r)
    recon = F.mse_loss(vae.decode(vae.reparameterize(mean, logvar, eps)), r)
    kl = gaussian_kl(mean, logvar)
    return recon + KL_WEIGHT * kl, recon, kl


# --------------------------------------------------------------------------
# UNet denoisers
# --------------------------------------------------------------------------

NUM_SITES = 5


@dataclass
class LevelSpec:
    channels: int
    condition_attention: bool = True
    interview_attention: bool = False
    xmodal_site: Optional[int] = None


@dataclass
class UNetSpec:
    in_channels: int
    base_channels: int = 32
    multipliers: tuple[int, int] = (1, 2)
    circular: bool = False
    num_views: Optional[int] = None
    cond_dim: int = 64
    time_freqs: int = 6
    time_width: int = 64
    interview_levels: tuple[str, ...] = ("down1", "mid", "up1")
    levels: dict[str, LevelSpec] = field(default_factory=dict)

    def __post_init__(self):
        c0 = self.base_channels * self.multipliers[0]
        c1 = self.base_channels * self.multipliers[1]
        names = ("down0", "down1", "mid", "up1", "up0")
        chans = (c0, c1, c1, c1, c0)
        if not self.levels:
            self.levels = {
                n: LevelSpec(ch, True, self.num_views is not None and n in self.interview_levels, site)
                for site, (n, ch) in enumerate(zip(names, chans))
            }
        ups = [self.levels["up1"].channels, self.levels["up0"].channels]
        downs = [self.levels["down1"].channels, self.levels["down0"].channels]
        if ups != downs:
            raise ValueError("down and up levels must mirror")


class Level(nn.Module):
    def __init__(self, cin: int, spec: LevelSpec, circular: bool, cond_dim: int, time_in: int,
                 time_width: int):
        super().__init__()
        ch = spec.channels
        self.time_mlp = MLP(time_in, time_width, ch)
        self.block1 = ResBlock(cin, ch, circular, temb_dim=ch)
        self.block2 = ResBlock(ch, ch, circular, temb_dim=ch)
        self.cond_attn = ConditionAttention(ch, cond_dim) if spec.condition_attention else None
        self.interview = InterViewAttention(ch) if spec.interview_attention else None

    def forward(self, x, tfeat, tokens, num_views):
        temb = self.time_mlp(tfeat)
        h = self.block1(x, temb)
        h = self.block2(h, temb)
        if self.cond_attn is not None:
            h = self.cond_attn(h, tokens)
        if self.interview is not None:
            h = self.interview(h, num_views)
        return h


Hook = Callable[[torch.Tensor], torch.Tensor]


class UNet(nn.Module):
    """Two-resolution UNet with five hook sites (2 down, 1 mid, 2 up).

    :meth:`staged` is a generator yielding ``(site, features)`` at every site
    and expecting the (possibly updated) features back via ``send``; this lets
    two branches run in lockstep and exchange features between sites.
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        lv = spec.levels
        circ = spec.circular
        c0, c1 = lv["down0"].channels, lv["down1"].channels
        tin = 2 * spec.time_freqs
        args = (circ, spec.cond_dim, tin, spec.time_width)
        self.conv_in = Conv(spec.in_channels, c0, 3, circular=circ)
        self.down0 = Level(c0, lv["down0"], *args)
        self.downsample = Downsample(c0, c0, circ)
        self.down1 = Level(c0, lv["down1"], *args)
        self.mid = Level(c1, lv["mid"], *args)
        self.up1 = Level(c1 + c1, lv["up1"], *args)
        self.upsample = Upsample(c1, circ)
        self.up0 = Level(c1 + c0, lv["up0"], *args)
        self.norm_out = group_norm(c0)
        self.conv_out = Conv(c0, spec.in_channels, 3, circular=circ)

    @property
    def site_channels(self) -> list[int]:
        return [self.spec.levels[n].channels for n in ("down0", "down1", "mid", "up1", "up0")]

    def time_features(self, t: torch.Tensor, num_steps: int) -> torch.Tensor:
        x = 2.0 * t.to(self.conv_in.weight.dtype) / num_steps - 1.0
        return fourier_embed(x, self.spec.time_freqs)

    def staged(self, x, tfeat, tokens) -> Iterator[tuple[int, torch.Tensor]]:
        nv = self.spec.num_views
        h = self.conv_in(x)
        h = self.down0(h, tfeat, tokens, nv)
        skip0 = yield 0, h
        h = self.downsample(skip0)
        h = self.down1(h, tfeat, tokens, nv)
        skip1 = yield 1, h
        h = self.mid(skip1, tfeat, tokens, nv)
        h = yield 2, h
        h = self.up1(torch.cat([h, skip1], dim=1), tfeat, tokens, nv)
        h = yield 3, h
        h = self.upsample(h)
        h = self.up0(torch.cat([h, skip0], dim=1), tfeat, tokens, nv)
        h = yield 4, h
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(self, x, tfeat, tokens, hooks: Optional[Mapping[int, Hook]] = None):
        """Run the whole network; ``hooks`` maps every site index to a feature update."""
        if hooks is not None:
            missing = [s for s in range(NUM_SITES) if s not in hooks]
            if missing:
                raise MissingHookError(f"no hook registered for sites {missing}")
        gen = self.staged(x, tfeat, tokens)
        site, h = next(gen)
        while True:
            if hooks is not None:
                h = hooks[site](h)
            try:
                site, h = gen.send(h)
            except StopIteration as stop:
                return stop.value


# --------------------------------------------------------------------------
# Parameter store and checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"XCK1"


@dataclass
class RngState:
    """Counter-based RNG state: stream for step ``n`` is ``SeedSequence([key, n])``."""

    key: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.key, self.counter]))

    def advance(self) -> np.random.Generator:
        gen = self.generator()
        self.counter += 1
        return gen

    def to_bytes(self) -> bytes:
        return struct.pack("<QQ", self.counter, self.key)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RngState":
        counter, key = struct.unpack("<QQ", blob)
        return cls(key=key, counter=counter)


@dataclass
class ParamStore:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng: RngState = field(default_factory=RngState)

    def add(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float32, order="C")
        if name in self.entries and self.entries[name].shape != arr.shape:
            raise CheckpointError(f"entry {name!r} cannot change shape {self.entries[name].shape} -> {arr.shape}")
        self.entries[name] = arr

    def update_from_module(self, module: nn.Module, prefix: str = "") -> None:
        for name, t in module.state_dict().items():
            self.add(prefix + name, t.detach().cpu().numpy())

    def load_into_module(self, module: nn.Module, prefix: str = "", strict: bool = True) -> None:
        state = module.state_dict()
        missing = []
        for name, t in state.items():
            key = prefix + name
            if key not in self.entries:
                missing.append(key)
                continue
            arr = self.entries[key]
            if tuple(arr.shape) != tuple(t.shape):
                raise CheckpointError(f"{key}: shape {arr.shape} != {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.from_numpy(arr).to(t.dtype))
        if strict and missing:
            raise CheckpointError(f"checkpoint lacks entries: {missing[:5]}")

    def names_with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def save(self, path) -> None:
        out = [CKPT_MAGIC, struct.pack("<I", len(self.entries))]
        for name, arr in self.entries.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.astype("<f4").tobytes())
        out.append(struct.pack("<Q", self.step))
        out.append(self.rng.to_bytes())
        Path(path).write_bytes(b"".join(out))

    @classmethod
    def load(cls, path) -> "ParamStore":
        data = Path(path).read_bytes()
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(data):
                raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        if take(4, "magic") != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic at byte 0")
        (count,) = struct.unpack("<I", take(4, "count"))
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2, "name length"))
            name = take(nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(4 * n, f"{name} data"), dtype="<f4").reshape(dims).astype(np.float32)
            if name in entries:
                raise CheckpointError(f"{path}: duplicate entry {name!r}")
            entries[name] = arr
        (step,) = struct.unpack("<Q", take(8, "step"))
        rng = RngState.from_bytes(take(16, "rng state"))
        if pos != len(data):
            raise CheckpointError(f"{path}: trailing bytes at byte {pos}")
        return cls(entries, step, rng)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_module(module: nn.Module, seed: int) -> None:
    """He-style fan-in init for every conv/linear weight, zero biases and gates, seeded."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        if name.endswith("alpha"):
            with torch.no_grad():
                p.zero_()
        elif p.ndim >= 2:
            he_init_(p, gen)
        elif name.endswith("bias"):
            with torch.no_grad():
                p.zero_()
