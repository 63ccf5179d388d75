"""Flat ``key=value`` run configuration with typed defaults and named seed streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np

from .diffusion import ModelConfig, TrainConfig
from .scenesim import SimConfig


class ConfigError(ValueError):
    """Bad key or value; ``key`` names the offender."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # simulator and dataset split
    "sim.num_scenes": 256,
    "sim.holdout": 64,
    "sim.num_beams": 16,
    "sim.azimuth_bins": 256,
    "sim.r_max": 40.0,
    "sim.num_views": 4,
    "sim.image_width": 64,
    "sim.image_height": 32,
    "sim.hfov_deg": 100.0,
    "sim.min_boxes": 2,
    "sim.max_boxes": 8,
    "sim.fog_prob": 0.25,
    # networks
    "model.base_channels": 32,
    "model.latent_channels": 4,
    "model.vae_channels": "32,64",
    "model.cond_dim": 64,
    "model.time_width": 64,
    "model.fourier_freqs": 6,
    "model.sample_counts": "12,8,6,8,12",
    "model.cap_min": 1.0,
    "model.cap_max": 40.0,
    "model.xmodal": "attn",
    # training, one block per stage
    "train.drop_rate": 0.25,
    "train.grad_clip": 1.0,
    "train.log_every": 50,
    "train.vae.steps": 600,
    "train.vae.batch": 16,
    "train.vae.lr": 2e-3,
    "train.range.steps": 400,
    "train.range.batch": 8,
    "train.range.lr": 1e-3,
    "train.joint.steps": 300,
    "train.joint.batch": 4,
    "train.joint.lr": 1e-3,
    # sampling
    "sample.steps": 100,
    "sample.cfg_scale": 1.0,
    "sample.count": 64,
    "sample.chunk": 8,
    # evaluation
    "eval.split": "holdout",
    "eval.metrics": "das,mmd,jsd,overlap,img_mmd",
}

CHOICES = {
    "model.xmodal": ("attn", "avg", "off"),
    "eval.split": ("holdout", "train", "all"),
}

# Named sub-streams of the master seed.  Stream ``name`` with index ``i``
# uses ``SeedSequence([seed, STREAMS[name], i])``.
STREAMS = {"sim": 0, "init": 1, "train": 2, "sample": 3}


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            text = str(raw).lower()
            if text not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            value = text in ("true", "1")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(key, f"must be one of {', '.join(CHOICES[key])}")
    return value


def _int_list(key: str, text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(key, f"expected comma-separated integers, got {text!r}") from None


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_mapping(cls, items: Mapping[str, Any]) -> "RunConfig":
        cfg = cls()
        cfg.update(items)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_lines(Path(path).read_text().splitlines()))

    def update(self, items: Mapping[str, Any]) -> None:
        for key, raw in items.items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown key")
            self.values[key] = _coerce(key, raw)
        self.validate()

    def validate(self) -> None:
        v = self.values
        if not 0 < v["sim.holdout"] < v["sim.num_scenes"]:
            raise ConfigError("sim.holdout", "must be positive and below sim.num_scenes")
        if not 0.0 <= v["train.drop_rate"] <= 1.0:
            raise ConfigError("train.drop_rate", "must lie in [0, 1]")
        if len(_int_list("model.sample_counts", v["model.sample_counts"])) != 5:
            raise ConfigError("model.sample_counts", "needs one count per site (5)")
        _int_list("model.vae_channels", v["model.vae_channels"])
        for key in ("sample.steps", "sample.count", "sample.chunk"):
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **items) -> "RunConfig":
        out = RunConfig(dict(self.values))
        out.update({k.replace("__", "."): val for k, val in items.items()})
        return out

    def dump(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in DEFAULTS)

    # -- typed views --------------------------------------------------------

    def sim_config(self) -> SimConfig:
        v = self.values
        return SimConfig(num_beams=v["sim.num_beams"], azimuth_bins=v["sim.azimuth_bins"], r_max=v["sim.r_max"],
                         num_views=v["sim.num_views"], image_width=v["sim.image_width"],
                         image_height=v["sim.image_height"], hfov_deg=v["sim.hfov_deg"],
                         min_boxes=v["sim.min_boxes"], max_boxes=v["sim.max_boxes"], fog_prob=v["sim.fog_prob"])

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(base_channels=v["model.base_channels"], latent_channels=v["model.latent_channels"],
                           vae_channels=_int_list("model.vae_channels", v["model.vae_channels"]),
                           cond_dim=v["model.cond_dim"], fourier_freqs=v["model.fourier_freqs"],
                           time_width=v["model.time_width"],
                           sample_counts=_int_list("model.sample_counts", v["model.sample_counts"]),
                           caps=(v["model.cap_min"], v["model.cap_max"]), xmodal=v["model.xmodal"])

    def train_config(self, stage: str) -> TrainConfig:
        block = {"vae": "vae", "range_ldm": "range", "joint": "joint"}[stage]
        v = self.values
        return TrainConfig(steps=v[f"train.{block}.steps"], batch=v[f"train.{block}.batch"],
                           lr=v[f"train.{block}.lr"], drop_rate=v["train.drop_rate"],
                           seed=derive_seed(v["seed"], "train", STAGE_INDEX[stage]),
                           log_every=v["train.log_every"], grad_clip=v["train.grad_clip"])


STAGE_INDEX = {"vae": 0, "range_ldm": 1, "joint": 2}


def _fmt(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def parse_lines(lines: Iterable[str]) -> dict[str, str]:
    """``key=value`` per line; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"line {n}", f"expected key=value, got {line.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def derive_seed(master: int, stream: str, index: int = 0) -> int:
    """32-bit seed of sub-stream ``stream`` (``sim``, ``init``, ``train``, ``sample``)."""
    return int(np.random.SeedSequence([master, STREAMS[stream], index]).generate_state(1)[0])


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    cfg = RunConfig.from_file(path) if path else RunConfig()
    if seed is not None:
        cfg.update({"seed": seed})
    return cfg
