"""Glue between the run configuration and the data, training, sampling and evaluation modules."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffusion as dm
from . import evalkit
from .config import RunConfig, derive_seed
from .geometry import RangeImage
from .netblocks import ParamStore
from .scenesim import SceneRecord, export_ppm, make_record, read_dataset, write_dataset

Log = Callable[[str], None]

CKPT_NAMES = {"vae": "vae.xck", "range_ldm": "range.xck", "joint": "joint.xck"}
SAMPLE_MODES = ("joint", "l2c", "c2l")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _quiet(_: str) -> None:
    pass


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def generate_records(cfg: RunConfig, count: Optional[int] = None) -> list[SceneRecord]:
    """Scene ``i`` uses seed ``derive_seed(seed, "sim", i)``."""
    sim = cfg.sim_config()
    n = cfg["sim.num_scenes"] if count is None else count
    return [make_record(derive_seed(cfg["seed"], "sim", i), sim) for i in range(n)]


def split_records(cfg: RunConfig, records: Sequence[SceneRecord]):
    k = len(records) - cfg["sim.holdout"]
    return list(records[:k]), list(records[k:])


def gen_data(cfg: RunConfig, out, count: Optional[int] = None) -> tuple[list[SceneRecord], list[SceneRecord]]:
    train, held = split_records(cfg, generate_records(cfg, count))
    write_dataset(train, Path(out) / "train")
    write_dataset(held, Path(out) / "holdout")
    return train, held


def load_data(cfg: RunConfig, data_dir=None):
    """``(train, holdout)`` from a ``gen-data`` directory, or regenerated from the config."""
    if data_dir is None:
        return split_records(cfg, generate_records(cfg))
    root = Path(data_dir)
    return read_dataset(root / "train"), read_dataset(root / "holdout")


def eval_split(cfg: RunConfig, train, held) -> list[SceneRecord]:
    return {"holdout": held, "train": train, "all": list(train) + list(held)}[cfg["eval.split"]]


# --------------------------------------------------------------------------
# Models and training
# --------------------------------------------------------------------------

def new_model(cfg: RunConfig, xmodal: Optional[str] = None) -> dm.JointModel:
    mcfg = cfg.model_config()
    if xmodal is not None:
        mcfg.xmodal = xmodal
    sim = cfg.sim_config()
    return dm.build_model(mcfg, sim.camera_rig(), sim.lidar_spec(), derive_seed(cfg["seed"], "init"))


def model_from_store(cfg: RunConfig, store: ParamStore, xmodal: Optional[str] = None) -> dm.JointModel:
    model = new_model(cfg, xmodal)
    dm.load_model_state(model, store)
    model.eval()
    return model


def run_stage(cfg: RunConfig, stage: str, train: Sequence[SceneRecord], prior: Optional[ParamStore] = None,
              log: Log = _quiet, xmodal: Optional[str] = None) -> dm.TrainResult:
    model = new_model(cfg, xmodal)
    return dm.train_stage(stage, model, train, cfg.train_config(stage), prior=prior, log=log)


def write_loss_log(result: dm.TrainResult, path) -> None:
    lines = [f"loss.{i}={v!r}" for i, v in enumerate(result.losses)]
    lines += [f"probe.{step}={v!r}" for step, v in result.probe]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def sample_scenes(cfg: RunConfig, model: dm.JointModel, records: Sequence[SceneRecord], mode: str = "joint",
                  steps: Optional[int] = None, cfg_scale: Optional[float] = None,
                  seed: Optional[int] = None) -> dm.SampleOutput:
    """Sample one scene per conditioning record, in chunks of ``sample.chunk``."""
    if mode not in SAMPLE_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    steps = cfg["sample.steps"] if steps is None else steps
    scale = cfg["sample.cfg_scale"] if cfg_scale is None else cfg_scale
    seed = derive_seed(cfg["seed"], "sample", SAMPLE_MODES.index(mode)) if seed is None else seed
    cond = model.conditions(records)
    chunk = cfg["sample.chunk"]
    if mode == "joint":
        return dm.sample_in_chunks(dm.sample_joint, cond, chunk, model=model, num_steps=steps,
                                   cfg_scale=scale, seed=seed)
    if mode == "l2c":
        given = np.stack([r.range_image.values for r in records]).astype(np.float64)
    else:
        given = np.stack([r.images for r in records]).astype(np.float64)
    return dm.sample_in_chunks(dm.sample_cross_modal, cond, chunk, model=model, direction=mode, given=given,
                               num_steps=steps, cfg_scale=scale, seed=seed)


def as_records(out: dm.SampleOutput, conditioning: Sequence[SceneRecord]) -> list[SceneRecord]:
    """Pack samples as scene records carrying the conditioning scene's boxes, tags and depth."""
    recs = []
    for i, src in enumerate(conditioning):
        rimg = RangeImage(out.range_images[i].astype(np.float32), src.lidar)
        recs.append(SceneRecord(rimg, out.images[i].astype(np.float32), src.depth_gt, list(src.boxes),
                                tuple(src.tags), src.rig, src.lidar))
    return recs


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate_records(samples: Sequence[SceneRecord], reference: Sequence[SceneRecord],
                     metrics: Optional[Sequence[str]] = None) -> dict:
    rig, spec = reference[0].rig, reference[0].lidar
    report = evalkit.evaluate(
        np.stack([s.range_image.values for s in samples]), np.stack([s.images for s in samples]),
        [s.depth_gt for s in samples], np.stack([r.range_image.values for r in reference]),
        np.stack([r.images for r in reference]), rig, spec)
    if metrics is not None:
        report = {k: v for k, v in report.items() if k in metrics or k == "n_scenes"}
    return report


def metric_names(cfg: RunConfig) -> list[str]:
    return [m.strip() for m in cfg["eval.metrics"].split(",") if m.strip()]


# --------------------------------------------------------------------------
# End-to-end smoke run
# --------------------------------------------------------------------------

def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:   # noqa: BLE001 - re-raised with the stage name attached
        raise StageFailure(name, exc) from exc


def pipeline_smoke(cfg: RunConfig, out, log: Log = _quiet) -> dict:
    """gen-data, the three training stages, sampling and evaluation, all under ``out``.

    Returns the report, which is also written to ``out/report.txt``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    train, held = _stage("gen-data", gen_data, cfg, out / "data")
    report: dict = {}
    prior = None
    for stage in dm.STAGES:
        res = _stage(stage, run_stage, cfg, stage, train, prior, log)
        res.store.save(out / CKPT_NAMES[stage])
        write_loss_log(res, out / f"losses_{stage}.txt")
        report[f"{stage}.loss_first"] = res.probe[0][1]
        report[f"{stage}.loss_last"] = res.probe[-1][1]
        prior = res.store
    model = model_from_store(cfg, prior)
    cond_recs = held[: cfg["sample.count"]]
    samples = _stage("sample", lambda: as_records(sample_scenes(cfg, model, cond_recs), cond_recs))
    write_dataset(samples, out / "samples")
    samples = read_dataset(out / "samples")
    metrics = _stage("eval", evaluate_records, samples, held, metric_names(cfg))
    report = {**metrics, **report}
    evalkit.write_report(report, out / "report.txt")
    return report


def export_scenes(records: Sequence[SceneRecord], out, count: Optional[int] = None) -> list[Path]:
    paths = []
    for i, rec in enumerate(records[:count]):
        paths += export_ppm(rec, out, f"scene_{i:04d}")
    return paths

