"""Dataset loading, the training loop, and whole-dataset evaluation.

A dataset directory is the layout synth.make_dataset writes: one directory
per sample with partial/complete/edge clouds, plus manifest.csv. The grid
targets are recomputed here at the model's resolution rather than read from
grids.bin, so a dataset generated at one resolution can train models at
another.
"""

from __future__ import annotations

import dataclasses
import math
import os
import sys

import numpy as np

from . import synth
from .autodiff import load_params, save_params
from .geometry import PointCloud, load_pointcloud
from .metrics import chamfer
from .model import Model, PreparedSample, prepare_sample

LOG_COLUMNS = (
    "step",
    "cd",
    "cd_edge",
    "cd_sharp",
    "bce_p",
    "bce_e",
    "ld",
    "ld_e",
    "lo",
    "lo_e",
    "total",
)

# fixed seed for the folding noise used when scoring a model, so evaluation
# numbers are comparable across checkpoints and runs
EVAL_SEED = 10007


@dataclasses.dataclass
class Sample:
    """One dataset entry with its clouds and precomputed training targets."""

    sample_id: str
    kind: str
    partial: PointCloud
    complete: PointCloud
    edge: PointCloud
    prepared: PreparedSample


def load_sample(cfg, sample_dir, sample_id: str, kind: str) -> Sample:
    partial = load_pointcloud(os.path.join(sample_dir, "partial.ply"))
    complete = load_pointcloud(os.path.join(sample_dir, "complete.ply"))
    edge = load_pointcloud(os.path.join(sample_dir, "edges.ply"))
    prepared = prepare_sample(cfg, partial, complete, edge)
    return Sample(sample_id, kind, partial, complete, edge, prepared)


def load_dataset(cfg, data_dir) -> list:
    """Read every manifest row into a Sample, in manifest order."""
    rows = synth.read_manifest(data_dir)
    out = []
    for row in rows:
        sdir = os.path.join(data_dir, row["id"])
        if not os.path.isdir(sdir):
            raise FileNotFoundError(f"{data_dir}: manifest lists {row['id']} but the directory is missing")
        out.append(load_sample(cfg, sdir, row["id"], row["kind"]))
    return out


# ---------------------------------------------------------------------------
# checkpoint + optimizer sidecar


def save_training_state(model: Model, ckpt_path) -> None:
    """Write the model checkpoint and a .opt sidecar holding Adam state."""
    model.save(ckpt_path)
    side = {
        "gstep": np.asarray(float(model.global_step), dtype=np.float32),
        "step": np.asarray(float(model.opt_state["step"]), dtype=np.float32),
    }
    for name, arr in model.opt_state["m"].items():
        side[f"m.{name}"] = arr
    for name, arr in model.opt_state["v"].items():
        side[f"v.{name}"] = arr
    save_params(str(ckpt_path) + ".opt", side)


def load_training_state(model: Model, ckpt_path) -> None:
    """Restore parameters, Adam moments, and step counters for a resume."""
    model.load_state(ckpt_path)
    side_path = str(ckpt_path) + ".opt"
    side = load_params(side_path)
    for key in ("gstep", "step"):
        if key not in side:
            raise ValueError(f"{side_path}: missing {key!r} entry")
    model.global_step = int(side.pop("gstep"))
    state = {"step": int(side.pop("step")), "m": {}, "v": {}}
    for name, arr in side.items():
        prefix, _, pname = name.partition(".")
        if prefix not in ("m", "v") or pname not in model.params:
            raise ValueError(f"{side_path}: unexpected entry {name!r}")
        if arr.shape != model.params[pname].shape:
            raise ValueError(
                f"{side_path}: entry {name!r} has shape {arr.shape}, "
                f"parameter is {model.params[pname].shape}"
            )
        state[prefix][pname] = arr.astype(model.dtype)
    model.opt_state = state


# ---------------------------------------------------------------------------
# training loop


def _format_row(step: int, stats: dict) -> str:
    cells = [str(step)] + [repr(float(stats[k])) for k in LOG_COLUMNS[1:]]
    return ",".join(cells)


def train(
    model: Model,
    samples: list,
    epochs: int,
    batch_size: int,
    ckpt_path,
    log_path,
    resume: bool = False,
    on_epoch=None,
) -> dict:
    """Run the optimization loop, checkpointing after every epoch.

    The per-epoch sample order is a permutation seeded by (seed + 2, epoch),
    so runs are reproducible and a resumed run visits the same batches an
    uninterrupted one would have. On a NaN loss the loop re-raises after
    flushing the log, leaving the last end-of-epoch checkpoint untouched on
    disk. Returns {"steps", "epochs"} on success.
    """
    if not samples:
        raise ValueError("train: no samples")
    if batch_size < 1:
        raise ValueError("train: batch_size must be at least 1")
    steps_per_epoch = math.ceil(len(samples) / batch_size)
    start_epoch = model.global_step // steps_per_epoch
    if resume and model.global_step % steps_per_epoch != 0:
        raise ValueError(
            f"checkpoint step {model.global_step} is not an epoch boundary "
            f"for {len(samples)} samples at batch size {batch_size}"
        )
    mode = "a" if resume and os.path.exists(log_path) else "w"
    with open(log_path, mode, encoding="utf-8", newline="") as log:
        if mode == "w":
            log.write(",".join(LOG_COLUMNS) + "\n")
            log.flush()
        for epoch in range(start_epoch, epochs):
            order = np.random.default_rng([model.cfg.seed + 2, epoch]).permutation(len(samples))
            total = 0.0
            for lo in range(0, len(order), batch_size):
                batch = [samples[i].prepared for i in order[lo : lo + batch_size]]
                try:
                    stats = model.train_step(batch)
                except FloatingPointError:
                    log.flush()
                    raise
                log.write(_format_row(model.global_step, stats) + "\n")
                log.flush()
                total += stats["total"]
            save_training_state(model, ckpt_path)
            if on_epoch is not None:
                on_epoch(epoch, total / steps_per_epoch)
    return {"steps": model.global_step, "epochs": epochs}


def stderr_progress(every: int = 10):
    """Progress callback for train(); prints every N epochs to stderr."""

    def report(epoch: int, mean_total: float) -> None:
        if (epoch + 1) % every == 0 or epoch == 0:
            print(f"epoch {epoch + 1}: mean total loss {mean_total:.4f}", file=sys.stderr)

    return report


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Model, samples: list, seed: int = EVAL_SEED) -> dict:
    """Mean completion chamfer over a dataset, overall and per family.

    Runs the inference path (predicted occupancy mask, eval-mode norms) on
    each partial cloud and scores against its complete cloud.
    """
    if not samples:
        raise ValueError("evaluate: no samples")
    per_kind: dict[str, list] = {}
    cds = []
    for s in samples:
        main, _ = model.forward(s.partial, seed=seed)
        cd = chamfer(main.points, s.complete)
        cds.append(cd)
        per_kind.setdefault(s.kind, []).append(cd)
    return {
        "cd": float(np.mean(cds)),
        "count": len(cds),
        "by_kind": {k: float(np.mean(v)) for k, v in sorted(per_kind.items())},
    }
