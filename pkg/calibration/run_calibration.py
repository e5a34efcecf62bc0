"""Desk-scale calibration run backing the frozen acceptance thresholds.

Trains the full model and the edge-ablated model on the same 50-shape
dataset (10 shapes per family, 512 points each, occlusion ratio 0.4,
resolution 16, channel scale 0.25, 200 epochs, batch 8, lr 0.0007), then
records untrained/full/ablation chamfer, per-family breakdowns, and wall
times in results.json next to this file.

Usage: python3 calibration/run_calibration.py [workdir]

The dataset and checkpoints go to the working directory (default:
calibration/data, ignored by git); shapes.csv, the two training logs, and
results.json are written next to this script and are committed as the
calibration record.
"""

import json
import os
import shutil
import sys
import time

from voxedge import synth, training
from voxedge.geometry import OcclusionSpec
from voxedge.model import Model, ModelConfig, write_config

HERE = os.path.dirname(os.path.abspath(__file__))

FAMILIES = ("box", "cylinder", "lamp", "table", "cross")
PER_FAMILY = 10
N_POINTS = 512
RATIO = 0.4
EPOCHS = 200
BATCH = 8


def write_shapes_csv(path) -> None:
    lines = ["kind,n,seed,ratio"]
    for kind in FAMILIES:
        for seed in range(PER_FAMILY):
            lines.append(f"{kind},{N_POINTS},{seed},{RATIO}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def main() -> int:
    work = sys.argv[1] if len(sys.argv) > 1 else os.path.join(HERE, "data")
    os.makedirs(work, exist_ok=True)
    shapes_csv = os.path.join(HERE, "shapes.csv")
    write_shapes_csv(shapes_csv)

    specs, ratios = synth.parse_spec_file(shapes_csv)
    data_dir = os.path.join(work, "dataset")
    t0 = time.time()
    synth.make_dataset(specs, OcclusionSpec(seed=0, target_ratio=RATIO), data_dir, resolution=16, ratios=ratios)
    t_data = time.time() - t0

    cfg = ModelConfig.desk(seed=0)
    write_config(os.path.join(work, "desk.cfg"), cfg)
    samples = training.load_dataset(cfg, data_dir)

    untrained = training.evaluate(Model(cfg), samples)
    results = {
        "dataset": {"families": list(FAMILIES), "per_family": PER_FAMILY, "n_points": N_POINTS, "ratio": RATIO, "seconds": round(t_data, 1)},
        "config": {"resolution": cfg.resolution, "channel_scale": cfg.channel_scale, "n_in": cfg.n_in, "m_out": cfg.m_out, "lr": cfg.lr, "epochs": EPOCHS, "batch": BATCH, "seed": cfg.seed},
        "untrained": untrained,
    }
    print(f"dataset: {len(samples)} samples in {t_data:.1f}s", flush=True)
    print(f"untrained cd {untrained['cd']:.5f} " f"{untrained['by_kind']}", flush=True)

    for tag, use_edges in (("full", True), ("ablation", False)):
        import dataclasses

        run_cfg = cfg if use_edges else dataclasses.replace(cfg, use_edges=False)
        model = Model(run_cfg)
        ckpt = os.path.join(work, f"{tag}.ckpt")
        log = os.path.join(HERE, f"train_{tag}.log.csv")
        t0 = time.time()
        training.train(
            model,
            samples,
            epochs=EPOCHS,
            batch_size=BATCH,
            ckpt_path=ckpt,
            log_path=log,
            on_epoch=training.stderr_progress(every=20),
        )
        seconds = time.time() - t0
        scores = training.evaluate(model, samples)
        results[tag] = {
            "cd": scores["cd"],
            "by_kind": scores["by_kind"],
            "seconds": round(seconds, 1),
            "ratio_vs_untrained": scores["cd"] / untrained["cd"],
        }
        print(
            f"{tag}: cd {scores['cd']:.5f} ({scores['cd'] / untrained['cd']:.3f}x untrained) "
            f"in {seconds / 60:.1f} min",
            flush=True,
        )
        print(f"  by kind: {scores['by_kind']}", flush=True)

    results["ablation_worse_on"] = sorted(
        k for k in results["full"]["by_kind"] if results["ablation"]["by_kind"][k] > results["full"]["by_kind"][k]
    )
    out = os.path.join(HERE, "results.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
