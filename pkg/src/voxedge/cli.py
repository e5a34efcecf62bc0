"""Command-line front end.

Every subcommand is a thin wrapper over the library: results printed here
equal direct calls on the same inputs. JSON goes to stdout, progress and
errors to stderr. Exit codes: 0 success, 1 runtime or numeric failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import synth, training
from .autodiff import ops_grad_report
from .edges import EdgeParams, extract_edges
from .geometry import OcclusionSpec, load_pointcloud, save_pointcloud
from .metrics import chamfer, chamfer_sharp, fidelity
from .model import Model, ModelConfig, model_grad_check, read_config, write_config

OPS_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3

EDGE_PROFILES = {
    "default": EdgeParams(k=100, lam=5.0),
    "completion3d": EdgeParams(k=150, lam=1.8),
}


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    specs, ratios = synth.parse_spec_file(args.spec)
    occ = OcclusionSpec(seed=args.seed, target_ratio=0.5)
    rows = synth.make_dataset(specs, occ, args.out, resolution=args.resolution, ratios=ratios)
    _log(f"wrote {len(rows)} samples to {args.out}")
    _emit({"out": args.out, "samples": len(rows), "resolution": args.resolution})
    return 0


def cmd_edges(args) -> int:
    base = EDGE_PROFILES[args.profile]
    k = args.k if args.k is not None else base.k
    lam = args.lam if args.lam is not None else base.lam
    cloud = load_pointcloud(args.infile)
    mask, edge_cloud = extract_edges(cloud, EdgeParams(k=k, lam=lam))
    save_pointcloud(args.out, edge_cloud)
    if args.mask_out:
        with open(args.mask_out, "w", encoding="utf-8") as fh:
            fh.write("\n".join("1" if m else "0" for m in mask) + "\n")
    _emit(
        {
            "in_points": len(cloud),
            "edge_points": len(edge_cloud),
            "k": k,
            "lambda": lam,
            "out": args.out,
        }
    )
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.profile is not None:
        overrides["profile"] = args.profile
    cfg = read_config(args.config, **overrides)
    if args.no_edges:
        cfg = dataclasses.replace(cfg, use_edges=False)
    model = Model(cfg)
    if args.resume:
        training.load_training_state(model, args.out)
        _log(f"resuming from step {model.global_step}")
    samples = training.load_dataset(cfg, args.data)
    _log(f"training on {len(samples)} samples for {args.epochs} epochs (batch {args.batch})")
    log_path = args.log if args.log else str(args.out) + ".log.csv"
    write_config(str(args.out) + ".cfg", cfg)
    result = training.train(
        model,
        samples,
        epochs=args.epochs,
        batch_size=args.batch,
        ckpt_path=args.out,
        log_path=log_path,
        resume=args.resume,
        on_epoch=training.stderr_progress(),
    )
    scores = training.evaluate(model, samples)
    _emit(
        {
            "checkpoint": str(args.out),
            "config": str(args.out) + ".cfg",
            "log": str(log_path),
            "steps": result["steps"],
            "epochs": result["epochs"],
            "eval_cd": scores["cd"],
            "eval_by_kind": scores["by_kind"],
        }
    )
    return 0


def cmd_complete(args) -> int:
    cfg_path = args.config if args.config else str(args.ckpt) + ".cfg"
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(
            f"{cfg_path}: config not found; pass --config or keep the "
            f"sidecar written by train next to the checkpoint"
        )
    cfg = read_config(cfg_path)
    if args.no_edges:
        cfg = dataclasses.replace(cfg, use_edges=False)
    model = Model(cfg)
    model.load_state(args.ckpt)
    partial = load_pointcloud(args.infile)
    main, edge = model.forward(partial, seed=args.seed)
    save_pointcloud(args.out, main.points)
    out = {
        "out": args.out,
        "points": len(main.points),
        "fallback": main.fallback,
    }
    if args.edges_out:
        if edge is None:
            raise ValueError("--edges-out: this model runs with edges disabled")
        save_pointcloud(args.edges_out, edge.points)
        out["edges_out"] = args.edges_out
        out["edge_points"] = len(edge.points)
    _emit(out)
    return 0


def cmd_eval(args) -> int:
    pred = load_pointcloud(args.pred)
    gt = load_pointcloud(args.gt)
    out = {
        "cd": chamfer(pred, gt),
        "cd_sharp": chamfer_sharp(pred, gt),
    }
    if args.input:
        inp = load_pointcloud(args.input)
        out["fidelity"] = fidelity(inp, pred)
    _emit(out)
    return 0


def cmd_gradcheck(args) -> int:
    if args.scope == "ops":
        table = ops_grad_report(seed=args.seed)
        threshold = OPS_THRESHOLD
    else:
        table = {"model": model_grad_check(seed=args.seed)}
        threshold = MODEL_THRESHOLD
    worst = max(table.values())
    for name in sorted(table):
        _log(f"{name:22s} {table[name]:.3e}")
    ok = worst < threshold
    _emit(
        {
            "scope": args.scope,
            "seed": args.seed,
            "threshold": threshold,
            "results": table,
            "max": worst,
            "pass": ok,
        }
    )
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxedge",
        description="Voxel-grid edge-guided point cloud completion toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--spec", required=True, help="CSV with columns kind,n,seed,ratio")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--resolution", type=int, default=16, help="grid resolution for grids.bin")
    p.add_argument("--seed", type=int, default=0, help="base occlusion seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("edges", help="extract edge points from a cloud")
    p.add_argument("--in", dest="infile", required=True, help="input cloud (.ply)")
    p.add_argument("--out", required=True, help="output edge cloud (.ply)")
    p.add_argument("--k", type=int, default=None, help="neighborhood size")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="threshold multiplier")
    p.add_argument("--profile", choices=sorted(EDGE_PROFILES), default="default")
    p.add_argument("--mask-out", default=None, help="also write the 0/1 edge mask, one row per point")
    p.set_defaults(fn=cmd_edges)

    p = sub.add_parser("train", help="train a completion model on a dataset")
    p.add_argument("--config", required=True, help="model config file (key = value lines)")
    p.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--log", default=None, help="CSV loss log (default: <out>.log.csv)")
    p.add_argument("--resume", action="store_true", help="continue from --out and its .opt sidecar")
    p.add_argument("--no-edges", action="store_true", help="train the edge-ablated model")
    p.add_argument("--profile", choices=("default", "pcn"), default=None, help="loss profile override")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("complete", help="complete a partial cloud with a trained model")
    p.add_argument("--ckpt", required=True, help="checkpoint from train")
    p.add_argument("--in", dest="infile", required=True, help="partial cloud (.ply)")
    p.add_argument("--out", required=True, help="completed cloud to write (.ply)")
    p.add_argument("--edges-out", default=None, help="also write the generated edge cloud")
    p.add_argument("--config", default=None, help="config file (default: <ckpt>.cfg)")
    p.add_argument("--seed", type=int, default=0, help="folding noise seed")
    p.add_argument("--no-edges", action="store_true", help="run the edge-ablated path")
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("eval", help="score a completion against ground truth")
    p.add_argument("--pred", required=True, help="predicted cloud (.ply)")
    p.add_argument("--gt", required=True, help="ground-truth cloud (.ply)")
    p.add_argument("--input", default=None, help="partial input cloud, enables fidelity")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("ops", "model"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
