"""Tests for the command-line interface: exit codes, JSON output, and
equality with direct library calls."""

import json
import os

import numpy as np
import pytest

from voxedge import cli, synth
from voxedge.geometry import PointCloud, load_pointcloud, save_pointcloud
from voxedge.metrics import chamfer, chamfer_sharp, fidelity
from voxedge.model import ModelConfig, write_config


def run(capsys, argv):
    code = cli.main(argv)
    captured = capsys.readouterr()
    payload = json.loads(captured.out) if captured.out.strip() else None
    return code, payload, captured.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "shapes.csv"
    spec.write_text(
        "kind,n,seed,ratio\n"
        "box,96,0,0.4\n"
        "lamp,96,1,0.4\n"
        "table,96,2,0.5\n"
        "cross,96,3,0.4\n"
    )
    cfg = root / "micro.cfg"
    write_config(cfg, ModelConfig.micro(seed=3))
    return root


@pytest.fixture(scope="module")
def dataset(workdir):
    out = workdir / "data"
    code = cli.main(
        ["synth", "--spec", str(workdir / "shapes.csv"), "--out", str(out), "--resolution", "8", "--seed", "11"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(workdir, dataset):
    ckpt = workdir / "model.ckpt"
    code = cli.main(
        [
            "train",
            "--config",
            str(workdir / "micro.cfg"),
            "--data",
            str(dataset),
            "--out",
            str(ckpt),
            "--epochs",
            "2",
            "--batch",
            "2",
        ]
    )
    assert code == 0
    return ckpt


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_dataset(capsys, workdir, dataset):
    rows = synth.read_manifest(dataset)
    assert len(rows) == 4
    assert os.path.exists(dataset / "sample_0003" / "grids.bin")
    code, payload, _ = run(
        capsys,
        ["synth", "--spec", str(workdir / "shapes.csv"), "--out", str(workdir / "data2"), "--resolution", "8"],
    )
    assert code == 0
    assert payload == {"out": str(workdir / "data2"), "samples": 4, "resolution": 8}


def test_synth_missing_flag_is_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth", "--out", str(workdir / "nope")])
    assert exc.value.code == 2


def test_synth_bad_spec_file_is_runtime_error(capsys, workdir):
    bad = workdir / "bad.csv"
    bad.write_text("kind,n\nbox,96\n")
    code, payload, err = run(capsys, ["synth", "--spec", str(bad), "--out", str(workdir / "nope")])
    assert code == 1
    assert "error:" in err


# ---------------------------------------------------------------------------
# edges


def test_edges_output_is_subset(capsys, workdir, dataset):
    out = workdir / "edges.ply"
    code, payload, _ = run(
        capsys,
        ["edges", "--in", str(dataset / "sample_0001" / "complete.ply"), "--out", str(out), "--k", "20"],
    )
    assert code == 0
    assert payload["in_points"] == 96
    assert payload["edge_points"] == len(load_pointcloud(out))
    cloud = load_pointcloud(dataset / "sample_0001" / "complete.ply")
    rows = {tuple(p) for p in cloud.points}
    assert all(tuple(p) in rows for p in load_pointcloud(out).points)


def test_edges_profile_defaults(capsys, workdir):
    pc = synth.make_shape(synth.ShapeSpec("lamp", 400, 9))
    src = workdir / "lamp.ply"
    save_pointcloud(src, pc)
    out = workdir / "lamp_edges.ply"
    code, payload, _ = run(capsys, ["edges", "--in", str(src), "--out", str(out), "--profile", "completion3d"])
    assert code == 0
    assert payload["k"] == 150 and payload["lambda"] == 1.8
    code, payload, _ = run(capsys, ["edges", "--in", str(src), "--out", str(out)])
    assert code == 0
    assert payload["k"] == 100 and payload["lambda"] == 5.0


def test_edges_mask_out(capsys, workdir, dataset):
    out = workdir / "e.ply"
    mask_path = workdir / "mask.txt"
    code, payload, _ = run(
        capsys,
        [
            "edges",
            "--in",
            str(dataset / "sample_0000" / "complete.ply"),
            "--out",
            str(out),
            "--k",
            "20",
            "--mask-out",
            str(mask_path),
        ],
    )
    assert code == 0
    lines = mask_path.read_text().splitlines()
    assert len(lines) == payload["in_points"]
    assert sum(int(v) for v in lines) == payload["edge_points"]


# ---------------------------------------------------------------------------
# train


def test_train_writes_everything(capsys, workdir, dataset, checkpoint):
    assert checkpoint.exists()
    assert (workdir / "model.ckpt.opt").exists()
    assert (workdir / "model.ckpt.cfg").exists()
    log = workdir / "model.ckpt.log.csv"
    assert log.exists()
    lines = log.read_text().splitlines()
    assert lines[0].startswith("step,cd,")
    assert len(lines) == 5


def test_train_resume_continues_steps(capsys, workdir, dataset, checkpoint):
    code, payload, err = run(
        capsys,
        [
            "train",
            "--config",
            str(workdir / "micro.cfg"),
            "--data",
            str(dataset),
            "--out",
            str(checkpoint),
            "--epochs",
            "3",
            "--batch",
            "2",
            "--resume",
        ],
    )
    assert code == 0
    assert payload["steps"] == 6
    assert "resuming from step 4" in err
    lines = (workdir / "model.ckpt.log.csv").read_text().splitlines()
    assert lines[-1].split(",")[0] == "6"


def test_train_no_edges_and_pcn_profile(capsys, workdir, dataset):
    ckpt = workdir / "ablate.ckpt"
    code, payload, _ = run(
        capsys,
        [
            "train",
            "--config",
            str(workdir / "micro.cfg"),
            "--data",
            str(dataset),
            "--out",
            str(ckpt),
            "--epochs",
            "1",
            "--batch",
            "2",
            "--no-edges",
            "--profile",
            "pcn",
        ],
    )
    assert code == 0
    cfg_text = (workdir / "ablate.ckpt.cfg").read_text()
    assert "use_edges = False" in cfg_text
    assert "profile = pcn" in cfg_text
    log = (workdir / "ablate.ckpt.log.csv").read_text().splitlines()
    header = log[0].split(",")
    row = dict(zip(header, log[1].split(",")))
    # with edges ablated and the pcn profile, edge and sharp terms are dead
    assert float(row["cd_edge"]) == 0.0
    assert float(row["bce_e"]) == 0.0


# ---------------------------------------------------------------------------
# complete


def test_complete_outputs_m_points(capsys, workdir, dataset, checkpoint):
    out = workdir / "pred.ply"
    eout = workdir / "pred_edges.ply"
    code, payload, _ = run(
        capsys,
        [
            "complete",
            "--ckpt",
            str(checkpoint),
            "--in",
            str(dataset / "sample_0000" / "partial.ply"),
            "--out",
            str(out),
            "--edges-out",
            str(eout),
            "--seed",
            "7",
        ],
    )
    assert code == 0
    assert payload["points"] == 64
    assert len(load_pointcloud(out)) == 64
    assert len(load_pointcloud(eout)) == payload["edge_points"]


def test_complete_deterministic_bytes(capsys, workdir, dataset, checkpoint):
    outs = []
    for tag in ("x", "y"):
        out = workdir / f"det_{tag}.ply"
        code, _, _ = run(
            capsys,
            [
                "complete",
                "--ckpt",
                str(checkpoint),
                "--in",
                str(dataset / "sample_0001" / "partial.ply"),
                "--out",
                str(out),
                "--seed",
                "3",
            ],
        )
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_complete_shape_mismatch_named(capsys, workdir, dataset, checkpoint):
    wrong = workdir / "wrong.cfg"
    write_config(wrong, ModelConfig.micro(seed=3, channel_scale=1.0 / 16.0))
    code, _, err = run(
        capsys,
        [
            "complete",
            "--ckpt",
            str(checkpoint),
            "--in",
            str(dataset / "sample_0000" / "partial.ply"),
            "--out",
            str(workdir / "nope.ply"),
            "--config",
            str(wrong),
        ],
    )
    assert code == 1
    assert "shape" in err


def test_complete_missing_config_suggests_flag(capsys, workdir, dataset, checkpoint):
    stray = workdir / "stray.ckpt"
    stray.write_bytes(checkpoint.read_bytes())
    code, _, err = run(
        capsys,
        [
            "complete",
            "--ckpt",
            str(stray),
            "--in",
            str(dataset / "sample_0000" / "partial.ply"),
            "--out",
            str(workdir / "nope.ply"),
        ],
    )
    assert code == 1
    assert "--config" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_matches_library(capsys, workdir, dataset, checkpoint):
    pred_path = workdir / "pred.ply"
    gt_path = dataset / "sample_0000" / "complete.ply"
    in_path = dataset / "sample_0000" / "partial.ply"
    code, payload, _ = run(
        capsys,
        ["eval", "--pred", str(pred_path), "--gt", str(gt_path), "--input", str(in_path)],
    )
    assert code == 0
    pred = load_pointcloud(pred_path)
    gt = load_pointcloud(gt_path)
    inp = load_pointcloud(in_path)
    assert payload["cd"] == chamfer(pred, gt)
    assert payload["cd_sharp"] == chamfer_sharp(pred, gt)
    assert payload["fidelity"] == fidelity(inp, pred)


def test_eval_identical_clouds_zero(capsys, workdir, dataset):
    gt = dataset / "sample_0000" / "complete.ply"
    code, payload, _ = run(capsys, ["eval", "--pred", str(gt), "--gt", str(gt)])
    assert code == 0
    assert payload["cd"] == 0.0
    assert payload["cd_sharp"] == 0.0


def test_eval_empty_cloud_rejected(capsys, workdir, dataset):
    empty = workdir / "empty.ply"
    save_pointcloud(empty, PointCloud(np.zeros((0, 3))))
    code, _, err = run(
        capsys, ["eval", "--pred", str(empty), "--gt", str(dataset / "sample_0000" / "complete.ply")]
    )
    assert code == 1
    assert "error:" in err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_model_scope(capsys):
    code, payload, err = run(capsys, ["gradcheck", "--scope", "model", "--seed", "0"])
    assert code == 0
    assert payload["pass"] is True
    assert payload["max"] < payload["threshold"] == 1e-3
    assert "model" in err


def test_gradcheck_reproducible_table(capsys):
    a = run(capsys, ["gradcheck", "--scope", "model", "--seed", "1"])
    b = run(capsys, ["gradcheck", "--scope", "model", "--seed", "1"])
    assert a == b
