import numpy as np
import pytest

from globaltrack import data as D
from globaltrack.cli import EXIT_CHECKPOINT, EXIT_DATA, EXIT_EVAL, EXIT_USAGE, PROPOSALS_HEADER, main
from globaltrack.evaluation import REPORT_HEADER
from globaltrack.tracker import RESULTS_HEADER, read_results, write_results, TrackRecord
from globaltrack.geometry import Box
from globaltrack.training import read_train_log

TINY = [
    "model.backbone=desk", "model.channels=8", "model.stride=8", "model.desk_blocks=4", "model.desk_width=4",
    "model.roi_size=3", "model.proj_channels=none", "model.anchor_scales=16,32", "model.anchor_ratios=1",
    "rpn.num_samples=32", "rpn.pre_nms_top_k=64", "rpn.train_max_proposals=32", "rpn.test_max_proposals=32",
    "rcnn.hidden=16", "rcnn.num_samples=16", "train.batch_size=1", "train.epochs=1", "train.milestones=",
    "train.iters_per_epoch=2", "data.max_long_edge=48", "data.max_short_edge=48", "track.max_proposals=16",
]


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = D.SyntheticSpec(num_sequences=2, num_frames=5, height=48, width=48, num_instances=1,
                           min_size=10, max_size=18, seed=5, absences=((3, 1),))
    ds = D.generate_synthetic(spec)
    ds.write(root / "data")
    data = [f"data.mixture={root / 'data'}:1.0"]
    assert main(["train", "--out", str(root / "train"), *TINY, *data]) == 0
    return {"root": root, "data": root / "data", "ckpt": root / "train" / "epoch_001.gtck", "names": [s.name for s in ds.sequences]}


def test_train_missing_dataset(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), *TINY, "data.mixture=/nowhere/at/all:1.0"])
    assert code == EXIT_DATA and "not found" in capsys.readouterr().err


def test_train_without_data(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY]) == EXIT_DATA


def test_unknown_key(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "train.lrr=1"]) == EXIT_USAGE
    assert "valid keys" in capsys.readouterr().err


def test_bad_device(tmp_path, monkeypatch, env):
    monkeypatch.setenv("GLOBALTRACK_DEVICE", "cuda")
    assert main(["train", "--out", str(tmp_path), *TINY, f"data.mixture={env['data']}"]) == EXIT_USAGE


def test_lr_override_in_log(tmp_path, env):
    assert main(["train", "--out", str(tmp_path), *TINY, f"data.mixture={env['data']}", "train.lr=0.02"]) == 0
    assert [r["lr"] for r in read_train_log(tmp_path / "train.log")] == [0.02, 0.02]
    assert "train.lr = 0.02" in (tmp_path / "config.cfg").read_text()


def test_train_logs_identical(tmp_path, env):
    for run in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / run), "--seed", "7", *TINY, f"data.mixture={env['data']}"]) == 0
    assert (tmp_path / "a/train.log").read_bytes() == (tmp_path / "b/train.log").read_bytes()


def test_train_resumes(tmp_path, env):
    args = ["train", "--out", str(tmp_path), *TINY, f"data.mixture={env['data']}"]
    assert main(args + ["train.epochs=1"]) == 0
    assert main(args + ["train.epochs=2"]) == 0
    steps = [r["step"] for r in read_train_log(tmp_path / "train.log")]
    assert steps == [1, 2, 3, 4]


def test_track_outputs(tmp_path, env):
    assert main(["track", str(env["ckpt"]), str(env["data"]), "--out", str(tmp_path)]) == 0
    for name in env["names"]:
        lines = (tmp_path / f"{name}.txt").read_text().splitlines()
        assert lines[0] == RESULTS_HEADER and len(lines) - 1 == 5


def test_track_single_sequence_dir(tmp_path, env):
    name = env["names"][0]
    assert main(["track", str(env["ckpt"]), str(env["data"] / name), "--out", str(tmp_path)]) == 0
    assert [p.name for p in tmp_path.iterdir()] == [f"{name}.txt"]


def test_track_rerun_identical(tmp_path, env):
    for run in ("a", "b"):
        assert main(["track", str(env["ckpt"]), str(env["data"]), "--out", str(tmp_path / run)]) == 0
    for name in env["names"]:
        assert (tmp_path / "a" / f"{name}.txt").read_bytes() == (tmp_path / "b" / f"{name}.txt").read_bytes()


def test_track_parallel_matches_serial(tmp_path, env):
    assert main(["track", str(env["ckpt"]), str(env["data"]), "--out", str(tmp_path / "s")]) == 0
    assert main(["track", str(env["ckpt"]), str(env["data"]), "--out", str(tmp_path / "p"), "--workers", "2"]) == 0
    for name in env["names"]:
        assert (tmp_path / "s" / f"{name}.txt").read_bytes() == (tmp_path / "p" / f"{name}.txt").read_bytes()


def test_tau_changes_only_present_column(tmp_path, env):
    outs = {}
    for tau in ("0.84", "0.9"):
        assert main(["track", str(env["ckpt"]), str(env["data"]), "--out", str(tmp_path / tau), "--tau", tau]) == 0
        outs[tau] = [read_results(tmp_path / tau / f"{n}.txt") for n in env["names"]]
    for (b1, s1, _), (b2, s2, _) in zip(outs["0.84"], outs["0.9"]):
        assert np.array_equal(b1, b2) and np.array_equal(s1, s2)
    for n in env["names"]:
        a = (tmp_path / "0.84" / f"{n}.txt").read_text().splitlines()
        b = (tmp_path / "0.9" / f"{n}.txt").read_text().splitlines()
        assert [l.rsplit(",", 1)[0] for l in a] == [l.rsplit(",", 1)[0] for l in b]


def test_track_checkpoint_mismatch(tmp_path, env, capsys):
    code = main(["track", str(env["ckpt"]), str(env["data"]), "--out", str(tmp_path), *TINY, "model.channels=16"])
    assert code == EXIT_CHECKPOINT and "does not match" in capsys.readouterr().err


def test_track_missing_checkpoint(tmp_path, env):
    assert main(["track", str(tmp_path / "none.gtck"), str(env["data"]), "--out", str(tmp_path)]) == EXIT_CHECKPOINT


def test_track_corrupt_checkpoint(tmp_path, env):
    bad = tmp_path / "bad.gtck"
    bad.write_bytes(env["ckpt"].read_bytes()[:100])
    assert main(["track", str(bad), str(env["data"]), "--out", str(tmp_path / "o")]) == EXIT_CHECKPOINT


def _groundtruth_results(env, out):
    out.mkdir()
    for name in env["names"]:
        seq = D.read_sequence_dir(env["data"] / name)
        recs = []
        for t, b in enumerate(seq.boxes[:, 0]):
            box = Box.from_array(b) if np.all(np.isfinite(b)) else Box(0, 0, 1, 1)
            recs.append(TrackRecord(t, box, 1.0 if np.all(np.isfinite(b)) else 0.0, bool(np.all(np.isfinite(b)))))
        write_results(out / f"{name}.txt", recs)


def test_eval_groundtruth_against_itself(tmp_path, env):
    _groundtruth_results(env, tmp_path / "res")
    assert main(["eval", str(tmp_path / "res"), str(env["data"]), "--out", str(tmp_path / "r.txt")]) == 0
    text = (tmp_path / "r.txt").read_text()
    lines = text.splitlines()
    assert lines[0] == REPORT_HEADER
    assert f"success = {20 / 21:.6f}" in lines
    assert "precision = 1.000000" in lines and "op = 1.000000" in lines
    assert "tnr = 1.000000" in lines


def test_eval_metric_filter(tmp_path, env, capsys):
    _groundtruth_results(env, tmp_path / "res")
    assert main(["eval", str(tmp_path / "res"), str(env["data"]), "--metrics", "op"]) == 0
    agg = capsys.readouterr().out.split("[aggregate]\n")[1].split("[per_sequence]")[0]
    assert agg.strip() == "op = 1.000000"


def test_eval_empty_dir(tmp_path, env):
    (tmp_path / "res").mkdir()
    assert main(["eval", str(tmp_path / "res"), str(env["data"])]) == EXIT_EVAL


def test_eval_length_mismatch(tmp_path, env, capsys):
    _groundtruth_results(env, tmp_path / "res")
    p = tmp_path / "res" / f"{env['names'][0]}.txt"
    p.write_text("\n".join(p.read_text().splitlines()[:-1]) + "\n")
    assert main(["eval", str(tmp_path / "res"), str(env["data"]), "--out", str(tmp_path / "r.txt")]) == EXIT_EVAL
    assert "4 result lines for 5 frames" in (tmp_path / "r.txt").read_text()
    assert "4 result lines for 5 frames" in capsys.readouterr().err


def test_eval_unmatched_sequence(tmp_path, env):
    _groundtruth_results(env, tmp_path / "res")
    (tmp_path / "res" / "stray.txt").write_text((tmp_path / "res" / f"{env['names'][0]}.txt").read_text())
    assert main(["eval", str(tmp_path / "res"), str(env["data"])]) == EXIT_EVAL


def test_eval_unknown_metric(tmp_path, env):
    _groundtruth_results(env, tmp_path / "res")
    assert main(["eval", str(tmp_path / "res"), str(env["data"]), "--metrics", "auc"]) == EXIT_USAGE


def _proposal_args(env, k):
    seq = env["data"] / env["names"][0]
    frames = sorted(p for p in seq.iterdir() if p.suffix == ".png")
    x, y, w, h = (seq / "groundtruth.txt").read_text().splitlines()[1].split(",")
    return ["proposals", str(env["ckpt"]), "--query-image", str(frames[0]), "--query-box", f"{x},{y},{w},{h}",
            "--search-image", str(frames[1]), "-k", str(k)]


def test_proposals_top1(env, capsys):
    assert main(_proposal_args(env, 1)) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == PROPOSALS_HEADER and len(lines) == 2


def test_proposals_sorted(tmp_path, env):
    assert main(_proposal_args(env, 10) + ["--out", str(tmp_path / "p.txt")]) == 0
    rows = [l.split(",") for l in (tmp_path / "p.txt").read_text().splitlines()[1:]]
    scores = [float(r[4]) for r in rows]
    assert 1 <= len(rows) <= 10 and all(len(r) == 5 for r in rows)
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_proposals_bad_box(env):
    args = _proposal_args(env, 1)
    args[args.index("--query-box") + 1] = "1,2,3"
    assert main(args) == EXIT_USAGE
