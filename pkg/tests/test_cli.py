import csv
import filecmp
import json
import math
from pathlib import Path

import numpy as np
import pytest

from aed import cli
from aed import metrics as M
from aed import pipeline as P
from aed.scene import load_episode, save_episode
from oracles import detection_reference

TINY = """\
scene.height = 48
scene.width = 64
scene.length = 12
scene.num_objects = 2
scene.size_range = 8,12
scene.anomaly_kinds = triangle:10:1,disc:10:4
scene.anomaly_span = 4,6
data.train_episodes = 1
data.test_episodes = 2
data.max_train_samples = 16
pseudo.pool_size = 16
cae.epochs = 1
cae.batch_size = 8
clf.epochs = 1
clf.batch_size = 8
filter.kernel = 3,5,5
filter.sigma = 2.0
filter.radius = 4
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY)
    return root


@pytest.fixture(scope="module")
def run(tiny):
    cfgp = str(tiny / "tiny.txt")
    assert cli.main(["gen-data", "--config", cfgp, "--seed", "3", "--out", str(tiny / "data")]) == 0
    assert cli.main(["train", "--config", cfgp, "--seed", "3", "--data", str(tiny / "data"),
                     "--out", str(tiny / "ckpt")]) == 0
    assert cli.main(["infer", "--config", cfgp, "--seed", "3", "--data", str(tiny / "data"),
                     "--ckpt", str(tiny / "ckpt"), "--out", str(tiny / "pred")]) == 0
    assert cli.main(["eval", "--config", cfgp, "--seed", "3", "--data", str(tiny / "data"),
                     "--pred", str(tiny / "pred"), "--out", str(tiny / "eval"), "--emit-curves"]) == 0
    return tiny


def _same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / f, b / f, shallow=False) for f in fa)


# --- gen-data -----------------------------------------------------------------

def test_gen_data_is_byte_identical(run):
    cfgp = str(run / "tiny.txt")
    assert cli.main(["gen-data", "--config", cfgp, "--seed", "3", "--out", str(run / "data2")]) == 0
    assert _same_tree(run / "data", run / "data2")
    assert cli.main(["gen-data", "--config", cfgp, "--seed", "4", "--out", str(run / "data3")]) == 0
    assert not _same_tree(run / "data", run / "data3")


def test_generated_splits(run):
    for d in sorted((run / "data" / "train").glob("ep_*")):
        ep = load_episode(d)
        assert not any(o.is_anomaly for rows in ep.truth for o in rows)
        assert M.load_tracks(d / "tracks.csv") == []
    tests = sorted((run / "data" / "test").glob("ep_*"))
    assert len(tests) == 2
    for d in tests:
        assert len({r.track_id for r in M.load_tracks(d / "tracks.csv")}) >= 1
    pool = np.load(run / "data" / "pseudo" / "appearance.npy")
    assert pool.shape == (16, 64, 64) and pool.dtype == np.uint8
    with open(run / "data" / "pseudo" / "flow_index.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == P.FLOW_INDEX_HEADER and len(rows) == 17
    assert {int(r[3]) for r in rows[1:]} <= {3, 4, 5, 6}


# --- train --------------------------------------------------------------------

def test_train_writes_six_checkpoints_and_log(run):
    ckpts = sorted(p.name for p in (run / "ckpt").glob("*.ckpt"))
    assert len(ckpts) == 6
    with open(run / "ckpt" / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    first = [r for r in rows if r["name"] == "first_batch_loss"]
    assert len(first) == 3
    assert all(abs(float(r["value"]) - math.log(2)) < 1e-12 for r in first)
    assert any(r["name"] == "pseudo_pairing_independent" for r in rows)
    assert {r["stream"] for r in rows if r["phase"] == "cae"} == set(P.STREAMS)


def test_train_is_deterministic(run):
    cfgp = str(run / "tiny.txt")
    assert cli.main(["train", "--config", cfgp, "--seed", "3", "--data", str(run / "data"),
                     "--out", str(run / "ckpt2")]) == 0
    assert _same_tree(run / "ckpt", run / "ckpt2")


# --- infer --------------------------------------------------------------------

def test_infer_row_counts(run):
    for d in sorted((run / "data" / "test").glob("ep_*")):
        ep = load_episode(d)
        preds = M.load_predictions(run / "pred" / d.name / "pred_objects.csv")
        assert len(preds) == sum(len(r) for r in ep.truth)
        scores = M.load_frame_scores(run / "pred" / d.name / "pred_frames.csv")
        assert len(scores) == len(ep.frames)
        assert all(0 <= p.score <= 1 for p in preds)


def test_infer_rerun_is_identical_and_config_mismatch_fails(run, capsys):
    cfgp = str(run / "tiny.txt")
    args = ["infer", "--config", cfgp, "--data", str(run / "data"), "--ckpt", str(run / "ckpt")]
    assert cli.main(args + ["--seed", "3", "--out", str(run / "pred2")]) == 0
    assert _same_tree(run / "pred", run / "pred2")
    assert cli.main(args + ["--seed", "5", "--out", str(run / "pred3")]) == 3
    assert "different config" in capsys.readouterr().err


def test_zero_detection_episode_gives_zero_scores(run, tmp_path):
    ep_dir = tmp_path / "test" / "ep_000"
    src = sorted((run / "data" / "test").glob("ep_*"))[0]
    ep = load_episode(src)
    ep.truth = [[] for _ in ep.truth]
    save_episode(ep, ep_dir)
    cfg = P.C.override(P.C.load(run / "tiny.txt"), seed="3")
    caes, clfs = P.load_models(cfg, run / "ckpt")
    P.infer_dir(cfg, caes, clfs, ep_dir, tmp_path / "out")
    assert M.load_predictions(tmp_path / "out" / "pred_objects.csv") == []
    assert not M.load_frame_scores(tmp_path / "out" / "pred_frames.csv").any()


# --- eval ---------------------------------------------------------------------

def test_eval_results_embed_config(run):
    res = json.loads((run / "eval" / "results.json").read_text())
    assert {"micro_auc", "macro_auc", "rbdc", "tbdc", "alpha", "beta", "filter_config", "seed",
            "config"} <= res.keys()
    assert res["seed"] == 3 and "seed = 3" in res["config"]
    assert res["filter_config"] == {"kernel": [3, 5, 5], "sigma": 2.0, "radius": 4}
    for name in ("roc.csv", "rbdc.csv", "tbdc.csv"):
        assert (run / "eval" / "curves" / name).exists()


def _fake_preds(run, out: Path, perfect: bool):
    for d in sorted((run / "data" / "test").glob("ep_*")):
        truth = M.load_tracks(d / "tracks.csv")
        n = len(list(d.glob("frame_*.pgm")))
        (out / d.name).mkdir(parents=True)
        if perfect:
            M.write_predictions([M.RegionRow(r.frame, r.box, 1.0) for r in truth], out / d.name / "pred_objects.csv")
            M.write_frame_scores(M.frame_labels(truth, n).astype(float), out / d.name / "pred_frames.csv")
        else:
            M.write_predictions([], out / d.name / "pred_objects.csv")
            M.write_frame_scores(np.zeros(n), out / d.name / "pred_frames.csv")


@pytest.mark.parametrize("perfect, want", [(True, (1.0, 1.0, 1.0, 1.0)), (False, (0.5, 0.5, 0.0, 0.0))])
def test_eval_on_synthetic_predictions(run, tmp_path, perfect, want):
    _fake_preds(run, tmp_path / "pred", perfect)
    assert cli.main(["eval", "--config", str(run / "tiny.txt"), "--data", str(run / "data"),
                     "--pred", str(tmp_path / "pred"), "--out", str(tmp_path / "e")]) == 0
    res = json.loads((tmp_path / "e" / "results.json").read_text())
    assert (res["micro_auc"], res["macro_auc"], res["rbdc"], res["tbdc"]) == want


def test_eval_matches_metric_oracle(run):
    truth, preds, frames = [], [], 0
    for v, d in enumerate(sorted((run / "data" / "test").glob("ep_*"))):
        truth += [(v, r.frame, r.track_id, r.box) for r in M.load_tracks(d / "tracks.csv")]
        preds += [(v, r.frame, r.box, r.score)
                  for r in M.load_predictions(run / "pred" / d.name / "pred_objects.csv")]
        frames += len(list(d.glob("frame_*.pgm")))
    want_r, want_t = detection_reference(truth, preds, 0.1, 0.1, frames)
    res = json.loads((run / "eval" / "results.json").read_text())
    assert res["rbdc"] == pytest.approx(want_r, abs=1e-12)
    assert res["tbdc"] == pytest.approx(want_t, abs=1e-12)


# --- exit codes ---------------------------------------------------------------

def test_exit_codes(run, tmp_path, monkeypatch, capsys):
    cfgp = str(run / "tiny.txt")
    assert cli.main(["gen-data", "--set", "cae.lambda=2", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["gen-data", "--set", "nokey", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["gen-data", "--config", str(tmp_path / "absent.txt"), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["train", "--config", cfgp, "--data", str(tmp_path / "nodata"),
                     "--out", str(tmp_path / "c")]) == 3
    assert cli.main(["eval", "--config", cfgp, "--data", str(run / "data"),
                     "--pred", str(tmp_path / "nopred"), "--out", str(tmp_path / "e")]) == 3
    assert cli.main(["sweep-lambda", "--config", cfgp, "--data", str(run / "data"),
                     "--values", "0.2,abc", "--out", str(tmp_path / "s")]) == 2

    def boom(*a, **k):
        raise FloatingPointError("phase 1, stream appearance, epoch 1: non-finite loss")
    monkeypatch.setattr(P, "train", boom)
    assert cli.main(["train", "--config", cfgp, "--data", str(run / "data"), "--out", str(tmp_path / "c")]) == 4
    assert "phase 1" in capsys.readouterr().err


def test_single_class_truth_is_reported_verbatim(run, tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(run / "tiny.txt"), "--seed", "3", "--out", str(data)]) == 0
    d = sorted((data / "test").glob("ep_*"))[0]
    M.write_tracks([], d / "tracks.csv")
    _fake_preds(run, tmp_path / "pred", False)
    args = ["eval", "--config", str(run / "tiny.txt"), "--data", str(data), "--pred", str(tmp_path / "pred"),
            "--out", str(tmp_path / "e")]
    assert cli.main(args) == 3
    assert "video 0" in capsys.readouterr().err


# --- sweep --------------------------------------------------------------------

def test_sweep_rows_and_equivalence(run, tmp_path):
    cfgp = str(run / "tiny.txt")
    assert cli.main(["sweep-lambda", "--config", cfgp, "--seed", "3", "--data", str(run / "data"),
                     "--values", "0,0.2", "--out", str(tmp_path / "sw")]) == 0
    with open(tmp_path / "sw" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["label"] for r in rows] == ["no-adversarial", "adversarial"]
    assert len(rows) == 2 and list(rows[0]) == P.SWEEP_HEADER
    standalone = json.loads((run / "eval" / "results.json").read_text())
    assert all(float(rows[1][k]) == standalone[k] for k in ("micro_auc", "macro_auc", "rbdc", "tbdc"))
    for name in ("cae_appearance.ckpt", "clf_motion-forward.ckpt"):
        assert filecmp.cmp(tmp_path / "sw" / "lambda_0.2" / "ckpt" / name, run / "ckpt" / name, shallow=False)


def test_lambda_one_is_flagged(caplog):
    assert P.lambda_label(1.0) == "boundary-unstable"
    cfg = P.with_lambda(P.C.RunConfig(), 1.0)
    assert cfg.cae.lam == 1.0 and "outside the stable range" in caplog.text
    with pytest.raises(P.C.ConfigError):
        P.with_lambda(P.C.RunConfig(), 1.1)
