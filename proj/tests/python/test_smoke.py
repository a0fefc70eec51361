"""Smoke tests for the python bindings."""

import itertools
import math
import os
import subprocess

import numpy as np
import pytest

try:
    import ookd
except ImportError:
    import _ookd as ookd


def test_paste_probability_endpoints():
    ps = ookd.paste_probabilities([0.355, 0.12, 0.003], k=0.7)
    assert ps[0] == 0.0
    assert ps[2] == pytest.approx(0.7, abs=1e-12)
    assert ps[1] == pytest.approx(0.7 * (0.355 - 0.12) / (0.355 - 0.003), abs=1e-12)
    assert ookd.paste_probabilities([0.25, 0.25], k=0.7) == [0.0, 0.0]
    with pytest.raises(ValueError):
        ookd.paste_probabilities([0.5, 0.5], k=1.5)


def test_giou_hand_case():
    a = [0.25, 0.25, 0.5, 0.5]
    b = [0.5, 0.5, 0.5, 0.5]
    assert ookd.giou(a, b) == pytest.approx(-5.0 / 63.0, abs=1e-9)
    assert ookd.giou(a, a) == pytest.approx(1.0)


def test_class_cost_uniform():
    assert ookd.class_cost([0.0, 0.0, 0.0, 0.0], 1) == pytest.approx(math.log(4.0))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = int(rng.integers(1, 5))
        cost = rng.uniform(0, 10, size=(6, m))
        sigma = ookd.hungarian_match(cost)
        got = sum(cost[sigma[i], i] for i in range(m))
        best = min(
            sum(cost[p[i], i] for i in range(m))
            for p in itertools.permutations(range(6), m)
        )
        assert got == pytest.approx(best, abs=1e-12)
        assert len(set(sigma)) == m


def test_generate_clip_shapes_and_determinism():
    clip = ookd.generate_clip(num_frames=4, height=48, width=48, seed=7)
    assert clip["frames"].shape == (4, 48, 48, 3)
    assert clip["frames"].dtype == np.uint8
    assert len(clip["instances"]) >= 2
    inst = clip["instances"][0]
    assert inst["masks"].shape == (4, 48, 48)
    assert inst["boxes"].shape == (4, 4)

    again = ookd.generate_clip(num_frames=4, height=48, width=48, seed=7)
    np.testing.assert_array_equal(clip["frames"], again["frames"])

    other = ookd.generate_clip(num_frames=4, height=48, width=48, seed=8)
    assert not np.array_equal(clip["frames"], other["frames"])

    # Masks of one frame are pairwise disjoint.
    union = np.zeros((48, 48), dtype=np.int64)
    for inst in clip["instances"]:
        union += inst["masks"][0]
    assert union.max() <= 1


def test_kd_loss_values():
    s = np.eye(3)
    assert ookd.kd_loss(s, s) == pytest.approx(0.0, abs=1e-12)
    t = np.roll(s, 1, axis=0)  # orthogonal pairs
    assert ookd.kd_loss(s, t) == pytest.approx(1.0, abs=1e-12)
    assert ookd.kd_loss(s[:1], -s[:1]) == pytest.approx(2.0, abs=1e-12)


def test_sequence_iou():
    a = np.zeros((2, 8, 8), dtype=np.uint8)
    a[:, 0:4, 0:4] = 1
    assert ookd.sequence_iou(a, a) == pytest.approx(1.0)
    b = np.zeros_like(a)
    b[0] = a[0]
    assert ookd.sequence_iou(b, a) == pytest.approx(0.5)


def test_video_map_identity():
    masks = np.zeros((2, 16, 16), dtype=np.uint8)
    masks[:, 2:8, 2:8] = 1
    gts = [{"clip_id": "v0", "class_id": 0, "masks": masks}]
    preds = [{"clip_id": "v0", "class_id": 0, "score": 1.0, "masks": masks}]
    res = ookd.video_map(preds, gts, 1)
    assert res["mAP"] == pytest.approx(1.0)
    assert ookd.video_map([], gts, 1)["mAP"] == 0.0


def test_default_config_round_trips():
    import json

    cfg = json.loads(ookd.default_config())
    assert cfg["model"]["num_queries"] == 16
    assert cfg["augment"]["k"] == pytest.approx(0.7)
    assert cfg["qfa"]["mode"] == "hungarian"


def test_cli_help_runs():
    cli = os.environ.get("OOKD_CLI")
    if not cli or not os.path.exists(cli):
        pytest.skip("OOKD_CLI not set")
    out = subprocess.run([cli, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ["gen-data", "train-baseline", "distill", "ablate", "plot-similarity"]:
        assert sub in out.stdout
