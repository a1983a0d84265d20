import json
import math

import numpy as np
import pytest

import dale


def test_entropy_and_edge_fixtures():
    assert dale.avg_entropy(np.array([0.0, 0.0, 1.0, 1.0])) == pytest.approx(-0.5 * math.log(0.5))
    assert dale.avg_entropy(np.full(64, 0.37)) == 0.0
    label = np.zeros((4, 4), dtype=np.uint8)
    label[:, 2:] = 1
    assert dale.edge_ratio(label) == 0.5
    assert dale.mask_values(0.95, 0.9) == (1.0, 0.0)


def test_metric_fixtures():
    p = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    g = np.array([[0, 1], [0, 1]], dtype=np.uint8)
    assert dale.dice(p, g) == 0.5
    assert dale.miou(p, g) == pytest.approx(1 / 3)
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[2, 1] = 1
    b[2, 4] = 1
    assert dale.hd95(a, b) == 3.0
    assert dale.asd(a, b) == 3.0


def test_bures_scalar():
    assert dale.bures_w2([0.0], np.eye(1), [3.0], 4 * np.eye(1)) == pytest.approx(10.0, abs=1e-8)


def test_synthetic_splits_shapes_and_noise():
    train, test = dale.synthetic_splits(n=4, test_n=2, hw=16, seed=3)
    assert len(train) == 4 and len(test) == 2
    s = train[0]
    assert s["image"].shape == (1, 16, 16)
    assert s["label"].shape == (16, 16)
    flipped = s["label"] != s["clean_label"]
    assert np.array_equal(flipped, s["noise_mask"].astype(bool))
    again, _ = dale.synthetic_splits(n=4, test_n=2, hw=16, seed=3)
    assert np.array_equal(again[0]["image"], s["image"])


def test_patch_scores_layout():
    train, _ = dale.synthetic_splits(n=1, test_n=1, hw=16, seed=1)
    sc = dale.patch_scores(train[0]["image"][0], train[0]["clean_label"], patch=8)
    assert (sc["rows"], sc["cols"]) == (2, 2)
    assert max(sc["m"]) == 1.0


def test_train_and_evaluate(tmp_path):
    data = tmp_path / "data"
    dale.write_synthetic_dataset(str(data), n=6, test_n=2, hw=16, seed=2)
    cfg = json.loads(dale.default_config())
    cfg.update(T=1, patch_h=8, patch_w=8, batch_size=4, pixel_cap=32, lr=0.01)
    out = tmp_path / "run"
    csv = dale.train(str(data), json.dumps(cfg), str(out))
    lines = csv.strip().splitlines()
    assert lines[0].startswith("t,phase,loss,Dice")
    assert [l.split(",")[1] for l in lines[1:]] == ["nonfuzzy", "fuzzy"]
    row = dale.evaluate_checkpoint(str(out / "checkpoints" / "t0001.ckpt"), str(data))
    assert 0.0 <= row["Dice"] <= 1.0
    assert row["HD95"] >= 0.0


def test_errors_surface_as_exceptions():
    with pytest.raises(dale.DaleError):
        dale.train("/nonexistent/dir", "{}")
    with pytest.raises(dale.DaleError):
        dale.train("/nonexistent/dir", '{"bogus": 1}')
