import math
import os
import subprocess

import numpy as np
import pytest

import advseg


def test_scene_is_deterministic():
    img, lab, sid = advseg.generate_scene(3, seed=5, height=32, width=32)
    img2, lab2, _ = advseg.generate_scene(3, seed=5, height=32, width=32)
    assert img.shape == (3, 32, 32)
    assert lab.shape == (32, 32)
    assert sid == "scene_00003"
    assert np.array_equal(img, img2) and np.array_equal(lab, lab2)
    labelled = lab[lab != advseg.VOID]
    assert labelled.size > 0 and labelled.max() < 4


def test_softmax_and_sigmoid():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    p = advseg.channel_softmax(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    assert np.allclose(p, e / e.sum(axis=1, keepdims=True), atol=1e-12)
    s = advseg.sigmoid(x)
    assert np.allclose(s, 1 / (1 + np.exp(-x)), atol=1e-12)


def test_conv_matches_numpy():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    y = advseg.conv2d(x, k, b, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                want[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * k[o]).sum() + b[o]
    assert np.allclose(y, want, atol=1e-12)


def test_pool_shape():
    assert advseg.maxpool2(np.zeros((1, 2, 8, 6))).shape == (1, 2, 4, 3)


def test_mce_skips_void():
    p = np.full((1, 2, 1, 2), 0.5)
    lab = np.array([[0, advseg.VOID]], dtype=np.uint8)
    assert advseg.mce_loss(p, lab) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_both_targets():
    a = np.full((1, 1, 2, 2), 0.25)
    assert advseg.bce_loss(a, 1) == pytest.approx(-math.log(0.25), abs=1e-12)
    assert advseg.bce_loss(a, 0) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_scaling_keeps_simplex():
    p = advseg.channel_softmax(np.random.default_rng(2).normal(size=(1, 3, 4, 4)))
    lab = np.zeros((4, 4), dtype=np.uint8)
    y = advseg.encode_scaling(p, lab, tau=0.9)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert (y[0, 0] >= 0.9 - 1e-12).all()


def test_product_channels():
    p = advseg.channel_softmax(np.zeros((1, 4, 4, 4)))
    img = np.ones((1, 3, 4, 4))
    lab = np.zeros((4, 4), dtype=np.uint8)
    assert advseg.encode_product(img, p, lab).shape == (1, 12, 4, 4)


def test_confusion_and_metrics():
    gt = np.array([[0, 0, 1, advseg.VOID]], dtype=np.uint8)
    pr = np.array([[0, 1, 1, 0]], dtype=np.uint8)
    cm = advseg.confusion(pr, gt, 2)
    assert cm.tolist() == [[1, 1], [0, 1]]
    r = advseg.evaluate(pr, gt, 2)
    assert r["pixel_acc"] == pytest.approx(2 / 3)
    assert r["mean_iou"] == pytest.approx(0.5)


def test_receptive_fields():
    assert advseg.receptive_field("adversary", "large")[:2] == (34, 34)
    assert advseg.receptive_field("adversary", "small")[:2] == (18, 18)
    with pytest.raises(ValueError):
        advseg.receptive_field("nope")


def test_gradcheck_suite_passes():
    cases = advseg.gradcheck_suite()
    assert cases
    assert max(err for _, _, err in cases) < 1e-4


def test_run_command_roundtrip(tmp_path):
    cfg = {"height": "16", "width": "16", "n_train": "4", "n_val": "2", "n_test": "1"}
    code, out, err = advseg.run_command("gen-data", cfg, str(tmp_path / "data"))
    assert code == 0, err
    assert (tmp_path / "data" / "manifest.txt").exists()
    code, _, _ = advseg.run_command("no-such-command", {}, str(tmp_path / "x"))
    assert code == 1


@pytest.mark.skipif("ADVSEG_CLI" not in os.environ, reason="command-line tool not provided")
def test_cli_help():
    r = subprocess.run([os.environ["ADVSEG_CLI"], "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "train" in r.stdout
