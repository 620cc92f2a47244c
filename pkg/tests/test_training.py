"""Tests for the dehazing loss and training loop."""

import csv

import numpy as np
import pytest

from dehaze import network as N
from dehaze import training as TR
from dehaze.encoder import TinyEncoder
from dehaze.errors import ConfigError, NumericError
from dehaze.tensor import Tensor

from oracles import gradcheck
from test_network import TINY, TINY_ADD, fake_outputs


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        TR.LossConfig(w1=-1.0)
    with pytest.raises(ConfigError):
        TR.LossConfig(w2=0.5, feature_levels=())


def test_loss_zero_when_prediction_matches_target():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 16, 16, 3)).astype(np.float32)
    enc = TinyEncoder(np.random.default_rng(1))
    enc.freeze()
    assert TR.dehaze_loss(Tensor(img), img, TR.LossConfig(w2=0.0)).item() == 0.0
    assert TR.dehaze_loss(Tensor(img), img, TR.LossConfig(w2=0.5), enc).item() == 0.0


def test_loss_pixel_term_is_plain_l1():
    base = np.full((1, 8, 8, 3), 0.4, np.float32)
    off = np.full((1, 8, 8, 3), 0.5, np.float32)
    loss = TR.dehaze_loss(Tensor(off), base, TR.LossConfig(w1=1.0, w2=0.0))
    assert loss.item() == pytest.approx(0.1, abs=1e-6)


def test_loss_requires_encoder_for_feature_term():
    img = np.zeros((1, 8, 8, 3), np.float32)
    with pytest.raises(ConfigError):
        TR.dehaze_loss(Tensor(img), img, TR.LossConfig(w2=0.5))
    with pytest.raises(ConfigError):
        TR.dehaze_loss(Tensor(img), np.zeros((1, 8, 8, 1), np.float32))


def test_loss_gradcheck_through_feature_branch():
    enc = TinyEncoder(np.random.default_rng(2))
    for t in enc.params.values():
        t.data = t.data.astype(np.float64)
        t.requires_grad = False
    target = np.random.default_rng(3).uniform(0.2, 0.8, (1, 8, 8, 3))
    cfg = TR.LossConfig(w1=1.0, w2=0.5, feature_levels=(0, 2))

    def build(pred):
        return TR.dehaze_loss(pred, target, cfg, enc)

    pred0 = np.random.default_rng(4).uniform(0.3, 0.7, (1, 8, 8, 3))
    assert gradcheck(build, [pred0], sample=25, rng=np.random.default_rng(0)) < 1e-4


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TR.TrainConfig(batch=0)
    with pytest.raises(ConfigError):
        TR.TrainConfig(lr_max=1e-6, lr_min=1e-4)


def _pairs(n, size, seed):
    from test_encoder import make_corpus
    imgs, labels = make_corpus(n, size, seed=seed)
    return imgs[labels == 0], imgs[labels == 1]


def test_training_runs_and_writes_artifacts(tmp_path):
    hazy, clear = _pairs(4, 16, seed=0)
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(0))
    cfg = TR.TrainConfig(steps=6, batch=2, val_every=3, val_count=2, seed=0,
                         log_path=str(tmp_path / "log.csv"),
                         checkpoint_path=str(tmp_path / "net.tmda"))
    report = TR.train_dehaze(net, hazy, clear, cfg, TR.LossConfig(w2=0.0))
    assert report["steps_run"] == 6
    assert np.isfinite(report["final_loss"])
    assert np.isfinite(report["val_psnr"])

    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "lr", "loss", "psnr_val", "ssim_val"]
    assert len(rows) == 7
    assert rows[3][3] != ""  # validation metrics recorded at step 3

    back = N.DehazeNet.load(tmp_path / "net.tmda", TINY_ADD)
    img = hazy[:1]
    assert np.array_equal(back.forward(img, train=True).data,
                          net.forward(img, train=True).data)


def test_training_is_deterministic():
    hazy, clear = _pairs(3, 16, seed=1)
    reports = []
    for _ in range(2):
        net = N.DehazeNet(TINY_ADD, np.random.default_rng(7))
        reports.append(TR.train_dehaze(net, hazy, clear,
                                       TR.TrainConfig(steps=4, batch=2, val_every=0,
                                                      seed=3),
                                       TR.LossConfig(w2=0.0)))
    assert reports[0]["final_loss"] == reports[1]["final_loss"]


def test_training_reduces_loss():
    hazy, clear = _pairs(2, 16, seed=2)
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(1))
    first = TR.dehaze_loss(net.forward(hazy, train=True), clear,
                           TR.LossConfig(w2=0.0)).item()
    cfg = TR.TrainConfig(steps=60, batch=2, lr_max=2e-3, lr_min=2e-4, val_every=0, seed=0)
    report = TR.train_dehaze(net, hazy, clear, cfg, TR.LossConfig(w2=0.0))
    assert report["final_loss"] < 0.8 * first


def test_training_with_guided_fusion_and_feature_loss():
    hazy, clear = _pairs(2, 16, seed=3)
    enc = TinyEncoder(np.random.default_rng(2))
    enc.freeze()
    net = N.DehazeNet(TINY, np.random.default_rng(3), d_image=enc.d_c)
    report = TR.train_dehaze(net, hazy, clear,
                             TR.TrainConfig(steps=2, batch=2, val_every=0, seed=0),
                             TR.LossConfig(w2=0.2), encoder=enc)
    assert np.isfinite(report["final_loss"])


def test_guided_fusion_without_encoder_fails():
    hazy, clear = _pairs(1, 16, seed=4)
    net = N.DehazeNet(TINY, np.random.default_rng(4), d_image=6)
    with pytest.raises(ConfigError):
        TR.train_dehaze(net, hazy, clear, TR.TrainConfig(steps=1))


def test_early_stop_on_target_psnr():
    hazy, clear = _pairs(2, 16, seed=5)
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(5))
    cfg = TR.TrainConfig(steps=40, batch=2, val_every=2, val_count=2,
                         target_psnr=0.0, seed=0)
    report = TR.train_dehaze(net, hazy, clear, cfg, TR.LossConfig(w2=0.0))
    assert report["stopped_early"]
    assert report["steps_run"] == 2


def test_nonfinite_loss_aborts():
    hazy, clear = _pairs(1, 16, seed=6)
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(6))
    net.out_b.data[:] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        TR.train_dehaze(net, hazy, clear, TR.TrainConfig(steps=1, batch=1),
                        TR.LossConfig(w2=0.0))


def test_empty_training_set_rejected():
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(0))
    empty = np.zeros((0, 16, 16, 3), np.float32)
    with pytest.raises(ConfigError):
        TR.train_dehaze(net, empty, empty, TR.TrainConfig(steps=1))


def test_validate_and_evaluate_identity_on_equal_pairs():
    rng = np.random.default_rng(8)
    imgs = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(9))  # identity at init
    p, s = TR.validate(net, imgs, imgs)
    assert p == 100.0 and s == 1.0
    report = TR.evaluate(net, imgs, imgs)
    assert report["psnr"] == 100.0 and report["ssim"] == 1.0
    assert report["psnr_hazy_baseline"] == 100.0
    assert report["count"] == 2 and len(report["per_image"]) == 2


def test_restore_clips_and_preserves_shape():
    rng = np.random.default_rng(10)
    net = N.DehazeNet(TINY_ADD, np.random.default_rng(11))
    net.out_w.data[:] = rng.normal(size=net.out_w.shape) * 3
    imgs = rng.uniform(size=(3, 16, 16, 3)).astype(np.float32)
    out = TR.restore(net, imgs, batch=2)
    assert out.shape == imgs.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
