import warnings

import numpy as np
import pytest

from ccpnet.exceptions import ShapeError
from ccpnet.gradcheck import check_gradients
from ccpnet.network import build, tiny_config
from ccpnet.synthetic import make_scene
from ccpnet.tensor import Parameter
from ccpnet.training import (SGD, EvaluationError, MetricsReport, SgdConfig, evaluate_sc, evaluate_ssc,
                             sample_balanced, smoothed, softmax_loss, train)
from ccpnet.voxel import GRID_PRESETS, OCCLUDED, OUTSIDE, SURFACE, VISIBLE_EMPTY
from oracles import confusion_loop, metrics_from_confusion


def _volume(n_occ, n_empty, n_outside=7):
    n = n_occ + n_empty + n_outside
    labels = np.zeros(n, np.uint8)
    labels[:n_occ] = 3
    vis = np.full(n, VISIBLE_EMPTY, np.uint8)
    vis[n_occ + n_empty:] = OUTSIDE
    if n_outside:
        labels[n - 2:] = 5   # occupied but outside the frustum
    return labels.reshape(1, 1, n), vis.reshape(1, 1, n)


def test_sample_balanced_counts():
    labels, vis = _volume(10, 40)
    w = sample_balanced(labels, vis, 2, seed=1)
    assert w.sum() == 30 and np.all(w[labels == 3] == 1)
    assert not w[vis == OUTSIDE].any()
    assert set(np.unique(w)) <= {0.0, 1.0}
    labels, vis = _volume(10, 5)
    assert sample_balanced(labels, vis, 2, seed=1).sum() == 15


def test_sample_balanced_determinism_and_occluded_only():
    labels, vis = _volume(10, 40)
    assert np.array_equal(sample_balanced(labels, vis, seed=4), sample_balanced(labels, vis, seed=4))
    assert not np.array_equal(sample_balanced(labels, vis, seed=4), sample_balanced(labels, vis, seed=5))
    vis[0, 0, 10:20] = OCCLUDED
    w = sample_balanced(labels, vis, seed=4, occluded_only=True)
    assert w.sum() == 20 and np.all(w[0, 0, 10:20] == 1)


def test_sample_balanced_no_occupied_warns():
    labels, vis = _volume(0, 10, 0)
    with pytest.warns(RuntimeWarning):
        assert not sample_balanced(labels, vis).any()
    with pytest.raises(ShapeError):
        sample_balanced(labels, vis[..., :3])


def test_loss_uniform_and_margin():
    scores = np.zeros((1, 12, 1, 1, 2))
    labels = np.array([[[4, 7]]])
    res = softmax_loss(scores, labels, np.array([[[1.0, 0.0]]]))
    assert abs(res.loss - np.log(12)) < 1e-12 and abs(res.loss - 2.48490665) < 1e-8
    assert res.weight_sum == 1 and not res.grad[..., 1].any()
    scores[0, 4, 0, 0, 0] = 20
    assert softmax_loss(scores, labels, np.array([[[1.0, 0.0]]])).loss < 1e-6


def test_loss_zero_weights():
    with pytest.warns(RuntimeWarning):
        res = softmax_loss(np.ones((1, 3, 1, 1, 2)), np.zeros((1, 1, 2), int), np.zeros((1, 1, 2)))
    assert res.loss == 0 and not res.grad.any()


def test_loss_raw_and_normalised():
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((1, 4, 2, 2, 2))
    labels = rng.integers(0, 4, (2, 2, 2))
    w = np.array([1.0, 1, 0, 1, 0, 1, 1, 0]).reshape(2, 2, 2)
    raw = softmax_loss(scores, labels, w)
    norm = softmax_loss(scores, labels, w, normalize=True)
    assert abs(raw.mean_loss - raw.loss / 5) < 1e-15
    assert np.allclose(norm.grad * 5, raw.grad, rtol=0, atol=1e-15)


def test_loss_gradcheck():
    rng = np.random.default_rng(1)
    scores = rng.standard_normal((1, 12, 1, 1, 2))
    labels = np.array([[3, 9]]).reshape(1, 1, 2)
    w = np.ones((1, 1, 2))
    err = check_gradients(lambda s: np.array(softmax_loss(s, labels, w).loss),
                          lambda g: softmax_loss(scores, labels, w).grad * float(g), [scores], samples=24)
    assert err < 1e-6


def _scalar(value=1.0):
    return {"w": Parameter("w", np.array([value]))}


def test_sgd_hand_cases():
    p = _scalar()
    opt = SGD(p, SgdConfig(0.01, 0.0, 0.0))
    opt.step()
    assert p["w"].value[0] == 1.0
    p["w"].grad[:] = 1
    opt.step()
    assert abs(p["w"].value[0] - 0.99) < 1e-15 and p["w"].grad[0] == 0
    p = _scalar()
    opt = SGD(p, SgdConfig(0.01, 0.9, 0.0))
    for _ in range(2):
        p["w"].grad[:] = 1
        opt.step()
    assert abs(1 - p["w"].value[0] - 0.029) < 1e-15


def test_sgd_weight_decay_and_schedule():
    p = _scalar(2.0)
    SGD(p, SgdConfig(0.1, 0.0, 0.5)).step()
    assert abs(p["w"].value[0] - 1.9) < 1e-15
    cfg = SgdConfig(0.01, lr_steps=((150, 0.001),))
    assert cfg.lr_at(149) == 0.01 and cfg.lr_at(150) == 0.001
    with pytest.raises(ValueError):
        SgdConfig(0.0)
    with pytest.raises(ValueError):
        SgdConfig(batch_size=0)


def test_metrics_hand_cases():
    vis = np.full((1, 1, 8), OCCLUDED, np.uint8)
    gt = np.array([1, 1, 1, 1, 0, 0, 0, 0], np.uint8).reshape(1, 1, 8)
    sc = evaluate_sc(gt, gt, vis)
    assert (sc.precision, sc.recall, sc.iou) == (1.0, 1.0, 1.0)
    pred = np.array([1, 1, 0, 0, 1, 1, 0, 0], np.uint8).reshape(1, 1, 8)
    sc = evaluate_sc(pred, gt, vis)
    assert sc.precision == 0.5 and sc.recall == 0.5 and abs(sc.iou - 1 / 3) < 1e-15
    with pytest.warns(RuntimeWarning):
        sc = evaluate_sc(np.zeros_like(gt), gt, vis)
    assert (sc.precision, sc.recall, sc.iou) == (0.0, 0.0, 0.0)
    half = np.array([1, 1, 0, 0, 0, 0, 0, 0], np.uint8).reshape(1, 1, 8)
    ssc = evaluate_ssc(half, gt, vis)
    assert ssc.iou[0] == 0.5 and ssc.present.sum() == 1 and ssc.mean_iou == 0.5
    assert evaluate_ssc(gt, gt, vis).mean_iou == 1.0


def test_metrics_domain():
    gt = np.ones((1, 1, 4), np.uint8)
    vis = np.array([OUTSIDE, VISIBLE_EMPTY, SURFACE, OCCLUDED], np.uint8).reshape(1, 1, 4)
    pred = np.array([0, 0, 1, 1], np.uint8).reshape(1, 1, 4)
    assert evaluate_sc(pred, gt, vis).iou == 1.0
    with pytest.raises(EvaluationError):
        evaluate_sc(pred, gt, np.full_like(vis, VISIBLE_EMPTY))
    with pytest.raises(ShapeError):
        evaluate_sc(pred[..., :2], gt, vis)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_confusion_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 9, 3))
    k = 12
    gt = rng.integers(0, k, shape).astype(np.uint8)
    pred = np.where(rng.random(shape) < 0.5, gt, rng.integers(0, k, shape)).astype(np.uint8)
    vis = rng.integers(0, 4, shape).astype(np.uint8)
    vis.flat[0] = OCCLUDED
    prec, rec, iou, per_class = metrics_from_confusion(confusion_loop(pred, gt, vis, k))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sc = evaluate_sc(pred, gt, vis)
        ssc = evaluate_ssc(pred, gt, vis, k)
    assert (sc.precision, sc.recall, sc.iou) == (prec, rec, iou)
    for c, ref in enumerate(per_class):
        assert ssc.present[c] == (ref is not None)
        assert ssc.iou[c] == (ref or 0.0)
    present = [v for v in per_class if v is not None]
    assert ssc.mean_iou == (float(np.mean(present)) if present else 0.0)


def test_report_text_round_trip():
    rep = MetricsReport(0.5, 0.25, 0.2, {"bed": 0.12345, "sofa": 1.0}, 0.5617)
    text = rep.to_text()
    assert text.splitlines()[0] == "sc_precision\t0.5000"
    assert "ssc_iou.bed\t0.1235" in text.splitlines()
    back = MetricsReport.from_text(text)
    assert back.ssc_iou == {"bed": 0.1235, "sofa": 1.0} and back.sc_iou == 0.2


def test_smoothed():
    assert smoothed(np.arange(25.0)).tolist() == [4.5, 14.5]


def test_train_is_deterministic_and_learns():
    _, scene = make_scene(GRID_PRESETS["tiny"], seed=0, n_objects=3)
    runs = [train(build(tiny_config(), seed=0), scene, 30, seed=2).losses for _ in range(2)]
    assert runs[0] == runs[1]
    assert smoothed(runs[0]).tolist() == sorted(smoothed(runs[0]).tolist(), reverse=True)


def test_train_batch_accumulation():
    _, a = make_scene(GRID_PRESETS["tiny"], seed=0, n_objects=2)
    _, b = make_scene(GRID_PRESETS["tiny"], seed=1, n_objects=2)
    res = train(build(tiny_config(), seed=0), [a, b], 3, SgdConfig(batch_size=2), class_names=[str(i) for i in range(12)])
    assert len(res.losses) == 3 and all(np.isfinite(res.losses))
    assert 0 <= res.metrics.sc_iou <= 1


def test_train_shape_mismatch():
    _, scene = make_scene(GRID_PRESETS["desk"], seed=0)
    with pytest.raises(ShapeError):
        train(build(tiny_config()), scene, 1)
