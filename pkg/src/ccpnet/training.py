"""Balanced voxel sampling, weighted softmax loss, SGD and SC/SSC metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError
from .network import Network, predict_labels
from .voxel import OCCLUDED, OUTSIDE, SURFACE, Scene

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """The evaluation domain is empty."""


def sample_balanced(labels, visibility, ratio: float = 2, seed=0, occluded_only: bool = False) -> np.ndarray:
    """0/1 voxel weights: every in-frustum occupied voxel plus a random subset
    of in-frustum empty voxels, ``ratio`` empty per occupied (capped by availability)."""
    labels = np.asarray(labels)
    visibility = np.asarray(visibility)
    if labels.shape != visibility.shape:
        raise ShapeError(f"labels {labels.shape} and visibility {visibility.shape} differ")
    in_frustum = visibility != OUTSIDE
    occupied = (labels != 0) & in_frustum
    pool = (labels == 0) & in_frustum
    if occluded_only:
        pool &= visibility == OCCLUDED
    weights = np.zeros(labels.shape, dtype=np.float64)
    n_occ = int(occupied.sum())
    if n_occ == 0:
        warnings.warn("no occupied voxels in the frustum; all sample weights are zero", RuntimeWarning)
        return weights
    weights[occupied] = 1.0
    candidates = np.flatnonzero(pool)
    k = min(int(ratio * n_occ), candidates.size)
    rng = np.random.default_rng(seed)
    weights.reshape(-1)[rng.choice(candidates, size=k, replace=False)] = 1.0
    return weights


@dataclass
class LossResult:
    loss: float            # sum over weighted voxels
    mean_loss: float       # loss / sum(w)
    grad: np.ndarray       # d loss / d scores (or d mean_loss when normalised)
    weight_sum: float


def log_softmax(scores, axis=1):
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_loss(scores, labels, weights, normalize: bool = False) -> LossResult:
    """Weighted voxel-wise softmax cross-entropy.

    ``scores`` is [B, C, D, H, W]; ``labels`` and ``weights`` are [B, D, H, W]
    (or [D, H, W] for B = 1).  The gradient is w * (softmax - onehot),
    divided by sum(w) when ``normalize`` is set.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=scores.dtype)
    if labels.ndim == scores.ndim - 2:
        labels = labels[None]
        weights = weights[None] if weights.ndim == labels.ndim - 1 else weights
    if labels.shape != (scores.shape[0],) + scores.shape[2:] or weights.shape != labels.shape:
        raise ShapeError(f"scores {list(scores.shape)} incompatible with labels {list(labels.shape)}")
    if labels.max(initial=0) >= scores.shape[1]:
        raise ShapeError("label index exceeds class count")
    wsum = float(weights.sum())
    if wsum == 0:
        warnings.warn("sum of sample weights is zero; loss is 0", RuntimeWarning)
        return LossResult(0.0, 0.0, np.zeros_like(scores), 0.0)
    logp = log_softmax(scores)
    idx = labels.astype(np.int64)[:, None]
    nll = -np.take_along_axis(logp, idx, axis=1)[:, 0]
    loss = float((weights * nll).sum())
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1, axis=1)
    grad *= weights[:, None]
    if normalize:
        grad /= wsum
    return LossResult(loss, loss / wsum, grad, wsum)


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 1
    # ((iteration, learning_rate), ...) applied once the iteration is reached
    lr_steps: tuple = ()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError("momentum and weight_decay must be >= 0, batch_size >= 1")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate
        for it, value in sorted(self.lr_steps):
            if iteration >= it:
                lr = value
        return lr


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity:
    v <- m v + g + wd w;  w <- w - lr v."""

    def __init__(self, params: dict, cfg: SgdConfig | None = None):
        self.params = params
        self.cfg = cfg or SgdConfig()
        self.velocity = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.iteration = 0

    def step(self):
        c = self.cfg
        lr = c.lr_at(self.iteration)
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= c.momentum
            v += p.grad
            if c.weight_decay:
                v += c.weight_decay * p.value
            p.value -= lr * v
            p.zero_grad()
        self.iteration += 1


# --- metrics -----------------------------------------------------------------

def _ratio(num, den, what):
    if den == 0:
        warnings.warn(f"{what} is undefined (empty denominator); reporting 0", RuntimeWarning)
        return 0.0
    return num / den


def evaluation_domain(visibility) -> np.ndarray:
    visibility = np.asarray(visibility)
    return (visibility == OCCLUDED) | (visibility == SURFACE)


def _domain(pred, gt, vis):
    pred, gt, vis = np.asarray(pred), np.asarray(gt), np.asarray(vis)
    if not (pred.shape == gt.shape == vis.shape):
        raise ShapeError(f"prediction {pred.shape}, ground truth {gt.shape}, visibility {vis.shape} differ")
    dom = evaluation_domain(vis)
    if not dom.any():
        raise EvaluationError("evaluation domain (occluded + surface voxels) is empty")
    return pred[dom], gt[dom]


@dataclass
class SCMetrics:
    precision: float
    recall: float
    iou: float
    tp: int
    fp: int
    fn: int


def evaluate_sc(pred, gt, visibility) -> SCMetrics:
    """Binary occupied/empty precision, recall and IoU over occluded + surface voxels."""
    p, g = _domain(pred, gt, visibility)
    p, g = p != 0, g != 0
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    return SCMetrics(_ratio(tp, tp + fp, "precision"), _ratio(tp, tp + fn, "recall"),
                     _ratio(tp, tp + fp + fn, "IoU"), tp, fp, fn)


@dataclass
class SSCMetrics:
    iou: np.ndarray        # per semantic class 1..num_classes-1
    present: np.ndarray    # class appears in gt or prediction within the domain
    mean_iou: float


def evaluate_ssc(pred, gt, visibility, num_classes: int = 12) -> SSCMetrics:
    p, g = _domain(pred, gt, visibility)
    classes = np.arange(1, num_classes)
    ious = np.zeros(classes.size)
    present = np.zeros(classes.size, dtype=bool)
    for i, c in enumerate(classes):
        pc, gc = p == c, g == c
        tp = int((pc & gc).sum())
        union = int((pc | gc).sum())
        if union:
            present[i] = True
            ious[i] = tp / union
    mean = float(ious[present].mean()) if present.any() else 0.0
    return SSCMetrics(ious, present, mean)


@dataclass
class MetricsReport:
    sc_precision: float
    sc_recall: float
    sc_iou: float
    ssc_iou: dict = field(default_factory=dict)   # class name -> IoU
    ssc_mean_iou: float = 0.0

    @classmethod
    def from_volumes(cls, pred, gt, visibility, class_names) -> "MetricsReport":
        sc = evaluate_sc(pred, gt, visibility)
        ssc = evaluate_ssc(pred, gt, visibility, len(class_names))
        per_class = {name: float(v) for name, v in zip(class_names[1:], ssc.iou)}
        return cls(sc.precision, sc.recall, sc.iou, per_class, ssc.mean_iou)

    def to_text(self) -> str:
        rows = [("sc_precision", self.sc_precision), ("sc_recall", self.sc_recall), ("sc_iou", self.sc_iou)]
        rows += [(f"ssc_iou.{k}", v) for k, v in self.ssc_iou.items()]
        rows.append(("ssc_mean_iou", self.ssc_mean_iou))
        return "".join(f"{k}\t{v:.4f}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("\t")
                values[k] = float(v)
        per_class = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("ssc_iou.")}
        return cls(values["sc_precision"], values["sc_recall"], values["sc_iou"], per_class,
                   values["ssc_mean_iou"])


# --- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list
    metrics: MetricsReport | None = None


def smoothed(values, window: int = 10) -> np.ndarray:
    """Means of consecutive non-overlapping windows."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // window
    return values[: n * window].reshape(n, window).mean(axis=1)


def train(net: Network, scene, steps: int, sgd: SgdConfig | None = None, seed: int = 0,
          ratio: float = 2, occluded_only: bool = False, callback=None, class_names=None) -> TrainResult:
    """Overfit ``net`` on one scene, or cycle through a list of scenes.

    Each SGD step averages the gradients of ``sgd.batch_size`` passes, taking
    scenes in turn; sample weights are redrawn for every pass.  Metrics, when
    requested, are computed on the first scene.
    """
    scenes = [scene] if isinstance(scene, Scene) else list(scene)
    if not scenes:
        raise ShapeError("no training scenes")
    for sc in scenes:
        if sc.dims != net.cfg.input_dims:
            raise ShapeError(f"scene dims {sc.dims} do not match network input {net.cfg.input_dims}")
    if net.plan.output_spatial != net.cfg.input_dims:
        raise ShapeError("training needs a full-resolution network")
    opt = SGD(net.parameters(), sgd)
    batch = opt.cfg.batch_size
    inputs = [sc.ftsdf.astype(net.dtype)[None, None] for sc in scenes]
    rng = np.random.default_rng(seed)
    losses = []
    net.zero_grad()
    for step in range(steps):
        total = 0.0
        for j in range(batch):
            k = (step * batch + j) % len(scenes)
            sc, x = scenes[k], inputs[k]
            w = sample_balanced(sc.labels, sc.visibility, ratio, rng.integers(2 ** 63), occluded_only)
            res = softmax_loss(net.forward(x), sc.labels, w, normalize=True)
            net.backward(res.grad / batch if batch > 1 else res.grad)
            total += res.mean_loss
        opt.step()
        loss = total / batch
        losses.append(loss)
        log.info("step %d loss %.6f", step, loss)
        if callback is not None:
            callback(step, loss)
    metrics = None
    if class_names is not None:
        metrics = evaluate_scene(net, scenes[0], class_names)
    return TrainResult(losses, metrics)


def evaluate_scene(net: Network, scene: Scene, class_names) -> MetricsReport:
    scores = net.forward(scene.ftsdf.astype(net.dtype)[None, None], cache=False)
    pred = predict_labels(scores)[0]
    return MetricsReport.from_volumes(pred, scene.labels, scene.visibility, class_names)
