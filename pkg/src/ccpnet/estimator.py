"""scikit-learn style wrappers: a depth-to-fTSDF transformer and a trainable
scene-completion estimator."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import load_config, load_grid_spec
from .network import NetworkConfig, build, predict_labels
from .training import SgdConfig, evaluate_sc, log_softmax, train
from .validation import check_depth_images, check_label_volumes, check_positive_int, check_volumes
from .voxel import Scene, VoxelGridSpec, voxelize


def _grid(grid) -> VoxelGridSpec:
    return grid if isinstance(grid, VoxelGridSpec) else load_grid_spec(grid)


class FtsdfVoxelizer(TransformerMixin, BaseEstimator):
    """Turns depth images into flipped-TSDF volumes on a fixed grid.

    Stateless: ``fit`` only resolves the grid so the usual fit/transform
    pipeline protocol works.
    """

    def __init__(self, grid="desk"):
        self.grid = grid

    def fit(self, X=None, y=None):
        self.grid_spec_ = _grid(self.grid)
        return self

    def transform(self, X) -> np.ndarray:
        """(n, D, H, W) float32 fTSDF volumes."""
        return self.transform_with_visibility(X)[0]

    def transform_with_visibility(self, X):
        """fTSDF volumes plus the matching (n, D, H, W) uint8 visibility states."""
        check_is_fitted(self, "grid_spec_")
        images = check_depth_images(X)
        pairs = [voxelize(d, self.grid_spec_) for d in images]
        ftsdf = np.stack([f for f, _ in pairs]).astype(np.float32)
        vis = np.stack([v for _, v in pairs]).astype(np.uint8)
        return ftsdf, vis


class SSCEstimator(BaseEstimator):
    """Semantic scene completion network trained with momentum SGD.

    ``X`` holds fTSDF volumes (n, D, H, W); ``y`` the per-voxel class labels.
    Training and scoring also need the visibility states, passed as the
    ``visibility`` keyword.
    """

    def __init__(self, config="desk", steps=200, learning_rate=0.01, momentum=0.9,
                 weight_decay=0.0005, ratio=2.0, occluded_only=False, seed=0, dtype="float32"):
        self.config = config
        self.steps = steps
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.ratio = ratio
        self.occluded_only = occluded_only
        self.seed = seed
        self.dtype = dtype

    def _network_config(self) -> NetworkConfig:
        cfg = self.config if isinstance(self.config, NetworkConfig) else load_config(self.config)
        if cfg.output_resolution != "full":
            raise ValueError("the estimator needs a full-resolution network")
        return cfg

    def fit(self, X, y, visibility=None):
        if visibility is None:
            raise ValueError("fit needs the visibility volumes (visibility=...)")
        steps = check_positive_int(self.steps, "steps", minimum=0)
        cfg = self._network_config()
        X = check_volumes(X, cfg.input_dims, dtype=np.float32)
        y = check_label_volumes(y, X, cfg.num_classes)
        vis = check_label_volumes(visibility, X, 4, name="visibility")
        sgd = SgdConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                        weight_decay=self.weight_decay)
        net = build(cfg, seed=self.seed, dtype=np.dtype(self.dtype))
        scenes = [Scene(x, lab, v) for x, lab, v in zip(X, y, vis)]
        result = train(net, scenes, steps, sgd, seed=self.seed, ratio=self.ratio,
                       occluded_only=self.occluded_only)
        self.network_ = net
        self.loss_curve_ = np.asarray(result.losses)
        self.classes_ = np.arange(cfg.num_classes)
        self.n_iter_ = steps
        return self

    def _scores(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        net = self.network_
        X = check_volumes(X, net.cfg.input_dims, dtype=net.dtype)
        return np.concatenate([net.forward(x[None, None], cache=False) for x in X])

    def predict_proba(self, X) -> np.ndarray:
        """(n, K, D, H, W) class probabilities."""
        return np.exp(log_softmax(self._scores(X).astype(np.float64)))

    def predict(self, X) -> np.ndarray:
        """(n, D, H, W) predicted labels."""
        return predict_labels(self._scores(X))

    def score(self, X, y, visibility=None) -> float:
        """Mean scene-completion IoU over the given volumes."""
        if visibility is None:
            raise ValueError("score needs the visibility volumes (visibility=...)")
        pred = self.predict(X)
        y = check_label_volumes(y, pred, len(self.classes_))
        vis = check_label_volumes(visibility, pred, 4, name="visibility")
        return float(np.mean([evaluate_sc(p, t, v).iou for p, t, v in zip(pred, y, vis)]))
