"""scikit-learn style wrapper: search, derive and fine-tune in one ``fit`` call."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from . import pipeline
from .config import config_from_dict
from .data import Dataset, PartitionSpec, partition, split_train_val_test
from .supernet import derive_normal_net


def _as_images(X, channels: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        return X
    if X.ndim == 3:
        return X[:, None]
    side = int(round(np.sqrt(X.shape[1] / channels)))
    if channels * side * side != X.shape[1]:
        raise ValueError(f"{X.shape[1]} features do not form {channels} square image channels")
    return X.reshape(len(X), channels, side, side)


class FDNASClassifier(ClassifierMixin, BaseEstimator):
    """Federated architecture search followed by FedAvg training of the derived net.

    ``X`` may be ``(n, C, H, W)``, ``(n, H, W)`` or flat ``(n, C*H*W)`` with
    square images. Training samples are spread over ``num_devices`` simulated
    devices according to ``partition``.
    """

    def __init__(self, num_devices=10, rounds=30, local_epochs=5, finetune_rounds=50, partition="label_shards",
                 lambda2=0.0, latency_profile="gpu", channels=1, batch_size=16, val_fraction=0.15,
                 workers=1, random_state=0):
        self.num_devices = num_devices
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.finetune_rounds = finetune_rounds
        self.partition = partition
        self.lambda2 = lambda2
        self.latency_profile = latency_profile
        self.channels = channels
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.workers = workers
        self.random_state = random_state

    def _config(self, images: np.ndarray, num_classes: int):
        _, c, h, w = images.shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        return config_from_dict({
            "seed": int(self.random_state),
            "workers": int(self.workers),
            "data": {"num_classes": num_classes, "image_size": h, "channels": c},
            "partition": {"kind": self.partition, "val_fraction": self.val_fraction, "test_fraction": 0.0},
            "federation": {"num_devices": self.num_devices, "rounds": self.rounds,
                           "local_epochs": self.local_epochs},
            "optim": {"batch_size": self.batch_size},
            "loss": {"lambda2": self.lambda2, "search_profile": self.latency_profile},
            "finetune": {"rounds": self.finetune_rounds},
        }).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        images = _as_images(X, self.channels)
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        cfg = self._config(images, self.classes_.size)
        ds = Dataset(images, encoded.astype(np.int64), int(self.classes_.size))
        spec = PartitionSpec(kind=cfg.partition.kind, seed=cfg.seed)
        parts = [split_train_val_test(p, cfg.partition.val_fraction, 0.0, cfg.seed)
                 for p in partition(ds, spec, cfg.federation.num_devices, cfg.seed)]
        tables = pipeline.build_tables(cfg, cfg.search_space())
        run = pipeline.run_search(cfg, ds, parts, tables)
        self.architecture_ = derive_normal_net(run.server.to_net(), f"fit@round{run.server.round}")
        self.net_, self.finetune_history_ = pipeline.run_finetune(cfg, self.architecture_, ds, parts)
        self.search_history_ = [r.metrics() for r in run.server.history]
        self.input_shape_ = images.shape[1:]
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        images = _as_images(X, self.channels)
        if images.shape[1:] != self.input_shape_:
            raise ValueError(f"expected images of shape {self.input_shape_}, got {images.shape[1:]}")
        return images

    def predict_proba(self, X) -> np.ndarray:
        images = self._images(X)
        with ad.no_grad():
            logits = self.net_.forward(images, False, False).data
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
