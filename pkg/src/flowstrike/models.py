"""Target classifiers, the frozen condition-feature network, and the
query-counted hard-label oracle."""

from __future__ import annotations

import numpy as np

from . import tff
from .data import Dataset
from .tensor import (
    Prng,
    Tensor,
    avg_pool2d,
    bias_add,
    conv2d,
    matmul,
    no_grad,
    softmax_cross_entropy,
    zero_grads,
)
from .train import AdamState, TrainingDiverged, adam_step


class BudgetExceededError(RuntimeError):
    """Signalled when a hard-label query would push the counter past the budget."""


class SmallCNN:
    """Three 3x3 conv layers (C->16->32->64), each rectified and 2x2
    average-pooled, then a linear head. Doubles as attack target and as the
    condition-feature extractor (last conv activation, before its pool)."""

    CONV_CHANNELS = (16, 32, 64)

    def __init__(self, in_channels: int, num_classes: int, image_size: int, seed: int = 0):
        if image_size % 8 != 0:
            raise ValueError(f"image size {image_size} not divisible by 8")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.image_size = image_size
        self._params: dict[str, Tensor] = {}
        cin = in_channels
        for i, cout in enumerate(self.CONV_CHANNELS):
            rng = Prng.from_path(seed, "cnn-init", i)
            std = np.sqrt(2.0 / (cin * 9))
            self._params[f"conv{i}.w"] = Tensor(
                rng.normal((cout, cin, 3, 3)) * std, requires_grad=True
            )
            self._params[f"conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        feat_dim = self.CONV_CHANNELS[-1] * (image_size // 8) ** 2
        rng = Prng.from_path(seed, "cnn-init", "head")
        self._params["fc.w"] = Tensor(
            rng.normal((feat_dim, num_classes)) * np.sqrt(1.0 / feat_dim),
            requires_grad=True,
        )
        self._params["fc.b"] = Tensor(np.zeros(num_classes), requires_grad=True)
        self.train_report: dict | None = None

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag

    def features(self, x: Tensor) -> Tensor:
        """Activation map of the last conv layer (rectified, before pooling)."""
        h = x
        for i in range(len(self.CONV_CHANNELS)):
            h = conv2d(h, self._params[f"conv{i}.w"], stride=1, padding=1)
            h = bias_add(h, self._params[f"conv{i}.b"], axis=1)
            h = h.relu()
            if i < len(self.CONV_CHANNELS) - 1:
                h = avg_pool2d(h, 2)
        return h

    def forward(self, x: Tensor) -> Tensor:
        h = avg_pool2d(self.features(x), 2)
        flat = h.reshape(h.shape[0], -1)
        return bias_add(matmul(flat, self._params["fc.w"]), self._params["fc.b"], axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}


def predict_labels(model: SmallCNN, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Hard labels for a stack of images, outside any query accounting."""
    out = np.empty(images.shape[0], dtype=np.int64)
    with no_grad():
        for lo in range(0, images.shape[0], batch_size):
            logits = model.forward(Tensor(images[lo : lo + batch_size]))
            out[lo : lo + batch_size] = np.argmax(logits.data, axis=1)
    return out


def accuracy(model: SmallCNN, dataset: Dataset) -> float:
    preds = predict_labels(model, dataset.images)
    return float(np.mean(preds == dataset.labels))


def condition_features(net: SmallCNN, images: np.ndarray) -> Tensor:
    """Frozen condition features c(x); the result carries no gradient ties."""
    with no_grad():
        feats = net.features(Tensor(images))
    return Tensor(feats.data)


def train_classifier(
    dataset: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    test_set: Dataset | None = None,
    batch_size: int = 64,
) -> SmallCNN:
    """Adam + softmax cross-entropy training, deterministic under seed.

    The per-step loss trace and (when a test set is given) final test accuracy
    land in model.train_report.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    c, h, _ = dataset.image_shape
    model = SmallCNN(c, dataset.num_classes, h, seed=seed)
    params = model.parameters()
    state = AdamState.for_params(params)
    step_losses: list[float] = []
    for epoch in range(epochs):
        order = Prng.from_path(seed, "cls-epoch", epoch).permutation(len(dataset))
        for lo in range(0, len(dataset), batch_size):
            idx = order[lo : lo + batch_size]
            xb = Tensor(dataset.images[idx])
            yb = dataset.labels[idx]
            loss = softmax_cross_entropy(model.forward(xb), yb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss {value} at epoch {epoch}")
            zero_grads(p for _, p in params)
            loss.backward()
            adam_step(params, state, lr=lr)
            step_losses.append(value)
    model.train_report = {"step_losses": step_losses}
    if test_set is not None:
        model.train_report["test_accuracy"] = accuracy(model, test_set)
    return model


class QueryOracle:
    """Hard-label access to a model with an exact query counter.

    Each hard_label() call advances the counter by one; when a budget is set,
    a call that would exceed it raises BudgetExceededError without counting.
    """

    def __init__(self, model: SmallCNN, budget: int | None = None):
        if budget is not None and budget <= 0:
            raise ValueError(f"budget must be positive, got {budget}")
        self.model = model
        self.budget = budget
        self.counter = 0

    def hard_label(self, image) -> int:
        if self.budget is not None and self.counter >= self.budget:
            raise BudgetExceededError(f"query budget {self.budget} exhausted")
        arr = image.data if isinstance(image, Tensor) else np.asarray(image, np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[0] != 1:
            raise ValueError(f"hard_label takes a single image, got {arr.shape}")
        with no_grad():
            logits = self.model.forward(Tensor(arr))
        self.counter += 1
        return int(np.argmax(logits.data[0]))

    def clone(self) -> "QueryOracle":
        return QueryOracle(self.model, budget=self.budget)


# ---- checkpointing -----------------------------------------------------------


def save_model(model: SmallCNN, path) -> None:
    meta = {
        "kind": "small_cnn",
        "in_channels": model.in_channels,
        "num_classes": model.num_classes,
        "image_size": model.image_size,
        "conv_channels": list(model.CONV_CHANNELS),
    }
    tff.save_container(path, meta, [(n, p.data) for n, p in model.parameters()])


def load_model(path) -> SmallCNN:
    meta, tensors = tff.load_container(path)
    if meta.get("kind") != "small_cnn":
        raise tff.FormatError(f"not a classifier checkpoint: {meta.get('kind')}")
    model = SmallCNN(meta["in_channels"], meta["num_classes"], meta["image_size"])
    named = dict(tensors)
    for name, p in model.parameters():
        if name not in named or named[name].shape != p.data.shape:
            raise tff.FormatError(f"checkpoint missing or misshapes {name}")
        p.data = named[name].astype(p.data.dtype)
    return model
