"""White-box collectors (FGSM, PGD, momentum-ensemble) that build the
adversarial training distribution offline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Example, PairSet
from .models import SmallCNN
from .tensor import Prng, Tensor, no_grad, softmax_cross_entropy

COLLECTORS = ("fgsm", "pgd", "mifgsm")


@dataclass
class AttackParams:
    """L-inf budget, step schedule and (for the momentum method) decay/ensemble."""

    epsilon: float
    step_size: float
    iterations: int = 1
    momentum: float = 0.0
    ensemble: list[SmallCNN] = field(default_factory=list)
    random_start: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside [0,1]")
        if self.epsilon > 0 and not 0.0 < self.step_size <= self.epsilon:
            raise ValueError(
                f"step size {self.step_size} outside (0, epsilon={self.epsilon}]"
            )
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0,1]")


def _fused_logits(models: list[SmallCNN], x: Tensor) -> Tensor:
    logits = models[0].forward(x)
    for m in models[1:]:
        logits = logits + m.forward(x)
    if len(models) > 1:
        logits = logits * (1.0 / len(models))
    return logits


def _input_grad(models: list[SmallCNN], x_np: np.ndarray, y_np: np.ndarray) -> np.ndarray:
    """d(cross-entropy of logit-averaged ensemble)/d(input)."""
    x = Tensor(x_np, requires_grad=True)
    loss = softmax_cross_entropy(_fused_logits(models, x), y_np)
    loss.backward()
    grad = x.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite input gradient")
    return grad


def project_linf(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball of radius epsilon around x0, then [0,1]."""
    return np.clip(x0 + np.clip(x - x0, -epsilon, epsilon), 0.0, 1.0)


def momentum_accumulate(g: np.ndarray, grad: np.ndarray, mu: float) -> np.ndarray:
    """One momentum update: decay plus the L1-normalized new gradient.

    A zero gradient skips the normalization, so the accumulator only decays.
    """
    n = grad.shape[0]
    l1 = np.abs(grad).reshape(n, -1).sum(axis=1).reshape((n,) + (1,) * (grad.ndim - 1))
    nonzero = l1 > 0
    return mu * g + np.where(nonzero, grad / np.where(nonzero, l1, 1.0), 0.0)


def fgsm_batch(model: SmallCNN, images: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    grad = _input_grad([model], images, labels)
    # Batch cross-entropy averages over N, which scales every per-example
    # gradient identically; the sign step is unaffected.
    return project_linf(images + epsilon * np.sign(grad), images, epsilon)


def fgsm(model: SmallCNN, example: Example, epsilon: float) -> Tensor:
    adv = fgsm_batch(model, example.image[None], np.array([example.label]), epsilon)
    return Tensor(adv[0])


def pgd_batch(
    model: SmallCNN,
    images: np.ndarray,
    labels: np.ndarray,
    params: AttackParams,
    prng: Prng | None = None,
) -> np.ndarray:
    x = images
    if params.random_start and prng is not None:
        jitter = prng.uniform(-params.epsilon, params.epsilon, images.shape)
        x = project_linf(x + jitter, images, params.epsilon)
    for _ in range(params.iterations):
        grad = _input_grad([model], x, labels)
        x = project_linf(x + params.step_size * np.sign(grad), images, params.epsilon)
    return x


def pgd(model: SmallCNN, example: Example, params: AttackParams, prng: Prng | None = None) -> Tensor:
    adv = pgd_batch(model, example.image[None], np.array([example.label]), params, prng)
    return Tensor(adv[0])


def mifgsm_ensemble_batch(
    params: AttackParams, images: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Momentum iterative method over a logit-averaged ensemble.

    The accumulator gets the L1-normalized gradient each step; a zero gradient
    skips the normalization and only decays the accumulator.
    """
    if not params.ensemble:
        raise ValueError("mifgsm needs a non-empty ensemble")
    x = images
    g = np.zeros_like(images)
    for _ in range(params.iterations):
        grad = _input_grad(params.ensemble, x, labels)
        g = momentum_accumulate(g, grad, params.momentum)
        x = project_linf(x + params.step_size * np.sign(g), images, params.epsilon)
    return x


def mifgsm_ensemble(params: AttackParams, example: Example) -> Tensor:
    adv = mifgsm_ensemble_batch(params, example.image[None], np.array([example.label]))
    return Tensor(adv[0])


# ---- pair collection -------------------------------------------------------------


@dataclass
class CollectionResult:
    pairs: PairSet
    eligible: int
    attempted: int
    succeeded: int

    @property
    def empty(self) -> bool:
        return len(self.pairs) == 0


def collect_pairs(
    dataset: Dataset,
    collector: str,
    params: AttackParams,
    seed: int,
    batch_size: int = 64,
) -> CollectionResult:
    """Attack every correctly classified example; keep only the successful
    (clean, adversarial) pairs under the configured budget."""
    if collector not in COLLECTORS:
        raise ValueError(f"unknown collector {collector!r} (use one of {COLLECTORS})")
    if not params.ensemble:
        raise ValueError("collect_pairs needs at least one model in params.ensemble")
    models = params.ensemble

    def fused_predict(images: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = _fused_logits(models, Tensor(images))
        return np.argmax(logits.data, axis=1)

    clean_parts, adv_parts, label_parts = [], [], []
    eligible = 0
    for lo in range(0, len(dataset), batch_size):
        images = dataset.images[lo : lo + batch_size]
        labels = dataset.labels[lo : lo + batch_size]
        ok = fused_predict(images) == labels
        if not ok.any():
            continue
        eligible += int(ok.sum())
        xb, yb = images[ok], labels[ok]
        rng = Prng.from_path(seed, "collect", lo)
        if collector == "fgsm":
            adv = fgsm_batch(models[0], xb, yb, params.epsilon)
        elif collector == "pgd":
            adv = pgd_batch(models[0], xb, yb, params, rng)
        else:
            adv = mifgsm_ensemble_batch(params, xb, yb)
        fooled = fused_predict(adv) != yb
        if fooled.any():
            clean_parts.append(xb[fooled])
            adv_parts.append(adv[fooled])
            label_parts.append(yb[fooled])
    if clean_parts:
        pairs = PairSet(
            np.concatenate(clean_parts),
            np.concatenate(adv_parts),
            np.concatenate(label_parts),
            params.epsilon,
        )
    else:
        pairs = PairSet.empty(dataset.image_shape, params.epsilon)
    return CollectionResult(
        pairs=pairs,
        eligible=eligible,
        attempted=eligible,
        succeeded=len(pairs),
    )
