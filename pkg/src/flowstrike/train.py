"""Alternating likelihood / reconstruction training of the conditional flow.

Every iteration takes one Adam step on the negative log-likelihood and then
(when enabled) one Adam step on the latent-resampled reconstruction loss for
the same clean batch. The two losses are never summed; gradients are zeroed
between the steps. All per-iteration randomness comes from stateless seed
paths, so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tff
from .data import PairSet
from .flow import FlowConfig, FlowModel, LatentVec
from .tensor import Prng, Tensor, no_grad, zero_grads

LOG_TWO_PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good checkpoint is kept on disk."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 2000
    batch_size: int = 32
    seed: int = 0
    mse_enabled: bool = True
    checkpoint_every: int = 0  # 0 = final checkpoint only
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def for_params(cls, params: list[tuple[str, Tensor]]) -> "AdamState":
        m = {name: np.zeros_like(p.data) for name, p in params}
        v = {name: np.zeros_like(p.data) for name, p in params}
        return cls(m, v)


def adam_step(
    params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update using the grads stored on params."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---- losses ------------------------------------------------------------------


def _condition_for(clean, condition_net, cond: Tensor | None) -> Tensor:
    if cond is not None:
        return cond
    images = clean.data if isinstance(clean, Tensor) else np.asarray(clean, np.float32)
    return Tensor(precompute_conditions(condition_net, images))


def nll_loss(flow: FlowModel, clean, adv, condition_net=None, cond: Tensor | None = None) -> Tensor:
    """Mean over the batch of -log p(x'|c(x)): standard-normal latent density
    of encode(x'; c) minus the accumulated logdet. The condition network is
    frozen; pass `cond` to reuse precomputed features."""
    cond = _condition_for(clean, condition_net, cond)
    adv_t = adv if isinstance(adv, Tensor) else Tensor(adv)
    z, logdet = flow.encode(adv_t, cond)
    flat = z.flatten()
    n, d = flat.shape
    log_pz = (flat * flat).sum(axis=1) * -0.5 - (0.5 * d * LOG_TWO_PI)
    nll_per_example = -log_pz - logdet
    return nll_per_example.sum() * (1.0 / n)


def mse_loss(
    flow: FlowModel, clean, adv, prng: Prng, condition_net=None, cond: Tensor | None = None
) -> Tensor:
    """Mean per-example Euclidean distance between decode(z~N(0,1); c(x)) and
    the stored adversarial target; z is drawn fresh on every call."""
    cond = _condition_for(clean, condition_net, cond)
    adv_t = adv if isinstance(adv, Tensor) else Tensor(adv)
    n = adv_t.shape[0]
    z_flat = Tensor(prng.normal((n, flow.config.latent_dim)))
    x_gen = flow.decode(LatentVec.unflatten(z_flat, flow.config), cond)
    diff = x_gen - adv_t
    per_example = (diff * diff).sum(axis=(1, 2, 3)).sqrt()
    return per_example.sum() * (1.0 / n)


# ---- the training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    flow: FlowModel
    history: list[tuple[int, float, float | None]] = field(default_factory=list)

    def nll_values(self) -> list[float]:
        return [h[1] for h in self.history]

    def mse_values(self) -> list[float]:
        return [h[2] for h in self.history if h[2] is not None]

    def write_csv(self, path) -> None:
        lines = ["iteration,nll,mse"]
        for it, nll, mse in self.history:
            lines.append(f"{it},{nll!r},{'' if mse is None else repr(mse)}")
        Path(path).write_text("\n".join(lines) + "\n")


def precompute_conditions(condition_net, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Condition features for every image; the net is frozen so this is done once."""
    chunks = []
    with no_grad():
        for lo in range(0, images.shape[0], batch_size):
            feats = condition_net.features(Tensor(images[lo : lo + batch_size]))
            chunks.append(feats.data)
    return np.concatenate(chunks, axis=0)


def save_train_state(path, flow: FlowModel, adam: AdamState, next_iter: int) -> None:
    meta = {
        "kind": "train_state",
        "actnorm_initialized": flow.actnorm_initialized,
        "adam_step": adam.step,
        "next_iter": next_iter,
    }
    meta.update(flow.config.to_meta())
    tensors = [(n, p.data) for n, p in flow.parameters()]
    tensors += [(f"adam.m.{n}", arr) for n, arr in adam.m.items()]
    tensors += [(f"adam.v.{n}", arr) for n, arr in adam.v.items()]
    tff.save_container(path, meta, tensors)


def load_train_state(path) -> tuple[FlowModel, AdamState, int]:
    meta, tensors = tff.load_container(path)
    if meta.get("kind") != "train_state":
        raise tff.FormatError(f"not a training checkpoint: {meta.get('kind')}")
    flow = FlowModel(FlowConfig.from_meta(meta))
    named = dict(tensors)
    for name, p in flow.parameters():
        p.data = named[name].astype(p.data.dtype)
    flow.actnorm_initialized = bool(meta["actnorm_initialized"])
    params = flow.parameters()
    adam = AdamState(
        {n: named[f"adam.m.{n}"].astype(p.data.dtype) for n, p in params},
        {n: named[f"adam.v.{n}"].astype(p.data.dtype) for n, p in params},
        step=int(meta["adam_step"]),
    )
    return flow, adam, int(meta["next_iter"])


def train(
    flow: FlowModel,
    pairs: PairSet,
    condition_net,
    cfg: TrainConfig,
    resume_from=None,
    progress_every: int = 0,
) -> TrainResult:
    """Run (or resume) the alternating optimization over a pair set."""
    if len(pairs) == 0:
        raise ValueError("cannot train a flow on an empty pair set")
    cond_cache = precompute_conditions(condition_net, pairs.clean)
    start_iter = 0
    params = flow.parameters()
    adam = AdamState.for_params(params)
    if resume_from is not None:
        flow_loaded, adam, start_iter = load_train_state(resume_from)
        if flow_loaded.config != flow.config:
            raise ValueError("resume checkpoint topology differs from the model")
        for (name, p), (_, q) in zip(flow.parameters(), flow_loaded.parameters()):
            p.data = q.data
        flow.actnorm_initialized = flow_loaded.actnorm_initialized
        params = flow.parameters()
    result = TrainResult(flow)
    n_pairs = len(pairs)

    def checkpoint(next_iter: int) -> None:
        if cfg.checkpoint_path is not None:
            save_train_state(cfg.checkpoint_path, flow, adam, next_iter)

    for it in range(start_iter, cfg.max_iters):
        rng = Prng.from_path(cfg.seed, "train-iter", it)
        idx = rng.integers(0, n_pairs, cfg.batch_size)
        clean_b = pairs.clean[idx]
        adv_b = pairs.adversarial[idx]
        cond_b = Tensor(cond_cache[idx])

        zero_grads(p for _, p in params)
        nll = nll_loss(flow, clean_b, adv_b, cond=cond_b)
        nll_value = nll.item()
        if not np.isfinite(nll_value):
            raise TrainingDiverged(f"NLL became {nll_value} at iteration {it}")
        nll.backward()
        adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

        mse_value = None
        if cfg.mse_enabled:
            zero_grads(p for _, p in params)
            mse = mse_loss(flow, clean_b, adv_b, rng, cond=cond_b)
            mse_value = mse.item()
            if not np.isfinite(mse_value):
                raise TrainingDiverged(f"MSE became {mse_value} at iteration {it}")
            mse.backward()
            adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

        result.history.append((it, nll_value, mse_value))
        if progress_every and (it + 1) % progress_every == 0:
            msg = f"iter {it + 1}/{cfg.max_iters} nll={nll_value:.3f}"
            if mse_value is not None:
                msg += f" mse={mse_value:.3f}"
            print(msg, flush=True)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint(it + 1)
    checkpoint(cfg.max_iters)
    return result
