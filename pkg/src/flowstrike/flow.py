"""Conditional multi-scale normalizing flow with exact log-det-Jacobians.

One flow step is actnorm -> invertible 1x1 channel mixing -> conditional
affine coupling. A block squeezes 2x2 spatial neighborhoods into channels,
runs K steps, and (in all but the last block) splits half the channels off as
Gaussian latents. The condition tensor enters only the coupling networks,
nearest-resized to the working resolution of each block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tff
from .tensor import (
    Prng,
    Tensor,
    bias_add,
    channel_mix,
    channel_mix_inverse,
    concat,
    conv2d,
    logabsdet,
    narrow,
    nearest_resize,
    scale_axis,
    zeros,
)

ACTNORM_STD_EPS = 1e-6
MIN_ABS_DET = 1e-8


class SingularTransform(RuntimeError):
    """1x1 mixing matrix has |det| below the invertibility floor."""


@dataclass(frozen=True)
class FlowConfig:
    """Topology: L blocks of K steps over input [C,H,W] with Cc condition channels."""

    blocks: int
    steps: int
    in_shape: tuple[int, int, int]
    cond_channels: int
    hidden_width: int = 32

    def __post_init__(self):
        c, h, w = self.in_shape
        if self.blocks < 1 or self.steps < 1:
            raise ValueError("blocks and steps must be >= 1")
        if h % (2**self.blocks) or w % (2**self.blocks):
            raise ValueError(
                f"spatial dims {h}x{w} not divisible by 2^{self.blocks}"
            )

    def block_channels(self, level: int) -> int:
        return self.in_shape[0] * (2 ** (level + 2))

    def block_spatial(self, level: int) -> tuple[int, int]:
        _, h, w = self.in_shape
        return h // (2 ** (level + 1)), w // (2 ** (level + 1))

    def latent_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        for level in range(self.blocks - 1):
            h, w = self.block_spatial(level)
            shapes.append((self.block_channels(level) // 2, h, w))
        h, w = self.block_spatial(self.blocks - 1)
        shapes.append((self.block_channels(self.blocks - 1), h, w))
        return shapes

    @property
    def latent_dim(self) -> int:
        return sum(int(np.prod(s)) for s in self.latent_shapes())

    def to_meta(self) -> dict:
        return {
            "blocks": self.blocks,
            "steps": self.steps,
            "in_shape": list(self.in_shape),
            "cond_channels": self.cond_channels,
            "hidden_width": self.hidden_width,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "FlowConfig":
        return cls(
            blocks=meta["blocks"],
            steps=meta["steps"],
            in_shape=tuple(meta["in_shape"]),
            cond_channels=meta["cond_channels"],
            hidden_width=meta["hidden_width"],
        )


@dataclass
class LatentVec:
    """Per-scale latent tensors (each [N, C, H, W]), split levels first."""

    parts: list[Tensor]

    @property
    def batch(self) -> int:
        return self.parts[0].shape[0]

    def flatten(self) -> Tensor:
        n = self.batch
        return concat([p.reshape(n, -1) for p in self.parts], axis=1)

    @classmethod
    def unflatten(cls, flat: Tensor, config: FlowConfig) -> "LatentVec":
        n = flat.shape[0]
        if flat.shape != (n, config.latent_dim):
            raise ValueError(
                f"flat latent {flat.shape} does not match dim {config.latent_dim}"
            )
        parts = []
        offset = 0
        for shape in config.latent_shapes():
            count = int(np.prod(shape))
            chunk = narrow(flat, 1, offset, count)
            parts.append(chunk.reshape(n, *shape))
            offset += count
        return cls(parts)


# ---- invertible layers ---------------------------------------------------------


def actnorm(direction: str, x: Tensor, scale: Tensor, bias: Tensor):
    """Per-channel affine y = scale * (x + bias); logdet = H*W*sum log|scale|."""
    if np.any(scale.data == 0):
        raise ValueError("actnorm scale contains zero")
    n, _, h, w = x.shape
    ld_unit = scale.abs().log().sum() * float(h * w)
    if direction == "encode":
        y = scale_axis(bias_add(x, bias, axis=1), scale, axis=1)
        ld = zeros((n,)) + ld_unit
    elif direction == "decode":
        inv_scale = 1.0 / scale
        neg_bias = -bias
        y = bias_add(scale_axis(x, inv_scale, axis=1), neg_bias, axis=1)
        ld = zeros((n,)) - ld_unit
    else:
        raise ValueError(f"bad direction {direction!r}")
    return y, ld


def invconv1x1(direction: str, x: Tensor, w: Tensor):
    """Per-pixel channel mixing by an invertible CxC matrix (GLOW 1x1 conv)."""
    sign_det, lad = np.linalg.slogdet(w.data.astype(np.float64))
    if sign_det == 0 or lad < np.log(MIN_ABS_DET):
        raise SingularTransform(f"|det W| below {MIN_ABS_DET}")
    n, _, h, wd = x.shape
    ld_unit = logabsdet(w) * float(h * wd)
    if direction == "encode":
        y = channel_mix(x, w)
        ld = zeros((n,)) + ld_unit
    elif direction == "decode":
        y = channel_mix_inverse(x, w)
        ld = zeros((n,)) - ld_unit
    else:
        raise ValueError(f"bad direction {direction!r}")
    return y, ld


def coupling_net(x_a: Tensor, cond: Tensor, net: dict[str, Tensor], out_channels: int):
    """Two rectified 3x3 convs then a zero-initialized 3x3 conv producing
    (raw_scale, shift), each with out_channels/2 channels."""
    h = concat([x_a, cond], axis=1)
    h = bias_add(conv2d(h, net["w1"], stride=1, padding=1), net["b1"], axis=1).relu()
    h = bias_add(conv2d(h, net["w2"], stride=1, padding=1), net["b2"], axis=1).relu()
    h = bias_add(conv2d(h, net["w3"], stride=1, padding=1), net["b3"], axis=1)
    half = out_channels // 2
    return narrow(h, 1, 0, half), narrow(h, 1, half, half)


def coupling(direction: str, x: Tensor, cond: Tensor, net: dict[str, Tensor]):
    """Conditional affine coupling over channel halves.

    scale = sigmoid(raw + 2) keeps the transform bounded away from zero and
    near identity at zero init.
    """
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"coupling needs an even channel count, got {c}")
    if cond.shape[2:] != x.shape[2:]:
        raise ValueError(
            f"condition spatial {cond.shape[2:]} != input spatial {x.shape[2:]}"
        )
    half = c // 2
    x_a = narrow(x, 1, 0, half)
    x_b = narrow(x, 1, half, half)
    raw_s, t = coupling_net(x_a, cond, net, c)
    s = (raw_s + 2.0).sigmoid()
    log_s = s.log().sum(axis=(1, 2, 3))
    if direction == "encode":
        y_b = x_b * s + t
        ld = log_s
    elif direction == "decode":
        y_b = (x_b - t) / s
        ld = -log_s
    else:
        raise ValueError(f"bad direction {direction!r}")
    return concat([x_a, y_b], axis=1), ld


def squeeze(x: Tensor) -> Tensor:
    """Move 2x2 spatial blocks into channels (TL, TR, BL, BR per input channel)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial dims, got {h}x{w}")
    t = x.reshape(n, c, h // 2, 2, w // 2, 2)
    t = t.transpose(0, 1, 3, 5, 2, 4)
    return t.reshape(n, c * 4, h // 2, w // 2)


def unsqueeze(x: Tensor) -> Tensor:
    n, c4, h, w = x.shape
    if c4 % 4:
        raise ValueError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    t = x.reshape(n, c, 2, 2, h, w)
    t = t.transpose(0, 1, 4, 2, 5, 3)
    return t.reshape(n, c, h * 2, w * 2)


def split(x: Tensor):
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"split needs an even channel count, got {c}")
    return narrow(x, 1, 0, c // 2), narrow(x, 1, c // 2, c // 2)


def unsplit(kept: Tensor, latent: Tensor) -> Tensor:
    return concat([kept, latent], axis=1)


# ---- the model ------------------------------------------------------------------


def _orthogonal(rng: Prng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((n, n)).astype(np.float64))
    q *= np.sign(np.diag(r))[None, :]
    return q


class FlowModel:
    """Parameters and topology of the conditional flow; encode/decode passes."""

    def __init__(self, config: FlowConfig, seed: int = 0):
        self.config = config
        self.actnorm_initialized = False
        self._params: dict[str, Tensor] = {}
        cc = config.cond_channels
        hid = config.hidden_width
        for level in range(config.blocks):
            c = config.block_channels(level)
            for step in range(config.steps):
                prefix = f"b{level}s{step}"
                rng = Prng.from_path(seed, "flow-init", level, step)
                self._add(f"{prefix}.actnorm.scale", np.ones(c))
                self._add(f"{prefix}.actnorm.bias", np.zeros(c))
                self._add(f"{prefix}.mix.w", _orthogonal(rng, c))
                half = c // 2
                std1 = np.sqrt(2.0 / ((half + cc) * 9))
                std2 = np.sqrt(2.0 / (hid * 9))
                self._add(f"{prefix}.net.w1", rng.normal((hid, half + cc, 3, 3)) * std1)
                self._add(f"{prefix}.net.b1", np.zeros(hid))
                self._add(f"{prefix}.net.w2", rng.normal((hid, hid, 3, 3)) * std2)
                self._add(f"{prefix}.net.b2", np.zeros(hid))
                self._add(f"{prefix}.net.w3", np.zeros((c, hid, 3, 3)))
                self._add(f"{prefix}.net.b3", np.zeros(c))

    def _add(self, name: str, value: np.ndarray) -> None:
        self._params[name] = Tensor(value, requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def _net(self, prefix: str) -> dict[str, Tensor]:
        return {k: self._params[f"{prefix}.net.{k}"] for k in ("w1", "b1", "w2", "b2", "w3", "b3")}

    def _init_actnorm(self, prefix: str, h: Tensor) -> None:
        # Data-dependent init: first batch leaves this layer with per-channel
        # zero mean and unit variance.
        data = h.data
        mean = data.mean(axis=(0, 2, 3))
        std = data.std(axis=(0, 2, 3))
        self._params[f"{prefix}.actnorm.bias"].data = (-mean).astype(data.dtype)
        self._params[f"{prefix}.actnorm.scale"].data = (
            1.0 / (std + ACTNORM_STD_EPS)
        ).astype(data.dtype)

    def _resized_cond(self, cond: Tensor, spatial: tuple[int, int]) -> Tensor:
        if cond.shape[2:] == spatial:
            return cond
        return nearest_resize(cond, spatial)

    def encode(self, x: Tensor, cond: Tensor):
        """x' -> (latents, per-example logdet of the encode direction)."""
        cfg = self.config
        if x.shape[1:] != cfg.in_shape:
            raise ValueError(f"input {x.shape[1:]} != configured {cfg.in_shape}")
        if cond.shape[1] != cfg.cond_channels:
            raise ValueError(
                f"condition has {cond.shape[1]} channels, expected {cfg.cond_channels}"
            )
        initializing = not self.actnorm_initialized
        n = x.shape[0]
        h = x
        total_ld = zeros((n,))
        latents: list[Tensor] = []
        for level in range(cfg.blocks):
            h = squeeze(h)
            c_r = self._resized_cond(cond, h.shape[2:])
            for step in range(cfg.steps):
                prefix = f"b{level}s{step}"
                if initializing:
                    self._init_actnorm(prefix, h)
                h, ld = actnorm(
                    "encode",
                    h,
                    self._params[f"{prefix}.actnorm.scale"],
                    self._params[f"{prefix}.actnorm.bias"],
                )
                total_ld = total_ld + ld
                h, ld = invconv1x1("encode", h, self._params[f"{prefix}.mix.w"])
                total_ld = total_ld + ld
                h, ld = coupling("encode", h, c_r, self._net(prefix))
                total_ld = total_ld + ld
            if level < cfg.blocks - 1:
                h, z = split(h)
                latents.append(z)
        latents.append(h)
        if initializing:
            self.actnorm_initialized = True
        return LatentVec(latents), total_ld

    def decode(self, z: LatentVec, cond: Tensor, return_logdet: bool = False):
        """Exact inverse of encode: latents -> x'."""
        cfg = self.config
        if not self.actnorm_initialized:
            raise RuntimeError("decode before actnorm initialization")
        expected = cfg.latent_shapes()
        if len(z.parts) != len(expected):
            raise ValueError(f"{len(z.parts)} latent parts, expected {len(expected)}")
        for part, shape in zip(z.parts, expected):
            if part.shape[1:] != shape:
                raise ValueError(f"latent part {part.shape[1:]} != expected {shape}")
        n = z.batch
        h = z.parts[-1]
        total_ld = zeros((n,))
        for level in range(cfg.blocks - 1, -1, -1):
            if level < cfg.blocks - 1:
                h = unsplit(h, z.parts[level])
            c_r = self._resized_cond(cond, h.shape[2:])
            for step in range(cfg.steps - 1, -1, -1):
                prefix = f"b{level}s{step}"
                h, ld = coupling("decode", h, c_r, self._net(prefix))
                total_ld = total_ld + ld
                h, ld = invconv1x1("decode", h, self._params[f"{prefix}.mix.w"])
                total_ld = total_ld + ld
                h, ld = actnorm(
                    "decode",
                    h,
                    self._params[f"{prefix}.actnorm.scale"],
                    self._params[f"{prefix}.actnorm.bias"],
                )
                total_ld = total_ld + ld
            h = unsqueeze(h)
        if return_logdet:
            return h, total_ld
        return h


# ---- checkpointing ---------------------------------------------------------------


def save_flow(model: FlowModel, path) -> None:
    meta = {"kind": "flow", "actnorm_initialized": model.actnorm_initialized}
    meta.update(model.config.to_meta())
    tff.save_container(path, meta, [(n, p.data) for n, p in model.parameters()])


def load_flow(path) -> FlowModel:
    meta, tensors = tff.load_container(path)
    if meta.get("kind") != "flow":
        raise tff.FormatError(f"not a flow checkpoint: {meta.get('kind')}")
    model = FlowModel(FlowConfig.from_meta(meta))
    named = dict(tensors)
    for name, p in model.parameters():
        if name not in named or named[name].shape != p.data.shape:
            raise tff.FormatError(f"checkpoint missing or misshapes {name}")
        p.data = named[name].astype(p.data.dtype)
    model.actnorm_initialized = bool(meta["actnorm_initialized"])
    return model
