"""Encoders, probes and the diffusion networks, built on :mod:`flier.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, ShapeError, Tensor

DOWNSAMPLE = 8


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias(rng: np.random.Generator, n: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


class Module:
    params: ParameterSet

    def parameter_count(self) -> int:
        return self.params.count()

    def zero_(self) -> None:
        for _, t in self.params.items():
            t.data = np.zeros_like(t.data)


def _add_conv(params: ParameterSet, rng, name: str, c_in: int, c_out: int, k: int,
              depth: int) -> None:
    fan_in = c_in * k * k
    params.add(f"{name}.weight", kaiming_uniform(rng, (c_out, c_in, k, k), fan_in), depth)
    params.add(f"{name}.bias", _bias(rng, c_out, fan_in), depth)


def _add_linear(params: ParameterSet, rng, name: str, d_in: int, d_out: int, depth: int,
                bias: bool = True) -> None:
    prefix = f"{name}." if name else ""
    params.add(f"{prefix}weight", kaiming_uniform(rng, (d_in, d_out), d_in), depth)
    if bias:
        params.add(f"{prefix}bias", _bias(rng, d_out, d_in), depth)


class ImageEncoder(Module):
    """Stack of conv-relu-maxpool blocks followed by a linear projection to ``feature_dim``.

    Block ``i`` sits at depth ``i``; the projection at depth ``len(widths)``.
    """

    def __init__(self, rng: np.random.Generator, widths=(12, 24, 48), feature_dim: int = 64,
                 image_size: int = 32, in_channels: int = 3):
        side = image_size // 2 ** len(widths)
        if side < 1 or image_size % 2 ** len(widths):
            raise ValueError(f"image_size {image_size} does not support {len(widths)} pooling blocks")
        self.widths = tuple(widths)
        self.feature_dim = feature_dim
        self.image_size = image_size
        self.in_channels = in_channels
        self.params = ParameterSet()
        c = in_channels
        for i, w in enumerate(self.widths):
            _add_conv(self.params, rng, f"conv{i + 1}", c, w, 3, depth=i)
            c = w
        _add_linear(self.params, rng, "proj", c * side * side, feature_dim, depth=len(self.widths))

    @property
    def top_depth(self) -> int:
        return len(self.widths)

    def __call__(self, images: Tensor) -> Tensor:
        shape = images.shape
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeError(f"expected images [B,{self.in_channels},H,W], got {shape}")
        if shape[2] != self.image_size or shape[3] != self.image_size:
            raise ShapeError(f"image resolution {shape[2]}x{shape[3]} does not match "
                             f"encoder resolution {self.image_size}x{self.image_size}")
        p = self.params
        h = images
        for i in range(len(self.widths)):
            h = T.conv2d(h, p[f"conv{i + 1}.weight"], p[f"conv{i + 1}.bias"], stride=1, padding=1)
            h = T.max_pool2x2(T.relu(h))
        return T.linear(T.flatten(h), p["proj.weight"], p["proj.bias"])


class LatentEncoder(Module):
    """Two 3x3 convolutions with ReLU, then global mean pooling.

    Feature dimension is the second conv's width.
    """

    def __init__(self, rng: np.random.Generator, latent_channels: int = 4, widths=(16, 32),
                 latent_size: int = 4):
        if len(widths) != 2:
            raise ValueError("the latent encoder has exactly two convolutional layers")
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.widths = tuple(widths)
        self.params = ParameterSet()
        _add_conv(self.params, rng, "conv1", latent_channels, widths[0], 3, depth=0)
        _add_conv(self.params, rng, "conv2", widths[0], widths[1], 3, depth=1)

    @property
    def feature_dim(self) -> int:
        return self.widths[1]

    def __call__(self, latents: Tensor) -> Tensor:
        shape = latents.shape
        if len(shape) != 4 or shape[1] != self.latent_channels:
            raise ShapeError(f"expected latents [B,{self.latent_channels},h,w], got {shape}")
        if shape[2] != self.latent_size or shape[3] != self.latent_size:
            raise ShapeError(
                f"latent spatial size {shape[2]}x{shape[3]} violates the downsampling factor "
                f"{DOWNSAMPLE}: expected {self.latent_size}x{self.latent_size}")
        p = self.params
        h = T.relu(T.conv2d(latents, p["conv1.weight"], p["conv1.bias"], padding=1))
        h = T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1))
        return T.flatten(T.mean_pool(h))


class LinearProbe(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, n_classes: int):
        self.in_dim = in_dim
        self.n_classes = n_classes
        self.params = ParameterSet()
        _add_linear(self.params, rng, "", in_dim, n_classes, depth=0)

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_dim:
            raise ShapeError(f"probe expects features of dim {self.in_dim}, got {features.shape}")
        return T.linear(features, self.params["weight"], self.params["bias"])


class FlierModel:
    """Image encoder, latent encoder and their probes under one parameter set.

    Depths are aligned so both probes share the top depth and the latent
    encoder's two convs sit just below it.
    """

    def __init__(self, rng_v: np.random.Generator, rng_l: np.random.Generator, n_classes: int,
                 image_size: int = 32, latent_channels: int = 4, feature_dim: int = 64,
                 latent_feature_dim: int = 32, image_widths=(12, 24, 48), latent_hidden: int = 16):
        self.image_encoder = ImageEncoder(rng_v, image_widths, feature_dim, image_size)
        self.probe_v = LinearProbe(rng_v, feature_dim, n_classes)
        self.latent_encoder = LatentEncoder(rng_l, latent_channels,
                                            (latent_hidden, latent_feature_dim),
                                            image_size // DOWNSAMPLE)
        self.probe_l = LinearProbe(rng_l, latent_feature_dim, n_classes)
        if self.probe_v.in_dim != self.image_encoder.feature_dim:
            raise ShapeError("image probe input does not match image encoder features")
        if self.probe_l.in_dim != self.latent_encoder.feature_dim:
            raise ShapeError("latent probe input does not match latent encoder features")
        self.n_classes = n_classes
        top = self.image_encoder.top_depth + 1
        self.params = ParameterSet()
        self.params.merge("image_encoder", self.image_encoder.params)
        self.params.merge("probe_v", self.probe_v.params, depth_offset=top)
        self.params.merge("latent_encoder", self.latent_encoder.params, depth_offset=top - 2)
        self.params.merge("probe_l", self.probe_l.params, depth_offset=top)

    def image_logits(self, images: Tensor) -> Tensor:
        return self.probe_v(self.image_encoder(images))

    def latent_logits(self, latents: Tensor) -> Tensor:
        return self.probe_l(self.latent_encoder(latents))

    def group(self, name: str) -> list[str]:
        return [k for k in self.params.names() if k.startswith(name + ".")]


def timestep_embedding(t: np.ndarray, dim: int, n_steps: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    args = (np.asarray(t, dtype=np.float64)[:, None] / n_steps) * 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class DenoiserNet(Module):
    """Predicts the injected noise from (noisy latent, step, condition token).

    Step, token and class embeddings (class = token // prompts_per_class)
    modulate the first conv's activations with a per-channel scale and shift.
    The conv output is scaled by a learned per-step gain and a second
    per-step gain times the input is added.
    """

    def __init__(self, rng: np.random.Generator, n_tokens: int, n_steps: int,
                 latent_channels: int = 4, hidden: int = 64, emb_dim: int = 32,
                 zero_init: bool = False, prompts_per_class: int = 10,
                 alpha_bars: np.ndarray | None = None):
        if n_tokens % prompts_per_class:
            raise ValueError("n_tokens must be a multiple of prompts_per_class")
        self.n_tokens = n_tokens
        self.prompts_per_class = prompts_per_class
        self.n_classes = n_tokens // prompts_per_class
        self.n_steps = n_steps
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.emb_dim = emb_dim
        p = self.params = ParameterSet()
        _add_linear(p, rng, "time", emb_dim, hidden, 0)
        _add_linear(p, rng, "token", n_tokens, hidden, 0, bias=False)
        _add_linear(p, rng, "class", self.n_classes, hidden, 0, bias=False)
        _add_linear(p, rng, "film_scale", hidden, hidden, 0)
        _add_linear(p, rng, "film_shift", hidden, hidden, 0)
        _add_conv(p, rng, "conv1", latent_channels, hidden, 3, 0)
        _add_conv(p, rng, "conv2", hidden, hidden, 3, 0)
        _add_conv(p, rng, "conv3", hidden, hidden, 3, 0)
        _add_conv(p, rng, "out", hidden, latent_channels, 3, 0)
        # per-step skip gain, initialized to the unit-Gaussian optimum sqrt(1 - abar_t)
        skip = np.zeros((n_steps + 1, 1))
        if alpha_bars is not None:
            skip[:, 0] = np.sqrt(1.0 - np.asarray(alpha_bars))
        p.add("skip", skip, 0)
        p.add("out_gain", np.ones((n_steps + 1, 1)), 0)
        if zero_init:
            self.zero_()

    def __call__(self, x: Tensor, t: np.ndarray, tokens: np.ndarray) -> Tensor:
        p = self.params
        t = np.asarray(t)
        tokens = np.asarray(tokens)
        if np.any(tokens < 0) or np.any(tokens >= self.n_tokens):
            raise ValueError(f"condition token out of range [0, {self.n_tokens})")
        B = x.shape[0]
        onehot = np.zeros((B, self.n_tokens))
        onehot[np.arange(B), tokens] = 1.0
        class_onehot = np.zeros((B, self.n_classes))
        class_onehot[np.arange(B), tokens // self.prompts_per_class] = 1.0
        emb = T.add(T.linear(Tensor(timestep_embedding(t, self.emb_dim, self.n_steps)),
                             p["time.weight"], p["time.bias"]),
                    T.add(T.linear(Tensor(onehot), p["token.weight"]),
                          T.linear(Tensor(class_onehot), p["class.weight"])))
        emb = T.relu(emb)
        gain = T.reshape(T.linear(emb, p["film_scale.weight"], p["film_scale.bias"]),
                         (B, self.hidden, 1, 1))
        shift = T.reshape(T.linear(emb, p["film_shift.weight"], p["film_shift.bias"]),
                          (B, self.hidden, 1, 1))
        h = T.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1)
        h = T.relu(T.add(T.add(h, T.mul(h, gain)), shift))
        h = T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1))
        h = T.relu(T.conv2d(h, p["conv3.weight"], p["conv3.bias"], padding=1))
        out = T.conv2d(h, p["out.weight"], p["out.bias"], padding=1)
        t_onehot = np.zeros((B, self.n_steps + 1))
        t_onehot[np.arange(B), t] = 1.0
        t_onehot = Tensor(t_onehot)
        out_gain = T.reshape(T.linear(t_onehot, p["out_gain"]), (B, 1, 1, 1))
        skip = T.reshape(T.linear(t_onehot, p["skip"]), (B, 1, 1, 1))
        return T.add(T.mul(out, out_gain), T.mul(x, skip))


class ImageToLatent(Module):
    """Three stride-2 convs: [B,3,H,W] -> [B,C_lat,H/8,W/8]."""

    def __init__(self, rng: np.random.Generator, latent_channels: int = 4, widths=(16, 32)):
        p = self.params = ParameterSet()
        _add_conv(p, rng, "conv1", 3, widths[0], 4, 0)
        _add_conv(p, rng, "conv2", widths[0], widths[1], 4, 0)
        _add_conv(p, rng, "conv3", widths[1], latent_channels, 4, 0)

    def __call__(self, images: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.conv2d(images, p["conv1.weight"], p["conv1.bias"], stride=2, padding=1))
        h = T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1))
        return T.conv2d(h, p["conv3.weight"], p["conv3.bias"], stride=2, padding=1)


class LatentDecoder(Module):
    """Three stride-2 transposed convs: [B,C_lat,h,w] -> [B,3,8h,8w].

    ``latent_scale`` maps diffusion-space latents back to the decoder's
    native scale: ``decode(z) = net(z / latent_scale)``.
    """

    def __init__(self, rng: np.random.Generator, latent_channels: int = 4, widths=(32, 16)):
        self.latent_channels = latent_channels
        self.latent_scale = 1.0
        p = self.params = ParameterSet()
        _add_conv_t(p, rng, "deconv1", latent_channels, widths[0])
        _add_conv_t(p, rng, "deconv2", widths[0], widths[1])
        _add_conv_t(p, rng, "deconv3", widths[1], 3)

    def net(self, z: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.conv_transpose2d(z, p["deconv1.weight"], p["deconv1.bias"], 2, 1))
        h = T.relu(T.conv_transpose2d(h, p["deconv2.weight"], p["deconv2.bias"], 2, 1))
        return T.conv_transpose2d(h, p["deconv3.weight"], p["deconv3.bias"], 2, 1)

    def decode(self, latents: Tensor) -> Tensor:
        if latents.data.ndim != 4 or latents.shape[1] != self.latent_channels:
            raise ShapeError(f"expected latents [B,{self.latent_channels},h,w], got {latents.shape}")
        return self.net(T.scale(latents, 1.0 / self.latent_scale))


def _add_conv_t(params: ParameterSet, rng, name: str, c_in: int, c_out: int, k: int = 4) -> None:
    fan_in = c_in * k * k // 4
    params.add(f"{name}.weight", kaiming_uniform(rng, (c_in, c_out, k, k), fan_in), 0)
    params.add(f"{name}.bias", _bias(rng, c_out, fan_in), 0)
