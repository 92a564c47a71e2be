"""Encoder, generator, discriminator and classifier builders.

Two scales share one interface. ``toy2d`` uses plain MLPs on 2-D points;
``image`` uses small conv stacks on NHWC images with side length divisible
by four. The feature tap of D and C is the activation entering their final
dense layer.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from . import tensor as T
from .losses import LatentCode, one_hot, sample_latent
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "image"
    side: int = 32
    channels: int = 3
    latent_dim: int = 64
    num_classes: int = 10
    hidden: tuple = (32, 64, 64)
    conv_widths: tuple = (16, 32, 64)
    gen_widths: tuple = (64, 32, 16)
    feature_dim: int = 128
    batchnorm: bool = True
    latent_scale: str = "exp-half-eps"

    def __post_init__(self):
        if self.scale not in ("toy2d", "image"):
            raise ValueError(f"scale must be 'toy2d' or 'image', got {self.scale!r}")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if self.scale == "image" and (self.side <= 0 or self.side % 4):
            raise ValueError(f"image side must be a positive multiple of 4, got {self.side}")
        if len(self.gen_widths) != 3 or len(self.conv_widths) != 3:
            raise ValueError("gen_widths and conv_widths need three entries each")

    @property
    def sample_shape(self) -> tuple:
        return (2,) if self.scale == "toy2d" else (self.side, self.side, self.channels)


class Net:
    """A few sequential parts with a shared parameter namespace."""

    parts: dict

    def named_parameters(self, prefix: str = "") -> list:
        out = []
        for name, seq in self.parts.items():
            out += seq.named_parameters(f"{prefix}{name}.")
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list:
        out = []
        for name, seq in self.parts.items():
            out += seq.named_buffers(f"{prefix}{name}.")
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for seq in self.parts.values():
            seq.train(mode)
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self) -> bool:
        return any(layer.training for seq in self.parts.values() for layer in seq.layers)


@contextmanager
def frozen(*nets):
    """Eval mode and no gradient recording; restores each net's mode on exit."""
    was = [n.training for n in nets]
    for n in nets:
        n.eval()
    try:
        with T.no_grad():
            yield
    finally:
        for n, w in zip(nets, was):
            n.train(w)


def _check_input(cfg: ModelConfig, x: Tensor, who: str):
    if x.ndim < 2 or tuple(x.shape[1:]) != cfg.sample_shape:
        raise ShapeError(f"{who}: input shape {x.shape} does not match {cfg.scale} samples {cfg.sample_shape}")


def _check_labels(cfg: ModelConfig, c, m: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64).reshape(-1)
    if c.shape[0] != m:
        raise ShapeError(f"{c.shape[0]} labels for a batch of {m}")
    if c.size and (c.min() < 0 or c.max() >= cfg.num_classes):
        raise ValueError(f"class ids must lie in [0, {cfg.num_classes})")
    return c


def _conv_trunk(cfg: ModelConfig) -> tuple[list, tuple]:
    spec, ch, side = [], cfg.channels, cfg.side
    for width in cfg.conv_widths:
        spec.append(nn.conv(ch, width, 3, 2))
        if cfg.batchnorm:
            spec.append(nn.batchnorm(width))
        spec.append(nn.activation("relu"))
        ch, side = width, -(-side // 2)
    spec.append(nn.flatten())
    spec += [nn.dense(side * side * ch, cfg.feature_dim), nn.activation("relu")]
    return spec, cfg.sample_shape


def _trunk(cfg: ModelConfig):
    if cfg.scale == "toy2d":
        widths = [2, *cfg.hidden]
        spec = []
        for a, b in zip(widths[:-1], widths[1:]):
            spec += [nn.dense(a, b), nn.activation("relu")]
        return spec, (2,), cfg.hidden[-1]
    spec, shape = _conv_trunk(cfg)
    return spec, shape, cfg.feature_dim


class Encoder(Net):
    """x -> trunk features, merged with the one-hot class at the last dense layer."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        spec, shape, width = _trunk(cfg)
        self.parts = {
            "trunk": nn.build_network(spec, shape, rng),
            "head": nn.build_network([nn.dense(width + cfg.num_classes, 2 * cfg.latent_dim)],
                                     (width + cfg.num_classes,), rng),
        }

    def heads(self, x: Tensor, c) -> tuple[Tensor, Tensor]:
        _check_input(self.cfg, x, "encoder")
        c = _check_labels(self.cfg, c, x.shape[0])
        h = self.parts["trunk"](x)
        h = T.concat([h, Tensor(one_hot(c, self.cfg.num_classes, h.dtype))], axis=1)
        out = self.parts["head"](h)
        d = self.cfg.latent_dim
        return T.slice_(out, 0, d, axis=1), T.slice_(out, d, 2 * d, axis=1)


class Generator(Net):
    """(z, one-hot c) concatenated at the input; image outputs end in tanh."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        n_in = cfg.latent_dim + cfg.num_classes
        if cfg.scale == "toy2d":
            spec = nn.mlp_spec(n_in, cfg.hidden, 2)
        else:
            g0, g1, g2 = cfg.gen_widths
            s = cfg.side // 4
            spec = [nn.dense(n_in, s * s * g0), nn.reshape(s, s, g0)]
            for a, b in ((g0, g1), (g1, g2)):
                if cfg.batchnorm:
                    spec.append(nn.batchnorm(a))
                spec += [nn.activation("relu"), nn.deconv(a, b, 4, 2)]
            if cfg.batchnorm:
                spec.append(nn.batchnorm(g2))
            spec += [nn.activation("relu"), nn.conv(g2, cfg.channels, 3, 1), nn.activation("tanh")]
        self.parts = {"net": nn.build_network(spec, (n_in,), rng)}

    def __call__(self, z: Tensor, c) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ShapeError(f"generator: latent shape {z.shape}, expected (m, {self.cfg.latent_dim})")
        c = _check_labels(self.cfg, c, z.shape[0])
        h = T.concat([z, Tensor(one_hot(c, self.cfg.num_classes, z.dtype))], axis=1)
        return self.parts["net"](h)


class DOut(NamedTuple):
    prob: Tensor
    features: Tensor
    logit: Tensor


class COut(NamedTuple):
    posterior: Tensor
    features: Tensor
    logits: Tensor


class Discriminator(Net):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        spec, shape, width = _trunk(cfg)
        self.parts = {
            "trunk": nn.build_network(spec, shape, rng),
            "head": nn.build_network([nn.dense(width, 1)], (width,), rng),
        }

    def __call__(self, x: Tensor) -> DOut:
        _check_input(self.cfg, x, "discriminator")
        f = self.parts["trunk"](x)
        logit = self.parts["head"](f)
        return DOut(T.sigmoid(logit), f, logit)


class Classifier(Net):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        spec, shape, width = _trunk(cfg)
        self.parts = {
            "trunk": nn.build_network(spec, shape, rng),
            "head": nn.build_network([nn.dense(width, cfg.num_classes)], (width,), rng),
        }

    def __call__(self, x: Tensor) -> COut:
        _check_input(self.cfg, x, "classifier")
        f = self.parts["trunk"](x)
        logits = self.parts["head"](f)
        return COut(T.softmax(logits), f, logits)


@dataclass
class Models:
    E: Encoder | None
    G: Generator
    D: Discriminator
    C: Classifier | None
    cfg: ModelConfig

    def nets(self) -> dict:
        return {k: v for k, v in (("E", self.E), ("G", self.G), ("D", self.D), ("C", self.C))
                if v is not None}


def build_models(cfg: ModelConfig, seed: int, encoder: bool = True, classifier: bool = True) -> Models:
    """All four networks, each initialized from its own child of ``seed``."""
    s_e, s_g, s_d, s_c = np.random.SeedSequence(seed).spawn(4)
    return Models(
        E=Encoder(cfg, s_e) if encoder else None,
        G=Generator(cfg, s_g),
        D=Discriminator(cfg, s_d),
        C=Classifier(cfg, s_c) if classifier else None,
        cfg=cfg,
    )


# ---------------------------------------------------------------------------
# functional surface


def encode(E: Encoder, x, c, rng=None, noise=None) -> LatentCode:
    """Posterior heads and a reparameterized sample. Pass ``noise`` or a seed/Generator."""
    x = T.as_tensor(x)
    mu, eps = E.heads(x, c)
    if noise is None:
        rng = np.random.default_rng(rng)
        noise = rng.standard_normal(mu.shape).astype(mu.dtype)
    z = sample_latent(mu, eps, Tensor(np.asarray(noise, dtype=mu.dtype)), E.cfg.latent_scale)
    return LatentCode(mu, eps, z)


def generate(G: Generator, z, c) -> Tensor:
    return G(T.as_tensor(z), c)


def discriminate(D: Discriminator, x) -> DOut:
    return D(T.as_tensor(x))


def classify(C: Classifier, x) -> COut:
    return C(T.as_tensor(x))


def sample_prior(rng: np.random.Generator, m: int, dim: int, dtype=None) -> np.ndarray:
    return rng.standard_normal((m, dim)).astype(dtype or T.get_default_dtype())
