"""Procedures built on trained E and G: sampling, latent morphing, inpainting.

All run the networks in eval mode (batch-norm running statistics), so each
output depends only on its own input.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..models import Encoder, Generator, frozen, sample_prior
from ..tensor import Tensor


def generate_samples(G: Generator, c: int, count: int, seed) -> np.ndarray:
    """``count`` draws of G(z, c) with z ~ N(0, I) from ``seed``."""
    if not 0 <= c < G.cfg.num_classes:
        raise ValueError(f"class {c} outside [0, {G.cfg.num_classes})")
    if count == 0:
        return np.zeros((0, *G.cfg.sample_shape), dtype=T.get_default_dtype())
    z = sample_prior(np.random.default_rng(seed), count, G.cfg.latent_dim)
    with frozen(G):
        return G(Tensor(z), np.full(count, c)).data


def latent_mean(E: Encoder, x: np.ndarray, c: int) -> np.ndarray:
    """Posterior mean for a single image, shape (latent_dim,)."""
    with frozen(E):
        mu, _ = E.heads(Tensor(np.asarray(x)[None]), np.array([c]))
    return mu.data[0]


def decode(G: Generator, z: np.ndarray, c: int) -> np.ndarray:
    with frozen(G):
        return G(Tensor(np.asarray(z, dtype=T.get_default_dtype())[None]), np.array([c])).data[0]


def morph_latents(z1: np.ndarray, z2: np.ndarray, steps: int):
    """alpha*z1 + (1 - alpha)*z2 for ``steps`` values of alpha evenly spaced on [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    alphas = np.linspace(0.0, 1.0, steps)
    dt = np.asarray(z1).dtype
    return alphas, [(a * z1 + (1 - a) * z2).astype(dt) for a in alphas.astype(dt)]


def morph(E: Encoder, G: Generator, x1: np.ndarray, x2: np.ndarray, c: int, steps: int,
          c1: int | None = None, c2: int | None = None):
    """Frames decoded along the line between the two posterior means, alpha ascending.

    The first frame (alpha=0) decodes x2's code and the last (alpha=1) x1's.
    """
    for who, lab in (("x1", c1), ("x2", c2)):
        if lab is not None and lab != c:
            raise ValueError(f"{who} has class {lab}, morph requested class {c}")
    z1, z2 = latent_mean(E, x1, c), latent_mean(E, x2, c)
    alphas, zs = morph_latents(z1, z2, steps)
    return alphas, np.stack([decode(G, z, c) for z in zs]), (z1, z2)


def check_mask(mask: np.ndarray, image_shape: tuple) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (0 or 1 everywhere)")
    if m.shape != image_shape[:2] and m.shape != image_shape:
        raise ValueError(f"mask shape {m.shape} does not match image shape {image_shape}")
    if m.ndim == 2:
        m = m[..., None]
    return np.broadcast_to(m.astype(bool), image_shape)


def inpaint(E: Encoder, G: Generator, x: np.ndarray, mask: np.ndarray, c: int,
            iterations: int = 10) -> np.ndarray:
    """Repeatedly re-encode, decode and paste the decoded patch back.

    Each iteration sets ``x <- M*G(E(x, c), c) + (1 - M)*x`` using the
    posterior mean as the code. Returns all ``iterations`` intermediate
    images. Pixels outside the mask are copied, never recomputed.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    x = np.array(x, dtype=T.get_default_dtype())
    m = check_mask(mask, x.shape)
    frames = []
    for _ in range(iterations):
        x_new = decode(G, latent_mean(E, x, c), c)
        x = np.where(m, x_new, x)
        frames.append(x)
    return np.stack(frames) if frames else np.zeros((0, *x.shape), dtype=x.dtype)
