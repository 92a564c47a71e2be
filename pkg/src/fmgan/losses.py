"""Objective terms for the discriminator, classifier, encoder and generator.

Every batch loss is a mean over the batch, so the default weights do not
depend on the batch size. Probabilities are clamped to ``[PROB_EPS, 1 -
PROB_EPS]`` before any log is taken.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights on the KL, pairwise, mean-D and mean-C terms."""

    kl: float = 3.0
    pairwise: float = 1.0
    mean_d: float = 1e-3
    mean_c: float = 1e-3

    def __post_init__(self):
        for name in ("kl", "pairwise", "mean_d", "mean_c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LatentCode:
    mu: Tensor
    eps: Tensor
    z: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def _log_prob(p: Tensor) -> Tensor:
    return T.log(T.clamp(p, PROB_EPS, 1 - PROB_EPS))


def _log_one_minus(p: Tensor) -> Tensor:
    return T.log(T.sub(1.0, T.clamp(p, PROB_EPS, 1 - PROB_EPS)))


def loss_D(d_real: Tensor, d_fake) -> Tensor:
    """-mean log D(real) - sum over fake streams of mean log(1 - D(fake))."""
    streams = [d_fake] if isinstance(d_fake, Tensor) else list(d_fake)
    if d_real.size == 0 or not streams or any(s.size == 0 for s in streams):
        raise ValueError("loss_D needs non-empty real and fake batches")
    total = T.mul(T.reduce_mean(_log_prob(d_real)), -1.0)
    for s in streams:
        total = T.sub(total, T.reduce_mean(_log_one_minus(s)))
    return total


def loss_G_naive(d_fake: Tensor) -> Tensor:
    """Cross-entropy generator objective, -mean log D(G(z))."""
    return T.mul(T.reduce_mean(_log_prob(d_fake)), -1.0)


def loss_GD_mean_match(real_center, fake_center) -> Tensor:
    """Half the squared distance between two feature centers."""
    real_center, fake_center = T.as_tensor(real_center), T.as_tensor(fake_center)
    if real_center.shape != fake_center.shape:
        raise ShapeError(f"feature centers differ: {real_center.shape} vs {fake_center.shape}")
    return T.mul(T.reduce_sum(T.square(T.sub(real_center, fake_center))), 0.5)


def one_hot(labels, k: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, k), dtype=dtype or T.get_default_dtype())
    out[np.arange(labels.size), labels] = 1
    return out


def loss_C(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    mask = Tensor(one_hot(labels, logits.shape[1], logits.dtype))
    picked = T.reduce_sum(T.mul(T.log_softmax(logits), mask), axis=1)
    return T.mul(T.reduce_mean(picked), -1.0)


def loss_GC_mean_match(real_centers: Mapping, fake_centers: Mapping) -> Tensor:
    """Sum over classes present on both sides of half the squared center gap."""
    total = None
    for c in sorted(set(real_centers) & set(fake_centers)):
        term = loss_GD_mean_match(real_centers[c], fake_centers[c])
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(0.0)
    return total


def loss_KL(mu, eps) -> Tensor:
    """0.5 * (mu.mu + sum(exp(eps) - eps - 1)), averaged over the batch for 2-D input."""
    mu, eps = T.as_tensor(mu), T.as_tensor(eps)
    if mu.shape != eps.shape:
        raise ShapeError(f"mu {mu.shape} and eps {eps.shape} differ")
    per = T.add(T.square(mu), T.sub(T.sub(T.exp(eps), eps), 1.0))
    if per.ndim == 1:
        return T.mul(T.reduce_sum(per), 0.5)
    return T.mul(T.reduce_mean(T.reduce_sum(per, axis=tuple(range(1, per.ndim)))), 0.5)


LATENT_SCALES = ("exp-half-eps", "exp-eps")


def sample_latent(mu, eps, noise, scale: str = "exp-half-eps") -> Tensor:
    """Reparameterized draw z = mu + noise * sigma(eps).

    ``exp-half-eps`` reads eps as a log-variance (sigma = exp(eps/2));
    ``exp-eps`` uses sigma = exp(eps).
    """
    mu, eps, noise = T.as_tensor(mu), T.as_tensor(eps), T.as_tensor(noise)
    if not (mu.shape == eps.shape == noise.shape):
        raise ShapeError(f"mu {mu.shape}, eps {eps.shape}, noise {noise.shape} differ")
    if scale == "exp-half-eps":
        sigma = T.exp(T.mul(eps, 0.5))
    elif scale == "exp-eps":
        sigma = T.exp(eps)
    else:
        raise ValueError(f"latent scale must be one of {LATENT_SCALES}, got {scale!r}")
    return T.add(mu, T.mul(noise, sigma))


PAIRWISE_TERMS = ("img", "D", "C")


def _half_sq_per_sample(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"paired tensors differ: {a.shape} vs {b.shape}")
    d = T.square(T.sub(a, b))
    if d.ndim == 1:
        return T.mul(T.reduce_sum(d), 0.5)
    return T.mul(T.reduce_mean(T.reduce_sum(d, axis=tuple(range(1, d.ndim)))), 0.5)


def pairwise_terms(x, x_rec, fD_x, fD_rec, fC_x, fC_rec, mask: Sequence[str] = PAIRWISE_TERMS) -> dict:
    """The pixel, D-feature and C-feature parts of the pairwise loss, each halved.

    Terms left out of ``mask`` are not built at all.
    """
    pairs = {"img": (x, x_rec), "D": (fD_x, fD_rec), "C": (fC_x, fC_rec)}
    out = {}
    for name in PAIRWISE_TERMS:
        if name in mask:
            a, b = pairs[name]
            out[name] = _half_sq_per_sample(T.as_tensor(a), T.as_tensor(b))
    return out


def loss_G_pairwise(x, x_rec, fD_x, fD_rec, fC_x, fC_rec, mask: Sequence[str] = PAIRWISE_TERMS) -> Tensor:
    """0.5 * (|x - x'|^2 + |fD(x) - fD(x')|^2 + |fC(x) - fC(x')|^2), batch mean."""
    terms = pairwise_terms(x, x_rec, fD_x, fD_rec, fC_x, fC_rec, mask)
    total = None
    for t in terms.values():
        total = t if total is None else T.add(total, t)
    return total if total is not None else Tensor(0.0)


def composite_objective(parts: Mapping, weights: LossWeights = LossWeights()) -> dict:
    """Split the weighted total into the objective each network descends.

    ``parts`` maps D, C, KL, G, GD, GC to scalars (floats or tensors).
    """
    for key in ("D", "C", "KL", "G", "GD", "GC"):
        v = parts[key]
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(val):
            raise FloatingPointError(f"loss term {key} is not finite ({val})")
    w = weights
    return {
        "C": parts["C"],
        "D": parts["D"],
        "G": parts["G"] * w.pairwise + parts["GD"] * w.mean_d + parts["GC"] * w.mean_c,
        "E": parts["KL"] * w.kl + parts["G"] * w.pairwise,
    }


def wasserstein_critic_loss(score_real: Tensor, score_fake: Tensor) -> Tensor:
    return T.sub(T.reduce_mean(score_fake), T.reduce_mean(score_real))


def wasserstein_generator_loss(score_fake: Tensor) -> Tensor:
    return T.mul(T.reduce_mean(score_fake), -1.0)
