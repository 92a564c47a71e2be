"""Sample-quality metrics.

Discriminability and realism are read off a frozen classifier trained on
real data only. Mode coverage quantifies how much of the ring a set of
generated points reaches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .datasets import ImageDataset, RingDistribution
from .losses import loss_C
from .models import Classifier, Generator, ModelConfig, frozen, sample_prior
from .tensor import Tensor


@dataclass(frozen=True)
class EvalReport:
    metric: str
    value: float
    sample_count: int
    config_digest: str = ""
    iteration: int = 0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.metric}: value {self.value} is not finite")
        if self.sample_count <= 0:
            raise ValueError(f"{self.metric}: sample count must be positive")


# ---------------------------------------------------------------------------
# reference classifier


@dataclass
class ReferenceClassifier:
    model: Classifier
    heldout_accuracy: float
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.model.cfg.num_classes

    def posteriors(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Class posteriors in eval mode; never touches parameters or running stats."""
        out = []
        with frozen(self.model):
            for i in range(0, len(x), batch):
                out.append(self.model(Tensor(np.asarray(x[i:i + batch]))).posterior.data)
        return np.concatenate(out).astype(np.float64) if out else np.zeros((0, self.num_classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.posteriors(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, c: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(c)))


def train_reference_classifier(train: ImageDataset, test: ImageDataset, cfg: ModelConfig,
                               steps: int = 600, batch_size: int = 64, lr: float = 1e-3,
                               seed: int = 0) -> ReferenceClassifier:
    """Fit a classifier on real training images and freeze it."""
    rng = np.random.default_rng(seed)
    model = Classifier(cfg, rng.integers(2 ** 32))
    opt = nn.Adam(model.named_parameters("C."), lr=lr, beta1=0.9)
    model.train()
    for _ in range(steps):
        b = train.sample(rng, batch_size)
        loss = loss_C(model(Tensor(b.x)).logits, b.c)
        opt.step(T.grad(loss, opt.params))
    model.eval()
    ref = ReferenceClassifier(model, 0.0, {"train_size": len(train), "steps": steps,
                                           "batch_size": batch_size, "lr": lr, "seed": seed,
                                           "source": train.source})
    ref.heldout_accuracy = ref.accuracy(test.x, test.c)
    return ref


# ---------------------------------------------------------------------------
# discriminability and realism


Sampler = Callable[[int, int, np.random.Generator], np.ndarray]


def generator_sampler(G: Generator) -> Sampler:
    """Sampler drawing z ~ N(0, I) and decoding with ``G`` in eval mode."""

    def sample(c: int, n: int, rng: np.random.Generator) -> np.ndarray:
        with frozen(G):
            return G(Tensor(sample_prior(rng, n, G.cfg.latent_dim)), np.full(n, c)).data

    return sample


def top1_discriminability(ref: ReferenceClassifier, sampler: Sampler, per_class_count: int,
                          rng=0) -> float:
    """Fraction of class-conditioned samples the reference assigns to their class."""
    if per_class_count < 1:
        raise ValueError("per_class_count must be at least 1")
    rng = np.random.default_rng(rng)
    hits = total = 0
    for c in range(ref.num_classes):
        x = sampler(c, per_class_count, rng)
        hits += int(np.sum(ref.predict(x) == c))
        total += per_class_count
    return hits / total


def realism_from_posteriors(p: np.ndarray) -> float:
    """exp of the mean KL between each posterior and their mean."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or len(p) < 100:
        raise ValueError(f"need at least 100 posterior rows, got shape {p.shape}")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def realism_score(ref: ReferenceClassifier, samples: np.ndarray) -> float:
    return realism_from_posteriors(ref.posteriors(samples))


# ---------------------------------------------------------------------------
# ring coverage


@dataclass
class Coverage:
    fraction: float
    histogram: np.ndarray
    on_ring: int
    off_ring: int


def mode_coverage(points: np.ndarray, dist: RingDistribution, bins: int = 100,
                  tol: float = 0.5) -> Coverage:
    """Share of angular bins holding at least one on-ring point.

    A point is on the ring when its distance to the center is within
    ``3*sigma + tol`` of the radius.
    """
    if bins < 8:
        raise ValueError("need at least 8 bins")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d = pts - np.asarray(dist.center, dtype=np.float64)
    r = np.hypot(d[:, 0], d[:, 1])
    on = np.abs(r - dist.radius) <= 3 * dist.sigma + tol
    angle = np.mod(np.arctan2(d[on, 1], d[on, 0]), 2 * np.pi)
    idx = np.minimum((angle / (2 * np.pi) * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx, minlength=bins)
    return Coverage(float(np.count_nonzero(hist)) / bins, hist, int(on.sum()), int((~on).sum()))


# ---------------------------------------------------------------------------
# diversity, reconstruction, ablations


def sample_diversity(samples: np.ndarray) -> float:
    """Mean Euclidean distance over all unordered pairs of flattened samples."""
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two samples")
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(n, 1)
    return float(np.sqrt(d2[iu]).mean())


def per_class_diversity(sampler: Sampler, num_classes: int, per_class: int = 100, rng=0) -> float:
    rng = np.random.default_rng(rng)
    return float(np.mean([sample_diversity(sampler(c, per_class, rng)) for c in range(num_classes)]))


def reconstruction_error(E, G, x: np.ndarray, c: np.ndarray, batch: int = 256) -> float:
    """Mean per-image squared error of G(mu(x), c) against x."""
    errs = []
    with frozen(E, G):
        for i in range(0, len(x), batch):
            xb, cb = x[i:i + batch], c[i:i + batch]
            mu, _ = E.heads(Tensor(xb), cb)
            rec = G(mu, cb).data
            errs.append(((rec - xb) ** 2).reshape(len(xb), -1).sum(axis=1))
    return float(np.concatenate(errs).mean())


@dataclass
class RunReport:
    name: str
    dataset: str
    seed_protocol: str
    metrics: dict


ABLATION_METRICS = ("reconstruction_error", "top1", "realism")


def ablation_compare(runs: list[RunReport]) -> list[dict]:
    """One row per run with the shared metric columns, in input order."""
    if not runs:
        raise ValueError("no runs to compare")
    first = runs[0]
    for r in runs[1:]:
        if (r.dataset, r.seed_protocol) != (first.dataset, first.seed_protocol):
            raise ValueError(f"run {r.name!r} uses protocol {(r.dataset, r.seed_protocol)}, "
                             f"expected {(first.dataset, first.seed_protocol)}")
    rows = []
    for r in runs:
        row = {"run": r.name}
        for m in ABLATION_METRICS:
            row[m] = r.metrics.get(m, float("nan"))
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[str(r[c]) if not isinstance(r[c], float) else f"{r[c]:.4f}" for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
