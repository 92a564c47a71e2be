"""Training loops.

``cvae_gan`` follows the four-network pipeline: every loss is computed from
one forward pass over the batch and each network then descends only its own
share of the weighted objective. ``gan``, ``wgan`` and ``fm_gan`` are the
two-network baselines of the ring study; they share the discriminator loss
(or the critic loss for ``wgan``) and differ in the generator objective.

All updates within an iteration are computed from the same parameters and
applied together.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from . import nn
from . import tensor as T
from .models import ModelConfig, Models, build_models, sample_prior
from .registry import CenterBank
from .tensor import Tensor

METHODS = ("cvae_gan", "gan", "wgan", "fm_gan")
LOSS_COLUMNS = ("loss_D", "loss_C", "loss_KL", "loss_G", "loss_GD", "loss_GC")
# method-specific report keys, in metrics-file column order
METRIC_EXTRAS = {
    "cvae_gan": ("loss_G_img", "loss_G_D", "loss_G_C"),
    "gan": ("loss_G_naive", "grad_norm_G", "grad_norm_D"),
    "wgan": ("loss_G_wgan", "grad_norm_G", "grad_norm_D"),
    "fm_gan": ("grad_norm_G", "grad_norm_D"),
}


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(f"iteration {iteration}: loss term {term} is not finite ({value})")
        self.iteration, self.term, self.value = iteration, term, value


@dataclass(frozen=True)
class TrainRunConfig:
    method: str = "fm_gan"
    batch_size: int = 64
    max_iterations: int = 200_000
    optimizer: str = "rmsprop"
    lr: float = 5e-5
    lr_d: float | None = None
    lr_c: float | None = None
    clamp: float = 0.01
    center_decay: float = 0.9
    pairwise_terms: tuple = ("img", "D", "C")
    use_encoder: bool = True
    eval_every: int = 0
    checkpoint_every: int = 0
    points_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.method == "wgan" and not self.clamp > 0:
            raise ValueError("wgan needs clamp > 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        bad = set(self.pairwise_terms) - set(L.PAIRWISE_TERMS)
        if bad:
            raise ValueError(f"unknown pairwise terms {sorted(bad)}")

    def lr_for(self, net: str) -> float:
        if net == "D" and self.lr_d is not None:
            return self.lr_d
        if net == "C" and self.lr_c is not None:
            return self.lr_c
        return self.lr


@dataclass
class TrainerState:
    models: Models
    optimizers: dict
    bank: CenterBank
    rng: np.random.Generator
    config: TrainRunConfig
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    iteration: int = 0

    def named_parameters(self) -> list:
        out = []
        for name, net in self.models.nets().items():
            out += net.named_parameters(f"{name}.")
        return out

    def named_buffers(self) -> list:
        out = []
        for name, net in self.models.nets().items():
            out += net.named_buffers(f"{name}.")
        return out


def init_state(config: TrainRunConfig, model_cfg: ModelConfig,
               weights: L.LossWeights = L.LossWeights()) -> TrainerState:
    """Fresh networks and optimizers, all derived from ``config.seed``."""
    cvae = config.method == "cvae_gan"
    model_seed, rng_seed = np.random.SeedSequence(config.seed).spawn(2)
    models = build_models(model_cfg, model_seed.generate_state(1)[0],
                          encoder=cvae and config.use_encoder, classifier=cvae)
    optimizers = {}
    for name, net in models.nets().items():
        optimizers[name] = nn.Optimizer(net.named_parameters(f"{name}."), config.optimizer,
                                        config.lr_for(name))
    return TrainerState(models, optimizers, CenterBank(decay=config.center_decay),
                        np.random.default_rng(rng_seed), config, weights)


def _value(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def _check_finite(state: TrainerState, report: dict):
    for k, v in report.items():
        if not np.isfinite(v):
            raise TrainingDiverged(state.iteration, k, v)


def _apply(state: TrainerState, net: str, grads):
    state.optimizers[net].step(grads)


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))


# ---------------------------------------------------------------------------
# CVAE-GAN


def cvae_gan_losses(state: TrainerState, x_r: np.ndarray, c_r: np.ndarray) -> dict:
    """Forward pass of one iteration: the six loss terms plus the tensors behind them."""
    cfg = state.config
    models, bank, rng = state.models, state.bank, state.rng
    E, G, D, C = models.E, models.G, models.D, models.C
    K = models.cfg.num_classes
    m = len(c_r)
    xr = Tensor(x_r)

    cout_r = C(xr)
    L_C = L.loss_C(cout_r.logits, c_r)

    if E is not None:
        code = L.LatentCode(*E.heads(xr, c_r), z=None)
        noise = rng.standard_normal(code.mu.shape).astype(code.mu.dtype)
        code.z = L.sample_latent(code.mu, code.eps, Tensor(noise), models.cfg.latent_scale)
        L_KL = L.loss_KL(code.mu, code.eps)
        x_f = G(code.z, c_r)
    else:
        code, L_KL, x_f = None, Tensor(0.0), None

    z_p = Tensor(sample_prior(rng, m, models.cfg.latent_dim))
    c_p = rng.integers(0, K, m)
    x_p = G(z_p, c_p)

    d_r, d_p = D(xr), D(x_p)
    d_f = D(x_f) if x_f is not None else None
    fake_streams = [d_f.prob, d_p.prob] if d_f is not None else [d_p.prob]
    L_D = L.loss_D(d_r.prob, fake_streams)

    center_r = bank.update("global", "real", d_r.features)
    center_p = bank.update("global", "fake", d_p.features)
    L_GD = L.loss_GD_mean_match(center_r, center_p)

    cout_p = C(x_p)
    for k in np.unique(c_r):
        bank.update(int(k), "real", T.getitem(cout_r.features, np.flatnonzero(c_r == k)).detach())
    fake_classes = [int(k) for k in np.unique(c_p)]
    for k in fake_classes:
        bank.update(k, "fake", T.getitem(cout_p.features, np.flatnonzero(c_p == k)))
    pairs = bank.read_centers(fake_classes).pairs
    L_GC = L.loss_GC_mean_match({k: v[0] for k, v in pairs.items()},
                                {k: v[1] for k, v in pairs.items()})

    if x_f is not None:
        cout_f = C(x_f) if "C" in cfg.pairwise_terms else None
        terms = L.pairwise_terms(
            xr, x_f, d_r.features, d_f.features,
            cout_r.features, cout_f.features if cout_f is not None else None,
            cfg.pairwise_terms)
        L_G = None
        for t in terms.values():
            L_G = t if L_G is None else T.add(L_G, t)
        if L_G is None:
            L_G = Tensor(0.0)
    else:
        terms, L_G = {}, Tensor(0.0)

    return {
        "parts": {"D": L_D, "C": L_C, "KL": L_KL, "G": L_G, "GD": L_GD, "GC": L_GC},
        "terms": terms, "x_f": x_f, "x_p": x_p, "code": code,
    }


def cvae_gan_gradients(state: TrainerState, parts: dict) -> dict:
    """Per-network gradients of the partitioned objective.

    G and E share one backward pass over ``lambda1*KL + lambda2*L_G +
    lambda3*L_GD + lambda4*L_GC``: KL never reaches G, and the mean-matching
    terms (built on prior samples only) never reach E, so each network still
    receives the gradient of exactly its own terms.
    """
    models, w = state.models, state.weights
    objs = L.composite_objective(parts, w)
    out = {}
    out["C"] = T.grad(objs["C"], models.C.parameters())
    out["D"] = T.grad(objs["D"], models.D.parameters())
    gen = T.add(T.mul(parts["KL"], w.kl), objs["G"]) if models.E is not None else objs["G"]
    gen_params = models.G.parameters()
    e_params = models.E.parameters() if models.E is not None else []
    if gen.node is None:
        gs = [np.zeros_like(p.data) for p in gen_params + e_params]
    else:
        gs = T.grad(gen, gen_params + e_params)
    out["G"] = gs[:len(gen_params)]
    if models.E is not None:
        out["E"] = gs[len(gen_params):]
    return out


def cvae_gan_step(state: TrainerState, x_r: np.ndarray, c_r: np.ndarray) -> dict:
    fwd = cvae_gan_losses(state, x_r, c_r)
    parts = fwd["parts"]
    report = {f"loss_{k}": _value(v) for k, v in parts.items()}
    for name, t in fwd["terms"].items():
        report[f"loss_G_{name}"] = _value(t)
    _check_finite(state, report)
    grads = cvae_gan_gradients(state, parts)
    for net, g in grads.items():
        _apply(state, net, g)
    state.bank.end_step()
    state.iteration += 1
    return report


# ---------------------------------------------------------------------------
# two-network baselines


def _gan_forward(state: TrainerState, x_r: np.ndarray):
    G, D = state.models.G, state.models.D
    m = len(x_r)
    z = Tensor(sample_prior(state.rng, m, state.models.cfg.latent_dim))
    c = np.zeros(m, dtype=np.int64)
    x_p = G(z, c)
    return D(Tensor(x_r)), D(x_p), x_p


def _finish(state: TrainerState, report: dict, g_d, g_g):
    report["grad_norm_G"] = _grad_norm(g_g)
    report["grad_norm_D"] = _grad_norm(g_d)
    _check_finite(state, report)
    _apply(state, "D", g_d)
    _apply(state, "G", g_g)
    state.bank.end_step()
    state.iteration += 1
    return report


def _base_report(**kw) -> dict:
    rep = dict.fromkeys(LOSS_COLUMNS, 0.0)
    rep.update({k: _value(v) for k, v in kw.items()})
    return rep


def gan_step(state: TrainerState, x_r: np.ndarray, c_r=None) -> dict:
    """Cross-entropy discriminator and the -log D(G(z)) generator objective."""
    d_r, d_p, _ = _gan_forward(state, x_r)
    L_D = L.loss_D(d_r.prob, d_p.prob)
    L_Gn = L.loss_G_naive(d_p.prob)
    g_d = T.grad(L_D, state.models.D.parameters())
    g_g = T.grad(L_Gn, state.models.G.parameters())
    return _finish(state, _base_report(loss_D=L_D, loss_G_naive=L_Gn), g_d, g_g)


def fm_gan_step(state: TrainerState, x_r: np.ndarray, c_r=None) -> dict:
    """Cross-entropy discriminator, mean feature matching generator."""
    d_r, d_p, _ = _gan_forward(state, x_r)
    L_D = L.loss_D(d_r.prob, d_p.prob)
    center_r = state.bank.update("global", "real", d_r.features)
    center_p = state.bank.update("global", "fake", d_p.features)
    L_GD = L.loss_GD_mean_match(center_r, center_p)
    g_d = T.grad(L_D, state.models.D.parameters())
    g_g = T.grad(L_GD, state.models.G.parameters())
    return _finish(state, _base_report(loss_D=L_D, loss_GD=L_GD), g_d, g_g)


def wgan_step(state: TrainerState, x_r: np.ndarray, c_r=None) -> dict:
    """Critic on raw scores with weight clipping; generator raises the fake score."""
    d_r, d_p, _ = _gan_forward(state, x_r)
    critic = L.wasserstein_critic_loss(d_r.logit, d_p.logit)
    gen = L.wasserstein_generator_loss(d_p.logit)
    g_d = T.grad(critic, state.models.D.parameters())
    g_g = T.grad(gen, state.models.G.parameters())
    report = _finish(state, _base_report(loss_D=critic, loss_G_wgan=gen), g_d, g_g)
    clamp = state.config.clamp
    if np.isfinite(clamp):
        for p in state.models.D.parameters():
            np.clip(p.data, -clamp, clamp, out=p.data)
    return report


STEPS = {"cvae_gan": cvae_gan_step, "gan": gan_step, "wgan": wgan_step, "fm_gan": fm_gan_step}


def train_step(state: TrainerState, batch) -> dict:
    return STEPS[state.config.method](state, batch.x, batch.c)


# ---------------------------------------------------------------------------
# run loop


class Sink:
    """Receives run events. Subclasses override what they need."""

    def start(self, state: TrainerState):
        pass

    def step(self, state: TrainerState, report: dict, wall_ms: float):
        pass

    def finish(self, state: TrainerState):
        pass


def run(config: TrainRunConfig, dataset, sinks=(), state: TrainerState | None = None,
        model_cfg: ModelConfig | None = None, weights: L.LossWeights = L.LossWeights(),
        until: int | None = None) -> TrainerState:
    """Train until ``until`` (default ``config.max_iterations``) total iterations.

    Passing a restored ``state`` continues its run: the RNG stream, centers and
    optimizer slots pick up exactly where the checkpoint left them.
    """
    if state is None:
        if model_cfg is None:
            raise ValueError("need a model config to start a fresh run")
        state = init_state(config, model_cfg, weights)
    if getattr(dataset, "scale", state.models.cfg.scale) != state.models.cfg.scale:
        raise ValueError(f"dataset scale {dataset.scale!r} does not match model scale "
                         f"{state.models.cfg.scale!r}")
    target = config.max_iterations if until is None else until
    for s in sinks:
        s.start(state)
    while state.iteration < target:
        t0 = time.perf_counter()
        batch = dataset.sample(state.rng, config.batch_size)
        report = train_step(state, batch)
        wall = (time.perf_counter() - t0) * 1e3
        for s in sinks:
            s.step(state, report, wall)
    for s in sinks:
        s.finish(state)
    return state


def with_method(config: TrainRunConfig, method: str, **changes) -> TrainRunConfig:
    return replace(config, method=method, **changes)
