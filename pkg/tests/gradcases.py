"""Random small instances of every differentiable op and loss, for gradient checks.

Each builder takes a Generator and returns ``(f, x)`` where ``f`` maps a
tensor to a scalar. Other operands are fixed arrays drawn from the same
Generator, so ``f`` is deterministic. Scalar outputs are formed as a random
weighted sum so that every output coordinate matters.
"""

import zlib

import numpy as np

from fmgan import losses as L
from fmgan import tensor as T
from fmgan.tensor import Tensor


def _dims(rng, n, lo=1, hi=8):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, n))


def _away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _unary(op, sampler):
    def build(rng):
        shape = _dims(rng, 2)
        x = sampler(rng, shape)
        w = rng.standard_normal(shape)
        return (lambda t: T.reduce_sum(T.mul(op(t), Tensor(w)))), x
    return build


def _binary(op, side):
    def build(rng):
        shape = _dims(rng, 2)
        other = rng.standard_normal(shape)
        w = rng.standard_normal(shape)
        if side == 0:
            f = lambda t: T.reduce_sum(T.mul(op(t, Tensor(other)), Tensor(w)))
        else:
            f = lambda t: T.reduce_sum(T.mul(op(Tensor(other), t), Tensor(w)))
        return f, rng.standard_normal(shape)
    return build


def _bias_broadcast(rng):
    m, n = _dims(rng, 2)
    x = rng.standard_normal((m, n))
    w = rng.standard_normal((m, n))
    return (lambda b: T.reduce_sum(T.mul(T.add(Tensor(x), b), Tensor(w)))), rng.standard_normal(n)


def _matmul(side):
    def build(rng):
        m, k, n = _dims(rng, 3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        w = rng.standard_normal((m, n))
        if side == 0:
            return (lambda t: T.reduce_sum(T.mul(T.matmul(t, Tensor(b)), Tensor(w)))), a
        return (lambda t: T.reduce_sum(T.mul(T.matmul(Tensor(a), t), Tensor(w)))), b
    return build


def _softmax(fn):
    def build(rng):
        shape = _dims(rng, 2)
        w = rng.standard_normal(shape)
        return (lambda t: T.reduce_sum(T.mul(fn(t), Tensor(w)))), 2 * rng.standard_normal(shape)
    return build


def _reshape(rng):
    a, b = _dims(rng, 2)
    w = rng.standard_normal((b, a))
    return (lambda t: T.reduce_sum(T.mul(T.reshape(t, (b, a)), Tensor(w)))), rng.standard_normal((a, b))


def _concat(rng):
    m, n1, n2 = _dims(rng, 3)
    other = rng.standard_normal((m, n2))
    w = rng.standard_normal((m, n1 + n2))
    return (lambda t: T.reduce_sum(T.mul(T.concat([t, Tensor(other)], axis=1), Tensor(w)))), \
        rng.standard_normal((m, n1))


def _slice(rng):
    m, n = _dims(rng, 2, lo=2)
    start = int(rng.integers(0, n - 1))
    stop = int(rng.integers(start + 1, n + 1))
    w = rng.standard_normal((m, stop - start))
    return (lambda t: T.reduce_sum(T.mul(T.slice_(t, start, stop, axis=1), Tensor(w)))), \
        rng.standard_normal((m, n))


def _fancy_index(rng):
    m, n = _dims(rng, 2)
    idx = rng.integers(0, m, int(rng.integers(1, 9)))  # repeats allowed
    w = rng.standard_normal((len(idx), n))
    return (lambda t: T.reduce_sum(T.mul(T.getitem(t, idx), Tensor(w)))), rng.standard_normal((m, n))


def _reduce(fn):
    def build(rng):
        shape = _dims(rng, 3)
        axis = int(rng.integers(0, 3))
        out_shape = shape[:axis] + shape[axis + 1:]
        w = rng.standard_normal(out_shape)
        return (lambda t: T.reduce_sum(T.mul(fn(t, axis=axis), Tensor(w)))), rng.standard_normal(shape)
    return build


def _clamp(rng):
    shape = _dims(rng, 2)
    x = rng.uniform(-2, 2, shape)
    x[np.abs(np.abs(x) - 1) < 0.05] += 0.1  # keep off the kinks
    w = rng.standard_normal(shape)
    return (lambda t: T.reduce_sum(T.mul(T.clamp(t, -1.0, 1.0), Tensor(w)))), x


def _conv_geometry(rng, transpose=False):
    stride = int(rng.integers(1, 3))
    padding = "same" if transpose else str(rng.choice(["same", "valid"]))
    k = int(rng.integers(1, 4)) if not transpose else int(rng.choice([2, 3, 4]))
    lo = k if padding == "valid" else 1
    h, w = (int(v) for v in rng.integers(lo, max(lo, 6) + 1, 2))
    cin, cout = _dims(rng, 2, 1, 3)
    return stride, padding, k, h, w, cin, cout


def _conv(side):
    def build(rng):
        s, pad, k, h, w, cin, cout = _conv_geometry(rng)
        x = rng.standard_normal((2, h, w, cin))
        kern = rng.standard_normal((k, k, cin, cout))
        out_shape = T.conv2d(Tensor(x), Tensor(kern), s, pad).shape
        wt = rng.standard_normal(out_shape)
        if side == 0:
            return (lambda t: T.reduce_sum(T.mul(T.conv2d(t, Tensor(kern), s, pad), Tensor(wt)))), x
        return (lambda t: T.reduce_sum(T.mul(T.conv2d(Tensor(x), t, s, pad), Tensor(wt)))), kern
    return build


def _deconv(side):
    def build(rng):
        s, pad, k, h, w, cin, cout = _conv_geometry(rng, transpose=True)
        x = rng.standard_normal((2, h, w, cin))
        kern = rng.standard_normal((k, k, cout, cin))
        out_shape = T.conv2d_transpose(Tensor(x), Tensor(kern), s, pad).shape
        wt = rng.standard_normal(out_shape)
        if side == 0:
            return (lambda t: T.reduce_sum(T.mul(T.conv2d_transpose(t, Tensor(kern), s, pad), Tensor(wt)))), x
        return (lambda t: T.reduce_sum(T.mul(T.conv2d_transpose(Tensor(x), t, s, pad), Tensor(wt)))), kern
    return build


def _upsample(rng):
    n, h, w, c = 2, *_dims(rng, 2, 1, 4), int(rng.integers(1, 4))
    factor = int(rng.integers(1, 4))
    wt = rng.standard_normal((n, h * factor, w * factor, c))
    return (lambda t: T.reduce_sum(T.mul(T.upsample_nearest(t, factor), Tensor(wt)))), \
        rng.standard_normal((n, h, w, c))


def _batch_stats(rng):
    shape = (int(rng.integers(2, 9)), *_dims(rng, 1, 1, 6))
    wt = rng.standard_normal(shape)
    return (lambda t: T.reduce_sum(T.mul(T.batch_stats(t)[0], Tensor(wt)))), \
        rng.standard_normal(shape) * rng.uniform(0.5, 3)


def _pos(rng, shape):
    return rng.uniform(0.2, 3.0, shape)


OP_CASES = {
    "add": _binary(T.add, 0),
    "add-broadcast": _bias_broadcast,
    "sub-left": _binary(T.sub, 0),
    "sub-right": _binary(T.sub, 1),
    "mul": _binary(T.mul, 0),
    "matmul-left": _matmul(0),
    "matmul-right": _matmul(1),
    "exp": _unary(T.exp, lambda r, s: r.uniform(-2, 2, s)),
    "log": _unary(T.log, _pos),
    "tanh": _unary(T.tanh, lambda r, s: r.standard_normal(s)),
    "relu": _unary(T.relu, _away_from_zero),
    "sigmoid": _unary(T.sigmoid, lambda r, s: 3 * r.standard_normal(s)),
    "square": _unary(T.square, lambda r, s: r.standard_normal(s)),
    "sqrt": _unary(T.sqrt, _pos),
    "clamp": _clamp,
    "softmax": _softmax(T.softmax),
    "log-softmax": _softmax(T.log_softmax),
    "reshape": _reshape,
    "concat": _concat,
    "slice": _slice,
    "getitem": _fancy_index,
    "reduce-sum": _reduce(T.reduce_sum),
    "reduce-mean": _reduce(T.reduce_mean),
    "conv2d-input": _conv(0),
    "conv2d-kernel": _conv(1),
    "conv2d-transpose-input": _deconv(0),
    "conv2d-transpose-kernel": _deconv(1),
    "upsample-nearest": _upsample,
    "batch-stats": _batch_stats,
}


# ---------------------------------------------------------------------------
# losses


def _probs(rng, n):
    return rng.uniform(0.05, 0.95, n)


def _loss_D_real(rng):
    m = int(rng.integers(1, 9))
    fakes = [Tensor(_probs(rng, m)) for _ in range(int(rng.integers(1, 3)))]
    return (lambda t: L.loss_D(t, fakes)), _probs(rng, m)


def _loss_D_fake(rng):
    m = int(rng.integers(1, 9))
    real = Tensor(_probs(rng, m))
    return (lambda t: L.loss_D(real, [t])), _probs(rng, m)


def _loss_G_naive(rng):
    return L.loss_G_naive, _probs(rng, int(rng.integers(1, 9)))


def _loss_GD(rng):
    d = int(rng.integers(1, 9))
    real = rng.standard_normal(d)
    return (lambda t: L.loss_GD_mean_match(Tensor(real), t)), rng.standard_normal(d)


def _loss_C(rng):
    m, k = _dims(rng, 2, 1, 8)
    labels = rng.integers(0, k, m)
    return (lambda t: L.loss_C(t, labels)), 2 * rng.standard_normal((m, k))


def _loss_GC(rng):
    k, d = _dims(rng, 2, 1, 4)
    real = {c: Tensor(rng.standard_normal(d)) for c in range(k)}
    other = {c: Tensor(rng.standard_normal(d)) for c in range(1, k)}

    def f(t):
        return L.loss_GC_mean_match(real, {0: t, **other})

    return f, rng.standard_normal(d)


def _loss_KL(side):
    def build(rng):
        shape = _dims(rng, 2)
        other = rng.uniform(-1, 1, shape)
        if side == 0:
            return (lambda t: L.loss_KL(t, Tensor(other))), rng.standard_normal(shape)
        return (lambda t: L.loss_KL(Tensor(other), t)), rng.uniform(-1.5, 1.5, shape)
    return build


def _sample_latent(side, scale):
    def build(rng):
        shape = _dims(rng, 2)
        mu, eps, noise = rng.standard_normal(shape), rng.uniform(-1, 1, shape), rng.standard_normal(shape)
        w = rng.standard_normal(shape)
        if side == 0:
            f = lambda t: T.reduce_sum(T.mul(L.sample_latent(t, Tensor(eps), Tensor(noise), scale), Tensor(w)))
            return f, mu
        f = lambda t: T.reduce_sum(T.mul(L.sample_latent(Tensor(mu), t, Tensor(noise), scale), Tensor(w)))
        return f, eps
    return build


def _pairwise(which):
    def build(rng):
        m = int(rng.integers(1, 5))
        img = (m, *_dims(rng, 2, 1, 4), 3)
        dd, dc = _dims(rng, 2)
        arrs = {"x": rng.standard_normal(img), "xr": rng.standard_normal(img),
                "fd": rng.standard_normal((m, dd)), "fdr": rng.standard_normal((m, dd)),
                "fc": rng.standard_normal((m, dc)), "fcr": rng.standard_normal((m, dc))}
        x0 = arrs.pop(which)

        def f(t):
            a = {k: Tensor(v) for k, v in arrs.items()}
            a[which] = t
            return L.loss_G_pairwise(a["x"], a["xr"], a["fd"], a["fdr"], a["fc"], a["fcr"])

        return f, x0
    return build


LOSS_CASES = {
    "loss_D-real": _loss_D_real,
    "loss_D-fake": _loss_D_fake,
    "loss_G_naive": _loss_G_naive,
    "loss_GD_mean_match": _loss_GD,
    "loss_C": _loss_C,
    "loss_GC_mean_match": _loss_GC,
    "loss_KL-mu": _loss_KL(0),
    "loss_KL-eps": _loss_KL(1),
    "sample_latent-mu": _sample_latent(0, "exp-half-eps"),
    "sample_latent-eps": _sample_latent(1, "exp-half-eps"),
    "sample_latent-eps-literal": _sample_latent(1, "exp-eps"),
    "loss_G_pairwise-rec": _pairwise("xr"),
    "loss_G_pairwise-fD": _pairwise("fdr"),
    "loss_G_pairwise-fC": _pairwise("fcr"),
}

ALL_CASES = {**OP_CASES, **LOSS_CASES}


def max_error(name: str, seeds=range(100), h: float = 1e-5) -> float:
    """Worst relative gradient error of case ``name`` over ``seeds``."""
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng([s, zlib.crc32(name.encode())])
        with T.default_dtype(np.float64):
            f, x = ALL_CASES[name](rng)
        worst = max(worst, T.finite_diff_check(f, x, h))
    return worst
