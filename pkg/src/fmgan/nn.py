"""Layers, network construction and first-order optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")
LAYER_KINDS = ("dense", "conv", "deconv", "batchnorm", "activation", "flatten", "reshape")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential stack.

    ``size_in``/``size_out`` are feature counts for dense layers and channel
    counts for conv/deconv/batchnorm layers.
    """

    kind: str
    size_in: int = 0
    size_out: int = 0
    kernel: int = 3
    stride: int = 1
    padding: str = "same"
    activation: str = "linear"
    shape: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("dense", "conv", "deconv") and (self.size_in <= 0 or self.size_out <= 0):
            raise ValueError(f"{self.kind} sizes must be positive, got {self.size_in}->{self.size_out}")
        if self.kind == "batchnorm" and self.size_in <= 0:
            raise ValueError("batchnorm size must be positive")
        if self.kind in ("conv", "deconv") and (self.kernel <= 0 or self.stride not in (1, 2)):
            raise ValueError(f"bad kernel/stride {self.kernel}/{self.stride}")
        if self.kind == "reshape" and (not self.shape or any(s <= 0 for s in self.shape)):
            raise ValueError(f"reshape target must be positive, got {self.shape}")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", n_in, n_out)


def conv(c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv", c_in, c_out, kernel, stride, padding)


def deconv(c_in: int, c_out: int, kernel: int = 4, stride: int = 2, padding: str = "same") -> LayerSpec:
    return LayerSpec("deconv", c_in, c_out, kernel, stride, padding)


def batchnorm(channels: int) -> LayerSpec:
    return LayerSpec("batchnorm", channels)


def activation(tag: str) -> LayerSpec:
    return LayerSpec("activation", activation=tag)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


# ---------------------------------------------------------------------------
# layers


class Layer:
    training = True

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, dtype):
        self.weight = Tensor(_uniform(rng, (n_in, n_out), n_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class Conv(Layer):
    def __init__(self, spec: LayerSpec, rng, dtype):
        k, ci, co = spec.kernel, spec.size_in, spec.size_out
        self.stride, self.padding = spec.stride, spec.padding
        self.weight = Tensor(_uniform(rng, (k, k, ci, co), k * k * ci, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return T.add(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)


class Deconv(Layer):
    def __init__(self, spec: LayerSpec, rng, dtype):
        k, ci, co, s = spec.kernel, spec.size_in, spec.size_out, spec.stride
        self.stride, self.padding = s, spec.padding
        fan_in = max(1, (k * k * ci) // (s * s))
        self.weight = Tensor(_uniform(rng, (k, k, co, ci), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return T.add(T.conv2d_transpose(x, self.weight, self.stride, self.padding), self.bias)


class BatchNorm(Layer):
    momentum = 0.99
    eps = 1e-5

    def __init__(self, channels, dtype):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x):
        return batchnorm_forward(x, self, "train" if self.training else "eval")


def batchnorm_forward(x: Tensor, state: BatchNorm, mode: str = "train") -> Tensor:
    """Normalize over every axis but the last, then scale and shift.

    Train mode uses batch statistics and folds them into the running
    estimates; eval mode reads the running estimates and mutates nothing.
    """
    if x.shape[-1] != state.scale.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[-1]} channels, layer has {state.scale.shape[0]}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        xhat, mean, var = T.batch_stats(x, state.eps)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = T.mul(T.sub(x, Tensor(state.running_mean)), Tensor(inv.astype(x.dtype)))
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return T.add(T.mul(xhat, state.scale), state.shift)


class Activation(Layer):
    def __init__(self, tag):
        self.tag = tag

    def __call__(self, x):
        if self.tag == "linear":
            return x
        return getattr(T, self.tag)(x)


class Flatten(Layer):
    def __call__(self, x):
        return T.reshape(x, (x.shape[0], -1))


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def __call__(self, x):
        return T.reshape(x, (x.shape[0],) + self.shape)


class Sequential:
    """Ordered stack of layers built from :class:`LayerSpec` entries."""

    def __init__(self, layers, specs, input_shape, output_shape):
        self.layers = list(layers)
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out.append((f"{prefix}{i}.{name}", p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out.append((f"{prefix}{i}.{name}", b))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)


def build_network(spec, input_shape, rng) -> Sequential:
    """Build a :class:`Sequential` from ``spec``, validating shapes layer by layer.

    ``input_shape`` excludes the batch axis. ``rng`` is a seed or a numpy
    Generator; parameters are drawn from it in layer order.
    """
    spec = list(spec)
    if not spec:
        raise ValueError("network spec is empty")
    rng = np.random.default_rng(rng)
    dtype = T.get_default_dtype()
    shape = tuple(input_shape)
    layers = []
    for i, s in enumerate(spec):
        if s.kind == "dense":
            if len(shape) != 1 or shape[0] != s.size_in:
                raise ShapeError(f"layer {i} (dense {s.size_in}->{s.size_out}) got input shape {shape}")
            layers.append(Dense(s.size_in, s.size_out, rng, dtype))
            shape = (s.size_out,)
        elif s.kind in ("conv", "deconv"):
            if len(shape) != 3 or shape[2] != s.size_in:
                raise ShapeError(f"layer {i} ({s.kind} {s.size_in}->{s.size_out}) got input shape {shape}")
            h, w = shape[:2]
            if s.kind == "conv":
                if s.padding == "same":
                    h, w = -(-h // s.stride), -(-w // s.stride)
                else:
                    if h < s.kernel or w < s.kernel:
                        raise ShapeError(f"layer {i} (conv): input {shape} smaller than kernel")
                    h, w = (h - s.kernel) // s.stride + 1, (w - s.kernel) // s.stride + 1
                layers.append(Conv(s, rng, dtype))
            else:
                if s.padding == "same":
                    if s.kernel < s.stride:
                        raise ShapeError(f"layer {i} (deconv): kernel smaller than stride")
                    h, w = h * s.stride, w * s.stride
                else:
                    h, w = (h - 1) * s.stride + s.kernel, (w - 1) * s.stride + s.kernel
                layers.append(Deconv(s, rng, dtype))
            shape = (h, w, s.size_out)
        elif s.kind == "batchnorm":
            if shape[-1] != s.size_in:
                raise ShapeError(f"layer {i} (batchnorm {s.size_in}) got input shape {shape}")
            layers.append(BatchNorm(s.size_in, dtype))
        elif s.kind == "activation":
            layers.append(Activation(s.activation))
        elif s.kind == "flatten":
            layers.append(Flatten())
            shape = (int(np.prod(shape)),)
        elif s.kind == "reshape":
            if int(np.prod(s.shape)) != int(np.prod(shape)):
                raise ShapeError(f"layer {i} (reshape {s.shape}) got input shape {shape}")
            layers.append(Reshape(s.shape))
            shape = tuple(s.shape)
    return Sequential(layers, spec, input_shape, shape)


def build_mlp(spec, rng) -> Sequential:
    """Dense/activation stack; the input width is read off the first dense layer."""
    spec = list(spec)
    if not spec:
        raise ValueError("network spec is empty")
    first = next((s for s in spec if s.kind == "dense"), None)
    if first is None:
        raise ValueError("an MLP needs at least one dense layer")
    return build_network(spec, (first.size_in,), rng)


def mlp_spec(n_in: int, hidden, n_out: int, hidden_activation: str = "relu",
             out_activation: str = "linear") -> list[LayerSpec]:
    widths = [n_in, *hidden]
    spec = []
    for a, b in zip(widths[:-1], widths[1:]):
        spec += [dense(a, b), activation(hidden_activation)]
    spec.append(dense(widths[-1], n_out))
    if out_activation != "linear":
        spec.append(activation(out_activation))
    return spec


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    hyper: dict = field(default_factory=dict)
    slots: dict = field(default_factory=dict)  # slot name -> list of arrays
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("rmsprop", "adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def _check_grads(names, params, grads):
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")


def rmsprop_step(params, grads, state: OptimizerState, names=None):
    """a <- rho*a + (1-rho)*g^2;  p <- p - lr*g/sqrt(a + delta). Updates in place."""
    names = names or [str(i) for i in range(len(params))]
    _check_grads(names, params, grads)
    rho, delta = state.hyper["rho"], state.hyper["delta"]
    acc = state.slots.setdefault("square_avg", [np.zeros_like(p) for p in params])
    lr = state.lr
    for p, g, a in zip(params, grads, acc):
        a *= rho
        a += (1 - rho) * g * g
        p -= lr * g / np.sqrt(a + delta)
    state.step += 1
    return params, state


def adam_step(params, grads, state: OptimizerState, names=None):
    names = names or [str(i) for i in range(len(params))]
    _check_grads(names, params, grads)
    b1, b2, eps = state.hyper["beta1"], state.hyper["beta2"], state.hyper["eps"]
    ms = state.slots.setdefault("m", [np.zeros_like(p) for p in params])
    vs = state.slots.setdefault("v", [np.zeros_like(p) for p in params])
    state.step += 1
    t = state.step
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    lr = state.lr
    for p, g, m, v in zip(params, grads, ms, vs):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return params, state


def sgd_step(params, grads, state: OptimizerState, names=None):
    names = names or [str(i) for i in range(len(params))]
    _check_grads(names, params, grads)
    for p, g in zip(params, grads):
        p -= state.lr * g
    state.step += 1
    return params, state


_STEPS = {"rmsprop": rmsprop_step, "adam": adam_step, "sgd": sgd_step}
_DEFAULT_HYPER = {
    "rmsprop": {"rho": 0.9, "delta": 1e-8},
    "adam": {"beta1": 0.5, "beta2": 0.999, "eps": 1e-8},
    "sgd": {},
}


class Optimizer:
    """Holds named parameters and an :class:`OptimizerState`."""

    def __init__(self, named_params, kind: str = "rmsprop", lr: float = 5e-5, **hyper):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState(kind, lr, {**_DEFAULT_HYPER[kind], **hyper})

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        _STEPS[self.state.kind]([p.data for p in self.params], grads, self.state, self.names)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for slot, arrays in sorted(self.state.slots.items()):
            for name, a in zip(self.names, arrays):
                out[f"{slot}/{name}"] = a
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int):
        slots = {}
        for key, a in arrays.items():
            slot, name = key.split("/", 1)
            slots.setdefault(slot, {})[name] = a
        self.state.slots = {
            slot: [np.array(by_name[n], dtype=p.dtype) for n, p in zip(self.names, self.params)]
            for slot, by_name in slots.items()
        }
        self.state.step = int(step)


def RMSProp(named_params, lr=5e-5, rho=0.9, delta=1e-8):
    return Optimizer(named_params, "rmsprop", lr, rho=rho, delta=delta)


def Adam(named_params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
    return Optimizer(named_params, "adam", lr, beta1=beta1, beta2=beta2, eps=eps)


def SGD(named_params, lr=1e-2):
    return Optimizer(named_params, "sgd", lr)
