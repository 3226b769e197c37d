"""
Small dense layers with hand-derived backward passes, the SGD optimizer and
a finite-difference gradient checker.

Layers follow one protocol: ``forward`` caches what ``backward`` needs,
``backward(grad_out)`` accumulates parameter gradients into ``Param.grad``
and returns the gradient w.r.t. the layer input(s). Call ``zero_grad``
before every backward sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.config import OptimizerConfig
from core.errors import ContractViolation, ShapeMismatchError
from core.models import NeighborTable, SparseTensor
from core.runtime import float_dtype
from core.sparse import KERNEL_OFFSETS, submanifold_conv, submanifold_conv_backward


BN_EPS = 1e-5
BN_MOMENTUM = 0.99


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    momentum: np.ndarray = None

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeMismatchError(
                f"Param grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    # He-style uniform init
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(float_dtype())


class Module:
    """Walks attributes to find Params, buffers and sub-modules."""

    training: bool = True
    buffers: Tuple[str, ...] = ()

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for name, value in vars(self).items():
            if isinstance(value, Param):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def params(self) -> List[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_params(prefix)}
        self._collect_buffers(prefix, state)
        return state

    def _collect_buffers(self, prefix: str, state: Dict[str, np.ndarray]) -> None:
        for name in self.buffers:
            state[prefix + name] = getattr(self, name)
        for name, child in self.children():
            child._collect_buffers(f"{prefix}{name}.", state)

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_params(prefix):
            if name not in state:
                raise ContractViolation(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != p.value.shape:
                raise ShapeMismatchError(
                    f"{name}: checkpoint shape {state[name].shape} != model shape {p.value.shape}"
                )
            p.value[...] = state[name]
        self._load_buffers(state, prefix)

    def _load_buffers(self, state: Mapping[str, np.ndarray], prefix: str) -> None:
        for name in self.buffers:
            key = prefix + name
            if key not in state:
                raise ContractViolation(f"checkpoint is missing buffer {key!r}")
            getattr(self, name)[...] = state[key]
        for name, child in self.children():
            child._load_buffers(state, f"{prefix}{name}.")


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------

def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(f"fc input has {x.shape[-1]} features, weight expects {w.shape[0]}")
    return x @ w + b


def fc_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias_init: float = 0.0, weight_scale: float = 1.0):
        self.weight = Param(_init(rng, (in_features, out_features), in_features) * weight_scale)
        self.bias = Param(np.full(out_features, bias_init, dtype=float_dtype()))
        self._x: Optional[np.ndarray] = None

    @property
    def in_features(self) -> int:
        return int(self.weight.value.shape[0])

    @property
    def out_features(self) -> int:
        return int(self.weight.value.shape[1])

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return fc_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        dx, dw, db = fc_backward(self._x, self.weight.value, grad_out)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

class ReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0  # subgradient 0 at 0
        self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class Tanh(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        y = np.tanh(x)
        self._y = y
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * (1.0 - self._y ** 2)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class _NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool


def normalize_forward(
    x: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
) -> Tuple[np.ndarray, _NormCache]:
    """Per-channel standardization; updates running stats in place when training."""
    if training:
        if x.shape[0] < 2:
            raise ContractViolation(f"batchnorm needs a batch of >= 2 in training mode, got {x.shape[0]}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return xhat, _NormCache(xhat=xhat, inv_std=inv_std, training=training)


def normalize_backward(grad_xhat: np.ndarray, cache: _NormCache) -> np.ndarray:
    if not cache.training:
        return grad_xhat * cache.inv_std
    n = grad_xhat.shape[0]
    return (cache.inv_std / n) * (
        n * grad_xhat
        - grad_xhat.sum(axis=0)
        - cache.xhat * np.sum(grad_xhat * cache.xhat, axis=0)
    )


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool):
    xhat, cache = normalize_forward(x, running_mean, running_var, training)
    return gamma * xhat + beta, (cache, gamma)


def batchnorm_backward(grad_out: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm, gamma = cache
    d_gamma = np.sum(grad_out * norm.xhat, axis=0)
    d_beta = grad_out.sum(axis=0)
    return normalize_backward(grad_out * gamma, norm), d_gamma, d_beta


class BatchNorm(Module):
    buffers = ("running_mean", "running_var")

    def __init__(self, channels: int):
        dtype = float_dtype()
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, self.training
        )
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        dx, dg, db = batchnorm_backward(grad_out, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ConditionalBatchNorm(Module):
    """
    Batchnorm whose per-channel scale and shift come from an embedding.

    ``forward(x, e)`` takes one embedding row per input row; the gamma head
    starts at bias 1 so an untrained layer behaves like plain batchnorm.
    """
    buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, embedding_dim: int, rng: np.random.Generator):
        dtype = float_dtype()
        self.gamma_head = Linear(embedding_dim, channels, rng, bias_init=1.0, weight_scale=0.1)
        self.beta_head = Linear(embedding_dim, channels, rng, bias_init=0.0, weight_scale=0.1)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: np.ndarray, e: np.ndarray) -> np.ndarray:
        if len(e) != len(x):
            raise ShapeMismatchError(f"{len(x)} rows but {len(e)} embeddings")
        xhat, self._norm = normalize_forward(x, self.running_mean, self.running_var, self.training)
        gamma = self.gamma_head.forward(e)
        self._gamma = gamma
        return gamma * xhat + self.beta_head.forward(e)

    def backward(self, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (dx, de)."""
        de = self.gamma_head.backward(grad_out * self._norm.xhat)
        de = de + self.beta_head.backward(grad_out)
        dx = normalize_backward(grad_out * self._gamma, self._norm)
        return dx, de


# ---------------------------------------------------------------------------
# Sparse convolution layer
# ---------------------------------------------------------------------------

class SubmanifoldConv(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        fan_in = in_channels * len(KERNEL_OFFSETS)
        self.weight = Param(_init(rng, (len(KERNEL_OFFSETS), in_channels, out_channels), fan_in))
        self.bias = Param(np.zeros(out_channels, dtype=float_dtype()))

    def forward(self, t: SparseTensor, nbrs: NeighborTable) -> SparseTensor:
        self._t, self._nbrs = t, nbrs
        return submanifold_conv(t, self.weight.value, self.bias.value, nbrs)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        d_feat, d_w, d_b = submanifold_conv_backward(self._t, self.weight.value, self._nbrs, grad_out)
        self.weight.grad += d_w
        self.bias.grad += d_b
        return d_feat


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient (softmax - onehot) / batch."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if len(labels) != n:
        raise ShapeMismatchError(f"{n} logit rows but {len(labels)} labels")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= c:
        raise ContractViolation(f"labels must be in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def learning_rate(config: OptimizerConfig, iteration: int) -> float:
    stage = min(iteration // config.schedule_step, len(config.schedule_factors) - 1)
    return config.base_lr * config.schedule_factors[stage]


def sgd_step(params: Sequence[Param], config: OptimizerConfig, iteration: int) -> float:
    """
    One momentum SGD update in place; returns the learning rate used.

    g <- grad + wd * w (after optional global-norm clipping of grad),
    v <- momentum * v + g, w <- w - lr * v.
    """
    lr = learning_rate(config, iteration)
    scale = 1.0
    if config.grad_clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
        if norm > config.grad_clip_norm:
            scale = config.grad_clip_norm / norm
    for p in params:
        g = p.grad * scale + config.weight_decay * p.value
        p.momentum *= config.momentum
        p.momentum += g
        p.value -= lr * p.momentum
    return lr


@dataclass
class SGD:
    params: List[Param]
    config: OptimizerConfig
    iteration: int = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        lr = sgd_step(self.params, self.config, self.iteration)
        self.iteration += 1
        return lr


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    name: str
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / denom


def gradcheck(
    fn: Callable[[], Tuple[float, Dict[str, np.ndarray]]],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = 64,
    name: str = "op",
    seed: int = 0,
) -> GradcheckReport:
    """
    Compare ``fn``'s analytic gradients with central differences.

    ``fn()`` returns ``(loss, grads)`` and must read the arrays in
    ``inputs`` at call time: they are perturbed in place, one coordinate
    at a time, and restored. Tensors larger than ``max_coords`` are
    checked on a fixed random subset of coordinates.
    """
    _, analytic = fn()
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    report = GradcheckReport(name=name, tolerance=tolerance)

    for key, array in inputs.items():
        if key not in analytic:
            raise ContractViolation(f"gradcheck: fn returned no gradient for {key!r}")
        if analytic[key].shape != array.shape:
            raise ShapeMismatchError(
                f"gradcheck: gradient for {key!r} has shape {analytic[key].shape}, input {array.shape}"
            )
        if not array.flags.c_contiguous:
            raise ContractViolation(f"gradcheck: input {key!r} must be C-contiguous to perturb in place")
        flat = array.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            plus, _ = fn()
            flat[i] = orig - h
            minus, _ = fn()
            flat[i] = orig
            numeric[j] = (plus - minus) / (2.0 * h)
        report.errors[key] = relative_error(analytic[key].reshape(-1)[coords], numeric)
    return report
