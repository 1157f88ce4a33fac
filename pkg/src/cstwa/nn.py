"""Dense numpy kernels: affine/activation/dropout layers, MLP stacks, Adam, gradient checking.

Everything here works on plain ``np.ndarray`` batches of shape ``(batch, features)``.
The forward functions return a cache that the matching backward function consumes;
there is no tape, only the fixed layer compositions used by the model.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

TRAIN = "train"
EVAL = "eval"


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """PCG64 stream for ``seed``; each label sequence gives an independent child stream."""
    key = tuple(zlib.crc32(str(lab).encode()) for lab in labels)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"{what}: {bad} non-finite entries")


@dataclass
class ParamBlock:
    """Weights ``(m, n)`` and bias ``(n,)`` with gradient buffers and Adam moments."""

    weight: np.ndarray
    bias: np.ndarray
    grad_w: np.ndarray = field(init=False)
    grad_b: np.ndarray = field(init=False)
    m_w: np.ndarray = field(init=False)
    v_w: np.ndarray = field(init=False)
    m_b: np.ndarray = field(init=False)
    v_b: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        self.grad_w = np.zeros_like(self.weight)
        self.grad_b = np.zeros_like(self.bias)
        self.m_w = np.zeros_like(self.weight)
        self.v_w = np.zeros_like(self.weight)
        self.m_b = np.zeros_like(self.bias)
        self.v_b = np.zeros_like(self.bias)

    @classmethod
    def xavier(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64) -> "ParamBlock":
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def zero_grad(self) -> None:
        self.grad_w.fill(0.0)
        self.grad_b.fill(0.0)


def affine_forward(x: np.ndarray, p: ParamBlock) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {p.weight.shape}")
    return x @ p.weight + p.bias


def affine_backward(x: np.ndarray, p: ParamBlock, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(dW, db, dx)`` for ``y = x @ W + b``."""
    if dy.shape != (x.shape[0], p.weight.shape[1]):
        raise ShapeError(f"affine backward: upstream {dy.shape} vs output {(x.shape[0], p.weight.shape[1])}")
    return x.T @ dy, dy.sum(axis=0), dy @ p.weight.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the v<0 branch uses exp(v)/(1+exp(v))
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "none":
        return x
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(pre: np.ndarray, out: np.ndarray, dy: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return dy * (pre > 0)
    if kind == "sigmoid":
        return dy * out * (1.0 - out)
    return dy


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns ``(out, mask)`` where ``mask`` already carries the 1/(1-rate) scale."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


@dataclass(frozen=True)
class MlpSpec:
    """Layer dims ``[in, h1, ..., out]``; one activation and one dropout rate per layer."""

    layer_dims: tuple[int, ...]
    dropout_rates: tuple[float, ...] = ()
    activations: tuple[str, ...] = ()
    output_activation: str = "none"

    def __post_init__(self):
        n = len(self.layer_dims) - 1
        if n < 1:
            raise ConfigError("an MLP needs at least one layer")
        if not self.dropout_rates:
            object.__setattr__(self, "dropout_rates", (0.0,) * n)
        if not self.activations:
            object.__setattr__(self, "activations", ("relu",) * n)
        if len(self.dropout_rates) != n or len(self.activations) != n:
            raise ConfigError(f"{n} layers but {len(self.dropout_rates)} dropout rates, "
                              f"{len(self.activations)} activations")
        for r in self.dropout_rates:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {r}")
        for a in (*self.activations, self.output_activation):
            if a not in ("relu", "sigmoid", "none"):
                raise ConfigError(f"unknown activation {a!r}")

    @property
    def depth(self) -> int:
        return len(self.layer_dims) - 1

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> list[ParamBlock]:
        return [ParamBlock.xavier(a, b, rng, dtype) for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:])]


@dataclass
class MlpCache:
    spec: MlpSpec
    params: list[ParamBlock]
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    act: list[np.ndarray]
    masks: list[np.ndarray]
    out: np.ndarray


def mlp_forward(spec: MlpSpec, params: Sequence[ParamBlock], x: np.ndarray, mode: str = EVAL,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, MlpCache]:
    if len(params) != spec.depth:
        raise ShapeError(f"MLP spec has {spec.depth} layers, got {len(params)} param blocks")
    for i, p in enumerate(params):
        if p.shape != (spec.layer_dims[i], spec.layer_dims[i + 1]):
            raise ShapeError(f"layer {i}: weight {p.shape} != spec {(spec.layer_dims[i], spec.layer_dims[i + 1])}")
    inputs, pre, act, masks = [], [], [], []
    h = x
    for p, kind, rate in zip(params, spec.activations, spec.dropout_rates):
        inputs.append(h)
        a = affine_forward(h, p)
        r = activation_forward(a, kind)
        h, m = dropout_forward(r, rate, rng, mode)
        pre.append(a)
        act.append(r)
        masks.append(m)
    out = activation_forward(h, spec.output_activation)
    return out, MlpCache(spec, list(params), inputs, pre, act, masks, out)


def mlp_backward(cache: MlpCache, dy: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse pass. Returns ``([(dW, db) per layer], dx)``."""
    if dy.shape != cache.out.shape:
        raise ShapeError(f"mlp backward: upstream {dy.shape} vs output {cache.out.shape}")
    spec = cache.spec
    # output activation sits after the last dropout
    last = cache.act[-1] * cache.masks[-1]
    g = activation_backward(last, cache.out, dy, spec.output_activation)
    grads = [None] * spec.depth
    for i in reversed(range(spec.depth)):
        g = g * cache.masks[i]
        g = activation_backward(cache.pre[i], cache.act[i], g, spec.activations[i])
        dw, db, g = affine_backward(cache.inputs[i], cache.params[i], g)
        grads[i] = (dw, db)
    return grads, g


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0


def adam_update(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step,
                lr: float, beta1: float, beta2: float, eps: float, l2: float = 0.0) -> None:
    """In-place bias-corrected Adam on ``value``; ``step`` is the post-increment count (scalar or per-row)."""
    if l2:
        grad = grad + l2 * value
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    step = np.asarray(step, dtype=np.float64)
    if step.ndim:
        step = step.reshape((-1,) + (1,) * (value.ndim - 1))
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(value.dtype, copy=False)


def adam_step(p: ParamBlock, grad: tuple[np.ndarray, np.ndarray] | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, l2: float = 0.0) -> None:
    """One Adam step on a ParamBlock. L2 is coupled and touches weights only, never biases.

    ``grad`` defaults to the block's own accumulators.
    """
    if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1):
        raise ConfigError(f"bad Adam settings lr={lr} beta1={beta1} beta2={beta2}")
    gw, gb = grad if grad is not None else (p.grad_w, p.grad_b)
    if gw.shape != p.weight.shape or gb.shape != p.bias.shape:
        raise ShapeError(f"grad shapes {gw.shape}/{gb.shape} vs params {p.weight.shape}/{p.bias.shape}")
    check_finite(gw, "weight gradient")
    check_finite(gb, "bias gradient")
    p.step += 1
    adam_update(p.weight, gw, p.m_w, p.v_w, p.step, lr, beta1, beta2, eps, l2)
    adam_update(p.bias, gb, p.m_b, p.v_b, p.step, lr, beta1, beta2, eps, 0.0)


def grad_check(func: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
               x0: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between ``grad(x0)`` and central differences of ``func``.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    analytic = np.asarray(grad(x.copy()), dtype=np.float64).ravel()
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient length {analytic.size} != parameter length {x.size}")
    numeric = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = func(x.copy())
        x[i] = old - eps
        fm = func(x.copy())
        x[i] = old
        numeric[i] = (fp - fm) / (2.0 * eps)
    if x.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
