"""Small differentiable numeric core.

Every operation comes as an explicit forward/backward pair. Forward functions
return ``(output, cache)``; the matching backward takes the upstream gradient
and the cache. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from toneunit.errors import ConfigError, InputTooShortError, NonFiniteGradientError

GUMBEL_CLAMP = 1e-12


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# random numbers


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox4x64 stream keyed by ``seed`` and an optional spawn key.

    Philox output depends only on (key, counter), so the same seed and call
    sequence yields the same numbers on every platform.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def sample_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    return gumbel_from_uniform(sample_uniform(rng, shape))


# ---------------------------------------------------------------------------
# layers


def _same_padding(T: int, K: int, stride: int) -> tuple[int, int]:
    out_len = -(-T // stride)
    total = max((out_len - 1) * stride + K - T, 0)
    return total // 2, total - total // 2


def conv1d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1,
                   padding: str | None = None):
    """1-D convolution over time. ``x`` is [T, Cin], ``kernel`` is [K, Cin, Cout].

    ``padding`` defaults to "same" for stride 1 and "valid" otherwise. Passing
    "same" with a larger stride gives ceil(T / stride) output frames.
    """
    if x.ndim != 2 or kernel.ndim != 3:
        raise ConfigError(f"conv1d expects [T, Cin] input and [K, Cin, Cout] kernel, got {x.shape} and {kernel.shape}")
    T, cin = x.shape
    K, kcin, cout = kernel.shape
    if kcin != cin:
        raise ConfigError(f"conv1d input has {cin} channels but kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ConfigError(f"conv1d bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding is None:
        padding = "same" if stride == 1 else "valid"
    if padding == "same":
        left, right = _same_padding(T, K, stride)
    elif padding == "valid":
        if T < K:
            raise InputTooShortError(f"input has {T} frames, kernel needs at least {K}")
        left = right = 0
    else:
        raise ConfigError(f"unknown padding mode {padding!r}")

    xp = np.pad(x, ((left, right), (0, 0))) if (left or right) else x
    t_out = (xp.shape[0] - K) // stride + 1
    span = stride * (t_out - 1) + 1
    # row t holds xp[t*stride + k, c] at column k*Cin + c
    cols = np.concatenate([xp[k:k + span:stride] for k in range(K)], axis=1)
    w = kernel.reshape(K * cin, cout)
    out = cols @ w + bias
    cache = (cols, w, kernel.shape, stride, left, T, xp.shape[0])
    return out, cache


def conv1d_backward(dout: np.ndarray, cache):
    cols, w, kshape, stride, left, T, padded_len = cache
    K, cin, cout = kshape
    dkernel = (cols.T @ dout).reshape(kshape)
    dbias = dout.sum(axis=0)
    dcols = (dout @ w.T).reshape(-1, K, cin)
    t_out = dcols.shape[0]
    dxp = np.zeros((padded_len, cin))
    span = stride * (t_out - 1) + 1
    for k in range(K):
        dxp[k:k + span:stride] += dcols[:, k, :]
    return dxp[left:left + T], dkernel, dbias


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ConfigError(f"linear: bias shape {bias.shape} does not match output width {weight.shape[1]}")
    return x @ weight + bias, (x, weight)


def linear_backward(dout: np.ndarray, cache):
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(dout: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return dout - np.exp(logp) * dout.sum(axis=-1, keepdims=True)


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Iterable[Param], state: AdamWState) -> None:
    """One AdamW update with bias correction and decoupled weight decay, in place."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise NonFiniteGradientError(p.name, f"{bad} of {p.grad.size} entries non-finite at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= state.lr * (update + state.weight_decay * p.value)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, eps: float = 1e-4) -> float:
    """Largest relative disagreement between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` must return ``(scalar_value, gradient_like_x)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x.copy())[0]
        flat[i] = orig - eps
        fm = fn(x.copy())[0]
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
