"""Finite scalar quantization, Gumbel-Softmax vector quantization, and codebook usage."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from math import prod
from typing import Iterable, Sequence

import numpy as np

from toneunit.errors import ConfigError, ContractError, RangeError
from toneunit.numcore import log_softmax, sample_gumbel

FULL_SCALE_FSQ_LEVELS = (8, 5, 5, 5)
DESK_FSQ_LEVELS = (4, 4, 4)


@dataclass(frozen=True)
class FsqConfig:
    levels: tuple[int, ...] = DESK_FSQ_LEVELS
    up_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        if not self.levels or len(self.levels) > 10:
            raise ConfigError(f"FSQ needs between 1 and 10 dimensions, got {len(self.levels)}")
        if any(l < 2 for l in self.levels):
            raise ConfigError(f"every FSQ level count must be >= 2, got {list(self.levels)}")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return prod(self.levels)


@dataclass(frozen=True)
class VqConfig:
    codebook_size: int = 64
    code_dim: int = 64
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_decay: float = 0.9995
    alpha: float = 0.1

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ConfigError(f"VQ codebook size must be >= 2, got {self.codebook_size}")
        if min(self.tau_start, self.tau_end) <= 0:
            raise ConfigError("Gumbel temperatures must be positive")
        if not 0 < self.tau_decay <= 1:
            raise ConfigError(f"tau_decay must lie in (0, 1], got {self.tau_decay}")
        if self.alpha < 0:
            raise ConfigError(f"diversity weight must be >= 0, got {self.alpha}")

    def temperature(self, step: int) -> float:
        return max(self.tau_start * self.tau_decay ** step, self.tau_end)


# ---------------------------------------------------------------------------
# FSQ


def _levels_array(levels: Sequence[int]) -> np.ndarray:
    return np.asarray(levels, dtype=np.int64)


def _check_width(z: np.ndarray, levels: Sequence[int]) -> None:
    if z.shape[-1] != len(levels):
        raise ConfigError(f"expected {len(levels)} FSQ dimensions, got {z.shape[-1]}")


def fsq_bound(z_low: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    """Squash each coordinate so rounding it reaches exactly L_m integers.

    floor(L/2) * tanh(z), shifted by +0.5 for even L so the reachable set is
    {-(L/2 - 1), ..., L/2} rather than L + 1 values.
    """
    z_low = np.asarray(z_low, dtype=np.float64)
    _check_width(z_low, levels)
    L = _levels_array(levels)
    return (L // 2) * np.tanh(z_low) + np.where(L % 2 == 0, 0.5, 0.0)


def fsq_bound_backward(dout: np.ndarray, z_low: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    L = _levels_array(levels)
    t = np.tanh(z_low)
    return dout * (L // 2) * (1.0 - t * t)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def fsq_quantize(z_low: np.ndarray, levels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(digits, quantized)``; digits lie in [0, L_m).

    The backward pass is the straight-through estimator: use
    :func:`fsq_quantize_backward`, which is exactly the backward of
    :func:`fsq_bound`.
    """
    bounded = fsq_bound(z_low, levels)
    L = _levels_array(levels)
    lo = -((L - 1) // 2)
    # tanh saturates to exactly 1.0 in float64, which would round even L one step too far
    quantized = np.clip(_round_half_up(bounded), lo, L // 2)
    digits = (quantized - lo).astype(np.int64)
    return digits, quantized


def fsq_quantize_backward(dout: np.ndarray, z_low: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    return fsq_bound_backward(dout, z_low, levels)


def fsq_code_index(digits, levels: Sequence[int]):
    """Mixed-radix index, first dimension least significant. Works on [..., n] arrays."""
    d = np.asarray(digits, dtype=np.int64)
    _check_width(d, levels)
    L = _levels_array(levels)
    if np.any(d < 0) or np.any(d >= L):
        raise RangeError(f"FSQ digits {d.tolist()} out of range for levels {list(levels)}")
    radix = np.concatenate(([1], np.cumprod(L)[:-1]))
    idx = d @ radix
    return int(idx) if np.ndim(idx) == 0 else idx


def fsq_index_digits(index, levels: Sequence[int]) -> np.ndarray:
    L = _levels_array(levels)
    idx = np.asarray(index, dtype=np.int64)
    size = int(np.prod(L))
    if np.any(idx < 0) or np.any(idx >= size):
        raise RangeError(f"FSQ index out of range [0, {size})")
    radix = np.concatenate(([1], np.cumprod(L)[:-1]))
    return (idx[..., None] // radix) % L


def fsq_code_vector(index, levels: Sequence[int]) -> np.ndarray:
    L = _levels_array(levels)
    return (fsq_index_digits(index, levels) - (L - 1) // 2).astype(np.float64)


def fsq_codebook(levels: Sequence[int]) -> np.ndarray:
    return fsq_code_vector(np.arange(prod(levels)), levels)


# ---------------------------------------------------------------------------
# Gumbel-Softmax VQ


def vq_gumbel_select(logits: np.ndarray, tau: float, rng: np.random.Generator | None = None,
                     training: bool = False, noise: np.ndarray | None = None):
    """Hard selection with soft probabilities, row-wise over [T, V] logits.

    In training mode Gumbel noise is drawn from ``rng`` unless ``noise`` is
    given explicitly; in eval mode no noise is added. Returns
    ``(indices, probs)`` where ``indices`` is the argmax of ``probs``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if training and noise is None:
        if rng is None:
            raise ConfigError("training-mode selection needs an rng")
        noise = sample_gumbel(rng, logits.shape)
    elif not training:
        noise = None
    scores = logits if noise is None else logits + noise
    probs = np.exp(log_softmax(scores / tau))
    return np.argmax(probs, axis=-1), probs


def vq_gumbel_select_backward(dprobs: np.ndarray, probs: np.ndarray, tau: float) -> np.ndarray:
    """Gradient with respect to the logits given a gradient on the soft probabilities."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner) / tau


def vq_lookup(indices: np.ndarray, probs: np.ndarray, codebook: np.ndarray, ref_probs: np.ndarray | None = None):
    """Straight-through code lookup.

    The forward value is ``codebook[indices]``; the backward routes the code
    gradient to the probabilities through ``probs @ codebook``. ``ref_probs``
    (the probabilities whose value is cancelled) defaults to ``probs``; passing
    a frozen copy turns the lookup into the differentiable surrogate the
    estimator stands for, which the gradient tests use.
    """
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(indices)), indices] = 1.0
    if ref_probs is None:
        mix = onehot
    else:
        mix = onehot + probs - ref_probs
    return mix @ codebook, (onehot, mix, codebook)


def vq_lookup_backward(dout: np.ndarray, cache):
    _, mix, codebook = cache
    return dout @ codebook.T, mix.T @ dout


def diversity_loss(probs: np.ndarray) -> float:
    """(V - exp(H(mean p))) / V for a [B, V] batch of probability rows."""
    return diversity_loss_and_grad(probs)[0]


def diversity_loss_and_grad(probs: np.ndarray) -> tuple[float, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError(f"expected a non-empty [B, V] probability batch, got shape {probs.shape}")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"probability row {bad} sums to {sums[bad]!r}, not 1")
    B, V = probs.shape
    mean = probs.mean(axis=0)
    safe_log = np.log(np.maximum(mean, 1e-300))
    entropy = -float(np.sum(np.where(mean > 0, mean * safe_log, 0.0)))
    perplexity = np.exp(entropy)
    loss = (V - perplexity) / V
    dmean = perplexity / V * (np.maximum(safe_log, np.log(1e-12)) + 1.0)
    return float(loss), np.broadcast_to(dmean / B, probs.shape).copy()


# ---------------------------------------------------------------------------
# usage


class UsageCounter(Counter):
    """Occurrence count per unit index over an evaluation pass."""

    def add(self, units: Iterable[int]) -> None:
        self.update(int(u) for u in units)

    @property
    def frames(self) -> int:
        return sum(self.values())


def codebook_usage(counter: Counter, codebook_size: int, min_count: int = 10) -> float:
    if codebook_size <= 0:
        raise ConfigError("codebook size must be positive")
    used = sum(1 for c in counter.values() if c >= min_count)
    return used / codebook_size
