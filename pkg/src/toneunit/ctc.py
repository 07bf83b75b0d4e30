"""CTC loss in the log domain, greedy decoding, and phone error rate."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from toneunit.errors import ConfigError, InfeasibleTargetError, RangeError, UndefinedMetricError

BLANK = 0
BLANK_LABEL = "<b>"
BRUTE_FORCE_LIMIT = 10**7


@dataclass(frozen=True)
class PhoneAlphabet:
    """Ordered label set; index 0 is always the CTC blank."""

    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels or labels[0] != BLANK_LABEL:
            labels = (BLANK_LABEL,) + tuple(l for l in labels if l != BLANK_LABEL)
        if len(set(labels)) != len(labels):
            raise ConfigError(f"alphabet labels must be unique: {labels}")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise RangeError(f"label {label!r} not in alphabet") from None

    def encode(self, labels: Sequence[str]) -> list[int]:
        out = [self.index(l) for l in labels]
        if BLANK in out:
            raise RangeError("the blank symbol may not appear in a target")
        return out

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in indices]


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_instance(log_probs: np.ndarray, target: Sequence[int], blank: int) -> None:
    if log_probs.ndim != 2:
        raise ConfigError(f"log_probs must be [T, S], got shape {log_probs.shape}")
    S = log_probs.shape[1]
    for label in target:
        if label == blank or not 0 <= label < S:
            raise RangeError(f"target label {label} invalid for {S} symbols with blank {blank}")
    need = min_frames(target)
    if need > log_probs.shape[0]:
        raise InfeasibleTargetError(f"target needs at least {need} frames, only {log_probs.shape[0]} available")


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    out[k:] = a[:len(a) - k]
    return out


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient with respect to ``log_probs``.

    ``log_probs`` is [T, S]. The gradient treats every entry as a free input;
    chaining through a log-softmax is the caller's job. NaN inputs give a NaN
    loss and gradient so callers can treat them as divergence.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    target = [int(t) for t in target]
    _check_instance(log_probs, target, blank)
    if np.isnan(log_probs).any():
        return float("nan"), np.full_like(log_probs, np.nan)
    T = log_probs.shape[0]

    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    n_states = len(ext)
    skip = np.zeros(n_states, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = log_probs[:, ext]  # [T, n_states]
    alpha = np.full((T, n_states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
        alpha[t] = acc + emit[t]

    beta = np.full((T, n_states), -np.inf)
    beta[T - 1, -1] = 0.0
    if n_states > 1:
        beta[T - 1, -2] = 0.0
    skip_from = np.zeros(n_states, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = np.logaddexp(nxt, _shift(nxt[::-1], 1)[::-1])
        acc = np.where(skip_from, np.logaddexp(acc, _shift(nxt[::-1], 2)[::-1]), acc)
        beta[t] = acc

    log_likelihood = np.logaddexp(alpha[T - 1, -1], alpha[T - 1, -2]) if n_states > 1 else alpha[T - 1, 0]
    if not np.isfinite(log_likelihood):
        raise InfeasibleTargetError("target has zero probability under log_probs")

    occupancy = np.exp(alpha + beta - log_likelihood)
    grad = np.zeros_like(log_probs)
    np.add.at(grad.T, ext, -occupancy.T)
    return float(-log_likelihood), grad


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def brute_force_ctc(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> float:
    """Exact CTC loss by enumerating every length-T path. Test oracle for tiny instances."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, S = log_probs.shape
    if S ** T > BRUTE_FORCE_LIMIT:
        raise ConfigError(f"refusing to enumerate {S}^{T} paths (limit {BRUTE_FORCE_LIMIT})")
    target = [int(t) for t in target]
    scores = [
        sum(log_probs[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(S), repeat=T)
        if collapse(path, blank) == target
    ]
    if not scores:
        raise InfeasibleTargetError("no path of this length collapses to the target")
    return float(-logsumexp(scores))


def ctc_greedy_decode(log_probs: np.ndarray, blank: int = BLANK) -> list[int]:
    return collapse(np.argmax(log_probs, axis=-1), blank)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def per(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edit distance over total reference length."""
    if len(refs) != len(hyps):
        raise ConfigError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise UndefinedMetricError("phone error rate is undefined for an empty reference set")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total
