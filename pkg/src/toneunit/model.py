"""Encoder -> quantizer -> CTC decoder, plus the k-means baseline quantizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from toneunit.ctc import PhoneAlphabet
from toneunit.errors import ConfigError
from toneunit.numcore import (
    Param,
    conv1d_backward,
    conv1d_forward,
    linear_backward,
    linear_forward,
    log_softmax,
    log_softmax_backward,
    make_rng,
    relu_backward,
    relu_forward,
    sample_gumbel,
)
from toneunit.quantizers import (
    FsqConfig,
    VqConfig,
    fsq_bound,
    fsq_code_index,
    fsq_quantize,
    fsq_quantize_backward,
    vq_gumbel_select,
    vq_gumbel_select_backward,
    vq_lookup,
    vq_lookup_backward,
)

KINDS = ("fsq", "vq", "kmeans")


@dataclass(frozen=True)
class EncoderConfig:
    in_width: int = 16
    hidden: int = 64
    strides: tuple[int, ...] = (2, 2)
    kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.strides or any(s < 1 for s in self.strides):
            raise ConfigError(f"encoder strides must be >= 1, got {self.strides}")

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.strides))

    def out_frames(self, n_frames: int) -> int:
        for s in self.strides:
            n_frames = -(-n_frames // s)
        return n_frames


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 4
    kernel: int = 5
    stride: int = 1
    hidden: int = 64

    def __post_init__(self):
        if self.stride != 1:
            raise ConfigError("the decoder must preserve sequence length (stride 1)")
        if self.n_layers < 1:
            raise ConfigError("the decoder needs at least one conv layer")


@dataclass
class KmeansState:
    centroids: np.ndarray
    iterations: int = 0
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_distances(x: np.ndarray, centroids: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty((x.shape[0], centroids.shape[0]))
    for i in range(0, x.shape[0], chunk):
        diff = x[i:i + chunk, None, :] - centroids[None, :, :]
        out[i:i + chunk] = np.einsum("nkh,nkh->nk", diff, diff)
    return out


def kmeans_assign(state: KmeansState, vectors: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest index."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    return np.argmin(_sq_distances(vectors, state.centroids), axis=1)


def kmeans_fit(vectors: np.ndarray, k: int, max_iters: int = 50, seed: int = 0) -> KmeansState:
    """Lloyd iterations from k-means++ seeding. Empty clusters keep their centroid."""
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if n < k:
        raise ConfigError(f"k-means needs at least k={k} vectors, got {n}")
    rng = make_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))

    history = []
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_distances(x, centroids)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
    return KmeansState(centroids, it, history[-1], history)


@dataclass
class Forward:
    units: np.ndarray | None
    log_probs: np.ndarray
    probs: np.ndarray | None = None  # VQ soft probabilities, [T', V]
    decisions: dict | None = None
    cache: dict = field(default_factory=dict, repr=False)


class ToneUnitModel:
    """Parameters and forward/backward for one encoder-quantizer-decoder stack.

    ``kind`` is fixed at construction. A k-means model trains with the
    quantizer bypassed (continuous latents go straight to the decoder); once
    :meth:`fit_kmeans` has run, its units are nearest-centroid indices and the
    decoder sees the centroid vectors.
    """

    def __init__(self, kind: str, alphabet: PhoneAlphabet, encoder: EncoderConfig | None = None,
                 decoder: DecoderConfig | None = None, fsq: FsqConfig | None = None, vq: VqConfig | None = None,
                 kmeans_k: int = 64, seed: int = 0):
        if kind not in KINDS:
            raise ConfigError(f"unknown quantizer kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.alphabet = alphabet
        self.encoder = encoder or EncoderConfig()
        self.decoder = decoder or DecoderConfig()
        self.fsq = (fsq or FsqConfig()) if kind == "fsq" else None
        self.vq = (vq or VqConfig()) if kind == "vq" else None
        self.kmeans_k = kmeans_k
        self.kmeans: KmeansState | None = None
        self.tau = self.vq.tau_start if self.vq else 1.0
        self.seed = seed
        self.params: dict[str, Param] = {}
        self._init_params(make_rng(seed, 1))

    # -- construction -----------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Param(name, value)

    def _init_params(self, rng: np.random.Generator) -> None:
        enc, dec = self.encoder, self.decoder
        width = enc.in_width
        for i, _ in enumerate(enc.strides):
            fan_in = enc.kernel * width
            self._add(f"enc.conv{i}.w", rng.standard_normal((enc.kernel, width, enc.hidden)) * np.sqrt(2.0 / fan_in))
            self._add(f"enc.conv{i}.b", np.zeros(enc.hidden))
            width = enc.hidden
        if self.kind == "fsq":
            n = self.fsq.dim
            self._add("fsq.down.w", rng.standard_normal((width, n)) / np.sqrt(width))
            self._add("fsq.down.b", np.zeros(n))
            self._add("fsq.up.w", rng.standard_normal((n, self.fsq.up_width)) / np.sqrt(n))
            self._add("fsq.up.b", np.zeros(self.fsq.up_width))
            width = self.fsq.up_width
        elif self.kind == "vq":
            V, d = self.vq.codebook_size, self.vq.code_dim
            self._add("vq.logits.w", rng.standard_normal((width, V)) / np.sqrt(width))
            self._add("vq.logits.b", np.zeros(V))
            self._add("vq.codebook", rng.standard_normal((V, d)))
            width = d
        for i in range(dec.n_layers):
            fan_in = dec.kernel * width
            self._add(f"dec.conv{i}.w", rng.standard_normal((dec.kernel, width, dec.hidden)) * np.sqrt(2.0 / fan_in))
            self._add(f"dec.conv{i}.b", np.zeros(dec.hidden))
            width = dec.hidden
        S = len(self.alphabet)
        self._add("dec.out.w", rng.standard_normal((width, S)) / np.sqrt(width))
        self._add("dec.out.b", np.zeros(S))

    @property
    def codebook_size(self) -> int:
        if self.kind == "fsq":
            return self.fsq.codebook_size
        if self.kind == "vq":
            return self.vq.codebook_size
        return self.kmeans.k if self.kmeans is not None else self.kmeans_k

    @property
    def downsampling(self) -> int:
        return self.encoder.downsampling

    def param_list(self) -> list[Param]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def v(self, name: str) -> np.ndarray:
        return self.params[name].value

    # -- encoder ----------------------------------------------------------

    def encoder_forward(self, frames: np.ndarray):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.encoder.in_width:
            raise ConfigError(f"expected [T, {self.encoder.in_width}] frames, got shape {frames.shape}")
        h = frames
        caches = []
        n = len(self.encoder.strides)
        for i, s in enumerate(self.encoder.strides):
            h, c = conv1d_forward(h, self.v(f"enc.conv{i}.w"), self.v(f"enc.conv{i}.b"), stride=s, padding="same")
            mask = None
            if i < n - 1:
                h, mask = relu_forward(h)
            caches.append((c, mask))
        return h, caches

    def encoder_backward(self, dz: np.ndarray, caches) -> np.ndarray:
        for i in range(len(caches) - 1, -1, -1):
            c, mask = caches[i]
            if mask is not None:
                dz = relu_backward(dz, mask)
            dz, dw, db = conv1d_backward(dz, c)
            self.params[f"enc.conv{i}.w"].grad += dw
            self.params[f"enc.conv{i}.b"].grad += db
        return dz

    # -- decoder ----------------------------------------------------------

    def decoder_forward(self, q: np.ndarray):
        h = q
        caches = []
        for i in range(self.decoder.n_layers):
            h, c = conv1d_forward(h, self.v(f"dec.conv{i}.w"), self.v(f"dec.conv{i}.b"), stride=1, padding="same")
            h, mask = relu_forward(h)
            caches.append((c, mask))
        logits, lc = linear_forward(h, self.v("dec.out.w"), self.v("dec.out.b"))
        logp = log_softmax(logits)
        return logp, (caches, lc, logp)

    def decoder_backward(self, dlogp: np.ndarray, cache) -> np.ndarray:
        caches, lc, logp = cache
        dlogits = log_softmax_backward(dlogp, logp)
        dh, dw, db = linear_backward(dlogits, lc)
        self.params["dec.out.w"].grad += dw
        self.params["dec.out.b"].grad += db
        for i in range(len(caches) - 1, -1, -1):
            c, mask = caches[i]
            dh = relu_backward(dh, mask)
            dh, dw, db = conv1d_backward(dh, c)
            self.params[f"dec.conv{i}.w"].grad += dw
            self.params[f"dec.conv{i}.b"].grad += db
        return dh

    # -- full model -------------------------------------------------------

    def forward(self, frames: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None,
                frozen: dict | None = None) -> Forward:
        """Run the stack on one utterance.

        ``frozen`` takes the ``decisions`` of an earlier pass and replays its
        discrete choices (rounding residuals, selected codes, Gumbel noise) as
        constants. The result is the smooth surrogate whose exact gradient is
        the straight-through gradient; it exists for finite-difference tests.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        z, enc_cache = self.encoder_forward(frames)
        cache: dict[str, Any] = {"enc": enc_cache}
        probs = None
        decisions: dict[str, Any] = {}

        if self.kind == "fsq":
            levels = self.fsq.levels
            z_low, dc = linear_forward(z, self.v("fsq.down.w"), self.v("fsq.down.b"))
            digits, quantized = fsq_quantize(z_low, levels)
            if frozen is not None:
                quantized = fsq_bound(z_low, levels) + frozen["residual"]
                digits = frozen["digits"]
            else:
                decisions["residual"] = quantized - fsq_bound(z_low, levels)
                decisions["digits"] = digits
            units = fsq_code_index(digits, levels)
            q, uc = linear_forward(quantized, self.v("fsq.up.w"), self.v("fsq.up.b"))
            cache.update(down=dc, z_low=z_low, up=uc)
        elif self.kind == "vq":
            logits, lc = linear_forward(z, self.v("vq.logits.w"), self.v("vq.logits.b"))
            training = mode == "train"
            if frozen is not None:
                noise = frozen["noise"]
            elif training:
                if rng is None:
                    raise ConfigError("training a VQ model needs an rng for Gumbel noise")
                noise = sample_gumbel(rng, logits.shape)
            else:
                noise = None
            units, probs = vq_gumbel_select(logits, self.tau, training=noise is not None, noise=noise)
            ref = None
            if frozen is not None:
                units = frozen["units"]
                ref = frozen["probs"]
            else:
                decisions.update(noise=noise, units=units, probs=probs.copy())
            q, qc = vq_lookup(units, probs, self.v("vq.codebook"), ref_probs=ref)
            cache.update(logits=lc, lookup=qc, probs=probs)
        else:
            if self.kmeans is None:
                units = None
                q = z
            else:
                units = kmeans_assign(self.kmeans, z)
                q = self.kmeans.centroids[units]

        log_probs, dec_cache = self.decoder_forward(q)
        cache["dec"] = dec_cache
        return Forward(units, log_probs, probs, decisions or None, cache)

    def backward(self, fwd: Forward, dlog_probs: np.ndarray, dprobs: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients. ``dprobs`` is an extra gradient on the VQ soft probabilities."""
        c = fwd.cache
        dq = self.decoder_backward(dlog_probs, c["dec"])
        if self.kind == "fsq":
            dquant, dw, db = linear_backward(dq, c["up"])
            self.params["fsq.up.w"].grad += dw
            self.params["fsq.up.b"].grad += db
            dz_low = fsq_quantize_backward(dquant, c["z_low"], self.fsq.levels)
            dz, dw, db = linear_backward(dz_low, c["down"])
            self.params["fsq.down.w"].grad += dw
            self.params["fsq.down.b"].grad += db
        elif self.kind == "vq":
            dp, dcode = vq_lookup_backward(dq, c["lookup"])
            self.params["vq.codebook"].grad += dcode
            if dprobs is not None:
                dp = dp + dprobs
            dlogits = vq_gumbel_select_backward(dp, c["probs"], self.tau)
            dz, dw, db = linear_backward(dlogits, c["logits"])
            self.params["vq.logits.w"].grad += dw
            self.params["vq.logits.b"].grad += db
        else:
            if self.kmeans is not None:
                raise ConfigError("a fitted k-means model is frozen; it has no quantizer gradient")
            dz = dq
        self.encoder_backward(dz, c["enc"])

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """Continuous encoder latents [T', H]."""
        return self.encoder_forward(frames)[0]

    def fit_kmeans(self, latents: np.ndarray, max_iters: int = 50, seed: int = 0) -> KmeansState:
        if self.kind != "kmeans":
            raise ConfigError(f"k-means fitting applies to kmeans models, not {self.kind}")
        self.kmeans = kmeans_fit(latents, self.kmeans_k, max_iters, seed)
        return self.kmeans

    def copy(self) -> "ToneUnitModel":
        other = object.__new__(ToneUnitModel)
        other.__dict__.update(self.__dict__)
        other.params = {n: Param(n, p.value.copy()) for n, p in self.params.items()}
        if self.kmeans is not None:
            k = self.kmeans
            other.kmeans = KmeansState(k.centroids.copy(), k.iterations, k.inertia, list(k.inertia_history))
        return other


def encoder_forward(model: ToneUnitModel, frames: np.ndarray) -> np.ndarray:
    return model.encode(frames)


def model_forward(model: ToneUnitModel, frames: np.ndarray, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray | None, np.ndarray]:
    fwd = model.forward(frames, mode, rng)
    return fwd.units, fwd.log_probs
