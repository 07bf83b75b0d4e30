"""Synthetic tonal-syllable corpus.

Each utterance is a run of (onset consonant +) vowel syllables rendered as
frame features: a fixed template per base phone plus Gaussian noise, with the
last two feature dimensions carrying normalized F0 and its per-frame delta on
vowel frames. Tone contours are chosen so pooled pitch values of tones 1/4
and 2/3 overlap while the contour shapes stay distinct.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from toneunit.ctc import BLANK, PhoneAlphabet
from toneunit.errors import ConfigError, CorpusFormatError, RangeError, UndefinedMetricError
from toneunit.numcore import make_rng

TONES = (1, 2, 3, 4)
SPLITS = ("train", "dev", "test")

# (relative position, Hz) knots of each piecewise-linear contour
DEFAULT_CONTOURS = {
    1: ((0.0, 220.0), (1.0, 220.0)),
    2: ((0.0, 150.0), (1.0, 215.0)),
    3: ((0.0, 165.0), (0.6, 120.0), (1.0, 170.0)),
    4: ((0.0, 250.0), (1.0, 155.0)),
}

PITCH_RANGE = (80.0, 320.0)
TEMPLATE_SEED = 20240101

MAGIC = b"TULB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TonalPhone:
    base: str
    tone: int = 0

    def __post_init__(self):
        if self.tone not in (0,) + TONES:
            raise RangeError(f"tone must be 0..4, got {self.tone}")

    @property
    def label(self) -> str:
        return self.base if self.tone == 0 else f"{self.base}{self.tone}"


@dataclass(frozen=True)
class Syllable:
    onset: TonalPhone | None
    nucleus: TonalPhone
    onset_frames: int
    nucleus_frames: int

    def __post_init__(self):
        if self.nucleus.tone == 0:
            raise RangeError("a vowel nucleus must carry tone 1..4")
        if self.onset is not None and self.onset.tone != 0:
            raise RangeError("consonant onsets are toneless")
        if self.nucleus_frames < 4:
            raise ConfigError(f"nucleus needs >= 4 frames, got {self.nucleus_frames}")
        if self.onset is not None and self.onset_frames < 2:
            raise ConfigError(f"onset needs >= 2 frames, got {self.onset_frames}")


@dataclass
class CorpusConfig:
    vowels: tuple[str, ...] = ("a", "i", "o")
    consonants: tuple[str, ...] = ("b", "d", "g")
    feature_width: int = 16
    noise: float = 0.1
    speaker_scale: tuple[float, float] = (0.9, 1.1)
    syllables: tuple[int, int] = (5, 9)
    onset_prob: float = 0.75
    onset_frames: tuple[int, int] = (4, 8)
    nucleus_frames: tuple[int, int] = (12, 20)
    silence_frames: tuple[int, int] = (2, 4)
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 42
    f0_center: float = 185.0
    f0_scale: float = 40.0
    delta_scale: float = 10.0
    min_pair_count: int = 20
    contours: dict = field(default_factory=lambda: dict(DEFAULT_CONTOURS))

    def __post_init__(self):
        self.vowels = tuple(self.vowels)
        self.consonants = tuple(self.consonants)
        if self.noise < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise}")
        n_base = len(self.vowels) + len(self.consonants)
        if self.feature_width - 2 < n_base:
            raise ConfigError(f"feature width {self.feature_width} leaves too few template dims for {n_base} phones")
        if len(set(self.vowels) | set(self.consonants)) != n_base:
            raise ConfigError("vowel and consonant inventories must be disjoint and unique")
        if self.nucleus_frames[0] < 4 or self.onset_frames[0] < 2:
            raise ConfigError("nucleus segments need >= 4 frames and onsets >= 2")
        for lo, hi in (self.syllables, self.onset_frames, self.nucleus_frames, self.silence_frames):
            if lo > hi or lo < 0:
                raise ConfigError(f"bad range ({lo}, {hi})")
        if self.syllables[0] < 1:
            raise ConfigError("utterances need at least one syllable")
        if not 0 < self.speaker_scale[0] <= self.speaker_scale[1]:
            raise ConfigError(f"bad speaker scale range {self.speaker_scale}")
        if set(self.contours) != set(TONES):
            raise ConfigError("contours must be given for tones 1..4")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]


def tonal_alphabet(config: CorpusConfig | None = None) -> PhoneAlphabet:
    config = config or CorpusConfig()
    labels = list(config.consonants) + [f"{v}{t}" for v in config.vowels for t in TONES]
    return PhoneAlphabet(tuple(labels))


def toneless_alphabet(config: CorpusConfig | None = None) -> PhoneAlphabet:
    config = config or CorpusConfig()
    return PhoneAlphabet(tuple(config.consonants) + tuple(config.vowels))


def split_label(label: str) -> tuple[str, int]:
    """'a3' -> ('a', 3); 'b' -> ('b', 0)."""
    if label and label[-1].isdigit():
        return label[:-1], int(label[-1])
    return label, 0


def strip_tones(target: Sequence[int], src: PhoneAlphabet, dst: PhoneAlphabet) -> list[int]:
    return [dst.index(split_label(src.labels[i])[0]) for i in target]


@dataclass
class Utterance:
    uid: str
    features: np.ndarray  # [T, F] float32
    target: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]  # (label index, frames); label 0 is silence
    f0: np.ndarray  # [T] float32, 0 outside vowels
    speaker_scale: float

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def frame_labels(self) -> np.ndarray:
        labels = [l for l, _ in self.segments]
        durs = [d for _, d in self.segments]
        return np.repeat(np.asarray(labels, dtype=np.int64), durs)

    def syllables(self, alphabet: PhoneAlphabet) -> list[Syllable]:
        out = []
        onset = None
        for label, dur in self.segments:
            if label == BLANK:
                continue
            base, tone = split_label(alphabet.labels[label])
            if tone == 0:
                onset = (TonalPhone(base), dur)
            else:
                out.append(Syllable(onset[0] if onset else None, TonalPhone(base, tone),
                                    onset[1] if onset else 0, dur))
                onset = None
        return out

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.uid == other.uid and self.target == other.target and self.segments == other.segments
                and self.speaker_scale == other.speaker_scale
                and np.array_equal(self.features, other.features) and np.array_equal(self.f0, other.f0))


@dataclass
class Corpus:
    config: CorpusConfig
    alphabet: PhoneAlphabet
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# acoustics


def f0_contour(tone: int, n_frames: int, speaker_scale: float = 1.0, contours: dict | None = None) -> np.ndarray:
    if tone not in TONES:
        raise RangeError(f"tone must be one of {TONES}, got {tone}")
    if n_frames < 1:
        raise ConfigError("a contour needs at least one frame")
    knots = (contours or DEFAULT_CONTOURS)[tone]
    xs = [k[0] for k in knots]
    ys = [k[1] for k in knots]
    pos = np.linspace(0.0, 1.0, n_frames)
    return np.interp(pos, xs, ys) * speaker_scale


def phone_templates(config: CorpusConfig) -> dict[str, np.ndarray]:
    """Orthonormal template per base phone, in the first F-2 feature dims."""
    bases = list(config.consonants) + list(config.vowels)
    gauss = make_rng(TEMPLATE_SEED).standard_normal((config.feature_width - 2, len(bases)))
    q, _ = np.linalg.qr(gauss)
    return {b: q[:, i].copy() for i, b in enumerate(bases)}


def _segments_for(syllables: Sequence[Syllable], lead: int, trail: int,
                  alphabet: PhoneAlphabet) -> list[tuple[int, int]]:
    segs = []
    if lead:
        segs.append((BLANK, lead))
    for s in syllables:
        if s.onset is not None:
            segs.append((alphabet.index(s.onset.label), s.onset_frames))
        segs.append((alphabet.index(s.nucleus.label), s.nucleus_frames))
    if trail:
        segs.append((BLANK, trail))
    return segs


def synthesize_features(syllables: Sequence[Syllable], config: CorpusConfig, rng: np.random.Generator,
                        speaker_scale: float = 1.0, lead: int = 0, trail: int = 0):
    """Render syllables to ``(features [T, F], f0 [T])``.

    ``f0`` is the noiseless per-frame pitch (0 on consonant and silence frames).
    """
    templates = phone_templates(config)
    F = config.feature_width
    rows = []
    f0_rows = []

    def silence(n):
        rows.append(np.zeros((n, F)))
        f0_rows.append(np.zeros(n))

    if lead:
        silence(lead)
    for s in syllables:
        if s.onset is not None:
            block = np.zeros((s.onset_frames, F))
            block[:, :F - 2] = templates[s.onset.base]
            rows.append(block)
            f0_rows.append(np.zeros(s.onset_frames))
        f0 = f0_contour(s.nucleus.tone, s.nucleus_frames, speaker_scale, config.contours)
        block = np.zeros((s.nucleus_frames, F))
        block[:, :F - 2] = templates[s.nucleus.base]
        block[:, F - 2] = (f0 - config.f0_center) / config.f0_scale
        block[:, F - 1] = np.diff(f0, prepend=f0[0]) / config.delta_scale
        rows.append(block)
        f0_rows.append(f0)
    if trail:
        silence(trail)
    feats = np.concatenate(rows)
    if config.noise > 0:
        feats = feats + config.noise * rng.standard_normal(feats.shape)
    return feats, np.concatenate(f0_rows)


def _draw(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def generate_utterance(config: CorpusConfig, split_index: int, index: int, alphabet: PhoneAlphabet) -> Utterance:
    rng = make_rng(config.seed, split_index, index)
    syllables = []
    for _ in range(_draw(rng, config.syllables)):
        onset = None
        onset_frames = 0
        if config.consonants and rng.random() < config.onset_prob:
            onset = TonalPhone(config.consonants[int(rng.integers(len(config.consonants)))])
            onset_frames = _draw(rng, config.onset_frames)
        vowel = config.vowels[int(rng.integers(len(config.vowels)))]
        tone = int(rng.integers(1, 5))
        syllables.append(Syllable(onset, TonalPhone(vowel, tone), onset_frames, _draw(rng, config.nucleus_frames)))
    lead = _draw(rng, config.silence_frames)
    trail = _draw(rng, config.silence_frames)
    scale = float(np.float32(rng.uniform(*config.speaker_scale)))
    feats, f0 = synthesize_features(syllables, config, rng, scale, lead, trail)
    segs = _segments_for(syllables, lead, trail, alphabet)
    target = tuple(l for l, _ in segs if l != BLANK)
    return Utterance(
        uid=f"{SPLITS[split_index]}-{index:05d}",
        features=feats.astype(np.float32),
        target=target,
        segments=tuple(segs),
        f0=f0.astype(np.float32),
        speaker_scale=scale,
    )


def pair_counts(utterances: Iterable[Utterance], alphabet: PhoneAlphabet) -> Counter:
    """Occurrences of each (vowel, tone) pair in the targets."""
    counts = Counter()
    for u in utterances:
        for label in u.target:
            base, tone = split_label(alphabet.labels[label])
            if tone:
                counts[(base, tone)] += 1
    return counts


def check_coverage(utterances: Sequence[Utterance], config: CorpusConfig, alphabet: PhoneAlphabet, split: str) -> Counter:
    counts = pair_counts(utterances, alphabet)
    for v in config.vowels:
        for t in TONES:
            if counts[(v, t)] < config.min_pair_count:
                raise ConfigError(
                    f"{split} split has only {counts[(v, t)]} occurrences of ({v}, tone {t}); "
                    f"need {config.min_pair_count}"
                )
    return counts


def generate_corpus(config: CorpusConfig | None = None) -> Corpus:
    config = config or CorpusConfig()
    alphabet = tonal_alphabet(config)
    n_pairs = len(config.vowels) * len(TONES)
    splits = {}
    for si, name in enumerate(SPLITS):
        n = config.split_size(name)
        if n * config.syllables[1] < config.min_pair_count * n_pairs:
            raise ConfigError(
                f"{name} split of {n} utterances (<= {config.syllables[1]} syllables each) cannot reach "
                f"{config.min_pair_count} occurrences of each of {n_pairs} (vowel, tone) pairs, "
                f"e.g. ({config.vowels[0]}, tone 1)"
            )
        utts = [generate_utterance(config, si, i, alphabet) for i in range(n)]
        check_coverage(utts, config, alphabet, name)
        splits[name] = utts
    return Corpus(config, alphabet, splits["train"], splits["dev"], splits["test"])


# ---------------------------------------------------------------------------
# file format
#
# header : magic "TULB" | u16 version | u16 F | u32 n_utterances | u16 n_labels
#          then per label: u8 byte length | utf-8 bytes
# record : u16 id length | utf-8 id | u32 T | f32 speaker scale
#          | f32[T*F] features (row-major) | u16 n_target | u16[n_target]
#          | u16 n_segments | (u16 label, u16 frames)[n_segments] | f32[T] F0
# All little-endian.


def write_corpus(path, utterances: Sequence[Utterance], alphabet: PhoneAlphabet, feature_width: int) -> None:
    buf = bytearray()
    buf += MAGIC + struct.pack("<HHIH", FORMAT_VERSION, feature_width, len(utterances), len(alphabet))
    for label in alphabet.labels:
        raw = label.encode("utf-8")
        buf += struct.pack("<B", len(raw)) + raw
    for u in utterances:
        if u.features.shape[1] != feature_width:
            raise ConfigError(f"utterance {u.uid} has width {u.features.shape[1]}, expected {feature_width}")
        raw = u.uid.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<If", u.n_frames, u.speaker_scale)
        buf += np.ascontiguousarray(u.features, dtype="<f4").tobytes()
        buf += struct.pack("<H", len(u.target)) + np.asarray(u.target, dtype="<u2").tobytes()
        buf += struct.pack("<H", len(u.segments)) + np.asarray(u.segments, dtype="<u2").reshape(-1).tobytes()
        buf += np.ascontiguousarray(u.f0, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorpusFormatError(f"corpus file truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype, count=count)


def read_corpus(path) -> tuple[list[Utterance], PhoneAlphabet, int]:
    """Return ``(utterances, alphabet, feature_width)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CorpusFormatError(f"{path} is not a corpus file (bad magic)")
    version, F, n_utts, n_labels = r.unpack("<HHIH")
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported corpus format version {version}")
    labels = []
    for _ in range(n_labels):
        (n,) = r.unpack("<B")
        labels.append(r.take(n).decode("utf-8"))
    alphabet = PhoneAlphabet(tuple(labels))
    utts = []
    for _ in range(n_utts):
        (n,) = r.unpack("<H")
        uid = r.take(n).decode("utf-8")
        T, scale = r.unpack("<If")
        feats = r.array("<f4", T * F).reshape(T, F).astype(np.float32)
        (nt,) = r.unpack("<H")
        target = tuple(int(x) for x in r.array("<u2", nt))
        (ns,) = r.unpack("<H")
        segs = tuple((int(a), int(b)) for a, b in r.array("<u2", 2 * ns).reshape(ns, 2))
        f0 = r.array("<f4", T).astype(np.float32)
        utts.append(Utterance(uid, feats, target, segs, f0, float(np.float32(scale))))
    if r.pos != len(r.data):
        raise CorpusFormatError(f"{len(r.data) - r.pos} trailing bytes after the last record")
    return utts, alphabet, F


# ---------------------------------------------------------------------------
# pitch analysis


def vowel_f0_values(utterances: Iterable[Utterance], alphabet: PhoneAlphabet, vowel: str | None, tone: int) -> np.ndarray:
    """Ground-truth F0 of every frame labelled (vowel, tone); ``vowel=None`` pools all vowels."""
    wanted = {
        i for i, l in enumerate(alphabet.labels)
        if split_label(l)[1] == tone and (vowel is None or split_label(l)[0] == vowel)
    }
    chunks = [u.f0[np.isin(u.frame_labels(), list(wanted))] for u in utterances]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def pitch_histogram(utterances: Iterable[Utterance], alphabet: PhoneAlphabet, vowel: str | None, tone: int,
                    n_bins: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """F0 counts over uniform bins spanning 80-320 Hz; returns ``(counts, edges)``."""
    values = vowel_f0_values(utterances, alphabet, vowel, tone)
    if values.size == 0:
        raise UndefinedMetricError(f"no frames for vowel {vowel!r} tone {tone}")
    counts, edges = np.histogram(np.clip(values, *PITCH_RANGE), bins=n_bins, range=PITCH_RANGE)
    return counts, edges


def histogram_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap coefficient of two histograms: sum of bin-wise minima after normalizing."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())
