"""Fine-tuning, unit extraction, analysis tables, evaluation reports and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from toneunit.corpus import TONES, Corpus, Utterance, split_label, strip_tones
from toneunit.ctc import PhoneAlphabet, ctc_greedy_decode, ctc_loss, per
from toneunit.errors import CheckpointError, ConfigError, DivergenceError, UndefinedMetricError
from toneunit.model import DecoderConfig, EncoderConfig, KmeansState, ToneUnitModel
from toneunit.numcore import AdamWState, adamw_step, make_rng
from toneunit.quantizers import FsqConfig, UsageCounter, VqConfig, codebook_usage, diversity_loss_and_grad

log = logging.getLogger(__name__)

ABLATION_FRACTIONS = (0.01, 0.1, 0.33, 1.0)
USAGE_MIN_COUNT = 10


@dataclass
class TrainConfig:
    quantizer: str = "fsq"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    alpha: float = 0.1
    label_fraction: float = 1.0
    seed: int = 42
    selection: str = "dev_per"
    kmeans_iters: int = 50

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"label fraction must lie in (0, 1], got {self.label_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.selection not in ("dev_per", "last"):
            raise ConfigError(f"unknown checkpoint selection rule {self.selection!r}")
        if self.alpha < 0:
            raise ConfigError("diversity weight must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ctc: float
    diversity: float
    dev_per: float
    dev_usage: float
    tau: float
    steps: int


@dataclass
class TrainResult:
    model: ToneUnitModel
    history: list[EpochRecord]
    best_epoch: int
    n_train: int


def subsample_labels(utterances: Sequence[Utterance], fraction: float, seed: int) -> list[Utterance]:
    """Deterministic label-budget subset, in corpus order. Fraction 1.0 returns everything."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"label fraction must lie in (0, 1], got {fraction}")
    n = len(utterances)
    if fraction == 1.0:
        return list(utterances)
    k = max(1, int(round(fraction * n)))
    keep = np.sort(make_rng(seed, 7).permutation(n)[:k])
    return [utterances[i] for i in keep]


def model_targets(model: ToneUnitModel, corpus_alphabet: PhoneAlphabet, utt: Utterance) -> list[int]:
    """The utterance target in the model's own alphabet (tone-blind models drop tone marks)."""
    if model.alphabet == corpus_alphabet:
        return list(utt.target)
    return strip_tones(utt.target, corpus_alphabet, model.alphabet)


def _decode_per(model: ToneUnitModel, utterances: Sequence[Utterance], corpus_alphabet: PhoneAlphabet):
    refs, hyps = [], []
    counter = UsageCounter()
    for u in utterances:
        fwd = model.forward(u.features, "eval")
        refs.append(model_targets(model, corpus_alphabet, u))
        hyps.append(ctc_greedy_decode(fwd.log_probs))
        if fwd.units is not None:
            counter.add(fwd.units)
    return per(refs, hyps), counter


def train(model: ToneUnitModel, corpus: Corpus, config: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fine-tune ``model`` on ``corpus.train`` and keep the lowest-dev-PER epoch.

    The objective is mean CTC over the batch, plus ``alpha`` times the
    diversity loss for VQ models. k-means models train with the quantizer
    bypassed and are clustered afterwards.
    """
    if config.quantizer != model.kind:
        raise ConfigError(f"config asks for {config.quantizer} but the model is {model.kind}")
    if model.encoder.in_width != corpus.config.feature_width:
        raise ConfigError(f"model expects {model.encoder.in_width}-wide frames, corpus has {corpus.config.feature_width}")
    train_set = subsample_labels(corpus.train, config.label_fraction, config.seed)
    targets = [model_targets(model, corpus.alphabet, u) for u in train_set]
    order_rng = make_rng(config.seed, 2)
    noise_rng = make_rng(config.seed, 3)
    opt = AdamWState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                     weight_decay=config.weight_decay)
    use_div = model.kind == "vq" and config.alpha > 0
    if model.kind == "vq":
        model.tau = model.vq.temperature(0)

    history: list[EpochRecord] = []
    best: ToneUnitModel | None = None
    best_per = np.inf
    best_epoch = 0
    last_good = model.copy()
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train_set))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            B = len(batch)
            model.zero_grad()
            fwds, grads = [], []
            ctc_total = 0.0
            for i in batch:
                fwd = model.forward(train_set[i].features, "train", noise_rng)
                loss, g = ctc_loss(fwd.log_probs, targets[i])
                ctc_total += loss
                fwds.append(fwd)
                grads.append(g / B)
            ctc_mean = ctc_total / B
            div = 0.0
            dprobs = [None] * B
            if use_div:
                probs = np.concatenate([f.probs for f in fwds])
                div, dp = diversity_loss_and_grad(probs)
                dp *= config.alpha
                offsets = np.cumsum([0] + [len(f.probs) for f in fwds])
                dprobs = [dp[offsets[j]:offsets[j + 1]] for j in range(B)]
            objective = ctc_mean + config.alpha * div if use_div else ctc_mean
            if not np.isfinite(objective):
                raise DivergenceError(
                    f"non-finite objective at epoch {epoch}, step {opt.t + 1} (ctc={ctc_mean}, diversity={div})",
                    last_good=best or last_good, history=history)
            for fwd, g, dp in zip(fwds, grads, dprobs):
                model.backward(fwd, g, dp)
            adamw_step(model.param_list(), opt)
            if model.kind == "vq":
                model.tau = model.vq.temperature(opt.t)
            sums += (objective, ctc_mean, div)
            n_batches += 1

        dev_per, counter = _decode_per(model, corpus.dev, corpus.alphabet)
        usage = codebook_usage(counter, model.codebook_size, USAGE_MIN_COUNT) if counter else 0.0
        rec = EpochRecord(epoch, *(sums / n_batches).tolist(), dev_per=dev_per, dev_usage=usage,
                          tau=model.tau, steps=opt.t)
        history.append(rec)
        log.info("epoch %d loss %.4f dev_per %.4f usage %.3f", epoch, rec.loss, dev_per, usage)
        if on_epoch:
            on_epoch(rec)
        last_good = model.copy()
        if config.selection == "last" or dev_per < best_per:
            best, best_per, best_epoch = last_good, dev_per, epoch

    if best.kind == "kmeans":
        latents = np.concatenate([best.encode(u.features) for u in train_set])
        best.fit_kmeans(latents, config.kmeans_iters, config.seed)
    return TrainResult(best, history, best_epoch, len(train_set))


# ---------------------------------------------------------------------------
# unit streams


@dataclass
class UnitStream:
    uid: str
    units: np.ndarray  # [T'] unit index per frame
    decoded: np.ndarray  # [T'] argmax label per frame, model alphabet
    truth: np.ndarray  # [T'] ground-truth label per frame, corpus alphabet


def frame_truth(utt: Utterance, downsampling: int, n_out: int) -> np.ndarray:
    """Ground-truth label of each encoder frame, read at the centre of the raw frames it covers."""
    labels = utt.frame_labels()
    centres = np.minimum(np.arange(n_out) * downsampling + downsampling // 2, len(labels) - 1)
    return labels[centres]


def extract_units(model: ToneUnitModel, utterances: Sequence[Utterance]) -> list[UnitStream]:
    if model.kind == "kmeans" and model.kmeans is None:
        raise ConfigError("k-means model has not been fitted; no units to extract")
    streams = []
    for u in utterances:
        fwd = model.forward(u.features, "eval")
        n = len(fwd.units)
        streams.append(UnitStream(u.uid, np.asarray(fwd.units, dtype=np.int64),
                                  np.argmax(fwd.log_probs, axis=1), frame_truth(u, model.downsampling, n)))
    return streams


def dedup(units: Sequence[int]) -> list[int]:
    out: list[int] = []
    for u in units:
        u = int(u)
        if not out or out[-1] != u:
            out.append(u)
    return out


def _vowel_tone_pairs(alphabet: PhoneAlphabet) -> dict[int, tuple[str, int]]:
    pairs = {}
    for i, label in enumerate(alphabet.labels):
        base, tone = split_label(label)
        if tone:
            pairs[i] = (base, tone)
    return pairs


def unit_tone_table(streams: Sequence[UnitStream], alphabet: PhoneAlphabet,
                    top_k: int = 3) -> dict[tuple[str, int], list[int]]:
    """Most frequent units on frames of each (vowel, tone); ties go to the lower unit index."""
    if not streams:
        raise UndefinedMetricError("no unit streams to tabulate")
    pairs = _vowel_tone_pairs(alphabet)
    counts: dict[tuple[str, int], Counter] = defaultdict(Counter)
    for s in streams:
        for unit, label in zip(s.units, s.truth):
            pair = pairs.get(int(label))
            if pair:
                counts[pair][int(unit)] += 1
    table = {}
    for pair in sorted(set(pairs.values())):
        c = counts.get(pair)
        if not c:
            warnings.warn(f"no frames for vowel {pair[0]!r} tone {pair[1]}; omitted from the table")
            continue
        ranked = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))
        table[pair] = [u for u, _ in ranked[:top_k]]
    return table


@dataclass
class ToneProbe:
    accuracy: float
    confusion: np.ndarray  # [4, 5]: true tone 1..4 x predicted tone 1..4, unknown
    n_frames: int


def _tone_frames(streams: Sequence[UnitStream], alphabet: PhoneAlphabet):
    pairs = _vowel_tone_pairs(alphabet)
    for s in streams:
        for unit, label in zip(s.units, s.truth):
            pair = pairs.get(int(label))
            if pair:
                yield int(unit), pair[1]


def tone_probe(fit_streams: Sequence[UnitStream], eval_streams: Sequence[UnitStream],
               alphabet: PhoneAlphabet) -> ToneProbe:
    """Majority-vote tone per unit (fit on ``fit_streams``), scored on vowel frames of ``eval_streams``."""
    votes: dict[int, Counter] = defaultdict(Counter)
    for unit, tone in _tone_frames(fit_streams, alphabet):
        votes[unit][tone] += 1
    assign = {u: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for u, c in votes.items()}
    confusion = np.zeros((len(TONES), len(TONES) + 1), dtype=np.int64)
    for unit, tone in _tone_frames(eval_streams, alphabet):
        pred = assign.get(unit)
        confusion[tone - 1, len(TONES) if pred is None else pred - 1] += 1
    n = int(confusion.sum())
    if n == 0:
        raise UndefinedMetricError("no vowel frames to score the tone probe on")
    return ToneProbe(float(np.trace(confusion[:, :len(TONES)]) / n), confusion, n)


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    per: float
    codebook_usage: float
    codebook_size: int
    tone_accuracy: float
    confusion: list[list[int]]
    unit_table: dict[tuple[str, int], list[int]]
    meta: dict[str, str] = field(default_factory=dict)

    def to_kv(self) -> str:
        lines = [f"per={self.per!r}", f"codebook_usage={self.codebook_usage!r}",
                 f"codebook_size={self.codebook_size}", f"tone_accuracy={self.tone_accuracy!r}"]
        for i, row in enumerate(self.confusion):
            lines.append(f"confusion.tone{i + 1}={','.join(str(x) for x in row)}")
        for (v, t), units in sorted(self.unit_table.items()):
            lines.append(f"units.{v}.{t}={','.join(str(u) for u in units)}")
        for k, v in sorted(self.meta.items()):
            lines.append(f"meta.{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "EvalReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k] = v
        confusion = [[int(x) for x in kv[k].split(",")] for k in sorted(kv) if k.startswith("confusion.")]
        table = {}
        for k, v in kv.items():
            if k.startswith("units."):
                _, vowel, tone = k.split(".")
                table[(vowel, int(tone))] = [int(u) for u in v.split(",")] if v else []
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        return cls(float(kv["per"]), float(kv["codebook_usage"]), int(kv["codebook_size"]),
                   float(kv["tone_accuracy"]), confusion, table, meta)

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("Evaluation report\n")
        for k, v in sorted(self.meta.items()):
            out.write(f"  {k}: {v}\n")
        out.write(f"\nphone error rate        {self.per:.4f}\n")
        out.write(f"codebook usage (>= {USAGE_MIN_COUNT})  {self.codebook_usage:.4f} of {self.codebook_size} codes\n")
        out.write(f"tone accuracy (probe)   {self.tone_accuracy:.4f}\n\n")
        out.write(format_unit_table(self.unit_table))
        out.write("\ntone confusion (rows: true tone, cols: predicted 1-4, unknown)\n")
        for i, row in enumerate(self.confusion):
            out.write(f"  tone {i + 1}: " + " ".join(f"{x:6d}" for x in row) + "\n")
        return out.getvalue()


def format_unit_table(table: dict[tuple[str, int], list[int]]) -> str:
    lines = ["Phoneme  Tone  Top-3 speech units", "-------  ----  ------------------"]
    for (v, t), units in sorted(table.items()):
        lines.append(f"/{v}/{'':<4} {t:<4}  {'; '.join(str(u) for u in units)}")
    return "\n".join(lines) + "\n"


def evaluate(model: ToneUnitModel, corpus: Corpus, split: str = "test", fit_split: str = "train") -> EvalReport:
    utts = corpus.split(split)
    streams = extract_units(model, utts)
    refs = [model_targets(model, corpus.alphabet, u) for u in utts]
    hyps = []
    for u in utts:
        hyps.append(ctc_greedy_decode(model.forward(u.features, "eval").log_probs))
    counter = UsageCounter()
    for s in streams:
        counter.add(s.units)
    probe = tone_probe(extract_units(model, corpus.split(fit_split)), streams, corpus.alphabet)
    meta = {"kind": model.kind, "split": split, "seed": str(model.seed), "config_hash": config_hash(model)}
    return EvalReport(
        per=per(refs, hyps),
        codebook_usage=codebook_usage(counter, model.codebook_size, USAGE_MIN_COUNT),
        codebook_size=model.codebook_size,
        tone_accuracy=probe.accuracy,
        confusion=probe.confusion.tolist(),
        unit_table=unit_tone_table(streams, corpus.alphabet),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "TUCK" | u16 version | u32 n | n bytes of UTF-8 JSON config block
# | u32 array count | per array: u16 name length, name, u8 ndim, u32[ndim] shape,
#   f64 little-endian values (row-major)
# | 32-byte SHA-256 of everything above


CKPT_MAGIC = b"TUCK"
CKPT_VERSION = 1


def model_config(model: ToneUnitModel) -> dict:
    cfg = {
        "kind": model.kind,
        "alphabet": list(model.alphabet.labels),
        "encoder": asdict(model.encoder),
        "decoder": asdict(model.decoder),
        "kmeans_k": model.kmeans_k,
        "tau": model.tau,
        "seed": model.seed,
        "blank": 0,
    }
    if model.fsq:
        cfg["fsq"] = asdict(model.fsq)
    if model.vq:
        cfg["vq"] = asdict(model.vq)
    if model.kmeans:
        cfg["kmeans"] = {"iterations": model.kmeans.iterations, "inertia": model.kmeans.inertia,
                         "inertia_history": model.kmeans.inertia_history}
    return cfg


def config_hash(model: ToneUnitModel) -> str:
    blob = json.dumps(model_config(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def checkpoint_bytes(model: ToneUnitModel) -> bytes:
    arrays = {n: p.value for n, p in model.params.items()}
    if model.kmeans is not None:
        arrays["kmeans.centroids"] = model.kmeans.centroids
    blob = json.dumps(model_config(model), sort_keys=True).encode("utf-8")
    buf = bytearray(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += hashlib.sha256(buf).digest()
    return bytes(buf)


def save_checkpoint(model: ToneUnitModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _model_from_config(cfg: dict) -> ToneUnitModel:
    enc = cfg["encoder"]
    enc["strides"] = tuple(enc["strides"])
    fsq = FsqConfig(**{**cfg["fsq"], "levels": tuple(cfg["fsq"]["levels"])}) if "fsq" in cfg else None
    vq = VqConfig(**cfg["vq"]) if "vq" in cfg else None
    model = ToneUnitModel(cfg["kind"], PhoneAlphabet(tuple(cfg["alphabet"])), EncoderConfig(**enc),
                          DecoderConfig(**cfg["decoder"]), fsq, vq, cfg["kmeans_k"], cfg["seed"])
    model.tau = cfg["tau"]
    return model


def load_checkpoint(path) -> ToneUnitModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(CKPT_MAGIC) + 38 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} is corrupt or truncated (checksum mismatch)")
    version, n = struct.unpack_from("<HI", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    pos = 10
    try:
        cfg = json.loads(body[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            arrays[name] = np.frombuffer(body[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += size
        if pos != len(body):
            raise CheckpointError(f"{path}: {len(body) - pos} unexpected trailing bytes")
        model = _model_from_config(cfg)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    for name, p in model.params.items():
        if name not in arrays or arrays[name].shape != p.value.shape:
            raise CheckpointError(f"{path}: array {name!r} missing or misshapen")
        p.value[...] = arrays[name]
    if "kmeans.centroids" in arrays:
        km = cfg.get("kmeans", {})
        model.kmeans = KmeansState(arrays["kmeans.centroids"], km.get("iterations", 0), km.get("inertia", 0.0),
                                   list(km.get("inertia_history", [])))
    return model
