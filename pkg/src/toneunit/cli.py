"""Command-line entry point: gen-corpus, train, eval, analyze, extract.

Every command takes a plain-text ``key = value`` config (``--config``) whose
values are overridden by flags, writes ``resolved.cfg`` next to its outputs,
and refuses to overwrite existing outputs unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from toneunit.corpus import (
    SPLITS,
    TONES,
    Corpus,
    CorpusConfig,
    check_coverage,
    generate_corpus,
    histogram_overlap,
    pitch_histogram,
    read_corpus,
    toneless_alphabet,
    write_corpus,
)
from toneunit.errors import ConfigError
from toneunit.model import DecoderConfig, EncoderConfig, ToneUnitModel, KINDS
from toneunit.pipeline import (
    TrainConfig,
    dedup,
    evaluate,
    extract_units,
    format_unit_table,
    load_checkpoint,
    save_checkpoint,
    train,
    unit_tone_table,
)
from toneunit.quantizers import FsqConfig, VqConfig

log = logging.getLogger("toneunit")

REQUIRED_KEYS = ("seed",)
DEFAULT_KMEANS_K = 64


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    seed: int
    quantizer: str = "fsq"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fsq: FsqConfig = field(default_factory=FsqConfig)
    vq: VqConfig = field(default_factory=VqConfig)
    kmeans_k: int = DEFAULT_KMEANS_K
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.quantizer not in KINDS:
            raise ConfigError(f"quantizer must be one of {KINDS}, got {self.quantizer!r}")
        # one seed drives every random stream
        self.corpus = replace(self.corpus, seed=self.seed)
        self.train = replace(self.train, seed=self.seed, quantizer=self.quantizer, alpha=self.vq.alpha)

    def build_model(self, corpus_alphabet) -> ToneUnitModel:
        alphabet = toneless_alphabet(self.corpus) if self.quantizer == "kmeans" else corpus_alphabet
        return ToneUnitModel(self.quantizer, alphabet, self.encoder, self.decoder, self.fsq, self.vq,
                             self.kmeans_k, self.seed)


# section name -> (dataclass, fields not settable from the file)
SECTIONS = {
    "corpus": (CorpusConfig, {"seed", "contours"}),
    "encoder": (EncoderConfig, set()),
    "decoder": (DecoderConfig, set()),
    "fsq": (FsqConfig, set()),
    "vq": (VqConfig, set()),
    "train": (TrainConfig, {"seed", "quantizer", "alpha"}),
}


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text: str, default):
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        like = default[0] if default else ""
        return tuple(_parse_scalar(p, like) for p in parts)
    return _parse_scalar(text, default)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _section_defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def known_keys() -> dict[str, object]:
    keys: dict[str, object] = {"seed": 0, "quantizer": "fsq", "kmeans.k": DEFAULT_KMEANS_K}
    for section, (cls, hidden) in SECTIONS.items():
        for name, default in _section_defaults(cls).items():
            if name not in hidden:
                keys[f"{section}.{name}"] = default
    keys["vq.alpha"] = VqConfig().alpha
    return keys


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines into typed values; ``#`` starts a comment."""
    keys = known_keys()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in keys:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"{source}:{lineno}: key {key!r} given twice")
        try:
            values[key] = _parse_value(value, keys[key])
        except ValueError as exc:
            raise UsageError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def resolve(values: dict[str, object]) -> RunConfig:
    for key in REQUIRED_KEYS:
        if key not in values:
            raise UsageError(f"missing required config key {key!r}")
    sections: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in values.items():
        if "." in key and key != "kmeans.k":
            section, name = key.split(".", 1)
            sections[section][name] = value
    try:
        return RunConfig(
            seed=int(values["seed"]),
            quantizer=str(values.get("quantizer", "fsq")),
            corpus=CorpusConfig(**sections["corpus"]),
            encoder=EncoderConfig(**sections["encoder"]),
            decoder=DecoderConfig(**sections["decoder"]),
            fsq=FsqConfig(**sections["fsq"]),
            vq=VqConfig(**sections["vq"]),
            kmeans_k=int(values.get("kmeans.k", DEFAULT_KMEANS_K)),
            train=TrainConfig(**sections["train"]),
        )
    except ConfigError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def render_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"quantizer = {cfg.quantizer}", f"kmeans.k = {cfg.kmeans_k}"]
    for section, (_, hidden) in SECTIONS.items():
        obj = getattr(cfg, section)
        for f in fields(obj):
            if f.name not in hidden or (section, f.name) == ("vq", "alpha"):
                lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_run_config(args) -> RunConfig:
    values: dict[str, object] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(), str(path))
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "quantizer", None):
        values["quantizer"] = args.quantizer
    if getattr(args, "label_fraction", None) is not None:
        values["train.label_fraction"] = args.label_fraction
    return resolve(values)


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(out: Path, names: list[str], force: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(str(out / n) for n in existing)} (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_corpus_dir(path, config: CorpusConfig | None = None) -> Corpus:
    path = Path(path)
    splits = {}
    alphabet = None
    width = None
    for name in SPLITS:
        file = path / f"{name}.tulb"
        if not file.exists():
            raise FileNotFoundError(f"corpus file not found: {file}")
        utts, alphabet, width = read_corpus(file)
        splits[name] = utts
    config = config or CorpusConfig()
    if width != config.feature_width:
        config = replace(config, feature_width=width)
    return Corpus(config, alphabet, splits["train"], splits["dev"], splits["test"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> None:
    cfg = load_run_config(args)
    out = Path(args.out)
    names = [f"{s}.tulb" for s in SPLITS] + ["manifest.txt", "resolved.cfg"]
    _prepare_out(out, names, args.force)
    corpus = generate_corpus(cfg.corpus)
    lines = [f"seed = {cfg.seed}"]
    for name in SPLITS:
        utts = corpus.split(name)
        file = out / f"{name}.tulb"
        write_corpus(file, utts, corpus.alphabet, cfg.corpus.feature_width)
        counts = check_coverage(utts, cfg.corpus, corpus.alphabet, name)
        lines.append(f"{name}.utterances = {len(utts)}")
        lines.append(f"{name}.frames = {sum(u.n_frames for u in utts)}")
        lines.append(f"{name}.min_pair_count = {min(counts.values())}")
        for (v, t), n in sorted(counts.items()):
            lines.append(f"{name}.pairs.{v}{t} = {n}")
        lines.append(f"{name}.sha256 = {_sha256(file)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    (out / "resolved.cfg").write_text(render_config(cfg))
    print(f"wrote corpus to {out}")


def cmd_train(args) -> None:
    cfg = load_run_config(args)
    out = Path(args.out)
    _prepare_out(out, ["model.tuck", "train_log.tsv", "resolved.cfg"], args.force)
    corpus = load_corpus_dir(args.corpus, cfg.corpus)
    model = cfg.build_model(corpus.alphabet)
    rows = ["epoch\tloss\tctc\tdiversity\tdev_per\tdev_usage\ttau\tsteps"]

    def on_epoch(r):
        rows.append(f"{r.epoch}\t{r.loss!r}\t{r.ctc!r}\t{r.diversity!r}\t{r.dev_per!r}\t{r.dev_usage!r}\t{r.tau!r}\t{r.steps}")
        print(f"epoch {r.epoch:3d}  loss {r.loss:.4f}  dev PER {r.dev_per:.4f}  usage {r.dev_usage:.3f}", flush=True)

    result = train(model, corpus, cfg.train, on_epoch)
    save_checkpoint(result.model, out / "model.tuck")
    (out / "train_log.tsv").write_text("\n".join(rows) + f"\n# best_epoch={result.best_epoch}\n")
    (out / "resolved.cfg").write_text(render_config(cfg))
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'model.tuck'}")


def _checkpoint_and_corpus(args):
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus_dir(args.corpus)
    return model, corpus


def _resolved_for_eval(args, model) -> str:
    return (f"checkpoint = {args.checkpoint}\ncheckpoint.sha256 = {_sha256(Path(args.checkpoint))}\n"
            f"corpus = {args.corpus}\nsplit = {args.split}\nkind = {model.kind}\n")


def cmd_eval(args) -> None:
    model, corpus = _checkpoint_and_corpus(args)
    out = Path(args.out)
    _prepare_out(out, ["report.kv", "report.txt", "resolved.cfg"], args.force)
    report = evaluate(model, corpus, split=args.split)
    (out / "report.kv").write_text(report.to_kv())
    (out / "report.txt").write_text(report.to_text())
    (out / "resolved.cfg").write_text(_resolved_for_eval(args, model))
    print(report.to_text(), end="")


def cmd_analyze(args) -> None:
    model, corpus = _checkpoint_and_corpus(args)
    out = Path(args.out)
    _prepare_out(out, ["unit_table.txt", "pitch_hist.tsv", "pitch_overlap.txt", "resolved.cfg"], args.force)
    utts = corpus.split(args.split)
    table = unit_tone_table(extract_units(model, utts), corpus.alphabet)
    (out / "unit_table.txt").write_text(format_unit_table(table))

    rows = ["vowel\ttone\tbin_low_hz\tbin_high_hz\tcount"]
    overlap_lines = ["vowel\tpair\toverlap"]
    vowels = corpus.config.vowels
    for v in list(vowels) + ["all"]:
        hists = {}
        for t in TONES:
            counts, edges = pitch_histogram(utts, corpus.alphabet, None if v == "all" else v, t)
            hists[t] = counts
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                rows.append(f"{v}\t{t}\t{lo:g}\t{hi:g}\t{c}")
        for a, b in ((1, 4), (1, 2), (2, 3), (3, 4), (1, 3), (2, 4)):
            overlap_lines.append(f"{v}\tT{a}-T{b}\t{histogram_overlap(hists[a], hists[b]):.4f}")
    (out / "pitch_hist.tsv").write_text("\n".join(rows) + "\n")
    (out / "pitch_overlap.txt").write_text("\n".join(overlap_lines) + "\n")
    (out / "resolved.cfg").write_text(_resolved_for_eval(args, model))
    print(format_unit_table(table), end="")


def cmd_extract(args) -> None:
    model, corpus = _checkpoint_and_corpus(args)
    out = Path(args.out)
    _prepare_out(out, ["units.tsv", "resolved.cfg"], args.force)
    lines = ["uid\tunits\tdedup"]
    for s in extract_units(model, corpus.split(args.split)):
        lines.append(f"{s.uid}\t{' '.join(map(str, s.units.tolist()))}\t{' '.join(map(str, dedup(s.units)))}")
    (out / "units.tsv").write_text("\n".join(lines) + "\n")
    (out / "resolved.cfg").write_text(_resolved_for_eval(args, model))
    print(f"wrote {len(lines) - 1} unit streams to {out / 'units.tsv'}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toneunit", description="Tone-aware discrete speech units on a synthetic corpus")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_model=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if needs_model:
            p.add_argument("--checkpoint", required=True, help="model checkpoint (.tuck)")
            p.add_argument("--corpus", required=True, help="corpus directory written by gen-corpus")
            p.add_argument("--split", choices=SPLITS, default="test", help="split to evaluate (default: test)")
        else:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")

    p = sub.add_parser("gen-corpus", help="generate train/dev/test corpus files")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus directory written by gen-corpus")
    p.add_argument("--quantizer", choices=KINDS, help="quantizer kind (overrides the config)")
    p.add_argument("--label-fraction", type=float, help="fraction of labelled training utterances")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "evaluation report"),
                                  ("analyze", cmd_analyze, "unit-tone table and pitch histograms"),
                                  ("extract", cmd_extract, "per-utterance unit streams")):
        p = sub.add_parser(name, help=help_text)
        common(p, needs_model=True)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"toneunit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ConfigError, OSError, ValueError) as exc:
        print(f"toneunit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
