"""End-to-end acceptance checks at the desk-scale defaults.

Each test records a one-line verdict that the terminal summary prints,
then asserts. The trained models are shared through module fixtures.
"""

import hashlib
import time

import numpy as np
import pytest

from toneunit.cli import main as cli_main
from toneunit.corpus import TONES, CorpusConfig, generate_corpus, histogram_overlap, pitch_histogram, toneless_alphabet
from toneunit.ctc import PhoneAlphabet, brute_force_ctc, ctc_loss, min_frames
from toneunit.model import DecoderConfig, EncoderConfig, ToneUnitModel
from toneunit.numcore import (
    conv1d_backward,
    conv1d_forward,
    grad_check,
    linear_backward,
    linear_forward,
    log_softmax,
    log_softmax_backward,
    make_rng,
    relu_backward,
    relu_forward,
)
from toneunit.pipeline import TrainConfig, evaluate, train
from toneunit.quantizers import (
    FULL_SCALE_FSQ_LEVELS,
    FsqConfig,
    VqConfig,
    diversity_loss_and_grad,
    fsq_bound,
    fsq_code_index,
    fsq_code_vector,
    fsq_codebook,
    fsq_index_digits,
    fsq_quantize,
    fsq_quantize_backward,
    vq_gumbel_select,
    vq_gumbel_select_backward,
    vq_lookup,
    vq_lookup_backward,
)

SEED = 42
TIME_LIMIT_S = 15 * 60


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusConfig(seed=SEED))


def _run(corpus, kind, fraction=1.0):
    alphabet = toneless_alphabet(corpus.config) if kind == "kmeans" else corpus.alphabet
    model = ToneUnitModel(kind, alphabet, seed=SEED)
    start = time.perf_counter()
    result = train(model, corpus, TrainConfig(quantizer=kind, seed=SEED, label_fraction=fraction))
    elapsed = time.perf_counter() - start
    return result, evaluate(result.model, corpus), elapsed


@pytest.fixture(scope="module")
def fsq_run(corpus):
    return _run(corpus, "fsq")


@pytest.fixture(scope="module")
def vq_run(corpus):
    return _run(corpus, "vq")


@pytest.fixture(scope="module")
def kmeans_run(corpus):
    return _run(corpus, "kmeans")


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_ctc_matches_brute_force(record_criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    done = 0
    while done < 200:
        T, S, L = int(rng.integers(1, 7)), int(rng.integers(2, 6)), int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, S, size=L)]
        if min_frames(target) > T:
            continue
        lp = log_softmax(rng.standard_normal((T, S)) * 2)
        worst = max(worst, abs(ctc_loss(lp, target)[0] - brute_force_ctc(lp, target)))
        done += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 10
    record_criterion(1, "CTC oracle equivalence", ok,
                     f"200 instances, max |diff| {worst:.2e} (<= 1e-6), {elapsed:.2f} s (< 10 s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------------


def _projected(forward, backward, x, seed):
    out, cache = forward(x)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def fn(v):
        o, c = forward(v)
        return float((o * proj).sum()), backward(proj, c)

    return grad_check(fn, x)


def _op_errors():
    rng = np.random.default_rng(7)
    errs = {}
    x = rng.standard_normal((8, 3))
    w, b = rng.standard_normal((5, 3, 4)), rng.standard_normal(4)
    for stride, pad in ((1, None), (2, "same")):
        f = lambda v, s=stride, p=pad: conv1d_forward(v, w, b, s, p)
        errs[f"conv1d input s={stride}"] = _projected(f, lambda d, c: conv1d_backward(d, c)[0], x, 1)
        fk = lambda v, s=stride, p=pad: conv1d_forward(x, v, b, s, p)
        errs[f"conv1d kernel s={stride}"] = _projected(fk, lambda d, c: conv1d_backward(d, c)[1], w, 2)
        fb = lambda v, s=stride, p=pad: conv1d_forward(x, w, v, s, p)
        errs[f"conv1d bias s={stride}"] = _projected(fb, lambda d, c: conv1d_backward(d, c)[2], b, 3)
    W, bb = rng.standard_normal((3, 5)), rng.standard_normal(5)
    errs["linear input"] = _projected(lambda v: linear_forward(v, W, bb), lambda d, c: linear_backward(d, c)[0], x, 4)
    errs["linear weight"] = _projected(lambda v: linear_forward(x, v, bb), lambda d, c: linear_backward(d, c)[1], W, 5)
    errs["relu"] = _projected(relu_forward, relu_backward, x, 6)
    errs["log_softmax"] = _projected(lambda v: (log_softmax(v),) * 2, log_softmax_backward, x, 7)
    lp = log_softmax(rng.standard_normal((7, 4)))
    errs["ctc"] = grad_check(lambda v: ctc_loss(v, [1, 2, 2]), lp)
    z = rng.standard_normal((6, 4))
    errs["fsq straight-through"] = _fsq_surrogate(z)
    noise = rng.standard_normal((5, 6))
    logits = rng.standard_normal((5, 6))

    def select(v):
        _, p = vq_gumbel_select(v, 0.8, training=True, noise=noise)
        return p, p

    errs["gumbel softmax"] = _projected(select, lambda d, p: vq_gumbel_select_backward(d, p, 0.8), logits, 9)
    book = rng.standard_normal((6, 3))
    idx, probs = vq_gumbel_select(logits, 0.8)
    errs["vq codebook"] = _projected(lambda v: vq_lookup(idx, probs, v), lambda d, c: vq_lookup_backward(d, c)[1], book, 10)

    def div(v):
        p = np.exp(log_softmax(v))
        loss, dp = diversity_loss_and_grad(p)
        return loss, vq_gumbel_select_backward(dp, p, 1.0)

    errs["diversity"] = grad_check(div, logits)
    return errs


def _fsq_surrogate(z):
    # rounding residual frozen at z: the surrogate's exact gradient is the straight-through gradient
    levels = FULL_SCALE_FSQ_LEVELS
    residual = fsq_quantize(z, levels)[1] - fsq_bound(z, levels)
    proj = np.random.default_rng(8).standard_normal(z.shape)

    def fn(v):
        return float(((fsq_bound(v, levels) + residual) * proj).sum()), fsq_quantize_backward(proj, v, levels)

    return grad_check(fn, z)


def _end_to_end_errors():
    fsq_model = ToneUnitModel("fsq", _tiny_alphabet(), encoder=EncoderConfig(in_width=4, hidden=8),
                              decoder=DecoderConfig(hidden=8), fsq=FsqConfig((5, 4, 3), up_width=8), seed=2)
    vq_model = ToneUnitModel("vq", _tiny_alphabet(), encoder=EncoderConfig(in_width=4, hidden=8),
                             decoder=DecoderConfig(hidden=8), vq=VqConfig(codebook_size=6, code_dim=8, tau_start=0.9),
                             seed=3)
    errs = {}
    for name, model, rng_seed, alpha in (("end-to-end fsq", fsq_model, None, 0.0),
                                         ("end-to-end vq", vq_model, 9, 0.1)):
        x = make_rng(5).standard_normal((12, 4))
        target = [1, 3] if model.kind == "fsq" else [2, 1]
        frozen = model.forward(x, "train", make_rng(rng_seed) if rng_seed is not None else None).decisions
        worst = 0.0
        for pname in model.params:
            def fn(value, pname=pname):
                model.params[pname].value = value
                model.zero_grad()
                fwd = model.forward(x, "train", frozen=frozen)
                loss, dlogp = ctc_loss(fwd.log_probs, target)
                dprobs = None
                if alpha:
                    div, dprobs = diversity_loss_and_grad(fwd.probs)
                    loss, dprobs = loss + alpha * div, alpha * dprobs
                model.backward(fwd, dlogp, dprobs)
                return loss, model.params[pname].grad.copy()

            base = model.params[pname].value.copy()
            worst = max(worst, grad_check(fn, base))
            model.params[pname].value = base
        errs[name] = worst
    return errs


def _tiny_alphabet():
    return PhoneAlphabet(("b", "a1", "a2"))


def test_criterion_2_gradient_suite(record_criterion):
    start = time.perf_counter()
    ops = _op_errors()
    e2e = _end_to_end_errors()
    elapsed = time.perf_counter() - start
    worst_op = max(ops, key=ops.get)
    worst_e2e = max(e2e, key=e2e.get)
    ok = ops[worst_op] < 1e-4 and e2e[worst_e2e] < 1e-3 and elapsed < 60
    record_criterion(2, "gradient suite", ok,
                     f"{len(ops)} ops, worst {worst_op} {ops[worst_op]:.1e} (< 1e-4); "
                     f"worst {worst_e2e} {e2e[worst_e2e]:.1e} (< 1e-3); {elapsed:.1f} s (< 60 s)")
    assert ok


# -- 3 ---------------------------------------------------------------------------------


def _bijection_failures(levels):
    size = int(np.prod(levels))
    failures = 0
    vectors = fsq_code_vector(np.arange(size), levels)
    L = np.asarray(levels)
    # preimage of each code vector under the bound, pulled slightly inside the saturating range
    pre = np.arctanh(np.clip((vectors - np.where(L % 2 == 0, 0.5, 0.0)) / (L // 2), -0.999, 0.999))
    digits, quantized = fsq_quantize(pre, levels)
    failures += int(np.sum(np.any(quantized != vectors, axis=1)))
    failures += int(np.sum(fsq_code_index(digits, levels) != np.arange(size)))
    failures += int(np.sum(fsq_code_index(fsq_index_digits(np.arange(size), levels), levels) != np.arange(size)))
    failures += size - len({tuple(v) for v in fsq_codebook(levels).tolist()})
    return size, failures


def test_criterion_3_fsq_bijection(record_criterion):
    full = _bijection_failures(FULL_SCALE_FSQ_LEVELS)
    small = _bijection_failures((3, 3, 3))
    ok = full == (1000, 0) and small == (27, 0)
    record_criterion(3, "FSQ bijection", ok,
                     f"[8,5,5,5]: {full[0]} codes, {full[1]} failures; [3,3,3]: {small[0]} codes, {small[1]} failures")
    assert ok


# -- 4 ---------------------------------------------------------------------------------


def _shared_units(table, vowels):
    shared = {}
    for v in vowels:
        sets = [set(table.get((v, t), [])) for t in TONES]
        shared[v] = sorted({u for i in range(4) for j in range(i + 1, 4) for u in sets[i] & sets[j]})
    return shared


def test_criterion_4_tone_aware_units(record_criterion, corpus, fsq_run):
    result, report, elapsed = fsq_run
    shared = _shared_units(report.unit_table, corpus.config.vowels)
    complete = all((v, t) in report.unit_table for v in corpus.config.vowels for t in TONES)
    disjoint = complete and not any(shared.values())
    ok = report.per < 0.10 and disjoint and elapsed <= TIME_LIMIT_S
    record_criterion(4, "tone-aware units", ok,
                     f"test PER {report.per:.4f} (< 0.10); shared top-3 units per vowel {shared}; "
                     f"trained in {elapsed:.0f} s (<= {TIME_LIMIT_S} s)")
    assert ok


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_5_supervision_gap(record_criterion, fsq_run, kmeans_run):
    fsq_acc = fsq_run[1].tone_accuracy
    km_acc = kmeans_run[1].tone_accuracy
    gap = fsq_acc - km_acc
    ok = gap >= 0.15
    record_criterion(5, "supervision gap", ok,
                     f"FSQ tone accuracy {fsq_acc:.4f} vs tone-blind k-means {km_acc:.4f}: gap {gap:+.4f} (>= 0.15)")
    assert ok


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_6_codebook_usage(record_criterion, fsq_run, vq_run):
    fsq_use = fsq_run[1].codebook_usage
    vq_use = vq_run[1].codebook_usage
    ok = fsq_use >= 0.95 and fsq_use >= vq_use
    record_criterion(6, "codebook usage", ok,
                     f"FSQ {fsq_use:.4f} of {fsq_run[1].codebook_size} (>= 0.95); "
                     f"VQ {vq_use:.4f} of {vq_run[1].codebook_size} (<= FSQ)")
    assert ok


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_label_budget(record_criterion, corpus, fsq_run):
    full = fsq_run[1].per
    tenth = _run(corpus, "fsq", 0.1)
    hundredth = _run(corpus, "fsq", 0.01)
    gap = tenth[1].per - full
    ok = gap <= 0.05 and np.isfinite(hundredth[1].per)
    record_criterion(7, "label-budget ablation", ok,
                     f"PER full {full:.4f}, 10% {tenth[1].per:.4f} (gap {gap:+.4f} <= 0.05), "
                     f"1% {hundredth[1].per:.4f} on {hundredth[0].n_train} utterances (finite)")
    assert ok


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_8_pitch_overlap(record_criterion, corpus):
    utts = corpus.train + corpus.dev + corpus.test
    rows = []
    ok = True
    for vowel in list(corpus.config.vowels) + [None]:
        h = {t: pitch_histogram(utts, corpus.alphabet, vowel, t)[0] for t in TONES}
        o14, o12 = histogram_overlap(h[1], h[4]), histogram_overlap(h[1], h[2])
        o23, o34 = histogram_overlap(h[2], h[3]), histogram_overlap(h[3], h[4])
        ok &= o14 > o12 and o23 > o34
        rows.append(f"{vowel or 'pooled'}: T1T4 {o14:.3f} > T1T2 {o12:.3f}, T2T3 {o23:.3f} > T3T4 {o34:.3f}")
    record_criterion(8, "pitch histogram overlap", ok, "; ".join(rows))
    assert ok


# -- 9 ---------------------------------------------------------------------------------

DETERMINISM_CFG = """\
seed = 42
corpus.n_train = 120
corpus.n_dev = 40
corpus.n_test = 40
corpus.min_pair_count = 3
train.epochs = 2
"""


def _cli_pipeline(root):
    root.mkdir(parents=True)
    cfg = root / "run.cfg"
    cfg.write_text(DETERMINISM_CFG)
    steps = [
        ["gen-corpus", "--config", str(cfg), "--out", str(root / "corpus")],
        ["train", "--config", str(cfg), "--corpus", str(root / "corpus"), "--out", str(root / "model")],
        ["eval", "--checkpoint", str(root / "model" / "model.tuck"), "--corpus", str(root / "corpus"),
         "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    files = ["corpus/train.tulb", "corpus/dev.tulb", "corpus/test.tulb", "corpus/manifest.txt",
             "model/model.tuck", "model/train_log.tsv", "model/resolved.cfg", "eval/report.kv", "eval/report.txt"]
    return {f: hashlib.sha256((root / f).read_bytes()).hexdigest() for f in files}


def test_criterion_9_determinism(record_criterion, tmp_path):
    a = _cli_pipeline(tmp_path / "a")
    b = _cli_pipeline(tmp_path / "b")
    differing = [f for f in a if a[f] != b[f]]
    ok = not differing
    record_criterion(9, "determinism", ok,
                     f"{len(a)} outputs of gen-corpus, train, eval compared by SHA-256; "
                     f"differing: {differing or 'none'}")
    assert ok
