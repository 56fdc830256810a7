"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mdkd import pipeline
from mdkd.config import from_dict
from mdkd.corpus import BOS
from mdkd.errors import FingerprintMismatch
from mdkd.evaluation import corpus_bleu
from mdkd.losses import LossConfig, SoftTargets, combined_loss, kd_loss, nll_loss
from mdkd.selection import CedRanker, SelectionSchedule, ced_score, rank_by_ced, selection_size
from mdkd.store import read_store, write_store
from mdkd.training import dev_loss
from mdkd.synthetic import SyntheticSpec, domain_tags, write_task

from helpers import gradient_check, random_case, verdict
from test_evaluation import FIXTURES
from test_selection import brute_ce, random_counts, toy_generic, unigram_lm
from test_store import FP, random_store

SEEDS = (0, 1, 2)


def test_1_loss_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst, exact = 0.0, True
    for _ in range(200):
        V, T = int(rng.integers(2, 17)), int(rng.integers(1, 7))
        student = rng.dirichlet(np.ones(V), size=T)
        k = int(rng.integers(1, V + 1))
        ids = np.stack([rng.choice(V, k, replace=False) for _ in range(T)])
        teacher = SoftTargets(ids, rng.dirichlet(np.ones(k), size=T))
        tgt = [BOS] + [int(x) for x in rng.integers(0, V, T)]
        lam, eps = float(rng.uniform()), float(rng.choice([0.0, rng.uniform(0, 0.3)]))
        mixed = combined_loss(student, teacher, tgt, LossConfig(lam=lam, label_smoothing_eps=eps))
        affine = (1 - lam) * nll_loss(student, tgt, eps) + lam * kd_loss(student, teacher)
        worst = max(worst, abs(mixed - affine))
        exact &= combined_loss(student, teacher, tgt, LossConfig(lam=0.0, label_smoothing_eps=eps)) \
            == nll_loss(student, tgt, eps)
        exact &= combined_loss(student, teacher, tgt, LossConfig(lam=1.0, label_smoothing_eps=eps)) \
            == kd_loss(student, teacher)
    dt = time.perf_counter() - t0
    verdict(1, "loss identities", worst <= 1e-10 and exact and dt < 1.0,
            f"max |combined - affine| = {worst:.1e}, lambda 0/1 exact = {exact}, {dt:.2f}s")


def test_2_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        p, src, tgt, soft = random_case(rng)
        for lam in (0.0, 0.7, 1.0):
            for eps in (0.0, 0.1):
                worst = max(worst, gradient_check(p, src, tgt, lam, eps, soft))
    dt = time.perf_counter() - t0
    verdict(2, "gradient oracle", worst < 1e-4 and dt < 30,
            f"max relative error {worst:.1e} over 50 models x 6 settings, {dt:.1f}s")


def test_3_selection_formula():
    t0 = time.perf_counter()
    s = SelectionSchedule(alpha=0.4, beta=0.5, nu=2, generic_size=1000)
    sizes = [selection_size(s, i) for i in (1, 2, 3)]
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        r = SelectionSchedule(float(rng.uniform(0.01, 1)), float(rng.uniform(0, 1)),
                              int(rng.integers(1, 5)), int(rng.integers(1, 5000)), bool(rng.integers(2)))
        n = [selection_size(r, i) for i in range(1, 11)]
        ranked = rng.permutation(r.generic_size)
        ok &= all(a >= b for a, b in zip(n, n[1:]))
        ok &= all(np.isin(ranked[:b], ranked[:a]).all() for a, b in zip(n, n[1:]))
    dt = time.perf_counter() - t0
    verdict(3, "selection formula", sizes == [400, 283, 200] and ok and dt < 1.0,
            f"n(1..3) = {sizes}, nested+monotone over 1000 schedules = {ok}, {dt:.2f}s")


def test_4_ced_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(21)
    match, zeros = True, True
    for _ in range(10):
        tables = [random_counts(rng) for _ in range(4)]
        g = toy_generic(rng, 20)
        scores = []
        for p in g:
            src, tgt = p.source[:-1], p.target[1:-1]
            scores.append(brute_ce(tables[0], src) - brute_ce(tables[1], src)
                          + brute_ce(tables[2], tgt) - brute_ce(tables[3], tgt))
        brute = sorted(range(20), key=lambda i: (round(scores[i], 9), i))
        match &= rank_by_ced(CedRanker(*(unigram_lm(t) for t in tables)), g) == brute
        same = CedRanker(unigram_lm(tables[0]), unigram_lm(tables[0]), unigram_lm(tables[2]), unigram_lm(tables[2]))
        zeros &= all(ced_score(same, p) == 0.0 for p in g)
    dt = time.perf_counter() - t0
    verdict(4, "CED oracle", match and zeros and dt < 1.0,
            f"ranking = brute force: {match}, identical LMs all zero: {zeros}, {dt:.2f}s")


def test_5_bleu_fixtures():
    t0 = time.perf_counter()
    refs = ["a b c d e", "the cat sat on the mat"]
    identical = corpus_bleu(refs, refs).score
    disjoint = corpus_bleu(["x y z w"], ["a b c d"]).score
    fixtures = True
    for hyps, r, expected, *_ in FIXTURES.values():
        for smooth, key in ((False, "none"), (True, "addk")):
            fixtures &= round(corpus_bleu(hyps, r, smooth=smooth).score, 2) == round(expected[key][0], 2)
    dt = time.perf_counter() - t0
    verdict(5, "BLEU fixtures", identical == 100.0 and disjoint == 0.0 and fixtures and dt < 1.0,
            f"identical {identical}, disjoint {disjoint}, external fixtures match: {fixtures}, {dt:.2f}s")


def full_run(root, seed):
    spec = SyntheticSpec(n_domains=2, seed=seed)
    paths = write_task(spec, root / "data")
    raw = {"seed": seed, "data": {"generic": paths["generic"],
                                  "domains": [{"tag": t, **paths[t]} for t in domain_tags(2)]}}
    with threadpool_limits(1):
        return pipeline.run_all(from_dict(raw), root / "run")


@pytest.fixture(scope="module")
def experiments(tmp_path_factory):
    t0 = time.perf_counter()
    runs = {s: tmp_path_factory.mktemp(f"seed{s}") for s in SEEDS}
    reports = {s: full_run(runs[s], s) for s in SEEDS}
    return runs, reports, time.perf_counter() - t0


@pytest.mark.slow
def test_6_end_to_end(experiments):
    runs, reports, dt = experiments
    lines, ok = [], True
    for s in SEEDS:
        b = reports[s]["bleu"]
        tags = [t for t in b["student"] if t != "generic"]
        teacher = {t: b[f"teacher.{t}"][t]["score"] for t in tags}
        generic = {t: b["generic"][t]["score"] for t in tags}
        student = float(np.mean([b["student"][t]["score"] for t in tags]))
        teacher_mean = float(np.mean(list(teacher.values())))
        a_ok = all(teacher[t] > generic[t] for t in tags)
        b_ok = student >= teacher_mean - 5.0
        ok &= a_ok and b_ok
        delta = reports[s]["delta"]["mean"]
        lines.append(f"seed {s}: teachers>generic {a_ok}, student {student:.1f} vs teachers "
                     f"{teacher_mean:.1f}, delta {delta:+.2f} ({'gain' if delta > 0 else 'no gain'})")
        print(lines[-1])
    verdict(6, "end-to-end synthetic", ok and dt < 600, "; ".join(lines) + f"; {dt:.0f}s")


@pytest.mark.slow
def test_7_determinism(experiments, tmp_path):
    runs, reports, _ = experiments
    first = runs[0] / "run"
    again = full_run(tmp_path, 0)
    names = ["generic", "student", "baseline", "teachers/dom0", "teachers/dom1"]
    same = {n: (first / n / "model.ckpt").read_bytes() == (tmp_path / "run" / n / "model.ckpt").read_bytes()
            for n in names}
    stores = all((first / "stores" / f).read_bytes() == (tmp_path / "run" / "stores" / f).read_bytes()
                 for f in ("dom0.kdst", "dom1.kdst"))
    report_same = again == reports[0] and \
        (first / "reports" / "bleu.json").read_bytes() == (tmp_path / "run" / "reports" / "bleu.json").read_bytes()
    verdict(7, "determinism", all(same.values()) and stores and report_same,
            f"checkpoints identical {all(same.values())}, stores identical {stores}, report identical {report_same}")


def test_8_store_format(tmp_path):
    store = random_store(1000)
    path = tmp_path / "s.kdst"
    write_store(store, path)
    back = read_store(path, FP)
    exact = len(back) == 1000 and all(
        np.array_equal(back[i].ids, st.ids)
        and np.array_equal(back[i].probs, st.probs.astype(np.float32).astype(np.float64))
        for i, st in store.entries.items())
    data = bytearray(path.read_bytes())
    data[16] ^= 0xFF
    path.write_bytes(bytes(data))
    try:
        read_store(path, FP)
        rejected = False
    except FingerprintMismatch:
        rejected = True
    verdict(8, "store format", exact and rejected,
            f"1000 sentences f32-exact {exact}, corrupted fingerprint rejected {rejected}")


@pytest.mark.slow
def test_student_and_baseline_beat_generic_on_domain_dev_loss(experiments):
    runs, _, _ = experiments
    for s in SEEDS:
        manifest = json.loads((runs[s] / "run" / "manifest.json").read_text())
        run = pipeline.Run.open(from_dict(manifest["config"]), runs[s] / "run")
        vocab = run.vocab()
        gen = run.model("model.generic")
        for tag in ("dom0", "dom1"):
            dev = run.corpus(tag, "dev", vocab)
            for name in ("student", "baseline"):
                assert dev_loss(run.model(f"model.{name}"), dev) <= dev_loss(gen, dev)
