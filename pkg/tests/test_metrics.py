import itertools
import math
import random

import numpy as np
import pytest

from vlmrobust import data
from vlmrobust.metrics import (CIDER_SCALE, ReferenceCorpus, ScoreReport, bleu4, cider,
                               contains_target, permuted_baseline, success_rate, vqa_accuracy)


# ---------------------------------------------------------------- brute-force CIDEr-D

def oracle_cider(cands, refs_per_image, sigma=6.0):
    """Direct transcription of CIDEr-D with plain lists and loops."""

    def toks(s):
        s = s.lower()
        s = "".join(ch for ch in s if ch.isalnum() or ch.isspace())
        return s.split()

    def grams(words, n):
        out = {}
        for i in range(len(words) - n + 1):
            g = " ".join(words[i:i + n])
            out[g] = out.get(g, 0) + 1
        return out

    n_img = len(refs_per_image)
    df = [dict() for _ in range(4)]
    for refs in refs_per_image:
        for n in range(1, 5):
            seen = set()
            for r in refs:
                seen |= set(grams(toks(r), n))
            for g in seen:
                df[n - 1][g] = df[n - 1].get(g, 0) + 1

    def weights(words, n):
        return {g: c * (math.log(n_img) - math.log(max(1.0, df[n - 1].get(g, 0))))
                for g, c in grams(words, n).items()}

    scores = []
    for cand, refs in zip(cands, refs_per_image):
        cw = toks(cand)
        total = 0.0
        for n in range(1, 5):
            per_ref = []
            for r in refs:
                rw = toks(r)
                vc, vr = weights(cw, n), weights(rw, n)
                num = sum(min(vc[g], vr.get(g, 0.0)) * vr.get(g, 0.0) for g in vc)
                nc = math.sqrt(sum(v * v for v in vc.values()))
                nr = math.sqrt(sum(v * v for v in vr.values()))
                sim = num / (nc * nr) if nc > 0 and nr > 0 else num
                # the reference scorer measures length as the bigram count
                lc, lr = max(len(cw) - 1, 0), max(len(rw) - 1, 0)
                sim *= math.exp(-((lc - lr) ** 2) / (2 * sigma ** 2))
                per_ref.append(sim)
            total += sum(per_ref) / len(per_ref)
        scores.append(10.0 * total / 4)
    return scores


def toy_corpora():
    rng = random.Random(7)
    words = "a red blue green square circle triangle on the white black background and".split()
    out = [
        (["a red square", "a blue square"], [["a red square", "there is a red square"], ["a blue circle"]]),
        (["a blue circle on a white background", "red"],
         [["a blue circle", "a blue circle on a white background"], ["a red square and a green circle"]]),
        (["x y z", "a b c d e", "a b"], [["a b c"], ["a b c d e f"], ["x y", "a b"]]),
        (["", "the the the", "A Red, Square!"],
         [["a red square"], ["the cat"], ["a red square", "red square"]]),
    ]
    for _ in range(6):
        n = rng.randint(2, 6)
        refs = [[" ".join(rng.choice(words) for _ in range(rng.randint(1, 12)))
                 for _ in range(rng.randint(1, 5))] for _ in range(n)]
        cands = [" ".join(rng.choice(words) for _ in range(rng.randint(0, 12))) for _ in range(n)]
        out.append((cands, refs))
    return out


@pytest.mark.parametrize("case", range(10))
def test_cider_matches_brute_force_oracle(case):
    cands, refs = toy_corpora()[case]
    got = cider(cands, ReferenceCorpus(refs)).scores
    want = [s * CIDER_SCALE for s in oracle_cider(cands, refs)]
    assert np.allclose(got, want, rtol=0, atol=1e-9)


def test_cider_basic_properties():
    refs = [["a red square", "there is a red square"], ["a blue circle"], ["a green triangle"]]
    corpus = ReferenceCorpus(refs)
    rep = cider(["zzz", "", "a green triangle"], corpus)
    assert rep.scores[0] == 0.0 and rep.scores[1] == 0.0
    assert rep.aggregate == pytest.approx(np.mean(rep.scores))
    assert all(s >= 0 for s in rep.scores)
    with pytest.raises(ValueError):
        ReferenceCorpus([])
    with pytest.raises(ValueError):
        cider(["a"], corpus)


def test_cider_is_permutation_invariant():
    cands, refs = toy_corpora()[6]
    base = cider(cands, ReferenceCorpus(refs)).scores
    perm = list(reversed(range(len(cands))))
    shuffled = cider([cands[i] for i in perm], ReferenceCorpus([refs[i] for i in perm])).scores
    assert np.allclose(sorted(base), sorted(shuffled), atol=1e-12)


def test_document_frequency_bounded_by_corpus_size():
    _, refs = toy_corpora()[7]
    corpus = ReferenceCorpus(refs)
    assert max(corpus.document_frequency.values()) <= len(refs)


# ---------------------------------------------------------------- BLEU-4

def test_bleu_identity_and_disjoint():
    assert bleu4("a red square on a white background", "a red square on a white background") == 100.0
    assert bleu4("blue circle", "a red square on") == 0.0
    assert bleu4("", "a red square") == 0.0


def test_bleu_truncates_to_target_length():
    assert bleu4("a b c d e f", "a b c d") == pytest.approx(100.0)
    assert bleu4("Output: a b c d", "a b c d") < 100.0


def test_bleu_brevity_penalty():
    # hypothesis is a strict prefix: precisions are 1, brevity penalty applies
    got = bleu4("a b c d", "a b c d e f")
    assert got == pytest.approx(100 * math.exp(1 - 6 / 4))


def test_bleu_range():
    rng = random.Random(3)
    for _ in range(200):
        w = "a b c d e".split()
        o = " ".join(rng.choice(w) for _ in range(rng.randint(0, 8)))
        t = " ".join(rng.choice(w) for _ in range(rng.randint(1, 8)))
        assert 0.0 <= bleu4(o, t) <= 100.0 + 1e-9


def test_bleu_rejects_empty_target():
    with pytest.raises(ValueError):
        bleu4("a", "")


# ---------------------------------------------------------------- success rate

def test_success_rate_containment_table():
    t = "Please reset your password"
    table = [
        ("Output: Please reset your password today", True),
        ("Please reset your password", True),
        ("please reset your password", False),  # case-sensitive
        ("Please reset  your password", False),  # exact whitespace
        ("Please reset your", False),
        ("xPlease reset your passwordx", True),
        ("", False),
    ]
    for out, want in table:
        assert contains_target(out, t) is want, out


def test_success_rate_exhaustive_small_cases():
    target = "ab"
    for n in range(0, 5):
        for combo in itertools.product(["ab", "ba", "xab", "a b"], repeat=n):
            if not combo:
                continue
            want = 100.0 * sum("ab" in c for c in combo) / len(combo)
            assert success_rate(list(combo), target).aggregate == pytest.approx(want)


def test_success_rate_two_of_three():
    rep = success_rate(["t", "x", "t"], "t")
    assert abs(rep.aggregate - 66.67) <= 0.01


# ---------------------------------------------------------------- VQA

def test_vqa_accuracy_exhaustive():
    for n_gt in range(1, 11):
        for matches in range(0, n_gt + 1):
            gts = ["red"] * matches + ["blue"] * (n_gt - matches)
            assert vqa_accuracy("red", gts) == pytest.approx(100.0 * min(matches / 3, 1.0))


def test_vqa_accuracy_normalizes():
    assert vqa_accuracy("Red.", ["red", "red", "red"]) == 100.0
    assert vqa_accuracy("red", ["red"] + ["x"] * 9) == pytest.approx(33.333333, abs=1e-4)
    with pytest.raises(ValueError):
        vqa_accuracy("red", [])


# ---------------------------------------------------------------- unanswerable rule

def test_select_ground_truth_strict_majority_boundary():
    five = ["unanswerable"] * 5 + ["red"] * 5
    six = ["unanswerable"] * 6 + ["red"] * 4
    for seed in range(300):
        assert data.select_ground_truth(five, seed, kind="answer") == "red"
    picks = {data.select_ground_truth(six, seed, kind="answer") for seed in range(300)}
    assert picks == {"unanswerable", "red"}
    assert data.select_ground_truth(["only"], 0) == "only"
    with pytest.raises(ValueError):
        data.select_ground_truth([], 0)


# ---------------------------------------------------------------- baseline and reports

def test_permuted_baseline_identical_references():
    refs = [["a red square", "there is a red square"]] * 4
    corpus = ReferenceCorpus(refs)
    self_score = cider([r[0] for r in refs], corpus).aggregate
    base = permuted_baseline(corpus, 10, seed=1)
    assert base["mean"] == pytest.approx(self_score, abs=1e-12)
    assert base["derangement"] is False


def test_permuted_baseline_deterministic_and_below_self_score():
    ds = data.make_dataset(120, 3, with_qa=False)
    corpus = ReferenceCorpus([r.references for r in ds.records])
    a = permuted_baseline(corpus, 20, seed=4)
    assert a == permuted_baseline(corpus, 20, seed=4)
    self_score = cider([r.references[0] for r in ds.records], corpus).aggregate
    assert a["mean"] < self_score
    with pytest.raises(ValueError):
        permuted_baseline(ReferenceCorpus([["a"]]), 3)


def test_score_report_serialization():
    rep = ScoreReport("CIDEr", [1.0, 2.0], [7, 9])
    js = rep.to_json()
    assert js["aggregate"] == 1.5 and js["count"] == 2
    lines = rep.to_csv().splitlines()
    assert lines[0] == "record_id,metric,score" and len(lines) == 3
