"""Caption and answer metrics: CIDEr-D, truncated BLEU-4, success rate, VQA accuracy.

CIDEr values are reported on the usual table scale, i.e. 100 times the raw
CIDEr-D value (raw CIDEr-D already carries its own factor 10).
"""

from __future__ import annotations

import csv
import io
import json
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CIDER_SIGMA = 6.0
CIDER_SCALE = 100.0
MAX_N = 4

_PUNCT = str.maketrans("", "", string.punctuation)


def normalize(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT).split())


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _counts(text: str) -> Counter:
    words = normalize(text).split()
    c = Counter()
    for n in range(1, MAX_N + 1):
        c.update(ngrams(words, n))
    return c


@dataclass
class ScoreReport:
    metric: str
    scores: list
    ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = [float(s) for s in self.scores]
        if not self.ids:
            self.ids = list(range(len(self.scores)))

    @property
    def count(self) -> int:
        return len(self.scores)

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.0

    def to_json(self) -> dict:
        return {"metric": self.metric, "aggregate": self.aggregate, "count": self.count,
                "ids": list(self.ids), "scores": list(self.scores), "meta": dict(self.meta)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record_id", "metric", "score"])
        for rid, s in zip(self.ids, self.scores):
            w.writerow([rid, self.metric, repr(s)])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


class ReferenceCorpus:
    """Reference captions per image plus n-gram document frequencies."""

    def __init__(self, references: Sequence[Sequence[str]], ids: Sequence | None = None):
        refs = [list(r) for r in references]
        if not refs:
            raise ValueError("empty reference corpus")
        if any(len(r) == 0 for r in refs):
            raise ValueError("every image needs at least one reference")
        self.references = refs
        self.ids = list(ids) if ids is not None else list(range(len(refs)))
        self.ref_counts = [[_counts(s) for s in r] for r in refs]
        df = Counter()
        for per_image in self.ref_counts:
            seen = set()
            for c in per_image:
                seen.update(c)
            df.update(seen)
        self.document_frequency = df
        self.log_size = math.log(float(len(refs)))
        self.ref_vectors = [[self._vector(c) for c in per] for per in self.ref_counts]

    def __len__(self):
        return len(self.references)

    def _vector(self, counts: Counter):
        vec = [dict() for _ in range(MAX_N)]
        norm = [0.0] * MAX_N
        length = 0
        for gram, tf in counts.items():
            n = len(gram) - 1
            df = math.log(max(1.0, self.document_frequency.get(gram, 0.0)))
            vec[n][gram] = float(tf) * (self.log_size - df)
            norm[n] += vec[n][gram] ** 2
            if n == 1:
                # the COCO CIDEr-D scorer measures length in bigrams
                length += tf
        return vec, [math.sqrt(x) for x in norm], length


def _cider_sim(hyp, ref, sigma):
    vh, nh, lh = hyp
    vr, nr, lr = ref
    delta = float(lh - lr)
    val = np.zeros(MAX_N)
    for n in range(MAX_N):
        for gram, w in vh[n].items():
            val[n] += min(w, vr[n].get(gram, 0.0)) * vr[n].get(gram, 0.0)
        if nh[n] != 0 and nr[n] != 0:
            val[n] /= nh[n] * nr[n]
        val[n] *= math.e ** (-(delta ** 2) / (2 * sigma ** 2))
    return val


def cider(candidates: Sequence[str], corpus: ReferenceCorpus, sigma: float = CIDER_SIGMA) -> ScoreReport:
    """CIDEr-D of each candidate against the references of the same index."""
    if len(candidates) != len(corpus):
        raise ValueError(f"{len(candidates)} candidates for {len(corpus)} images")
    scores = []
    for cand, refs in zip(candidates, corpus.ref_vectors):
        hyp = corpus._vector(_counts(cand))
        acc = np.zeros(MAX_N)
        for ref in refs:
            acc += _cider_sim(hyp, ref, sigma)
        scores.append(float(np.mean(acc)) / len(refs) * 10.0 * CIDER_SCALE)
    return ScoreReport("CIDEr", scores, list(corpus.ids))


def bleu4(output: str, target: str) -> float:
    """Sentence BLEU of ``output`` cut to the target's word count, in [0, 100].

    Targets shorter than four words use n-gram orders up to their length.
    """
    ref = normalize(target).split()
    if not ref:
        raise ValueError("empty target")
    hyp = normalize(output).split()[:len(ref)]
    if not hyp:
        return 0.0
    order = min(MAX_N, len(ref))
    logp = 0.0
    for n in range(1, order + 1):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        total = sum(h.values())
        match = sum(min(c, r[g]) for g, c in h.items())
        if total == 0 or match == 0:
            return 0.0
        logp += math.log(match / total) / order
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return 100.0 * bp * math.exp(logp)


def bleu4_report(outputs: Sequence[str], target: str, ids=None) -> ScoreReport:
    return ScoreReport("BLEU-4", [bleu4(o, target) for o in outputs], list(ids or []))


def contains_target(output: str, target: str) -> bool:
    if not target:
        raise ValueError("empty target")
    return target in output


def success_rate(outputs: Sequence[str], target: str, ids=None) -> ScoreReport:
    """Percentage of outputs containing ``target`` verbatim (no normalisation)."""
    flags = [100.0 if contains_target(o, target) else 0.0 for o in outputs]
    return ScoreReport("success_rate", flags, list(ids or []))


def vqa_accuracy(answer: str, ground_truth_answers: Sequence[str]) -> float:
    if not ground_truth_answers:
        raise ValueError("need at least one ground truth answer")
    a = normalize(answer)
    matches = sum(normalize(g) == a for g in ground_truth_answers)
    return 100.0 * min(matches / 3.0, 1.0)


def vqa_report(answers: Sequence[str], gts: Sequence[Sequence[str]], ids=None) -> ScoreReport:
    return ScoreReport("VQA_accuracy", [vqa_accuracy(a, g) for a, g in zip(answers, gts)],
                       list(ids or []))


def permuted_baseline(corpus: ReferenceCorpus, n_permutations: int = 100, seed: int = 0,
                      captions: Sequence[str] | None = None) -> dict:
    """CIDEr of ground-truth captions shuffled across images.

    ``captions`` defaults to the first reference of each image. Permutations
    are plain uniform shuffles, so a caption may land on its own image.
    """
    if len(corpus) < 2:
        raise ValueError("permutation baseline needs at least two images")
    caps = list(captions) if captions is not None else [r[0] for r in corpus.references]
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(n_permutations):
        perm = rng.permutation(len(caps))
        means.append(cider([caps[i] for i in perm], corpus).aggregate)
    return {"mean": float(np.mean(means)), "std": float(np.std(means)),
            "n_permutations": int(n_permutations), "seed": int(seed), "derangement": False}
