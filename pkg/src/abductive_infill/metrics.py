"""Corpus-level generation metrics.

All texts are lowercased and whitespace-tokenized before scoring. Scores are
reported on a 0-100 scale except CIDEr-D, which is reported x10.

* BLEU-4: corpus modified n-gram precision (n = 1..4), geometric mean, brevity
  penalty against the closest reference length. With smoothing, a zero
  n-gram match count is replaced by 1 / (2 * candidate n-gram count).
* ROUGE-L: LCS F1 (beta = 1), best reference per instance, corpus mean.
* CIDEr-D: TF-IDF n-gram vectors (n = 1..4, document frequency over the
  evaluation references), clipped cosine, Gaussian length penalty sigma = 6,
  averaged over references and n-gram orders.
* METEOR (simplified): exact unigram matches only, leftmost-greedy alignment,
  F_mean = 10PR / (R + 9P), fragmentation penalty 0.5 (chunks / matches)^3.
* Embedding score: greedy cosine matching of per-token vectors, F1. Not
  comparable to BERTScore.
"""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import InputError

Encoder = Callable[[list[str]], np.ndarray]

SIMPLIFIED_NOTE = (
    "METEOR* is exact-match only (no stemming or synonyms); Embed* is greedy cosine "
    "matching of toy-model token vectors and is not comparable to BERTScore."
)


def tokens_of(text: str) -> list[str]:
    return text.lower().split()


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(predictions, references):
    if len(predictions) != len(references):
        raise InputError(f"{len(predictions)} predictions for {len(references)} reference sets")
    for refs in references:
        if not refs:
            raise InputError("every prediction needs at least one reference")


# --- BLEU ----------------------------------------------------------------------

def bleu4(predictions: Sequence[str], references: Sequence[Sequence[str]], smoothing: bool = True) -> float:
    _check(predictions, references)
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for pred, refs in zip(predictions, references):
        p = tokens_of(pred)
        r = [tokens_of(x) for x in refs]
        cand_len += len(p)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(x) - len(p)), len(x)) for x in r)[1]
        for n in range(1, 5):
            cand = ngrams(p, n)
            max_ref: Counter = Counter()
            for x in r:
                max_ref |= ngrams(x, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in cand.items())
            totals[n - 1] += sum(cand.values())
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        if t == 0:
            return 0.0
        if m == 0:
            # only higher orders are smoothed; no unigram overlap is a true zero
            if not smoothing or n == 1:
                return 0.0
            m = 1 / (2 * t)
        log_p += math.log(m / t) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100 * bp * math.exp(log_p)


# --- ROUGE-L -------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(pred: str, refs: Sequence[str], beta: float = 1.0) -> float:
    p = tokens_of(pred)
    best = 0.0
    for ref in refs:
        r = tokens_of(ref)
        lcs = lcs_length(p, r)
        if lcs == 0:
            continue
        prec, rec = lcs / len(p), lcs / len(r)
        f = (1 + beta**2) * prec * rec / (rec + beta**2 * prec)
        best = max(best, f)
    return best


def rouge_l(predictions: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    _check(predictions, references)
    if not predictions:
        return 0.0
    return 100 * sum(rouge_l_sentence(p, r) for p, r in zip(predictions, references)) / len(predictions)


# --- CIDEr-D -------------------------------------------------------------------

class CiderD:
    """CIDEr-D with document frequencies fixed from the evaluation references."""

    def __init__(self, references: Sequence[Sequence[str]], n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in references:
            seen = set()
            for ref in refs:
                toks = tokens_of(ref)
                for k in range(1, n + 1):
                    seen.update(ngrams(toks, k))
            self.df.update(seen)
        self.log_n_docs = math.log(float(max(len(references), 1)))

    def _vec(self, text: str):
        toks = tokens_of(text)
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_n_docs - math.log(max(1.0, self.df[g]))) for g, tf in ngrams(toks, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms, len(toks)

    def sentence(self, pred: str, refs: Sequence[str]) -> float:
        pv, pn, pl = self._vec(pred)
        total = 0.0
        for ref in refs:
            rv, rn, rl = self._vec(ref)
            penalty = math.exp(-((pl - rl) ** 2) / (2 * self.sigma**2))
            sims = []
            for k in range(self.n):
                dot = sum(min(x, rv[k][g]) * rv[k][g] for g, x in pv[k].items() if g in rv[k])
                sims.append(dot / (pn[k] * rn[k]) * penalty if pn[k] and rn[k] else 0.0)
            total += sum(sims) / self.n
        return 10 * total / len(refs)


def cider(
    predictions: Sequence[str],
    references: Sequence[Sequence[str]],
    idf_corpus: Sequence[Sequence[str]] | None = None,
) -> float:
    _check(predictions, references)
    if not predictions:
        return 0.0
    scorer = CiderD(idf_corpus if idf_corpus is not None else references)
    return sum(scorer.sentence(p, r) for p, r in zip(predictions, references)) / len(predictions)


# --- METEOR (exact match) ------------------------------------------------------

def align_exact(pred: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Leftmost-greedy: each prediction token takes the leftmost unused equal reference token."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(pred):
        for j, r in enumerate(ref):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(pred: str, refs: Sequence[str]) -> float:
    p = tokens_of(pred)
    best = 0.0
    for ref in refs:
        r = tokens_of(ref)
        pairs = align_exact(p, r)
        m = len(pairs)
        if m == 0:
            continue
        P, R = m / len(p), m / len(r)
        f_mean = 10 * P * R / (R + 9 * P)
        penalty = 0.5 * (count_chunks(pairs) / m) ** 3
        best = max(best, f_mean * (1 - penalty))
    return best


def meteor_simple(predictions: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    _check(predictions, references)
    if not predictions:
        return 0.0
    return 100 * sum(meteor_sentence(p, r) for p, r in zip(predictions, references)) / len(predictions)


# --- embedding similarity ------------------------------------------------------

class HashingEncoder:
    """Context-free token vectors seeded by a hash of the token; a fallback encoder."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def __call__(self, tokens: list[str]) -> np.ndarray:
        rows = []
        for t in tokens:
            seed = int.from_bytes(hashlib.sha256(t.encode("utf-8")).digest()[:8], "little")
            rows.append(np.random.default_rng(seed).standard_normal(self.dim))
        return np.array(rows).reshape(len(tokens), self.dim)


class LMEncoder:
    """Final residual-stream states of a toy LM over the token sequence."""

    def __init__(self, params, vocab):
        self.params = params
        self.vocab = vocab

    def __call__(self, tokens: list[str]) -> np.ndarray:
        import torch

        from .lm_core import hidden_states

        ids = [self.vocab.index.get(t, self.vocab.unk) for t in tokens]
        if not ids:
            return np.zeros((0, self.params.d))
        with torch.no_grad():
            return hidden_states(self.params, ids).numpy()


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def embed_sentence(pred: str, refs: Sequence[str], encoder: Encoder) -> float:
    p = tokens_of(pred)
    if not p:
        return 0.0
    pv = _unit(encoder(p))
    best = 0.0
    for ref in refs:
        r = tokens_of(ref)
        if not r:
            continue
        sim = pv @ _unit(encoder(r)).T
        prec = sim.max(axis=1).mean()
        rec = sim.max(axis=0).mean()
        if prec + rec > 0:
            best = max(best, float(2 * prec * rec / (prec + rec)))
    return best


def embed_score(
    predictions: Sequence[str],
    references: Sequence[Sequence[str]],
    encoder: Encoder | None = None,
) -> float:
    _check(predictions, references)
    if not predictions:
        return 0.0
    encoder = encoder or HashingEncoder()
    scores = [embed_sentence(p, r, encoder) for p, r in zip(predictions, references)]
    return 100 * min(1.0, max(0.0, sum(scores) / len(scores)))


# --- report --------------------------------------------------------------------

@dataclass
class MetricsReport:
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    embed_score: float
    n_instances: int

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = ("bleu4", "meteor", "rouge_l", "cider", "embed_score")


def evaluate_corpus(predictions: Sequence[str], instances, encoder: Encoder | None = None) -> MetricsReport:
    """Score predictions against the gold hypotheses of the matching instances."""
    if len(predictions) != len(instances):
        raise InputError(f"{len(predictions)} predictions for {len(instances)} instances")
    refs = [list(inst.gold_hyps) for inst in instances]
    return MetricsReport(
        bleu4=bleu4(predictions, refs),
        meteor=meteor_simple(predictions, refs),
        rouge_l=rouge_l(predictions, refs),
        cider=cider(predictions, refs),
        embed_score=embed_score(predictions, refs, encoder),
        n_instances=len(predictions),
    )


def sentence_scores(metric: str, predictions: Sequence[str], references, encoder: Encoder | None = None) -> list[float]:
    """Per-instance scores on the same scale as the corpus metric (used to rank failures)."""
    if metric == "rouge_l":
        return [100 * rouge_l_sentence(p, r) for p, r in zip(predictions, references)]
    if metric == "meteor":
        return [100 * meteor_sentence(p, r) for p, r in zip(predictions, references)]
    if metric == "bleu4":
        return [bleu4([p], [r]) for p, r in zip(predictions, references)]
    if metric == "cider":
        scorer = CiderD(references)
        return [scorer.sentence(p, r) for p, r in zip(predictions, references)]
    if metric == "embed_score":
        enc = encoder or HashingEncoder()
        return [100 * embed_sentence(p, r, enc) for p, r in zip(predictions, references)]
    raise InputError(f"unknown metric {metric!r}")
