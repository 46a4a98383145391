"""Exhaustive search over short hypotheses, for auditing the gradient-based decoders."""
from __future__ import annotations

import itertools
from typing import Sequence

import torch

from .errors import BudgetError, InputError
from .lm_core import TransformerLM, log_prob

MAX_CANDIDATES = 10**6
_CHUNK = 2048


def objective(params: TransformerLM, h: Sequence[int], o1: Sequence[int], o2: Sequence[int]) -> float:
    """log P(h | o1) + log P(o2 | o1, h)."""
    with torch.no_grad():
        value = log_prob(params, list(h), list(o1)).item()
        if len(o2):
            value += log_prob(params, list(o2), list(o1) + list(h)).item()
    return value


def _score_length(params, o1, o2, subset, length) -> tuple[list[tuple[int, ...]], torch.Tensor]:
    cands = list(itertools.product(subset, repeat=length))
    o1, o2 = list(o1), list(o2)
    start = len(o1) - 1
    scores = []
    with torch.no_grad():
        for i in range(0, len(cands), _CHUNK):
            h = torch.as_tensor(cands[i:i + _CHUNK], dtype=torch.long)
            B = h.shape[0]
            full = torch.cat([
                torch.as_tensor(o1, dtype=torch.long).expand(B, -1),
                h,
                torch.as_tensor(o2, dtype=torch.long).expand(B, -1),
            ], dim=1)
            logp = torch.log_softmax(params(params.tok_emb[full[:, :-1]]), dim=-1)
            targets = full[:, start + 1:]
            picked = logp[:, start:].gather(2, targets[..., None])[..., 0]
            scores.append(picked.sum(dim=1))
    return cands, torch.cat(scores)


def brute_force_best(
    params: TransformerLM,
    o1: Sequence[int],
    o2: Sequence[int],
    max_len: int,
    vocab_subset: Sequence[int],
) -> tuple[list[int], float]:
    """Best hypothesis over `vocab_subset` with length 1..max_len.

    Ties go to the lexicographically smallest token-id tuple.
    """
    subset = sorted(set(int(v) for v in vocab_subset))
    if not subset or max_len < 1:
        raise InputError("need a nonempty vocabulary subset and max_len >= 1")
    if not o1:
        raise InputError("past observation prefix must be nonempty")
    needed = len(subset) ** max_len
    if needed > MAX_CANDIDATES:
        raise BudgetError(
            f"enumeration needs {len(subset)}^{max_len} = {needed} sequences, budget is {MAX_CANDIDATES}"
        )
    best: tuple[int, ...] | None = None
    best_score = float("-inf")
    for length in range(1, max_len + 1):
        cands, scores = _score_length(params, o1, o2, subset, length)
        top = scores.max().item()
        if top < best_score:
            continue
        for j in torch.nonzero(scores == top).flatten().tolist():
            c = cands[j]
            if top > best_score or c < best:
                best, best_score = c, top
    return list(best), best_score


def count_candidates(subset_size: int, max_len: int) -> int:
    return sum(subset_size**L for L in range(1, max_len + 1))
