"""Decoder-vs-brute-force audit on tiny problems (restricted vocabulary, short hypotheses)."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..data import AbductiveInstance, Vocabulary, unsupervised_context
from ..decoding import DecodeConfig, decode_cold, decode_delorean, greedy_continuation, ranking_objective
from ..lm_core import TransformerLM
from ..oracle import brute_force_best

TOLERANCE = 1e-9


def oracle_audit(
    params: TransformerLM,
    vocab: Vocabulary,
    instances: Sequence[AbductiveInstance],
    dcfg: DecodeConfig,
    subset_size: int = 12,
    max_len: int = 3,
    seed: int = 0,
) -> dict:
    """Per instance: draw a word subset, run the greedy baseline, both unsupervised
    decoders and the brute-force oracle on it, and compare ranking objectives."""
    rng = np.random.default_rng(seed)
    rows = []
    for j, inst in enumerate(instances):
        subset = tuple(sorted(int(i) for i in rng.choice(vocab.word_ids, subset_size, replace=False)))
        cfg = dcfg.replace(max_len=max_len, allowed_ids=subset, seed=dcfg.seed + j)
        o1, o2 = unsupervised_context(inst, vocab)
        greedy = greedy_continuation(params, o1, max_len, subset)
        best, best_obj = brute_force_best(params, o1, o2, max_len, subset)
        d = decode_delorean(params, o1, o2, cfg, vocab)
        c = decode_cold(params, o1, o2, cfg, vocab)
        g_obj = ranking_objective(params, greedy, o1, o2)
        rows.append({
            "id": inst.id,
            "subset": list(subset),
            "greedy": {"text": vocab.detokenize(greedy), "objective": g_obj},
            "delorean": {"text": d.text, "objective": d.score},
            "cold": {"text": c.text, "objective": c.score},
            "oracle": {"text": vocab.detokenize(best), "objective": best_obj},
        })
    n = len(rows)

    def frac(pred) -> float:
        return sum(1 for r in rows if pred(r)) / n if n else 0.0

    summary = {
        "n": n,
        "subset_size": subset_size,
        "max_len": max_len,
        "delorean_ge_greedy": frac(lambda r: r["delorean"]["objective"] >= r["greedy"]["objective"] - TOLERANCE),
        "cold_ge_greedy": frac(lambda r: r["cold"]["objective"] >= r["greedy"]["objective"] - TOLERANCE),
        "delorean_le_oracle": frac(lambda r: r["delorean"]["objective"] <= r["oracle"]["objective"] + TOLERANCE),
        "cold_le_oracle": frac(lambda r: r["cold"]["objective"] <= r["oracle"]["objective"] + TOLERANCE),
    }
    return {"summary": summary, "instances": rows}
