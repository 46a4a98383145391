import itertools
import math

import pytest

from abductive_infill.errors import BudgetError
from abductive_infill.lm_core import init_params, log_prob
from abductive_infill.oracle import brute_force_best, count_candidates, objective
from conftest import randomize, small_config

V = 20
O1, O2 = [2, 5, 7], [9, 4]


def model(seed):
    return randomize(init_params(small_config(V), 0), seed)


def test_objective_on_zero_model(zero_lm):
    assert objective(zero_lm, [4, 5], O1, [9, 4, 6]) == pytest.approx(-5 * math.log(V), abs=1e-12)


def test_objective_is_two_log_probs():
    m = model(1)
    h = [3, 8]
    expected = log_prob(m, h, O1).item() + log_prob(m, O2, O1 + h).item()
    assert objective(m, h, O1, O2) == pytest.approx(expected, abs=1e-9)


def test_appending_lowers_first_term():
    m = model(2)
    assert log_prob(m, [3, 8, 1], O1).item() < log_prob(m, [3, 8], O1).item()


def test_single_token_subset_has_two_candidates():
    m = model(3)
    assert count_candidates(1, 2) == 2
    best, score = brute_force_best(m, O1, O2, 2, [11])
    cands = {(11,): objective(m, [11], O1, O2), (11, 11): objective(m, [11, 11], O1, O2)}
    want = max(cands, key=cands.get)
    assert tuple(best) == want and score == pytest.approx(cands[want], abs=1e-9)


def test_zero_model_tie_rule(zero_lm):
    best, score = brute_force_best(zero_lm, O1, O2, 3, [14, 9, 12])
    # every length-L candidate scores -(L + |o2|) ln V, so length 1 wins; ties go to the smallest id
    assert best == [9]
    assert score == pytest.approx(-3 * math.log(V), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_matches_naive_enumeration(seed):
    m = model(seed)
    subset = [4, 10, 13, 17]
    cands = [list(c) for L in (1, 2) for c in itertools.product(subset, repeat=L)]
    scores = [objective(m, c, O1, O2) for c in cands]
    top = max(scores)
    naive = min(tuple(c) for c, s in zip(cands, scores) if s >= top - 1e-12)
    best, score = brute_force_best(m, O1, O2, 2, list(reversed(subset)))
    assert tuple(best) == naive and score == pytest.approx(top, abs=1e-9)


def test_budget_guard():
    with pytest.raises(BudgetError, match="1000000"):
        brute_force_best(model(1), O1, O2, 7, list(range(8)))
