import pytest
import torch

from abductive_infill.data import Vocabulary
from abductive_infill.errors import InputError, ParseError
from abductive_infill.knowledge import (
    BUNDLE_SIZE,
    RELATIONS,
    RuleTableProvider,
    bundle,
    load_rule_table,
    make_provider,
)
from abductive_infill.lm_core import init_params, zero_weight_params
from conftest import small_config

PROVIDER = RuleTableProvider()


def vocab_for(*texts):
    inferences = {PROVIDER.infer_text(t, r) for t in texts for r in RELATIONS}
    return Vocabulary.build(list(texts) + sorted(inferences))


def test_nine_relations_in_order():
    assert RELATIONS == ("oEffect", "oReact", "oWant", "xAttr", "xEffect", "xIntent", "xNeed", "xReact", "xWant")


def test_shipped_table_value():
    assert PROVIDER.infer_text("nikki wanted candy", "xWant") == "to get candy"


@pytest.mark.parametrize("text", ["nikki wanted candy", "zzz", "the race was canceled"])
def test_total_and_nonempty(text):
    for rel in RELATIONS:
        assert PROVIDER.infer_text(text, rel)


def test_fallback_when_nothing_matches(tmp_path):
    path = tmp_path / "rules.tsv"
    path.write_text("xWant\tcandy\tto get candy\n")
    p = RuleTableProvider(path)
    assert p.infer_text("sam ran", "xWant") == "person x wants something"


def test_deterministic():
    assert PROVIDER.infer_text("tom was sad", "xReact") == PROVIDER.infer_text("tom was sad", "xReact")


def test_unknown_relation_and_empty_observation():
    with pytest.raises(InputError):
        PROVIDER.infer_text("a", "xFoo")
    with pytest.raises(InputError):
        PROVIDER.infer_text("  ", "xWant")


def test_malformed_table(tmp_path):
    path = tmp_path / "rules.tsv"
    path.write_text("xWant\tonly two\n")
    with pytest.raises(ParseError, match="line 1"):
        load_rule_table(path)


def test_unknown_provider():
    with pytest.raises(InputError):
        make_provider("comet")


class TestEmbedding:
    def test_zero_weight_reduces_to_mean_of_raw_embeddings(self):
        vocab = vocab_for("nikki wanted candy")
        params = zero_weight_params(small_config(len(vocab)), 3)
        ids = vocab.tokenize("to get candy")
        expected = (params.tok_emb[ids] + params.pos_emb[: len(ids)]).mean(0)
        got = PROVIDER.infer_embedding("nikki wanted candy", "xWant", params, vocab)
        assert torch.allclose(got, expected, atol=1e-15)

    def test_relations_with_different_text_differ(self):
        vocab = vocab_for("nikki wanted candy")
        params = init_params(small_config(len(vocab)), 3)
        a = PROVIDER.infer_embedding("nikki wanted candy", "xWant", params, vocab)
        b = PROVIDER.infer_embedding("nikki wanted candy", "xIntent", params, vocab)
        assert PROVIDER.infer_text("nikki wanted candy", "xIntent") != "to get candy"
        assert not torch.allclose(a, b)

    def test_dimension_is_model_width(self):
        vocab = vocab_for("a b")
        params = init_params(small_config(len(vocab), d_model=12, n_heads=3), 0)
        assert PROVIDER.infer_embedding("a b", "oReact", params, vocab).shape == (12,)


class TestBundle:
    def test_eighteen_entries_o1_first(self):
        kb = bundle("nikki wanted candy", "nikki was sad", PROVIDER)
        assert len(kb.entries) == BUNDLE_SIZE == 18
        assert [e.slot for e in kb.entries] == ["o1"] * 9 + ["o2"] * 9
        assert [e.relation for e in kb.entries[:9]] == list(RELATIONS)
        assert kb.provider == PROVIDER.name

    def test_stable_across_calls(self):
        assert bundle("a b", "c d", PROVIDER).texts() == bundle("a b", "c d", PROVIDER).texts()

    def test_o1_entries_depend_only_on_o1(self):
        a = bundle("nikki wanted candy", "nikki was sad", PROVIDER).texts()
        b = bundle("nikki wanted candy", "the cake was great", PROVIDER).texts()
        assert a[:9] == b[:9] and a[9:] != b[9:]

    def test_vectors(self):
        vocab = vocab_for("nikki wanted candy", "nikki was sad")
        params = init_params(small_config(len(vocab)), 0)
        kb = bundle("nikki wanted candy", "nikki was sad", PROVIDER, params, vocab)
        v = kb.vectors()
        assert v.shape == (18, params.d) and torch.isfinite(v).all()
