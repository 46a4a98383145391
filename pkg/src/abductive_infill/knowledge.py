"""Rule-table stand-in for a commonsense inference model.

A provider maps (observation, relation) to an inference text and to a vector
in the language model's embedding space. `bundle` assembles the eighteen
entries (nine relations for each of the two observations) used as extra
conditioning.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

import torch
from torch import Tensor

from .errors import InputError, ParseError
from .lm_core import TransformerLM, hidden_states

RELATIONS = (
    "oEffect", "oReact", "oWant", "xAttr", "xEffect", "xIntent", "xNeed", "xReact", "xWant",
)
SLOTS = ("o1", "o2")
RULE_TABLE_VERSION = 1
BUNDLE_SIZE = len(SLOTS) * len(RELATIONS)


@dataclass(frozen=True)
class KnowledgeEntry:
    slot: str
    relation: str
    text: str
    vector: Tensor | None


@dataclass(frozen=True)
class KnowledgeBundle:
    entries: tuple[KnowledgeEntry, ...]
    provider: str

    def __len__(self) -> int:
        return len(self.entries)

    def vectors(self) -> Tensor:
        if any(e.vector is None for e in self.entries):
            raise InputError("bundle was built without vectors")
        return torch.stack([e.vector for e in self.entries])

    def texts(self) -> list[str]:
        return [e.text for e in self.entries]


class KnowledgeProvider(Protocol):
    name: str

    def infer_text(self, observation: str, relation: str) -> str: ...

    def infer_embedding(self, observation: str, relation: str, params: TransformerLM, vocab) -> Tensor: ...


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def load_rule_table(path: str | Path | None = None) -> list[tuple[str, re.Pattern, str]]:
    if path is None:
        text = resources.files(__package__).joinpath("resources/knowledge_rules.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected relation<TAB>pattern<TAB>template", line_no)
        rel, pattern, template = parts
        if rel not in RELATIONS:
            raise ParseError(f"unknown relation {rel!r}", line_no)
        rows.append((rel, re.compile(pattern), template))
    return rows


class RuleTableProvider:
    name = f"rule-table-v{RULE_TABLE_VERSION}"

    def __init__(self, path: str | Path | None = None):
        self.rules = load_rule_table(path)

    def infer_text(self, observation: str, relation: str) -> str:
        if relation not in RELATIONS:
            raise InputError(f"unknown relation {relation!r}")
        obs = _normalize(observation)
        if not obs:
            raise InputError("observation must be nonempty")
        for rel, pattern, template in self.rules:
            if rel != relation:
                continue
            m = pattern.search(obs)
            if m:
                out = _normalize(template.format(m.group(0), *m.groups()))
                if out:
                    return out
        return "person x wants something"

    def infer_embedding(self, observation: str, relation: str, params: TransformerLM, vocab) -> Tensor:
        """Mean of the final residual-stream states over the inference text."""
        ids = vocab.tokenize(self.infer_text(observation, relation)) or [vocab.unk]
        with torch.no_grad():
            return hidden_states(params, ids).mean(dim=0)


PROVIDERS = {"rules": RuleTableProvider}


def make_provider(name: str = "rules", **kwargs) -> KnowledgeProvider:
    try:
        return PROVIDERS[name](**kwargs)
    except KeyError:
        raise InputError(f"unknown knowledge provider {name!r}") from None


def bundle(
    o1: str,
    o2: str,
    provider: KnowledgeProvider,
    params: TransformerLM | None = None,
    vocab=None,
) -> KnowledgeBundle:
    """Eighteen entries, o1 relations first then o2, each in RELATIONS order.

    Vectors are computed only when `params` and `vocab` are given.
    """
    entries = []
    for slot, obs in zip(SLOTS, (o1, o2)):
        for rel in RELATIONS:
            text = provider.infer_text(obs, rel)
            vec = provider.infer_embedding(obs, rel, params, vocab) if params is not None else None
            entries.append(KnowledgeEntry(slot, rel, text, vec))
    return KnowledgeBundle(tuple(entries), provider.name)
