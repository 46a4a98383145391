"""Instances, word-level vocabulary, input layout and JSONL I/O."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError, LengthError, ParseError
from .knowledge import RELATIONS

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
O1, O1_END, O2, O2_END = "<o1>", "</o1>", "<o2>", "</o2>"
REL_MARKERS = tuple(f"<rel:{r}>" for r in RELATIONS)
SPECIALS = (PAD, UNK, BOS, EOS, O1, O1_END, O2, O2_END) + REL_MARKERS

_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")
_CLOSING_PUNCT = set(".,!?;:")

# ART-style field names accepted on load
FIELD_ALIASES = {
    "story_id": "id",
    "observation_1": "obs1",
    "observation_2": "obs2",
    "hypothesis": "hyps",
}


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class AbductiveInstance:
    obs1: str
    obs2: str
    gold_hyps: tuple[str, ...] = ()
    id: str = ""

    def __post_init__(self):
        obs1 = " ".join(str(self.obs1).split())
        obs2 = " ".join(str(self.obs2).split())
        if not obs1 or not obs2:
            raise InputError(f"instance {self.id!r}: observations must be nonempty")
        object.__setattr__(self, "obs1", obs1)
        object.__setattr__(self, "obs2", obs2)
        object.__setattr__(self, "gold_hyps", tuple(" ".join(h.split()) for h in self.gold_hyps))
        object.__setattr__(self, "id", str(self.id))


class Vocabulary:
    """Dense word-level vocabulary: special tokens first, then sorted words."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise InputError("vocabulary must start with the special tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise InputError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(split_words(text))
        words -= set(SPECIALS)
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    pad = property(lambda self: self.index[PAD])
    unk = property(lambda self: self.index[UNK])
    bos = property(lambda self: self.index[BOS])
    eos = property(lambda self: self.index[EOS])
    o1 = property(lambda self: self.index[O1])
    o1_end = property(lambda self: self.index[O1_END])
    o2 = property(lambda self: self.index[O2])
    o2_end = property(lambda self: self.index[O2_END])

    def rel(self, relation: str) -> int:
        return self.index[f"<rel:{relation}>"]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIALS)))

    @property
    def word_ids(self) -> list[int]:
        return list(range(len(SPECIALS), len(self.tokens)))

    def tokenize(self, text: str) -> list[int]:
        unk = self.unk
        return [self.index.get(w, unk) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        for i in ids:
            tok = self.tokens[int(i)]
            if out and tok in _CLOSING_PUNCT:
                out[-1] += tok
            else:
                out.append(tok)
        return " ".join(out)

    def to_json(self) -> list[str]:
        return list(self.tokens)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class EncodedInstance:
    context: list[int]
    target: list[int]
    knowledge_text: list[int] = field(default_factory=list)
    m: int = 0
    n: int = 0

    @property
    def N(self) -> int:
        return len(self.target)

    @property
    def prefix(self) -> list[int]:
        return self.context + self.knowledge_text

    @property
    def ids(self) -> list[int]:
        return self.prefix + self.target

    def __len__(self) -> int:
        return len(self.ids)


def knowledge_tokens(vocab: Vocabulary, bundle) -> list[int]:
    ids: list[int] = []
    for entry in bundle.entries:
        ids.append(vocab.rel(entry.relation))
        ids.extend(vocab.tokenize(entry.text))
    return ids


def encode_instance(
    inst: AbductiveInstance,
    vocab: Vocabulary,
    variant: str = "base",
    knowledge=None,
    max_len: int | None = None,
    extra_slots: int = 0,
    hypothesis: str | None = None,
    with_target: bool = True,
) -> EncodedInstance:
    """Lay out `<bos> <o1> o1 </o1> <o2> o2 </o2> [knowledge] hypothesis <eos>`.

    The hypothesis defaults to the first gold reference; with no references,
    or with ``with_target=False`` (decode time), the target is empty.
    `extra_slots` counts prepended embedding positions toward `max_len`.
    Knowledge text is truncated from the end before a LengthError is raised.
    """
    if variant not in ("base", "knowledge_text", "knowledge_emb"):
        raise InputError(f"unknown variant {variant!r}")
    o1 = vocab.tokenize(inst.obs1)
    o2 = vocab.tokenize(inst.obs2)
    context = [vocab.bos, vocab.o1, *o1, vocab.o1_end, vocab.o2, *o2, vocab.o2_end]
    if hypothesis is None and inst.gold_hyps:
        hypothesis = inst.gold_hyps[0]
    target = []
    if with_target and hypothesis is not None:
        target = vocab.tokenize(hypothesis) + [vocab.eos]
    ktext: list[int] = []
    if variant == "knowledge_text":
        if knowledge is None:
            raise InputError("knowledge_text variant requires a knowledge bundle")
        ktext = knowledge_tokens(vocab, knowledge)
    enc = EncodedInstance(context, target, ktext, m=len(o1), n=len(o2))
    if max_len is not None:
        over = extra_slots + len(enc) - max_len
        if over > 0 and ktext:
            enc.knowledge_text = ktext[: max(0, len(ktext) - over)]
            over = extra_slots + len(enc) - max_len
        if over > 0:
            raise LengthError(
                f"instance {inst.id!r}: encoded length {extra_slots + len(enc)} exceeds max_len {max_len}"
            )
    return enc


def unsupervised_context(inst: AbductiveInstance, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """(`<bos>` + past observation, future observation) in plain-text layout for unsupervised decoders."""
    return [vocab.bos, *vocab.tokenize(inst.obs1)], vocab.tokenize(inst.obs2)


def _parse_record(obj: dict, line_no: int) -> AbductiveInstance:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line_no)
    rec = {FIELD_ALIASES.get(k, k): v for k, v in obj.items()}
    hyps = rec.get("hyps")
    if hyps is None and "hyp1" in rec:
        # ART layout: label 2 marks hyp2 as the plausible hypothesis
        key = "hyp2" if str(rec.get("label")) == "2" and "hyp2" in rec else "hyp1"
        hyps = [rec[key]]
    if isinstance(hyps, str):
        hyps = [hyps]
    for name in ("obs1", "obs2"):
        if not isinstance(rec.get(name), str):
            raise ParseError(f"missing or non-string field {name!r}", line_no)
    if hyps is not None and not (isinstance(hyps, list) and all(isinstance(h, str) for h in hyps)):
        raise ParseError("field 'hyps' must be a list of strings", line_no)
    try:
        return AbductiveInstance(
            rec["obs1"], rec["obs2"], tuple(hyps or ()), str(rec.get("id", line_no - 1))
        )
    except InputError as exc:
        raise ParseError(str(exc), line_no) from exc


def load_jsonl(path: str | Path) -> list[AbductiveInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", line_no) from exc
            out.append(_parse_record(obj, line_no))
    return out


def instance_record(inst: AbductiveInstance) -> dict:
    return {"id": inst.id, "obs1": inst.obs1, "obs2": inst.obs2, "hyps": list(inst.gold_hyps)}


def save_jsonl(instances: Iterable[AbductiveInstance], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_record(inst), ensure_ascii=False) + "\n")
    return path


def save_vocab(vocab: Vocabulary, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(vocab.to_json(), indent=0) + "\n", encoding="utf-8")
    return path


def load_vocab(path: str | Path) -> Vocabulary:
    return Vocabulary(json.loads(Path(path).read_text(encoding="utf-8")))
