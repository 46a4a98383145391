"""Glue between the core modules: vocabularies, corpora, training and decoding by config."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import torch

from .. import config as cfgmod
from ..checkpoint import load_checkpoint
from ..data import (
    AbductiveInstance,
    Vocabulary,
    encode_instance,
    load_jsonl,
    load_vocab,
    save_jsonl,
    save_vocab,
    unsupervised_context,
)
from ..decoding import (
    STANDARD_STRATEGIES,
    DecodeConfig,
    DecodeResult,
    decode_cold,
    decode_delorean,
    decode_standard,
)
from ..errors import ConfigError
from ..knowledge import BUNDLE_SIZE, RELATIONS, KnowledgeProvider, bundle, make_provider
from ..lm_core import ModelConfig, TransformerLM, init_params
from ..metrics import HashingEncoder, LMEncoder
from ..synth import synth_corpus, world_texts
from ..training import TrainConfig, TrainResult, knowledge_encoder, train

SPLITS = ("train", "dev", "test")


def provider_from_config(cfg: dict) -> KnowledgeProvider:
    k = cfgmod.section(cfg, "knowledge")
    kwargs = {"path": k["rules"]} if k.get("rules") else {}
    return make_provider(k.get("provider", "rules"), **kwargs)


def build_vocab(texts: Sequence[str], provider: KnowledgeProvider | None = None) -> Vocabulary:
    """Closed vocabulary over `texts` plus every knowledge inference about them."""
    texts = list(texts)
    extra = []
    if provider is not None:
        extra = sorted({provider.infer_text(t, r) for t in texts for r in RELATIONS})
    return Vocabulary.build(texts + extra)


def instance_texts(instances: Sequence[AbductiveInstance]) -> list[str]:
    out = []
    for inst in instances:
        out.extend([inst.obs1, inst.obs2, *inst.gold_hyps])
    return out


def synth_to_dir(seed: int, size: int, out: str | Path, provider: KnowledgeProvider | None = None) -> dict[str, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    splits = synth_corpus(seed, size)
    paths = {name: save_jsonl(insts, out / f"{name}.jsonl") for name, insts in zip(SPLITS, splits)}
    obs = world_texts()
    paths["vocab"] = save_vocab(build_vocab(obs, provider), out / "vocab.json")
    return paths


def load_split(data_dir: str | Path, split: str) -> list[AbductiveInstance]:
    path = Path(data_dir) / f"{split}.jsonl"
    return load_jsonl(path) if path.exists() else []


def vocab_for(data_dir: str | Path, provider: KnowledgeProvider | None = None) -> Vocabulary:
    data_dir = Path(data_dir)
    if (data_dir / "vocab.json").exists():
        return load_vocab(data_dir / "vocab.json")
    texts = []
    for split in SPLITS:
        texts.extend(instance_texts(load_split(data_dir, split)))
    return build_vocab(texts, provider)


def model_config(cfg: dict, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), **cfgmod.section(cfg, "model"))


def train_from_config(
    cfg: dict,
    data_dir: str | Path,
    out_dir: str | Path,
    variant: str | None = None,
) -> TrainResult:
    tcfg = dict(cfgmod.section(cfg, "train"))
    if variant is not None:
        tcfg["variant"] = variant
    train_cfg = TrainConfig.from_dict(tcfg)
    provider = provider_from_config(cfg)
    vocab = vocab_for(data_dir, provider)
    torch.set_num_threads(1)
    return train(
        train_cfg,
        model_config(cfg, vocab),
        vocab,
        load_split(data_dir, "train"),
        load_split(data_dir, "dev"),
        provider=provider,
        encoder_seed=cfg.get("knowledge.encoder_seed", 0),
        out_dir=out_dir,
    )


class LoadedModel:
    """A checkpoint with its vocabulary, variant and (for knowledge_emb) frozen encoder."""

    def __init__(self, path: str | Path, cfg: dict | None = None):
        self.path = Path(path)
        self.params, self.meta = load_checkpoint(path)
        self.vocab = Vocabulary(self.meta["vocab"])
        self.variant = self.meta.get("variant", "base")
        self.cfg = cfg or cfgmod.load_defaults()
        self.provider = provider_from_config(self.cfg)
        self._encoder: TransformerLM | None = None

    @property
    def encoder(self) -> TransformerLM:
        if self._encoder is None:
            self._encoder = knowledge_encoder(self.params.config, self.meta.get("knowledge_encoder_seed", 0))
        return self._encoder

    def decode(self, inst: AbductiveInstance, dcfg: DecodeConfig) -> DecodeResult:
        return decode_one(self.params, self.vocab, inst, dcfg, self.variant, self.provider,
                          self.encoder if self.variant == "knowledge_emb" else None)


def decode_one(
    params: TransformerLM,
    vocab: Vocabulary,
    inst: AbductiveInstance,
    dcfg: DecodeConfig,
    variant: str = "base",
    provider: KnowledgeProvider | None = None,
    encoder: TransformerLM | None = None,
) -> DecodeResult:
    """Decode one instance with the layout its model variant was trained on.

    Standard strategies on a ``story`` model, and the unsupervised decoders on
    any model, see only ``<bos>`` + past observation as the prefix. Those paths
    emit a fixed-length span, so they are limited to word tokens unless the
    config already restricts the vocabulary.
    """
    if dcfg.strategy in STANDARD_STRATEGIES and variant != "story":
        kb = None
        if variant in ("knowledge_text", "knowledge_emb"):
            if provider is None:
                raise ConfigError(f"variant {variant!r} needs a knowledge provider")
            kb = bundle(inst.obs1, inst.obs2, provider, encoder if variant == "knowledge_emb" else None, vocab)
        enc_variant = "knowledge_text" if variant == "knowledge_text" else "base"
        extra_slots = BUNDLE_SIZE if variant == "knowledge_emb" else 0
        enc = encode_instance(inst, vocab, enc_variant, kb, params.config.max_len - dcfg.max_len,
                              extra_slots, with_target=False)
        extra = kb.vectors() if variant == "knowledge_emb" else None
        return decode_standard(params, enc.prefix, dcfg, vocab, extra)
    o1, o2 = unsupervised_context(inst, vocab)
    if dcfg.allowed_ids is None:
        dcfg = dcfg.replace(allowed_ids=tuple(vocab.word_ids))
    if dcfg.strategy in STANDARD_STRATEGIES:
        return decode_standard(params, o1, dcfg, vocab)
    if dcfg.strategy == "delorean":
        return decode_delorean(params, o1, o2, dcfg, vocab)
    return decode_cold(params, o1, o2, dcfg, vocab)


def decode_config(cfg: dict, **overrides) -> DecodeConfig:
    d = dict(cfgmod.section(cfg, "decode"))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return DecodeConfig.from_dict(d)


def eval_encoder(cfg: dict, vocab: Vocabulary | None) -> Callable:
    """Embedding-score encoder shared by every run: a fixed toy LM initialized from `eval.encoder_seed`."""
    if vocab is None:
        return HashingEncoder()
    return LMEncoder(init_params(model_config(cfg, vocab), cfg.get("eval.encoder_seed", 0)), vocab)


def prediction_record(inst_id: str, result: DecodeResult, label: str, variant: str) -> dict:
    return {"id": inst_id, "hypothesis": result.text, "score": result.score,
            "strategy": label, "variant": variant}


def read_predictions(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
