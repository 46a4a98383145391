"""Supervised fine-tuning: masked negative log-likelihood and the SGD loop.

Variants:

- ``base``: condition on both observations, predict hypothesis + ``<eos>``.
- ``knowledge_text``: as base, with the rendered knowledge bundle between the
  observations and the hypothesis.
- ``knowledge_emb``: as base, with the eighteen bundle vectors prepended as
  extra input embeddings.
- ``story``: plain language modelling over ``<bos> obs1 obs2 <eos>`` with every
  position in the loss. Hypotheses are never seen; this is the LM the
  unsupervised decoders run on.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .data import AbductiveInstance, EncodedInstance, Vocabulary, encode_instance
from .errors import ConfigError, DivergenceError, InputError
from .knowledge import BUNDLE_SIZE, KnowledgeBundle, KnowledgeProvider, bundle
from .lm_core import DTYPE, ModelConfig, TransformerLM, clone_params, forward_segments, init_params

log = logging.getLogger(__name__)

VARIANTS = ("base", "knowledge_text", "knowledge_emb", "story")
KNOWLEDGE_VARIANTS = ("knowledge_text", "knowledge_emb")


@dataclass(frozen=True)
class TrainConfig:
    variant: str
    lr: float
    momentum: float
    batch_size: int
    epochs: int
    clip_norm: float
    seed: int
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lr < 0 or self.momentum < 0 or self.clip_norm <= 0:
            raise ConfigError("train.lr and train.momentum must be >= 0 and train.clip_norm > 0")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("train.batch_size must be positive and train.epochs nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = cls.__dataclass_fields__
        cfg = cls(**{k: v for k, v in d.items() if k in names})
        cfg.validate()
        return cfg


@dataclass
class Example:
    """One training sequence: input ids, loss mask over next-token labels, optional extra embeddings."""

    ids: list[int]
    loss_from: int
    extra: Tensor | None = None

    @property
    def n_targets(self) -> int:
        return len(self.ids) - self.loss_from


@dataclass
class TrainResult:
    params: TransformerLM
    curve: list[tuple[int, str, float]]
    checkpoints: list[Path] = field(default_factory=list)


def knowledge_encoder(config: ModelConfig, seed: int) -> TransformerLM:
    """Frozen encoder used for bundle vectors; a deterministic function of (config, seed)."""
    return init_params(config, seed)


def make_example(
    inst: AbductiveInstance,
    vocab: Vocabulary,
    variant: str,
    max_len: int,
    knowledge: KnowledgeBundle | None = None,
) -> Example:
    if variant == "story":
        ids = [vocab.bos, *vocab.tokenize(inst.obs1), *vocab.tokenize(inst.obs2), vocab.eos]
        if len(ids) > max_len:
            raise InputError(f"instance {inst.id!r} too long for max_len {max_len}")
        return Example(ids, 1)
    if variant in KNOWLEDGE_VARIANTS and knowledge is None:
        raise ConfigError(f"variant {variant!r} requires a knowledge bundle")
    extra_slots = BUNDLE_SIZE if variant == "knowledge_emb" else 0
    enc_variant = "knowledge_text" if variant == "knowledge_text" else "base"
    enc = encode_instance(inst, vocab, enc_variant, knowledge, max_len, extra_slots)
    if not enc.target:
        raise InputError(f"instance {inst.id!r} has no gold hypothesis")
    extra = knowledge.vectors() if variant == "knowledge_emb" else None
    if extra is not None and extra.shape[0] != BUNDLE_SIZE:
        raise InputError(f"expected {BUNDLE_SIZE} knowledge embeddings, got {extra.shape[0]}")
    return Example(enc.ids, len(enc.prefix), extra)


def nll_loss(
    params: TransformerLM,
    encoded: EncodedInstance,
    variant: str = "base",
    knowledge: KnowledgeBundle | None = None,
) -> Tensor:
    """-sum log P(target | prefix[, knowledge]) over hypothesis tokens and <eos> only."""
    if variant in KNOWLEDGE_VARIANTS and knowledge is None:
        raise ConfigError(f"variant {variant!r} requires a knowledge bundle")
    if not encoded.target:
        raise InputError("encoded instance has an empty target")
    extra = knowledge.vectors() if variant == "knowledge_emb" else None
    prefix, target = encoded.prefix, encoded.target
    logits = forward_segments(params, [prefix + target[:-1]], extra)
    logp = torch.log_softmax(logits[len(prefix) - 1:], dim=-1)
    return -logp.gather(1, torch.as_tensor(target)[:, None]).sum()


def loss_and_gradients(params, encoded, variant="base", knowledge=None) -> tuple[float, dict[str, Tensor]]:
    params.zero_grad()
    loss = nll_loss(params, encoded, variant, knowledge)
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in params.named_parameters()}
    params.zero_grad()
    return loss.item(), grads


def batch_loss(params: TransformerLM, batch: Sequence[Example], pad_id: int) -> tuple[Tensor, int]:
    """Summed masked NLL over a right-padded batch, and the number of scored tokens."""
    T = max(len(e.ids) for e in batch) - 1
    B = len(batch)
    inputs = torch.full((B, T), pad_id, dtype=torch.long)
    labels = torch.zeros((B, T), dtype=torch.long)
    mask = torch.zeros((B, T), dtype=DTYPE)
    for b, e in enumerate(batch):
        n = len(e.ids) - 1
        inputs[b, :n] = torch.as_tensor(e.ids[:-1])
        labels[b, :n] = torch.as_tensor(e.ids[1:])
        mask[b, e.loss_from - 1:n] = 1.0
    x = params.tok_emb[inputs]
    n_extra = 0
    if batch[0].extra is not None:
        extra = torch.stack([e.extra for e in batch]).to(DTYPE)
        n_extra = extra.shape[1]
        x = torch.cat([extra, x], dim=1)
    logits = params(x)[:, n_extra:]
    nll = -torch.log_softmax(logits, dim=-1).gather(2, labels[..., None])[..., 0]
    return (nll * mask).sum(), int(mask.sum().item())


def mean_token_loss(params: TransformerLM, examples: Sequence[Example], pad_id: int, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            loss, n = batch_loss(params, examples[i:i + batch_size], pad_id)
            total += loss.item()
            count += n
    return total / max(count, 1)


def build_examples(
    instances: Sequence[AbductiveInstance],
    vocab: Vocabulary,
    variant: str,
    max_len: int,
    provider: KnowledgeProvider | None = None,
    encoder: TransformerLM | None = None,
) -> list[Example]:
    out = []
    for inst in instances:
        kb = None
        if variant in KNOWLEDGE_VARIANTS:
            if provider is None:
                raise ConfigError(f"variant {variant!r} requires a knowledge provider")
            kb = bundle(inst.obs1, inst.obs2, provider, encoder if variant == "knowledge_emb" else None, vocab)
        out.append(make_example(inst, vocab, variant, max_len, kb))
    return out


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    vocab: Vocabulary,
    train_set: Sequence[AbductiveInstance],
    dev_set: Sequence[AbductiveInstance] = (),
    provider: KnowledgeProvider | None = None,
    encoder_seed: int = 0,
    out_dir: str | Path | None = None,
    init: TransformerLM | None = None,
    on_epoch: Callable[[int, TransformerLM], None] | None = None,
) -> TrainResult:
    """Teacher-forced SGD with momentum and gradient-norm clipping.

    Deterministic given the config seed. Epoch 0 in the curve is the loss of
    the initial parameters. Losses are mean NLL per scored token.
    """
    config.validate()
    if not train_set:
        raise InputError("training corpus is empty")
    if model_config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    torch.manual_seed(config.seed)
    params = clone_params(init) if init is not None else init_params(model_config, config.seed)
    encoder = knowledge_encoder(model_config, encoder_seed) if config.variant == "knowledge_emb" else None
    train_ex = build_examples(train_set, vocab, config.variant, model_config.max_len, provider, encoder)
    dev_ex = build_examples(dev_set, vocab, config.variant, model_config.max_len, provider, encoder)

    opt = torch.optim.SGD(params.parameters(), lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    extra_meta = {
        "vocab": vocab.to_json(),
        "variant": config.variant,
        "train_config": asdict(config),
        "knowledge_encoder_seed": encoder_seed,
    }

    curve = [(0, "train", mean_token_loss(params, train_ex, vocab.pad))]
    if dev_ex:
        curve.append((0, "dev", mean_token_loss(params, dev_ex, vocab.pad)))
    checkpoints: list[Path] = []
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        order = rng.permutation(len(train_ex))
        for start in range(0, len(order), config.batch_size):
            batch = [train_ex[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss_sum, n = batch_loss(params, batch, vocab.pad)
            loss = loss_sum / n
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params.parameters(), config.clip_norm)
            opt.step()
            total += loss_sum.item()
            count += n
        train_loss = total / count
        if not math.isfinite(train_loss):
            raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch)
        curve.append((epoch, "train", train_loss))
        if dev_ex:
            curve.append((epoch, "dev", mean_token_loss(params, dev_ex, vocab.pad)))
        log.info("epoch %d train %.4f%s", epoch, train_loss,
                 f" dev {curve[-1][2]:.4f}" if dev_ex else "")
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoints.append(save_checkpoint(
                params, out_dir / "checkpoints" / f"epoch_{epoch:03d}.npz", {**extra_meta, "epoch": epoch}))
        if on_epoch is not None:
            on_epoch(epoch, params)

    if out_dir is not None:
        checkpoints.append(save_checkpoint(params, out_dir / "model.npz", {**extra_meta, "epoch": config.epochs}))
        write_loss_curve(curve, out_dir / "loss_curve.csv")
    return TrainResult(params, curve, checkpoints)


def write_loss_curve(curve, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss"])
        for epoch, split, loss in curve:
            w.writerow([epoch, split, repr(loss)])
    return path
