"""Toy decoder-only transformer with hard and soft (probability-mixture) inputs.

Everything runs in float64 so that finite-difference checks are meaningful.
The output projection is tied to the token embedding and scaled by the gain of
the final layer norm, which starts at zero: a freshly initialized model
therefore predicts the uniform distribution over the vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, InputError, LengthError

DTYPE = torch.float64
PARAMS_VERSION = "toylm-1"
INIT_STD = 0.02
SIMPLEX_TOL = 1e-4

TokenSequence = Sequence[int]
# a conditioning segment is either hard token ids or a (T, V) soft sequence
Segment = Union[TokenSequence, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_len: int = 128

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 16:
            raise ConfigError(f"vocabulary too small: {self.vocab_size} < 16")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1_g = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.qkv_w = nn.Parameter(torch.zeros(d, 3 * d, dtype=DTYPE))
        self.qkv_b = nn.Parameter(torch.zeros(3 * d, dtype=DTYPE))
        self.proj_w = nn.Parameter(torch.zeros(d, d, dtype=DTYPE))
        self.proj_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ln2_g = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ff_in_w = nn.Parameter(torch.zeros(d, d_ff, dtype=DTYPE))
        self.ff_in_b = nn.Parameter(torch.zeros(d_ff, dtype=DTYPE))
        self.ff_out_w = nn.Parameter(torch.zeros(d_ff, d, dtype=DTYPE))
        self.ff_out_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        *lead, T, d = x.shape
        h = F.layer_norm(x, (d,), self.ln1_g, self.ln1_b)
        q, k, v = (h @ self.qkv_w + self.qkv_b).split(d, dim=-1)
        dh = d // self.n_heads

        def heads(t: Tensor) -> Tensor:
            return t.reshape(*lead, T, self.n_heads, dh).transpose(-3, -2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(-3, -2).reshape(*lead, T, d)
        x = x + att @ self.proj_w + self.proj_b
        h = F.layer_norm(x, (d,), self.ln2_g, self.ln2_b)
        x = x + F.gelu(h @ self.ff_in_w + self.ff_in_b) @ self.ff_out_w + self.ff_out_b
        return x


class TransformerLM(nn.Module):
    """Parameter container and batched forward pass over input embeddings."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.version = PARAMS_VERSION
        V, d = config.vocab_size, config.d_model
        self.tok_emb = nn.Parameter(torch.zeros(V, d, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len, d, dtype=DTYPE))
        self.blocks = nn.ModuleList(
            Block(d, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        self.lnf_g = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.lnf_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    @property
    def d(self) -> int:
        return self.config.d_model

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def hidden(self, embeds: Tensor) -> Tensor:
        """Residual stream after the last block; `embeds` is (..., T, d) without positions."""
        T = embeds.shape[-2]
        if T > self.config.max_len:
            raise LengthError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        x = embeds + self.pos_emb[:T]
        for block in self.blocks:
            x = block(x)
        return x

    def logits_from_hidden(self, x: Tensor) -> Tensor:
        h = F.layer_norm(x, (self.d,), self.lnf_g, self.lnf_b)
        return h @ self.tok_emb.T

    def forward(self, embeds: Tensor) -> Tensor:
        return self.logits_from_hidden(self.hidden(embeds))


LMParameters = TransformerLM


def init_params(config: ModelConfig, seed: int) -> TransformerLM:
    """Weights ~ N(0, 0.02); biases, final-norm gain and bias zero; other norm gains one."""
    params = TransformerLM(config, seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in params.named_parameters():
            if name in ("tok_emb", "pos_emb") or name.endswith("_w"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * INIT_STD)
    return params


def zero_weight_params(config: ModelConfig, seed: int = 0) -> TransformerLM:
    """Initialized embeddings, every block weight and the output gain zeroed.

    Blocks then act as the identity on the residual stream and all logits are 0.
    """
    params = init_params(config, seed)
    with torch.no_grad():
        for name, p in params.named_parameters():
            if name not in ("tok_emb", "pos_emb"):
                p.zero_()
    return params


def check_finite(params: TransformerLM) -> None:
    for name, p in params.named_parameters():
        if not torch.isfinite(p).all():
            raise InputError(f"parameter {name} has non-finite values")


def one_hot(ids: TokenSequence, vocab_size: int) -> Tensor:
    ids = torch.as_tensor(list(ids), dtype=torch.long)
    return F.one_hot(ids, vocab_size).to(DTYPE)


def uniform_soft(length: int, vocab_size: int) -> Tensor:
    return torch.full((length, vocab_size), 1.0 / vocab_size, dtype=DTYPE)


def check_simplex(p: Tensor, vocab_size: int, tol: float = SIMPLEX_TOL) -> None:
    if p.dim() != 2 or p.shape[1] != vocab_size:
        raise InputError(f"soft sequence must have shape (T, {vocab_size}), got {tuple(p.shape)}")
    q = p.detach()
    if not torch.isfinite(q).all():
        raise InputError("soft sequence has non-finite entries")
    if (q < -tol).any() or (q > 1 + tol).any():
        raise InputError("soft sequence entries outside [0, 1]")
    err = (q.sum(dim=1) - 1).abs().max().item() if len(q) else 0.0
    if err > tol:
        raise InputError(f"soft sequence rows do not sum to 1 (max error {err:.2e})")


def _check_ids(ids: TokenSequence, vocab_size: int) -> None:
    for i in ids:
        if not 0 <= int(i) < vocab_size:
            raise InputError(f"token id {i} outside vocabulary of size {vocab_size}")


def embed_segments(params: TransformerLM, segments: Sequence[Segment], check: bool = True) -> Tensor:
    """Concatenate embeddings of hard segments (rows of the table) and soft ones (mixtures)."""
    parts = []
    for seg in segments:
        if isinstance(seg, Tensor) and seg.dim() == 2:
            if check:
                check_simplex(seg, params.vocab_size)
            parts.append(seg.to(DTYPE) @ params.tok_emb)
        else:
            ids = [int(i) for i in seg]
            if check:
                _check_ids(ids, params.vocab_size)
            parts.append(params.tok_emb[torch.as_tensor(ids, dtype=torch.long)])
    if not parts:
        return params.tok_emb.new_zeros(0, params.d)
    return torch.cat(parts, dim=0)


def forward_segments(
    params: TransformerLM,
    segments: Sequence[Segment],
    extra_embeddings: Tensor | None = None,
    check: bool = True,
) -> Tensor:
    """Logits (T, V) for the concatenated segments; extra embeddings rows are not returned."""
    x = embed_segments(params, segments, check=check)
    n_extra = 0
    if extra_embeddings is not None:
        extra = torch.as_tensor(extra_embeddings, dtype=DTYPE)
        if extra.dim() != 2 or extra.shape[1] != params.d:
            raise InputError(f"extra embeddings must be (k, {params.d})")
        n_extra = extra.shape[0]
        x = torch.cat([extra, x], dim=0)
    if x.shape[0] > params.config.max_len:
        raise LengthError(f"input length {x.shape[0]} exceeds max_len {params.config.max_len}")
    return params(x)[n_extra:]


def forward_logits(
    params: TransformerLM,
    prefix: TokenSequence,
    extra_embeddings: Tensor | None = None,
) -> Tensor:
    """Row t holds the next-token logits after prefix position t.

    Extra embeddings are prepended ahead of the tokens and occupy their own
    positional slots; their output rows are dropped.
    """
    if len(prefix) == 0:
        raise InputError("prefix must be nonempty")
    return forward_segments(params, [list(prefix)], extra_embeddings)


def forward_soft(
    params: TransformerLM,
    soft_prefix: Tensor,
    hard_prefix: TokenSequence | None = None,
    hard_suffix: TokenSequence | None = None,
) -> Tensor:
    """Logits for `hard_prefix + soft_prefix + hard_suffix`; differentiable w.r.t. `soft_prefix`."""
    segments: list[Segment] = []
    if hard_prefix:
        segments.append(list(hard_prefix))
    segments.append(soft_prefix)
    if hard_suffix:
        segments.append(list(hard_suffix))
    return forward_segments(params, segments)


def _as_segments(conditioning) -> list[Segment]:
    if isinstance(conditioning, Tensor):
        return [conditioning] if conditioning.dim() == 2 else [conditioning.tolist()]
    conditioning = list(conditioning)
    if conditioning and all(isinstance(c, (int,)) or (isinstance(c, Tensor) and c.dim() == 0)
                            for c in conditioning):
        return [[int(c) for c in conditioning]]
    return conditioning


def log_prob(
    params: TransformerLM,
    target: TokenSequence,
    conditioning,
    extra_embeddings: Tensor | None = None,
) -> Tensor:
    """Sum of log P(target_t | conditioning, target_<t) in nats, as a 0-d tensor.

    `conditioning` may be token ids, a soft sequence, or a list of such segments.
    """
    target = [int(t) for t in target]
    if not target:
        raise InputError("target must be nonempty")
    segments = _as_segments(conditioning)
    n_cond = sum(len(s) for s in segments)
    if n_cond == 0:
        raise InputError("conditioning must be nonempty")
    logits = forward_segments(params, segments + [target[:-1]], extra_embeddings)
    logp = torch.log_softmax(logits[n_cond - 1:], dim=-1)
    idx = torch.as_tensor(target, dtype=torch.long)
    return logp.gather(1, idx[:, None]).sum()


def hidden_states(params: TransformerLM, ids: TokenSequence) -> Tensor:
    """Final residual-stream states (T, d) for a token sequence."""
    return params.hidden(embed_segments(params, [list(ids)]))


def clone_params(params: TransformerLM) -> TransformerLM:
    out = TransformerLM(params.config, params.seed)
    out.load_state_dict(params.state_dict())
    out.version = params.version
    return out
