"""Hypothesis decoders.

Supervised strategies (greedy, beam, top_p) read the full
``<o1> ... </o2>`` layout. The unsupervised decoders see only the past
observation as a prefix and use the future observation as a constraint:

* ``delorean`` alternates a backward pass (gradient of the future
  observation's cross-entropy w.r.t. the hypothesis logits) with a forward
  re-pass that mixes fresh LM logits into the updated ones.
* ``cold`` runs Langevin dynamics on a soft hypothesis under an energy made of
  a fluency term and a future-coherence term, projecting onto the simplex after
  every step, then discretizes with LM-guided top-k.

Ties are always broken towards the smallest token id.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, DivergenceError, InputError
from .lm_core import DTYPE, TransformerLM, check_simplex, forward_segments, log_prob

STRATEGIES = ("greedy", "beam", "top_p", "delorean", "cold")
STANDARD_STRATEGIES = ("greedy", "beam", "top_p")
MASK_VALUE = -1e4


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str
    temperature: float
    top_p: float
    beam_width: int
    max_len: int
    seed: int
    delorean_iterations: int
    delorean_step_size: float
    delorean_mix: float
    cold_iterations: int
    cold_step_size: float
    cold_noise_start: float
    cold_noise_end: float
    cold_fluency_weight: float
    cold_future_weight: float
    cold_topk: int
    cold_init: str = "uniform"
    # restrict every decoder to these token ids (used by the oracle audit)
    allowed_ids: tuple[int, ...] | None = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"decode.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.max_len < 1:
            raise ConfigError("decode.max_len must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("decode.temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ConfigError("decode.top_p must be in (0, 1]")
        if self.beam_width < 1:
            raise ConfigError("decode.beam_width must be >= 1")
        if not 0 <= self.delorean_mix <= 1:
            raise ConfigError("decode.delorean.mix must be in [0, 1]")
        # zero step sizes are allowed: they are the documented degenerate cases
        if self.delorean_step_size < 0 or self.cold_step_size < 0:
            raise ConfigError("step sizes must be nonnegative")
        if self.delorean_iterations < 0 or self.cold_iterations < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.cold_noise_start < 0 or self.cold_noise_end < 0:
            raise ConfigError("noise scales must be nonnegative")
        if self.cold_noise_start > 0 and self.cold_noise_end == 0:
            raise ConfigError("decode.cold.noise_end must be positive for a geometric schedule")
        if self.cold_fluency_weight < 0 or self.cold_future_weight < 0:
            raise ConfigError("energy weights must be nonnegative")
        if self.cold_fluency_weight == 0 and self.cold_future_weight == 0:
            raise ConfigError("energy weights must not all be zero")
        if self.cold_topk < 1:
            raise ConfigError("decode.cold.topk must be >= 1")
        if self.cold_init not in ("uniform", "forward"):
            raise ConfigError("decode.cold.init must be 'uniform' or 'forward'")
        if self.allowed_ids is not None and not self.allowed_ids:
            raise ConfigError("allowed_ids must be nonempty when given")

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        """Build from a `decode.` config section (keys like ``cold.step_size``)."""
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            name = k.replace(".", "_")
            if name in names:
                kwargs[name] = v
        if kwargs.get("allowed_ids") is not None:
            ids = kwargs["allowed_ids"]
            kwargs["allowed_ids"] = tuple(int(i) for i in (ids if isinstance(ids, (list, tuple)) else [ids]))
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"incomplete decode config: {exc}") from None
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "DecodeConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        cfg = DecodeConfig(**d)
        cfg.validate()
        return cfg


@dataclass
class EnergyBreakdown:
    total: Tensor
    fluency: Tensor
    future: Tensor

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "fluency": self.fluency.item(), "future": self.future.item()}


@dataclass
class DecodeResult:
    tokens: list[int]
    text: str
    score: float
    strategy: str
    trace: list[dict] = field(default_factory=list)
    energy: dict | None = None


def _mask(vocab_size: int, allowed: Sequence[int] | None) -> Tensor:
    m = torch.zeros(vocab_size, dtype=DTYPE)
    if allowed is not None:
        m.fill_(MASK_VALUE)
        m[torch.as_tensor(sorted(set(allowed)), dtype=torch.long)] = 0.0
    return m


def _argmax(x: Tensor) -> int:
    # torch.argmax returns the first maximal index
    return int(torch.argmax(x).item())


def _text(vocab, tokens) -> str:
    return vocab.detokenize(tokens) if vocab is not None else " ".join(map(str, tokens))


def next_logits(params: TransformerLM, prefix: Sequence[int], extra: Tensor | None = None) -> Tensor:
    with torch.no_grad():
        return forward_segments(params, [list(prefix)], extra)[-1]


def greedy_continuation(
    params: TransformerLM,
    prefix: Sequence[int],
    length: int,
    allowed: Sequence[int] | None = None,
    eos: int | None = None,
    extra: Tensor | None = None,
) -> list[int]:
    """Greedy tokens after `prefix`; stops after emitting `eos` when given."""
    mask = _mask(params.vocab_size, allowed)
    out: list[int] = []
    for _ in range(length):
        tok = _argmax(next_logits(params, list(prefix) + out, extra) + mask)
        out.append(tok)
        if eos is not None and tok == eos:
            break
    return out


# --- supervised strategies -------------------------------------------------

def _greedy(params, prefix, cfg, eos, extra):
    out, total = [], 0.0
    mask = _mask(params.vocab_size, cfg.allowed_ids)
    for _ in range(cfg.max_len):
        lp = torch.log_softmax(next_logits(params, prefix + out, extra) / cfg.temperature + mask, -1)
        tok = _argmax(lp)
        out.append(tok)
        total += lp[tok].item()
        if tok == eos:
            break
    return out, total / len(out)


def _beam(params, prefix, cfg, eos, extra):
    mask = _mask(params.vocab_size, cfg.allowed_ids)
    beams: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(cfg.max_len):
        cands = []
        for score, toks in beams:
            lp = torch.log_softmax(next_logits(params, prefix + toks, extra) / cfg.temperature + mask, -1)
            for v, lv in enumerate(lp.tolist()):
                cands.append((-(score + lv), -lv, toks + [v], score + lv))
        cands.sort(key=lambda c: (c[0], c[1], c[2]))
        width = len(beams)
        beams = []
        for _, _, toks, score in cands[:width]:
            (finished if toks[-1] == eos else beams).append((score, toks))
        if not beams:
            break
    finished.extend(beams)
    best = min(finished, key=lambda f: (-f[0] / len(f[1]), f[1]))
    return best[1], best[0] / len(best[1])


def _top_p(params, prefix, cfg, eos, extra):
    rng = np.random.default_rng(cfg.seed)
    mask = _mask(params.vocab_size, cfg.allowed_ids)
    out, total = [], 0.0
    for _ in range(cfg.max_len):
        lp = torch.log_softmax(next_logits(params, prefix + out, extra) / cfg.temperature + mask, -1)
        probs = lp.exp().numpy()
        order = np.lexsort((np.arange(len(probs)), -probs))
        cum = np.cumsum(probs[order])
        keep = order[: int(np.searchsorted(cum, cfg.top_p - 1e-12)) + 1]
        p = probs[keep] / probs[keep].sum()
        tok = int(keep[min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(keep) - 1)])
        out.append(tok)
        total += lp[tok].item()
        if tok == eos:
            break
    return out, total / len(out)


def decode_standard(
    params: TransformerLM,
    prefix: Sequence[int],
    cfg: DecodeConfig,
    vocab=None,
    extra_embeddings: Tensor | None = None,
    eos: int | None = None,
) -> DecodeResult:
    """Decode after an encoded supervised prefix (observations and optional knowledge text).

    The score is the mean log-probability per emitted token (including ``<eos>``).
    """
    if cfg.strategy not in STANDARD_STRATEGIES:
        raise ConfigError(f"decode_standard does not handle strategy {cfg.strategy!r}")
    if eos is None:
        eos = vocab.eos if vocab is not None else -1
    fn = {"greedy": _greedy, "beam": _beam, "top_p": _top_p}[cfg.strategy]
    toks, score = fn(params, list(prefix), cfg, eos, extra_embeddings)
    hyp = toks[:-1] if toks and toks[-1] == eos else toks
    return DecodeResult(hyp, _text(vocab, hyp), score, cfg.strategy)


# --- shared pieces of the unsupervised decoders -----------------------------

def ranking_objective(params: TransformerLM, h: Sequence[int], o1: Sequence[int], o2: Sequence[int]) -> float:
    """log P(h | o1) + log P(o2 | o1, h)."""
    with torch.no_grad():
        total = log_prob(params, h, o1).item()
        if len(o2):
            total += log_prob(params, o2, list(o1) + list(h)).item()
    return total


def energy_terms(params: TransformerLM, soft_h: Tensor, o1: Sequence[int], o2: Sequence[int]) -> tuple[Tensor, Tensor]:
    """(fluency, future) in nats for a soft hypothesis; no input validation."""
    o1, o2 = list(o1), list(o2)
    T = soft_h.shape[0]
    segments = [o1, soft_h] + ([o2[:-1]] if len(o2) > 1 else [])
    logits = forward_segments(params, segments, check=False)
    logp = torch.log_softmax(logits, dim=-1)
    start = len(o1) - 1
    fluency = -(soft_h * logp[start:start + T]).sum()
    if o2:
        rows = logp[start + T:start + T + len(o2)]
        future = -rows.gather(1, torch.as_tensor(o2)[:, None]).sum()
    else:
        future = logp.new_zeros(())
    return fluency, future


def energy(
    params: TransformerLM,
    soft_h: Tensor,
    o1: Sequence[int],
    o2: Sequence[int],
    weights: tuple[float, float] = (1.0, 1.0),
) -> EnergyBreakdown:
    """Weighted fluency + future-coherence energy; differentiable w.r.t. `soft_h`."""
    check_simplex(soft_h, params.vocab_size)
    if not o1:
        raise InputError("past observation prefix must be nonempty")
    w_flu, w_fut = weights
    if w_flu < 0 or w_fut < 0 or (w_flu == 0 and w_fut == 0):
        raise InputError("energy weights must be nonnegative and not all zero")
    fluency, future = energy_terms(params, soft_h, o1, o2)
    return EnergyBreakdown(w_flu * fluency + w_fut * future, fluency, future)


def project_simplex(x: Tensor, allowed: Sequence[int] | None = None) -> Tensor:
    """Row-wise Euclidean projection onto the probability simplex.

    With `allowed`, the projection is onto the face spanned by those coordinates
    and every other entry is zero.
    """
    if allowed is not None:
        idx = torch.as_tensor(sorted(set(allowed)), dtype=torch.long)
        out = torch.zeros_like(x)
        out[:, idx] = project_simplex(x[:, idx])
        return out
    n = x.shape[-1]
    u, _ = torch.sort(x, dim=-1, descending=True)
    css = u.cumsum(dim=-1) - 1
    k = torch.arange(1, n + 1, dtype=x.dtype)
    cond = u - css / k > 0
    # last index where cond holds (cond is true on a prefix)
    rho = (cond * torch.arange(n)).max(dim=-1, keepdim=True).values
    tau = css.gather(-1, rho) / (rho + 1).to(x.dtype)
    return torch.clamp(x - tau, min=0)


def discretize(
    soft_h: Tensor,
    params: TransformerLM,
    prefix: Sequence[int],
    k: int,
    allowed: Sequence[int] | None = None,
) -> list[int]:
    """Left to right, restrict each position to the LM's top-k next tokens given the
    tokens chosen so far, and pick the one with the most mass in `soft_h`."""
    if k < 1:
        raise InputError("k must be >= 1")
    mask = _mask(params.vocab_size, allowed)
    n_allowed = params.vocab_size if allowed is None else len(set(allowed))
    k = min(k, n_allowed)
    out: list[int] = []
    p = soft_h.detach()
    for t in range(p.shape[0]):
        logits = (next_logits(params, list(prefix) + out) + mask).numpy()
        top = np.lexsort((np.arange(len(logits)), -logits))[:k]
        mass = p[t].numpy()[top]
        best = top[mass == mass.max()].min()
        out.append(int(best))
    return out


def _hard_energy_record(params, h, o1, o2, iteration, vocab, weights=(1.0, 1.0)) -> dict:
    with torch.no_grad():
        flu = -log_prob(params, h, o1).item()
        fut = -log_prob(params, o2, list(o1) + list(h)).item() if len(o2) else 0.0
    return {
        "iteration": iteration,
        "energy_total": weights[0] * flu + weights[1] * fut,
        "energy_fluency": flu,
        "energy_future": fut,
        "candidate_text": _text(vocab, h),
    }


# --- backprop-based decoding --------------------------------------------------

def decode_delorean(
    params: TransformerLM,
    o1: Sequence[int],
    o2: Sequence[int],
    cfg: DecodeConfig,
    vocab=None,
) -> DecodeResult:
    """Forward/backward logit mixing.

    Iteration 0 generates greedily from the past observation and keeps the
    logits. Each later iteration (1) backpropagates the cross-entropy of the
    real future observation, conditioned on o1 and softmax(logits), into the
    logits and takes a step of size ``delorean_step_size``; (2) re-runs the LM
    left to right, conditioning each position on the tokens already chosen from
    the mixed logits, and mixes ``mix * forward + (1 - mix) * updated``. The
    candidate of an iteration is the per-position argmax of its mixed logits.
    The returned candidate maximizes log P(h|o1) + log P(o2|o1,h) over all
    iterations (earliest wins ties).
    """
    o1, o2 = list(o1), list(o2)
    if not o1:
        raise InputError("past observation prefix must be nonempty")
    T, lam, gamma = cfg.max_len, cfg.delorean_step_size, cfg.delorean_mix
    mask = _mask(params.vocab_size, cfg.allowed_ids)

    y = torch.zeros(T, params.vocab_size, dtype=DTYPE)
    tokens: list[int] = []
    for t in range(T):
        y[t] = next_logits(params, o1 + tokens) + mask
        tokens.append(_argmax(y[t]))
    if not torch.isfinite(y).all():
        raise DivergenceError("non-finite logits in the initial forward pass", 0)

    trace = [_hard_energy_record(params, tokens, o1, o2, 0, vocab)]
    best, best_obj = tokens, -trace[0]["energy_total"]
    for it in range(1, cfg.delorean_iterations + 1):
        y_var = y.clone().requires_grad_(True)
        p = torch.softmax(y_var / cfg.temperature, dim=-1)
        if o2:
            loss = -log_prob(params, o2, [o1, p])
            (grad,) = torch.autograd.grad(loss, y_var)
        else:
            grad = torch.zeros_like(y)
        if not torch.isfinite(grad).all():
            raise DivergenceError("non-finite gradient in backward pass", it)
        y_back = y - lam * grad

        tokens = []
        y_new = torch.empty_like(y)
        for t in range(T):
            fwd = next_logits(params, o1 + tokens) + mask
            y_new[t] = gamma * fwd + (1 - gamma) * y_back[t]
            tokens.append(_argmax(y_new[t]))
        if not torch.isfinite(y_new).all():
            raise DivergenceError("non-finite logits after mixing", it)
        y = y_new
        rec = _hard_energy_record(params, tokens, o1, o2, it, vocab)
        trace.append(rec)
        if -rec["energy_total"] > best_obj:
            best, best_obj = tokens, -rec["energy_total"]
    return DecodeResult(best, _text(vocab, best), best_obj, "delorean", trace)


# --- energy-based Langevin decoding -------------------------------------------

def noise_schedule(start: float, end: float, steps: int) -> list[float]:
    """Geometric interpolation from `start` to `end` over `steps` values."""
    if steps <= 0:
        return []
    if start == 0:
        return [0.0] * steps
    if steps == 1:
        return [start]
    ratio = end / start
    return [start * ratio ** (k / (steps - 1)) for k in range(steps)]


def initial_soft(params, o1, cfg: DecodeConfig) -> Tensor:
    V, T = params.vocab_size, cfg.max_len
    allowed = sorted(set(cfg.allowed_ids)) if cfg.allowed_ids is not None else list(range(V))
    if cfg.cold_init == "uniform":
        p = torch.zeros(T, V, dtype=DTYPE)
        p[:, allowed] = 1.0 / len(allowed)
        return p
    mask = _mask(V, cfg.allowed_ids)
    rows, tokens = [], []
    for _ in range(T):
        logits = next_logits(params, list(o1) + tokens) + mask
        rows.append(torch.softmax(logits / cfg.temperature, -1))
        tokens.append(_argmax(logits))
    return torch.stack(rows)


def decode_cold(
    params: TransformerLM,
    o1: Sequence[int],
    o2: Sequence[int],
    cfg: DecodeConfig,
    vocab=None,
) -> DecodeResult:
    """Langevin dynamics on the simplex, then LM-guided top-k discretization.

    Step k: p <- project(p - step_size * grad E(p) + eps), eps ~ N(0, sigma_k^2)
    on the allowed coordinates, sigma decaying geometrically from noise_start
    to noise_end. Trace entry k holds the energy of p before step k; the last
    entry holds the final soft energy and the discretized candidate.
    """
    o1, o2 = list(o1), list(o2)
    if not o1:
        raise InputError("past observation prefix must be nonempty")
    weights = (cfg.cold_fluency_weight, cfg.cold_future_weight)
    allowed = cfg.allowed_ids
    allowed_idx = torch.as_tensor(sorted(set(allowed)) if allowed is not None else range(params.vocab_size))
    gen = torch.Generator().manual_seed(cfg.seed)
    sigmas = noise_schedule(cfg.cold_noise_start, cfg.cold_noise_end, cfg.cold_iterations)

    p = initial_soft(params, o1, cfg)
    trace = []

    def energy_of(q: Tensor, need_grad: bool):
        q = q.clone().requires_grad_(need_grad)
        flu, fut = energy_terms(params, q, o1, o2)
        total = weights[0] * flu + weights[1] * fut
        grad = torch.autograd.grad(total, q)[0] if need_grad else None
        return total.item(), flu.item(), fut.item(), grad

    for k, sigma in enumerate(sigmas):
        total, flu, fut, grad = energy_of(p, True)
        if not math.isfinite(total):
            raise DivergenceError("non-finite energy", k)
        if not torch.isfinite(grad).all():
            raise DivergenceError("non-finite energy gradient", k)
        trace.append({"iteration": k, "energy_total": total, "energy_fluency": flu,
                      "energy_future": fut, "candidate_text": None})
        step = p - cfg.cold_step_size * grad
        if sigma > 0:
            noise = torch.randn(p.shape, generator=gen, dtype=DTYPE) * sigma
            step[:, allowed_idx] += noise[:, allowed_idx]
        p = project_simplex(step, allowed)

    total, flu, fut, _ = energy_of(p, False)
    if not math.isfinite(total):
        raise DivergenceError("non-finite energy", len(sigmas))
    tokens = discretize(p, params, o1, cfg.cold_topk, allowed)
    text = _text(vocab, tokens)
    trace.append({"iteration": len(sigmas), "energy_total": total, "energy_fluency": flu,
                  "energy_future": fut, "candidate_text": text})
    final = {"total": total, "fluency": flu, "future": fut}
    return DecodeResult(tokens, text, ranking_objective(params, tokens, o1, o2), "cold", trace, final)
