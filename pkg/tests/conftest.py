from __future__ import annotations

import time

import pytest
import torch

from abductive_infill import config as cfgmod
from abductive_infill.data import Vocabulary, load_vocab
from abductive_infill.harness import pipeline
from abductive_infill.lm_core import ModelConfig, init_params, zero_weight_params


def small_config(V: int = 20, **kw) -> ModelConfig:
    base = dict(vocab_size=V, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=32)
    base.update(kw)
    return ModelConfig(**base)


def randomize(params, seed: int, scale: float = 0.5):
    """Every parameter (including the zero-initialized ones) drawn at `scale`, so
    gradients flow through all paths."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return params


@pytest.fixture
def tiny_lm():
    return randomize(init_params(small_config(), 0), 1)


@pytest.fixture
def zero_lm():
    return zero_weight_params(small_config(), 0)


@pytest.fixture
def word_vocab():
    return Vocabulary.build(["the cat sat on a mat", "i was hungry . i felt full ."])


@pytest.fixture(scope="session")
def defaults():
    return cfgmod.load_defaults()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory, defaults):
    out = tmp_path_factory.mktemp("synth")
    pipeline.synth_to_dir(defaults["synth.seed"], defaults["synth.size"], out,
                          pipeline.provider_from_config(defaults))
    return out


@pytest.fixture(scope="session")
def world_vocab(synth_dir):
    return load_vocab(synth_dir / "vocab.json")


class Trained:
    """Lazily trains each variant once per session with the shipped defaults."""

    def __init__(self, cfg, data_dir, root):
        self.cfg, self.data_dir, self.root = cfg, data_dir, root
        self.results = {}
        self.seconds = {}

    def __call__(self, variant: str):
        if variant not in self.results:
            torch.set_num_threads(1)
            out = self.root / variant
            t0 = time.perf_counter()
            res = pipeline.train_from_config(self.cfg, self.data_dir, out, variant)
            self.seconds[variant] = time.perf_counter() - t0
            self.results[variant] = (res, pipeline.LoadedModel(out / "model.npz", self.cfg))
        return self.results[variant]


@pytest.fixture(scope="session")
def trained(tmp_path_factory, defaults, synth_dir):
    return Trained(defaults, synth_dir, tmp_path_factory.mktemp("models"))


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
