import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from conductor.data import SyntheticSpec, TokenizedPair, generate_synthetic_corpus
from conductor.model import CrossEncoder, ModelConfig, init_params
from conductor.train import DEFAULT_EPOCHS, TrainSettings, config_for, train_toy

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def spec():
    return SyntheticSpec()


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=12, vocab_size=67, max_seq_len=14, seed=5)


@pytest.fixture(scope="session")
def random_model(spec):
    """Default-sized model with random weights (no training)."""
    cfg = config_for(spec, seed=11)
    return CrossEncoder(cfg, init_params(cfg), spec.vocab())


@pytest.fixture(scope="session")
def tiny_model(spec, small_config):
    return CrossEncoder(small_config, init_params(small_config), spec.vocab())


@pytest.fixture(scope="session")
def trained_model(spec, request):
    """The default toy model after the default training budget (cached across sessions)."""
    settings = TrainSettings()
    key = hashlib.sha256(json.dumps([repr(spec), repr(settings), DEFAULT_EPOCHS]).encode()).hexdigest()[:16]
    cache = Path(request.config.cache.mkdir("conductor")) / f"trained-{key}.json"
    if cache.exists():
        model = CrossEncoder.load(cache)
        meta = json.loads(cache.with_suffix(".meta").read_text())
    else:
        model, report = train_toy(config_for(spec), spec, DEFAULT_EPOCHS, 0, settings)
        model.save(cache)
        meta = {"heldout_accuracy": report.heldout_accuracy}
        cache.with_suffix(".meta").write_text(json.dumps(meta))
    model.heldout_accuracy = meta["heldout_accuracy"]
    return model


@pytest.fixture(scope="session")
def toy_pairs(spec):
    corpus = generate_synthetic_corpus(spec, 40, seed=77, prefix="t-")
    return corpus.labeled_pairs(spec.vocab(), "toy")


def random_pair(rng, spec, vocab_size=None) -> TokenizedPair:
    n = vocab_size or len(spec.vocab())
    q = rng.integers(3, n, spec.query_len).tolist()
    p = rng.integers(3, n, spec.passage_len).tolist()
    return TokenizedPair.build(q, p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
