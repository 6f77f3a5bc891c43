import time

import numpy as np
import pytest

from grulens.corpus import Corpus, FeatureTable, build_vocab, gen_microworld, standardize
from grulens.model import init_params
from grulens.trainer import TrainConfig, train

# criterion-2 training run, shared by the acceptance and omission tests
MICROWORLD_CONFIG = TrainConfig(seed=1, hidden=32, emb=32, alpha=0.5, lr=0.5, batch_size=16, epochs=50, clip=5.0)


def microworld_corpus(seed=1, n=500) -> Corpus:
    sentences, raw = gen_microworld(seed, n)
    std, stats = standardize(raw.values)
    return Corpus(sentences, build_vocab(sentences), FeatureTable(raw.ids, std), stats)


# wall-clock seconds of the shared training run, and acceptance result lines
TIMINGS: dict[str, float] = {}
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def trained_microworld():
    corpus = microworld_corpus()
    start = time.perf_counter()
    result = train(MICROWORLD_CONFIG, corpus)
    TIMINGS["microworld_train"] = time.perf_counter() - start
    return corpus, result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def small_params():
    return init_params(20, 8, 8, 6, alpha=0.5, seed=3)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(0)
    return [(rng.integers(0, 20, size=n), rng.normal(size=6)) for n in (3, 5, 4)]
