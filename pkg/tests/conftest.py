import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deskbert.data.synthetic import topic_markov_corpus, topic_vocabulary
from deskbert.data.tokenizer import SPECIALS, Tokenizer
from deskbert.model.config import toy_config

settings.register_profile(
    "repo", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def topic_tok():
    return Tokenizer(list(SPECIALS) + topic_vocabulary())


@pytest.fixture(scope="session")
def topic_docs(topic_tok):
    texts = topic_markov_corpus(300, median_len=40, seed=3)
    return [topic_tok.encode(t, add_special=True) for t in texts]


@pytest.fixture
def tiny_cfg():
    return toy_config(n_layers=2, d_model=16, n_heads=2, vocab_size=40, max_positions=64, align64=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE: dict = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"[{status}] criterion {self.number:2d}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        if exc_type is not None:
            line += f" -- {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
    passed = sum(line.startswith("[PASS]") for line in _ACCEPTANCE.values())
    terminalreporter.write_line(f"{passed}/{len(_ACCEPTANCE)} criteria passed")
