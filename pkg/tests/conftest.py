from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from demoner.corpus import BIOES, IOB2, Dataset, EntitySpan, Sentence, convert_scheme, spans_to_tags
from demoner.synth import SynthSpec, generate

LABELS = ("PER", "LOC", "ORG")


@st.composite
def span_layouts(draw, max_len: int = 12, labels=LABELS):
    """Random non-overlapping spans over a sentence of random length."""
    n = draw(st.integers(1, max_len))
    spans, i = [], 0
    while i < n:
        if draw(st.booleans()):
            width = draw(st.integers(1, min(3, n - i)))
            spans.append(EntitySpan(draw(st.sampled_from(labels)), i, i + width - 1))
            i += width
        else:
            i += draw(st.integers(1, 2))
    return n, spans


def sentence_from(n: int, spans, scheme: str = IOB2) -> Sentence:
    return Sentence(tuple(f"w{i}" for i in range(n)), tuple(spans_to_tags(spans, n, scheme)), scheme)


@pytest.fixture(scope="session")
def tiny_splits():
    spec = SynthSpec(train_size=80, dev_size=20, test_size=20, gazetteer_size=6, template_pool=10, seed=3)
    return {k: convert_scheme(v, BIOES) for k, v in generate(spec).items()}


@pytest.fixture
def fischler() -> Sentence:
    return Sentence(
        ("France", "backed", "Fischler", "'s", "proposal"),
        ("S-LOC", "O", "S-PER", "O", "O"),
        BIOES,
    )


def random_dataset(rng: np.random.Generator, size: int, labels=LABELS) -> Dataset:
    sents = []
    for _ in range(size):
        n = int(rng.integers(2, 9))
        spans, i = [], 0
        while i < n:
            if rng.random() < 0.4:
                w = int(rng.integers(1, min(3, n - i) + 1))
                spans.append(EntitySpan(labels[int(rng.integers(len(labels)))], i, i + w - 1))
                i += w
            else:
                i += 1
        toks = tuple(f"t{int(rng.integers(30))}" for _ in range(n))
        sents.append(Sentence(toks, tuple(spans_to_tags(spans, n, BIOES)), BIOES))
    return Dataset(tuple(sents), labels)


def tiny_model(seed: int, d_model: int = 8, n_layers: int = 1, max_len: int = 24, vocab_words: int = 12):
    from demoner.encoder import Vocab
    from demoner.model import NerModel

    vocab = Vocab([f"t{i}" for i in range(vocab_words)] + ["is", ".", "PER", "LOC"])
    return NerModel.create(vocab, ("PER", "LOC"), seed, d_model=d_model, n_heads=2, n_layers=n_layers, max_len=max_len, dropout=0.0)


def _rel(a, f) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(f)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - f) / denom)


def gradient_check(model, ids, boundary, tags, step: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Central-difference check of every parameter.

    Returns the relative error ``||a - f|| / (||a|| + ||f||)`` of the full
    gradient vector and the same quantity per parameter array. Arrays whose
    exact gradient vanishes (the attention key bias, for one) are reported
    as 0.0 when both norms are below 1e-6 of the full gradient norm.
    """
    _, grads = model.loss_and_grads(ids, boundary, tags)
    analytic, numeric = {}, {}
    for name, arr in model.parameters().items():
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = model.loss_and_grads(ids, boundary, tags)[0]
            flat[i] = old - step
            down = model.loss_and_grads(ids, boundary, tags)[0]
            flat[i] = old
            nflat[i] = (up - down) / (2 * step)
        analytic[name], numeric[name] = grads[name].ravel(), nflat
    a = np.concatenate(list(analytic.values()))
    f = np.concatenate(list(numeric.values()))
    floor = 1e-6 * np.linalg.norm(a)
    per = {
        k: 0.0 if max(np.linalg.norm(analytic[k]), np.linalg.norm(numeric[k])) < floor else _rel(analytic[k], numeric[k])
        for k in analytic
    }
    return _rel(a, f), per


def random_tagged_input(model, rng, max_input: int = 5, max_demo: int = 6):
    n = int(rng.integers(1, max_input + 1))
    m = int(rng.integers(0, max_demo + 1))
    ids = rng.integers(3, len(model.vocab), size=n + m)
    T = len(model.tagset)
    tags = rng.integers(T, size=n)
    return ids, n, tags


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
