"""Synthetic CoNLL corpora built from sentence templates and per-label gazetteers.

Each template places entity slots next to cue words that belong to the
slot's label, so an entity's type is recoverable from its context even
when its surface is shared between labels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import IOB2, Dataset, Sentence, format_conll, labels_in_order

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "kl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "s", "l", "k"]


@dataclass(frozen=True)
class SynthSpec:
    labels: tuple[str, ...] = ("PER", "LOC", "ORG", "MISC")
    gazetteer_size: int | dict = 30
    template_pool: int = 40
    cues_per_label: int = 6
    filler_words: int = 60
    train_size: int = 400
    dev_size: int = 100
    test_size: int = 300
    ambiguity: float = 0.2
    max_slots: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ValueError("synthetic spec needs at least one label")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError("ambiguity must lie in [0, 1]")
        for lab in self.labels:
            if self.size_of(lab) < 1:
                raise ValueError(f"gazetteer for {lab} must be non-empty")
        if self.template_pool < 1 or min(self.train_size, self.dev_size, self.test_size) < 1:
            raise ValueError("template pool and corpus sizes must be positive")

    def size_of(self, label: str) -> int:
        if isinstance(self.gazetteer_size, dict):
            return int(self.gazetteer_size[label])
        return int(self.gazetteer_size)

    def to_dict(self) -> dict:
        return asdict(self)


class _Words:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def fresh(self, syllables: int) -> str:
        while True:
            w = "".join(
                _ONSETS[self.rng.integers(len(_ONSETS))]
                + _VOWELS[self.rng.integers(len(_VOWELS))]
                + _CODAS[self.rng.integers(len(_CODAS))]
                for _ in range(syllables)
            )
            if w not in self.used:
                self.used.add(w)
                return w


@dataclass
class Grammar:
    gazetteers: dict[str, list[tuple[str, ...]]]
    cues: dict[str, list[str]]
    fillers: list[str]
    templates: list[list[tuple[str, str]]] = field(default_factory=list)  # (kind, value)


def build_grammar(spec: SynthSpec, rng: np.random.Generator) -> Grammar:
    words = _Words(rng)
    own: dict[str, list[tuple[str, ...]]] = {}
    for lab in spec.labels:
        entries = []
        for _ in range(spec.size_of(lab)):
            n_tok = int(rng.choice([1, 2, 3], p=[0.4, 0.35, 0.25]))
            entries.append(tuple(words.fresh(int(rng.integers(2, 4))).capitalize() for _ in range(n_tok)))
        own[lab] = entries
    gaz = {lab: list(v) for lab, v in own.items()}
    if len(spec.labels) > 1 and spec.ambiguity > 0:
        for lab in spec.labels:
            n_shared = int(round(spec.ambiguity * len(gaz[lab])))
            others = [e for other in spec.labels if other != lab for e in own[other]]
            picks = rng.choice(len(others), size=min(n_shared, len(others)), replace=False)
            for j, p in enumerate(picks):
                gaz[lab][len(gaz[lab]) - 1 - j] = others[int(p)]
    cues = {lab: [words.fresh(int(rng.integers(1, 3))) for _ in range(spec.cues_per_label)] for lab in spec.labels}
    fillers = [words.fresh(int(rng.integers(1, 3))) for _ in range(spec.filler_words)]
    grammar = Grammar(gaz, cues, fillers)
    for _ in range(spec.template_pool):
        n_slots = int(rng.integers(0, spec.max_slots + 1)) if rng.random() < 0.1 else int(rng.integers(1, spec.max_slots + 1))
        parts: list[tuple[str, str]] = [("filler", "") for _ in range(int(rng.integers(1, 4)))]
        for _ in range(n_slots):
            lab = spec.labels[int(rng.integers(len(spec.labels)))]
            cue = cues[lab][int(rng.integers(len(cues[lab])))]
            if rng.random() < 0.5:
                parts += [("word", cue), ("slot", lab)]
            else:
                parts += [("slot", lab), ("word", cue)]
            parts += [("filler", "") for _ in range(int(rng.integers(0, 3)))]
        grammar.templates.append(parts)
    return grammar


def _sentence(grammar: Grammar, rng: np.random.Generator) -> Sentence:
    template = grammar.templates[int(rng.integers(len(grammar.templates)))]
    tokens, tags = [], []
    for kind, value in template:
        if kind == "filler":
            tokens.append(grammar.fillers[int(rng.integers(len(grammar.fillers)))])
            tags.append("O")
        elif kind == "word":
            tokens.append(value)
            tags.append("O")
        else:
            gaz = grammar.gazetteers[value]
            ent = gaz[int(rng.integers(len(gaz)))]
            tokens.extend(ent)
            tags.extend([f"B-{value}"] + [f"I-{value}"] * (len(ent) - 1))
    tokens.append(".")
    tags.append("O")
    return Sentence(tuple(tokens), tuple(tags), IOB2)


def generate(spec: SynthSpec) -> dict[str, Dataset]:
    """Deterministically generate ``train``/``dev``/``test`` splits for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    grammar = build_grammar(spec, rng)
    out = {}
    for name, size in (("train", spec.train_size), ("dev", spec.dev_size), ("test", spec.test_size)):
        sents = tuple(_sentence(grammar, rng) for _ in range(size))
        found = labels_in_order(sents)
        out[name] = Dataset(sents, tuple(l for l in spec.labels if l in found) + tuple(l for l in found if l not in spec.labels))
    return out


def write_splits(splits: dict[str, Dataset], directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, data in splits.items():
        path = directory / f"{name}.txt"
        path.write_text(format_conll(data), encoding="utf-8")
        paths[name] = path
    return paths
