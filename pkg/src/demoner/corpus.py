"""CoNLL corpus reading, tag-scheme conversion, span extraction and sub-sampling."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

IOB2 = "IOB2"
BIOES = "BIOES"
SCHEMES = (IOB2, BIOES)

_PREFIXES = {IOB2: frozenset("BIO"), BIOES: frozenset("BIOES")}


class CorpusError(ValueError):
    """Raised for malformed corpora or tag sequences."""


class CoverageError(CorpusError):
    """Raised when no sub-sample covering every tag was found."""

    def __init__(self, missing: Sequence[str], attempts: int):
        self.missing = list(missing)
        super().__init__(
            f"coverage unsatisfiable after {attempts} attempts; missing tags: {', '.join(self.missing)}"
        )


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, label = tag.partition("-")
    if not sep or not label:
        raise CorpusError(f"malformed tag {tag!r}")
    return prefix, label


def _check_tags(tags: Sequence[str], scheme: str) -> None:
    allowed = _PREFIXES[scheme]
    prev_prefix, prev_label = "O", None
    for i, tag in enumerate(tags):
        prefix, label = split_tag(tag)
        if prefix not in allowed:
            raise CorpusError(f"tag {tag!r} at position {i} has unknown prefix for {scheme}")
        if prefix in ("I", "E"):
            if prev_prefix not in ("B", "I") or prev_label != label:
                raise CorpusError(f"tag {tag!r} at position {i} does not continue an entity")
        if scheme == BIOES and prev_prefix in ("B", "I") and not (prefix in ("I", "E") and label == prev_label):
            raise CorpusError(f"unterminated entity before position {i}")
        prev_prefix, prev_label = prefix, label
    if scheme == BIOES and prev_prefix in ("B", "I"):
        raise CorpusError("unterminated entity at end of sentence")


@dataclass(frozen=True)
class EntitySpan:
    label: str
    start: int
    end: int  # inclusive
    surface: str = ""

    def key(self) -> tuple[str, int, int]:
        return self.label, self.start, self.end


@dataclass(frozen=True, eq=False)
class Sentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    scheme: str = IOB2

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.scheme not in SCHEMES:
            raise CorpusError(f"unknown scheme {self.scheme!r}")
        if not self.tokens or len(self.tokens) != len(self.tags):
            raise CorpusError(
                f"sentence needs equal, non-zero token/tag counts (got {len(self.tokens)}/{len(self.tags)})"
            )
        _check_tags(self.tags, self.scheme)

    def __len__(self) -> int:
        return len(self.tokens)

    # Identity semantics are kept for hashing (retrieval excludes the query
    # object itself, not equal copies); value equality is explicit.
    def same_as(self, other: "Sentence") -> bool:
        return self.tokens == other.tokens and self.tags == other.tags and self.scheme == other.scheme

    def spans(self) -> list[EntitySpan]:
        return extract_spans(self)


@dataclass(frozen=True)
class Dataset:
    sentences: tuple[Sentence, ...]
    label_set: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        known = set(self.label_set)
        for s in self.sentences:
            for tag in s.tags:
                _, label = split_tag(tag)
                if label is not None and label not in known:
                    raise CorpusError(f"label {label!r} missing from label_set")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    @property
    def scheme(self) -> str:
        return self.sentences[0].scheme if self.sentences else IOB2

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.sentences[i] for i in indices), self.label_set)


def labels_in_order(sentences: Iterable[Sentence]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for s in sentences:
        for tag in s.tags:
            _, label = split_tag(tag)
            if label is not None:
                seen.setdefault(label)
    return tuple(seen)


def parse_conll(text: str, token_col: int = 0, tag_col: int = -1) -> Dataset:
    """Parse whitespace-separated CoNLL columns into a Dataset.

    Blank lines separate sentences and ``-DOCSTART-`` lines are dropped. The
    scheme is BIOES if any ``E-``/``S-`` tag occurs, otherwise IOB2.
    """
    rows: list[list[tuple[str, str]]] = []
    line_nos: list[int] = []
    current: list[tuple[str, str]] = []
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("-DOCSTART-"):
            continue
        if not line:
            if current:
                rows.append(current)
                current = []
            continue
        cols = line.split()
        if width is None:
            width = len(cols)
        elif len(cols) != width:
            raise CorpusError(f"line {lineno}: expected {width} columns, found {len(cols)}")
        try:
            tok, tag = cols[token_col], cols[tag_col]
        except IndexError:
            raise CorpusError(f"line {lineno}: column index out of range") from None
        try:
            prefix, _ = split_tag(tag)
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        if prefix not in _PREFIXES[BIOES]:
            raise CorpusError(f"line {lineno}: tag {tag!r} has unknown prefix")
        if not current:
            line_nos.append(lineno)
        current.append((tok, tag))
    if current:
        rows.append(current)

    all_tags = [tag for row in rows for _, tag in row]
    scheme = BIOES if any(t[:2] in ("E-", "S-") for t in all_tags) else IOB2
    sentences = []
    for row, lineno in zip(rows, line_nos):
        try:
            sentences.append(Sentence(tuple(t for t, _ in row), tuple(g for _, g in row), scheme))
        except CorpusError as exc:
            raise CorpusError(f"sentence starting at line {lineno}: {exc}") from None
    return Dataset(tuple(sentences), labels_in_order(sentences))


def read_conll(path, token_col: int = 0, tag_col: int = -1) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_conll(fh.read(), token_col, tag_col)


def format_conll(data: Dataset) -> str:
    blocks = ["\n".join(f"{tok} {tag}" for tok, tag in zip(s.tokens, s.tags)) for s in data]
    return "".join(block + "\n\n" for block in blocks)


def extract_spans(s: Sentence) -> list[EntitySpan]:
    return tags_to_spans(s.tags, s.scheme, s.tokens)


def tags_to_spans(
    tags: Sequence[str], scheme: str = BIOES, tokens: Sequence[str] | None = None
) -> list[EntitySpan]:
    """Collect well-formed entity spans from IOB2 or BIOES tags.

    Fragments that are not well formed (an ``I-`` without its ``B-``, a BIOES
    ``B-`` never closed by ``E-``) are dropped, so this is safe on
    unconstrained decoder output.
    """
    bioes = scheme == BIOES
    spans = []
    start = label = None

    def emit(end):
        surface = " ".join(tokens[start : end + 1]) if tokens is not None else ""
        spans.append(EntitySpan(label, start, end, surface))

    for i, tag in enumerate(tags):
        prefix, lab = split_tag(tag)
        if prefix in ("I", "E") and start is not None and lab == label:
            if prefix == "E" and bioes:
                emit(i)
                start = label = None
            continue
        if start is not None and not bioes:
            emit(i - 1)
        start = label = None
        if prefix == "B":
            start, label = i, lab
        elif prefix == "S" and bioes:
            start, label = i, lab
            emit(i)
            start = label = None
    if start is not None and not bioes:
        emit(len(tags) - 1)
    return spans


def spans_to_tags(spans: Sequence[EntitySpan], length: int, scheme: str = BIOES) -> list[str]:
    if scheme not in SCHEMES:
        raise CorpusError(f"unknown scheme {scheme!r}")
    tags = ["O"] * length
    for sp in sorted(spans, key=lambda s: s.start):
        if not 0 <= sp.start <= sp.end < length:
            raise CorpusError(f"span {sp.key()} outside [0, {length})")
        if any(t != "O" for t in tags[sp.start : sp.end + 1]):
            raise CorpusError(f"span {sp.key()} overlaps another span")
        if scheme == BIOES and sp.start == sp.end:
            tags[sp.start] = f"S-{sp.label}"
            continue
        tags[sp.start] = f"B-{sp.label}"
        for i in range(sp.start + 1, sp.end + 1):
            tags[i] = f"I-{sp.label}"
        if scheme == BIOES:
            tags[sp.end] = f"E-{sp.label}"
    return tags


def convert_sentence(s: Sentence, target: str) -> Sentence:
    if s.scheme == target:
        return s
    return Sentence(s.tokens, spans_to_tags(extract_spans(s), len(s), target), target)


def convert_scheme(d: Dataset, target: str) -> Dataset:
    if target not in SCHEMES:
        raise CorpusError(f"unknown scheme {target!r}")
    out = []
    for i, s in enumerate(d.sentences):
        try:
            _check_tags(s.tags, s.scheme)
        except CorpusError as exc:
            raise CorpusError(f"sentence {i}: {exc}") from None
        out.append(convert_sentence(s, target))
    return Dataset(tuple(out), d.label_set)


def bioes_tags(d: Dataset) -> set[str]:
    seen = set()
    for s in d:
        seen.update(convert_sentence(s, BIOES).tags)
    return seen


def subsample(d: Dataset, n: int, seed: int, max_attempts: int = 10_000) -> Dataset:
    """Seeded rejection sampling of ``n`` sentences covering every BIOES tag of ``d``.

    Selected sentences keep their corpus order.
    """
    if not 0 < n <= len(d):
        raise CorpusError(f"cannot sample {n} of {len(d)} sentences")
    if n == len(d):
        return d
    per_sentence = [frozenset(convert_sentence(s, BIOES).tags) for s in d]
    required = frozenset().union(*per_sentence)
    rng = np.random.default_rng(seed)
    best_missing = sorted(required)
    for _ in range(max_attempts):
        idx = np.sort(rng.choice(len(d), size=n, replace=False))
        covered = frozenset().union(*(per_sentence[i] for i in idx))
        missing = required - covered
        if not missing:
            return d.subset(idx.tolist())
        if len(missing) < len(best_missing):
            best_missing = sorted(missing)
    raise CoverageError(best_missing, max_attempts)


@dataclass(frozen=True)
class LabelStats:
    mean: float
    std: float


def entity_statistics(samples: Sequence[Dataset]) -> dict[str, LabelStats]:
    """Per-label mean and population std of entity counts across samples."""
    if not samples:
        raise CorpusError("entity_statistics needs at least one sample")
    labels: dict[str, None] = {}
    for d in samples:
        for lab in d.label_set:
            labels.setdefault(lab)
    counts = []
    for d in samples:
        c = Counter(sp.label for s in d for sp in extract_spans(s))
        counts.append(c)
    return {
        lab: LabelStats(float(np.mean([c[lab] for c in counts])), float(np.std([c[lab] for c in counts])))
        for lab in labels
    }


@dataclass(frozen=True)
class Occurrence:
    surface: str
    sentence_id: int
    span: EntitySpan


@dataclass
class EntityIndex:
    """Label -> ordered entity occurrences, with per-label surface frequencies."""

    dataset: Dataset
    occurrences: dict[str, list[Occurrence]] = field(default_factory=dict)
    frequencies: dict[str, Counter] = field(default_factory=dict)

    def __getitem__(self, label: str) -> list[Occurrence]:
        return self.occurrences[label]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.occurrences)

    def first_occurrence(self, label: str, surface: str) -> Occurrence:
        for occ in self.occurrences[label]:
            if occ.surface == surface:
                return occ
        raise KeyError((label, surface))

    def ranked_surfaces(self, label: str) -> list[str]:
        # Counter keeps insertion (corpus) order; the sort is stable.
        freq = self.frequencies[label]
        return sorted(freq, key=lambda s: -freq[s])

    def total(self) -> int:
        return sum(len(v) for v in self.occurrences.values())


def build_entity_index(d: Dataset) -> EntityIndex:
    index = EntityIndex(d, {lab: [] for lab in d.label_set}, {lab: Counter() for lab in d.label_set})
    for sid, s in enumerate(d):
        for sp in extract_spans(s):
            index.occurrences[sp.label].append(Occurrence(sp.surface, sid, sp))
            index.frequencies[sp.label][sp.surface] += 1
    return index
