"""Demonstration selection, retrieval, rendering and perturbation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .corpus import Dataset, EntityIndex, EntitySpan, Sentence, extract_spans
from .encoder import SEP

STRATEGIES = ("random", "fixed_random", "popular", "search", "retrieve_sentence", "retrieve_token")
FIXED_STRATEGIES = frozenset({"fixed_random", "popular", "search"})
INSTANCE_STRATEGIES = frozenset({"retrieve_sentence", "retrieve_token"})
TEMPLATES = ("no_context", "context", "lexical", "context_all", "lexical_all", "structure", "structure_all")
INSTANCE_TEMPLATES = frozenset({"context", "lexical"})
PERTURB_MODES = ("test_only", "train_and_test")

TEMPLATE_TOKENS = ("is", ".", "[", "]", "|", SEP)

EmbedFn = Callable[[Sequence[str]], np.ndarray]


class DemonstrationError(ValueError):
    pass


def is_fixed(strategy: str) -> bool:
    if strategy not in STRATEGIES:
        raise DemonstrationError(f"unknown strategy {strategy!r}")
    return strategy in FIXED_STRATEGIES


def check_compatible(strategy: str, template: str) -> None:
    if strategy not in STRATEGIES:
        raise DemonstrationError(f"unknown strategy {strategy!r}")
    if template not in TEMPLATES:
        raise DemonstrationError(f"unknown template {template!r}")
    if strategy in INSTANCE_STRATEGIES and template not in INSTANCE_TEMPLATES:
        raise DemonstrationError(f"template {template!r} is not available for {strategy!r}")


@dataclass(frozen=True)
class Entry:
    label: str
    surface: str
    sentence: Sentence | None = None
    span: EntitySpan | None = None  # where ``surface`` sits in ``sentence``


@dataclass(frozen=True)
class Selection:
    entries: tuple[Entry, ...]

    @property
    def label_order(self) -> tuple[str, ...]:
        return tuple(e.label for e in self.entries)

    def surfaces(self) -> tuple[str, ...]:
        return tuple(e.surface for e in self.entries)


@dataclass(frozen=True)
class Demonstration:
    tokens: tuple[str, ...]
    strategy: str
    template: str
    selection: Selection | None = None
    retrieved_id: int | None = None

    def provenance(self) -> dict:
        out = {"strategy": self.strategy, "template": self.template}
        if self.selection is not None:
            out["entities"] = [[e.label, e.surface] for e in self.selection.entries]
        if self.retrieved_id is not None:
            out["retrieved_id"] = self.retrieved_id
        return out


@dataclass(frozen=True)
class PerturbationSpec:
    entities: bool = False
    labels: bool = False
    contexts: bool = False
    seed: int = 0
    mode: str = "test_only"

    def __post_init__(self):
        if not (self.entities or self.labels or self.contexts):
            raise DemonstrationError("perturbation needs at least one of entities/labels/contexts")
        if self.mode not in PERTURB_MODES:
            raise DemonstrationError(f"unknown perturbation mode {self.mode!r}")

    def flags(self) -> list[str]:
        return [n for n in ("entities", "labels", "contexts") if getattr(self, n)]


def permute_label_order(order: Sequence[str], label_set: Sequence[str]) -> tuple[str, ...]:
    order = tuple(order)
    if len(order) != len(label_set) or set(order) != set(label_set) or len(set(order)) != len(order):
        raise DemonstrationError(f"label order {order} is not a permutation of {tuple(label_set)}")
    return order


def _entry_from(index: EntityIndex, label: str, occ) -> Entry:
    return Entry(label, occ.surface, index.dataset[occ.sentence_id], occ.span)


def _require(index: EntityIndex, label: str):
    occs = index.occurrences.get(label)
    if not occs:
        raise DemonstrationError(f"label {label!r} has no entity occurrences")
    return occs


def select_random(
    index: EntityIndex, label_order: Sequence[str], seed: int, fixed: bool = False, instance: int = 0
) -> Selection:
    """One uniformly drawn occurrence per label.

    With ``fixed`` the draw depends on ``seed`` only, so every input shares it;
    otherwise it is seeded by ``(seed, instance)``.
    """
    rng = np.random.default_rng(seed if fixed else [seed, instance])
    entries = []
    for label in label_order:
        occs = _require(index, label)
        entries.append(_entry_from(index, label, occs[int(rng.integers(len(occs)))]))
    return Selection(tuple(entries))


def select_popular(index: EntityIndex, label_order: Sequence[str]) -> Selection:
    entries = []
    for label in label_order:
        _require(index, label)
        surface = index.ranked_surfaces(label)[0]
        entries.append(_entry_from(index, label, index.first_occurrence(label, surface)))
    return Selection(tuple(entries))


def top_k(index: EntityIndex, label: str, k: int) -> list[str]:
    return index.ranked_surfaces(label)[:k]


def enumerate_candidates(index: EntityIndex, k: int, label_order: Sequence[str]) -> Iterator[Selection]:
    """Cartesian product of each label's top-``k`` surfaces, last label varying fastest."""
    if k < 1:
        raise DemonstrationError("k must be >= 1")
    pools = []
    for label in label_order:
        _require(index, label)
        pools.append([_entry_from(index, label, index.first_occurrence(label, s)) for s in top_k(index, label, k)])

    def walk(depth, prefix):
        if depth == len(pools):
            yield Selection(tuple(prefix))
            return
        for entry in pools[depth]:
            yield from walk(depth + 1, prefix + [entry])

    return walk(0, [])


def count_candidates(index: EntityIndex, k: int, label_order: Sequence[str]) -> int:
    return int(np.prod([min(k, len(index.frequencies[l])) for l in label_order]))


def _pooled(embed: EmbedFn, tokens) -> np.ndarray:
    return np.asarray(embed(tokens), dtype=np.float64).mean(axis=0)


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return -np.inf
    return float(a @ b / (na * nb))


def _argmax_first(scores) -> int:
    best, arg = -np.inf, None
    for i, s in enumerate(scores):
        if arg is None or s > best:
            best, arg = s, i
    return arg


def _candidates(x: Sentence, train: Dataset) -> list[int]:
    ids = [i for i, s in enumerate(train) if s is not x]
    if not ids:
        raise DemonstrationError("no retrieval candidates")
    return ids


def sentence_similarities(x: Sentence, train: Dataset, embed: EmbedFn) -> dict[int, float]:
    q = _pooled(embed, x.tokens)
    return {i: _cos(q, _pooled(embed, train[i].tokens)) for i in _candidates(x, train)}


def retrieve_sentence_sim(x: Sentence, train: Dataset, embed: EmbedFn) -> int:
    """Index of the training sentence whose mean-pooled embedding is most cosine-similar to ``x``."""
    sims = sentence_similarities(x, train, embed)
    ids = list(sims)
    return ids[_argmax_first([sims[i] for i in ids])]


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norms > 0, m / np.where(norms > 0, norms, 1.0), 0.0), norms[:, 0] > 0


def token_match_score(x_vecs: np.ndarray, c_vecs: np.ndarray) -> float:
    """Mean over input tokens of the best cosine against any candidate token."""
    xu, xok = _unit_rows(np.asarray(x_vecs, dtype=np.float64))
    cu, cok = _unit_rows(np.asarray(c_vecs, dtype=np.float64))
    if not xok.any() or not cok.any():
        return -np.inf
    sims = xu @ cu.T
    sims[:, ~cok] = -np.inf
    best = sims.max(axis=1)
    best[~xok] = 0.0
    return float(best.sum() / len(best))


def retrieve_token_sim(x: Sentence, train: Dataset, embed: EmbedFn) -> int:
    xv = np.asarray(embed(x.tokens), dtype=np.float64)
    ids = _candidates(x, train)
    scores = [token_match_score(xv, np.asarray(embed(train[i].tokens), dtype=np.float64)) for i in ids]
    return ids[_argmax_first(scores)]


def _statement(surface: str, label: str) -> list[str]:
    return surface.split(" ") + ["is", label, "."]


def _replace(tokens: Sequence[str], spans: Sequence[EntitySpan], render_span) -> list[str]:
    out, pos = [], 0
    for sp in sorted(spans, key=lambda s: s.start):
        out.extend(tokens[pos : sp.start])
        out.extend(render_span(sp))
        pos = sp.end + 1
    out.extend(tokens[pos:])
    return out


def _as_label(sp: EntitySpan, label: str | None = None) -> list[str]:
    return [label or sp.label]


def _as_structure(sp: EntitySpan, surface: str | None = None, label: str | None = None) -> list[str]:
    return ["["] + (surface or sp.surface).split(" ") + ["|", label or sp.label, "]"]


def _render_entry(template: str, e: Entry) -> list[str]:
    if template == "no_context":
        return _statement(e.surface, e.label)
    if e.sentence is None:
        raise DemonstrationError(f"template {template!r} needs a context sentence for {e.label!r}")
    s = list(e.sentence.tokens)
    all_spans = extract_spans(e.sentence)
    selected = [e.span] if e.span is not None else []
    if template == "context":
        return s + ["."] + _statement(e.surface, e.label)
    if template == "context_all":
        out = s + ["."]
        for sp in all_spans:
            out += _statement(sp.surface, sp.label)
        return out
    if template == "lexical":
        return _replace(s, selected, lambda sp: [e.label]) + ["."]
    if template == "lexical_all":
        return _replace(s, all_spans, _as_label) + ["."]
    if template == "structure":
        return _replace(s, selected, lambda sp: _as_structure(sp, e.surface, e.label)) + ["."]
    if template == "structure_all":
        return _replace(s, all_spans, _as_structure) + ["."]
    raise DemonstrationError(f"unknown template {template!r}")


def render_selection(template: str, sel: Selection, strategy: str = "popular", sep: str = SEP) -> Demonstration:
    check_compatible(strategy, template)
    if strategy in INSTANCE_STRATEGIES:
        raise DemonstrationError("instance-oriented strategies render retrieved sentences")
    tokens: list[str] = []
    for e in sel.entries:
        tokens.append(sep)
        tokens.extend(_render_entry(template, e))
    return Demonstration(tuple(tokens), strategy, template, selection=sel)


def render_instance(
    template: str, s: Sentence, strategy: str = "retrieve_token", sep: str = SEP, retrieved_id: int | None = None
) -> Demonstration:
    check_compatible(strategy, template)
    spans = extract_spans(s)
    if template == "context":
        body = list(s.tokens) + ["."]
        for sp in spans:
            body += _statement(sp.surface, sp.label)
    else:
        body = _replace(list(s.tokens), spans, _as_label) + ["."]
    return Demonstration(tuple([sep] + body), strategy, template, retrieved_id=retrieved_id)


def render(template: str, source, strategy: str | None = None, sep: str = SEP, retrieved_id=None) -> Demonstration:
    """Render a Selection (entity-oriented) or a retrieved Sentence (instance-oriented)."""
    if isinstance(source, Selection):
        return render_selection(template, source, strategy or "popular", sep)
    if isinstance(source, Sentence):
        return render_instance(template, source, strategy or "retrieve_token", sep, retrieved_id)
    raise DemonstrationError(f"cannot render {type(source).__name__}")


def _locate(tokens: Sequence[str], surface: str, label: str) -> EntitySpan | None:
    needle = surface.split(" ")
    for i in range(len(tokens) - len(needle) + 1):
        if list(tokens[i : i + len(needle)]) == needle:
            return EntitySpan(label, i, i + len(needle) - 1, surface)
    return None


def perturb(dem: Demonstration, spec: PerturbationSpec, index: EntityIndex, sep: str = SEP) -> Demonstration:
    """Re-render an entity-oriented demonstration with shuffled content.

    ``entities`` swaps each surface for one drawn from every label's pool,
    ``labels`` permutes labels across entries, ``contexts`` draws a new
    context sentence uniformly from the corpus.
    """
    if dem.selection is None:
        raise DemonstrationError("only entity-oriented demonstrations can be perturbed")
    rng = np.random.default_rng(spec.seed)
    entries = list(dem.selection.entries)
    if spec.entities:
        pool = [o.surface for label in index.labels for o in index.occurrences[label]]
        if pool:
            entries = [dataclasses.replace(e, surface=pool[int(rng.integers(len(pool)))]) for e in entries]
    if spec.labels:
        perm = rng.permutation(len(entries))
        labels = [entries[int(i)].label for i in perm]
        entries = [dataclasses.replace(e, label=lab) for e, lab in zip(entries, labels)]
    if spec.contexts and len(index.dataset):
        new = []
        for e in entries:
            s = index.dataset[int(rng.integers(len(index.dataset)))]
            new.append(dataclasses.replace(e, sentence=s, span=_locate(s.tokens, e.surface, e.label)))
        entries = new
    else:
        # keep the span aligned with the (possibly swapped) surface/label
        entries = [
            dataclasses.replace(e, span=dataclasses.replace(e.span, label=e.label, surface=e.surface))
            if e.span is not None
            else e
            for e in entries
        ]
    out = render_selection(dem.template, Selection(tuple(entries)), dem.strategy, sep)
    return out


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class DemoBuilder:
    """Produces the demonstration for each input instance of a run.

    Instances are keyed by ``(split, position)``. Fixed strategies return
    the same demonstration for every key; variable ones are deterministic
    per key and seed and are cached for the lifetime of the builder.
    """

    def __init__(
        self,
        strategy: str,
        template: str,
        train: Dataset,
        label_order: Sequence[str] | None = None,
        seed: int = 0,
        selection: Selection | None = None,
        embed: EmbedFn | None = None,
        sep: str = SEP,
        perturbation: PerturbationSpec | None = None,
        perturb_splits: Sequence[int] = (),
    ):
        check_compatible(strategy, template)
        self.strategy, self.template, self.train = strategy, template, train
        self.label_order = permute_label_order(label_order or train.label_set, train.label_set)
        self.seed, self.sep, self.embed = seed, sep, embed
        self.perturbation = perturbation
        self.perturb_splits = frozenset(perturb_splits)
        self.index = None
        self._cache: dict[tuple[int, int], Demonstration] = {}
        self._fixed: Demonstration | None = None
        if strategy in INSTANCE_STRATEGIES:
            if embed is None:
                raise DemonstrationError(f"{strategy} needs an embedding function")
            return
        from .corpus import build_entity_index

        self.index = build_entity_index(train)
        if strategy == "search":
            if selection is None:
                raise DemonstrationError("search needs the selection found by grid search")
            self._fixed = render_selection(template, selection, strategy, sep)
        elif strategy == "popular":
            self._fixed = render_selection(template, select_popular(self.index, self.label_order), strategy, sep)
        elif strategy == "fixed_random":
            sel = select_random(self.index, self.label_order, seed, fixed=True)
            self._fixed = render_selection(template, sel, strategy, sep)

    @property
    def fixed(self) -> bool:
        return self.strategy in FIXED_STRATEGIES

    def _base(self, sentence: Sentence, split: int, position: int) -> Demonstration:
        if self._fixed is not None:
            return self._fixed
        if self.strategy == "random":
            sel = select_random(self.index, self.label_order, self.seed, instance=derive_seed(split, position))
            return render_selection(self.template, sel, self.strategy, self.sep)
        retrieve = retrieve_sentence_sim if self.strategy == "retrieve_sentence" else retrieve_token_sim
        rid = retrieve(sentence, self.train, self.embed)
        return render_instance(self.template, self.train[rid], self.strategy, self.sep, rid)

    def __call__(self, sentence: Sentence, split: int, position: int) -> Demonstration:
        key = (split, position)
        if key not in self._cache:
            dem = self._base(sentence, split, position)
            if self.perturbation is not None and split in self.perturb_splits:
                spec = dataclasses.replace(self.perturbation, seed=derive_seed(self.perturbation.seed, split, position))
                dem = perturb(dem, spec, self.index, self.sep)
            self._cache[key] = dem
        return self._cache[key]

    def for_dataset(self, data: Dataset, split: int) -> list[Demonstration]:
        return [self(s, split, i) for i, s in enumerate(data)]
