from __future__ import annotations

import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import random_dataset, sentence_from, span_layouts
from demoner.corpus import (
    BIOES,
    IOB2,
    CorpusError,
    CoverageError,
    Dataset,
    EntitySpan,
    Sentence,
    bioes_tags,
    build_entity_index,
    convert_scheme,
    entity_statistics,
    extract_spans,
    format_conll,
    parse_conll,
    spans_to_tags,
    subsample,
    tags_to_spans,
)
from demoner.synth import SynthSpec, generate


def test_parse_reads_token_and_last_column():
    d = parse_conll("EU NNP B-ORG\nrejects VBZ O\n")
    assert len(d) == 1
    assert d[0].tokens == ("EU", "rejects")
    assert d[0].tags == ("B-ORG", "O")


def test_parse_empty_input():
    d = parse_conll("")
    assert len(d) == 0 and d.label_set == ()


def test_parse_skips_docstart_and_blank_runs():
    text = "-DOCSTART- -X- O\n\nA B-PER\nb O\n\n\nC B-LOC\n"
    d = parse_conll(text)
    assert [s.tokens for s in d] == [("A", "b"), ("C",)]
    assert d.label_set == ("PER", "LOC")


def test_parse_ragged_line_names_line():
    with pytest.raises(CorpusError, match="line 2"):
        parse_conll("a NN O\nb O\n")


def test_parse_rejects_bad_prefix():
    with pytest.raises(CorpusError):
        parse_conll("a X-PER\n")


def test_parse_detects_bioes():
    assert parse_conll("a S-PER\nb O\n").scheme == BIOES
    assert parse_conll("a B-PER\nb I-PER\n").scheme == IOB2


def test_label_set_follows_first_appearance():
    d = generate(SynthSpec(labels=("PER", "LOC"), train_size=3, dev_size=1, test_size=1, seed=5))["train"]
    scan = []
    for s in d:
        for t in s.tags:
            if t != "O" and t[2:] not in scan:
                scan.append(t[2:])
    text = format_conll(d)
    assert parse_conll(text).label_set == tuple(scan)


def test_sentence_validation():
    with pytest.raises(CorpusError):
        Sentence(("a",), ("I-PER",), IOB2)
    with pytest.raises(CorpusError):
        Sentence(("a", "b"), ("B-PER", "O"), BIOES)
    with pytest.raises(CorpusError):
        Sentence(("a",), ("O", "O"))


def test_dataset_rejects_unknown_label():
    with pytest.raises(CorpusError):
        Dataset((Sentence(("a",), ("B-PER",)),), ("LOC",))


def test_convert_rules():
    d = Dataset((Sentence(("a", "b", "c"), ("B-PER", "I-PER", "O")), Sentence(("a", "b"), ("B-PER", "O"))), ("PER",))
    out = convert_scheme(d, BIOES)
    assert out[0].tags == ("B-PER", "E-PER", "O")
    assert out[1].tags == ("S-PER", "O")


def test_convert_error_names_sentence():
    bad = Sentence.__new__(Sentence)
    object.__setattr__(bad, "tokens", ("a",))
    object.__setattr__(bad, "tags", ("I-PER",))
    object.__setattr__(bad, "scheme", IOB2)
    good = Sentence(("a",), ("O",))
    with pytest.raises(CorpusError, match="sentence 1"):
        convert_scheme(Dataset((good, bad), ("PER",)), BIOES)


def test_extract_spans_examples():
    s = Sentence(("John", "lives", "New", "York"), ("B-PER", "O", "B-LOC", "I-LOC"))
    assert [sp.key() for sp in extract_spans(s)] == [("PER", 0, 0), ("LOC", 2, 3)]
    assert extract_spans(s)[1].surface == "New York"
    assert extract_spans(Sentence(("a", "b"), ("O", "O"))) == []


def test_lenient_span_reading_drops_fragments():
    assert tags_to_spans(["I-PER", "O"], IOB2) == []
    assert tags_to_spans(["B-PER", "I-PER"], BIOES) == []
    assert [s.key() for s in tags_to_spans(["B-PER", "E-LOC", "S-ORG"], BIOES)] == [("ORG", 2, 2)]


def test_spans_to_tags_errors():
    with pytest.raises(CorpusError):
        spans_to_tags([EntitySpan("PER", 0, 1), EntitySpan("LOC", 1, 2)], 4)
    with pytest.raises(CorpusError):
        spans_to_tags([EntitySpan("PER", 2, 4)], 4)


@settings(max_examples=200, deadline=None)
@given(span_layouts())
def test_round_trip_iob2_bioes(layout):
    n, spans = layout
    s = sentence_from(n, spans, IOB2)
    d = Dataset((s,), ("PER", "LOC", "ORG"))
    back = convert_scheme(convert_scheme(d, BIOES), IOB2)
    assert back[0].tags == s.tags
    assert [sp.key() for sp in extract_spans(convert_scheme(d, BIOES)[0])] == [sp.key() for sp in spans]


@settings(max_examples=200, deadline=None)
@given(span_layouts())
def test_spans_tags_inverse(layout):
    n, spans = layout
    for scheme in (IOB2, BIOES):
        tags = spans_to_tags(spans, n, scheme)
        assert [sp.key() for sp in tags_to_spans(tags, scheme)] == [sp.key() for sp in spans]
        assert spans_to_tags(tags_to_spans(tags, scheme), n, scheme) == tags


def test_subsample_whole_dataset():
    d = random_dataset(np.random.default_rng(0), 12)
    assert subsample(d, len(d), seed=9) is d


def test_subsample_deterministic_and_covering():
    d = random_dataset(np.random.default_rng(1), 60)
    a, b = subsample(d, 15, 4), subsample(d, 15, 4)
    assert [s.tokens for s in a] == [s.tokens for s in b]
    assert bioes_tags(a) == bioes_tags(d)


def test_subsample_keeps_rare_tag_sentence():
    base = [Sentence((f"x{i}", "y"), ("S-PER", "O"), BIOES) for i in range(6)]
    rare = Sentence(("m",), ("S-MISC",), BIOES)
    d = Dataset(tuple(base[:3] + [rare] + base[3:]), ("PER", "MISC"))
    # brute force: every accepted 5-subset contains the rare sentence
    tags = [set(s.tags) for s in d]
    needed = set().union(*tags)
    accepted = [c for c in itertools.combinations(range(len(d)), 5) if set().union(*(tags[i] for i in c)) == needed]
    assert accepted and all(3 in c for c in accepted)
    for seed in range(10):
        assert any(s is rare for s in subsample(d, 5, seed))


def test_subsample_unsatisfiable():
    d = Dataset(
        tuple(Sentence((f"a{i}",), (f"S-{lab}",), BIOES) for i, lab in enumerate(["PER", "LOC", "ORG"])),
        ("PER", "LOC", "ORG"),
    )
    with pytest.raises(CoverageError, match="coverage unsatisfiable"):
        subsample(d, 2, 0, max_attempts=50)
    with pytest.raises(CorpusError):
        subsample(d, 4, 0)


def test_entity_statistics_examples():
    one = Dataset((Sentence(("a", "b", "c"), ("S-PER", "S-PER", "S-PER"), BIOES),), ("PER",))
    assert entity_statistics([one])["PER"].mean == 3.0
    assert entity_statistics([one])["PER"].std == 0.0
    two = Dataset((Sentence(("a", "b"), ("S-LOC", "S-LOC"), BIOES),), ("LOC",))
    four = Dataset((Sentence(("a", "b", "c", "d"), ("S-LOC",) * 4, BIOES),), ("LOC",))
    st = entity_statistics([two, four])["LOC"]
    assert (st.mean, st.std) == (3.0, 1.0)


def test_entity_statistics_recount():
    d = convert_scheme(generate(SynthSpec(train_size=120, seed=1))["train"], BIOES)
    samples = [subsample(d, 25, s) for s in range(5)]
    stats = entity_statistics(samples)
    for lab in d.label_set:
        counts = []
        for sample in samples:
            c = 0
            for s in sample:
                c += sum(1 for t in s.tags if t.startswith(("B-", "S-")) and t[2:] == lab)
            counts.append(c)
        assert stats[lab].mean == pytest.approx(np.mean(counts))
        assert stats[lab].std == pytest.approx(np.std(counts))


def test_entity_index():
    sents = (
        Sentence(("Ann", "met", "Bo"), ("S-PER", "O", "S-PER"), BIOES),
        Sentence(("Ann", "left"), ("S-PER", "O"), BIOES),
    )
    idx = build_entity_index(Dataset(sents, ("PER", "LOC")))
    assert idx.frequencies["PER"] == Counter({"Ann": 2, "Bo": 1})
    assert idx.occurrences["LOC"] == [] and "LOC" in idx.labels
    assert idx.ranked_surfaces("PER") == ["Ann", "Bo"]
    assert idx.first_occurrence("PER", "Ann").sentence_id == 0


def test_entity_index_total_matches_recount():
    d = random_dataset(np.random.default_rng(5), 40)
    assert build_entity_index(d).total() == sum(len(extract_spans(s)) for s in d)


def test_conll_round_trip(tmp_path):
    d = convert_scheme(generate(SynthSpec(train_size=10, dev_size=1, test_size=1))["train"], BIOES)
    path = tmp_path / "x.txt"
    path.write_text(format_conll(d))
    back = parse_conll(path.read_text())
    assert [(s.tokens, s.tags) for s in back] == [(s.tokens, s.tags) for s in d]
