from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitprompt.quantizer import deduplicate
from unitprompt.tasks import (COMPATIBLE, DEFAULT_BUCKETS, GENERATORS, INTENTS, WORD_BOUNDARY, gen_cls_multi,
                              gen_cls_single, gen_seq_gen, gen_slot_gen, gen_unit_corpus, markov_grammar)


def test_corpus_is_seeded_and_in_range():
    a, b = gen_unit_corpus(3, 50), gen_unit_corpus(3, 50)
    assert a == b
    assert all(32 <= len(s) <= 128 for s in a)
    assert all(0 <= u < 100 for s in a for u in s)
    with pytest.raises(ValueError):
        gen_unit_corpus(0, 0)


def test_bigram_frequencies_match_transition_matrix():
    g = markov_grammar(100)
    corpus = gen_unit_corpus(0, 10_000, grammar=g)
    counts = np.zeros((100, 100))
    for s in corpus:
        np.add.at(counts, (s[:-1], s[1:]), 1)
    visits = counts.sum(axis=1)
    # rows the chain actually visits often enough to estimate; a few units are
    # transient and (almost) never reached
    seen = visits >= 2000
    assert seen.sum() >= 80
    empirical = counts[seen] / visits[seen, None]
    assert np.abs(empirical - g.matrix[seen]).max() < 0.02
    joint = counts / counts.sum()
    assert np.abs(joint - g.stationary(0)[:, None] * g.matrix).max() < 0.001


def test_grammar_never_repeats_a_unit():
    g = markov_grammar(30, n_topics=3)
    assert np.all(np.einsum("kii->ki", g.transitions) == 0)
    np.testing.assert_allclose(g.transitions.sum(axis=2), 1.0)
    # topic 0 of a mixture is the plain chain built from the same seed
    np.testing.assert_array_equal(g.transitions[0], markov_grammar(30).transitions[0])


def test_entropy_rate_of_uniform_chain():
    from unitprompt.tasks import MarkovGrammar
    n = 5
    p = (np.ones((n, n)) - np.eye(n)) / (n - 1)
    assert MarkovGrammar(p[None]).entropy_rate() == pytest.approx(np.log(n - 1))


def test_cls_single_shape():
    ds = gen_cls_single(0)
    assert len(ds.class_set) == 12
    for split in ("train", "valid", "test"):
        counts = Counter(ex.labels[0] for ex in ds[split])
        assert max(counts.values()) - min(counts.values()) <= 1
    assert all(len(ex.labels) == 1 for ex in ds.train)


def histogram_features(examples, n_units=100):
    x = np.zeros((len(examples), n_units + 1))
    for i, ex in enumerate(examples):
        np.add.at(x[i], list(ex.input_units), 1.0)
    x[:, -1] = 1.0
    return x


def test_cls_single_is_linearly_separable():
    ds = gen_cls_single(0)
    classes = ds.class_set
    y = np.eye(len(classes))[[classes.index(ex.labels[0]) for ex in ds.train]]
    w, *_ = np.linalg.lstsq(histogram_features(ds.train), y, rcond=None)
    pred = histogram_features(ds.test).dot(w).argmax(axis=1)
    gold = [classes.index(ex.labels[0]) for ex in ds.test]
    assert np.mean(pred == gold) >= 0.95


def test_cls_multi_shape():
    ds = gen_cls_multi(0)
    triples = set()
    for ex in ds.train + ds.valid + ds.test:
        assert len(ex.labels) == 3
        assert (ex.labels[0], ex.labels[1]) in COMPATIBLE
        triples.add(ex.labels)
    assert len(triples) <= 24
    assert len(ds.class_set) == 24
    assert ("increase", "lights") not in COMPATIBLE
    assert len(set(INTENTS)) == len(INTENTS) == 24


def test_seq_gen_shape():
    ds = gen_seq_gen(0)
    assert len(ds.class_set) == 29
    lengths = [len(ex.labels) for ex in ds.train]
    for lo, hi in DEFAULT_BUCKETS:
        assert sum(lo <= n <= hi for n in lengths) == 200
    target = np.mean([(lo + hi) / 2 for lo, hi in DEFAULT_BUCKETS])
    assert abs(np.mean(lengths) - target) / target < 0.10


def test_seq_gen_label_recoverable_from_units():
    ds = gen_seq_gen(1, sizes=(20, 5, 5))
    table = {}
    for ex in ds.train:
        motif = len(ex.input_units) // len(ex.labels)
        for i, ch in enumerate(ex.labels):
            chunk = ex.input_units[i * motif:(i + 1) * motif]
            assert table.setdefault(chunk, ch) == ch


def test_seq_gen_needs_buckets():
    with pytest.raises(ValueError):
        gen_seq_gen(0, length_buckets=())


def test_slot_gen_shape():
    ds = gen_slot_gen(0)
    assert len(ds.class_set) <= 69
    for ex in ds.train:
        depth = 0
        for lab in ex.labels:
            if lab.startswith("</"):
                depth -= 1
            elif lab.startswith("<"):
                depth += 1
            assert depth in (0, 1)
        assert depth == 0
        assert WORD_BOUNDARY in ex.labels
    assert gen_slot_gen(0) == ds


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(sorted(GENERATORS)), st.integers(0, 1000))
def test_generators_are_pure_deduplicated_and_disjoint(kind, seed):
    sizes = (12, 4, 4) if kind != "seq_gen" else (4, 2, 2)
    a, b = GENERATORS[kind](seed, sizes=sizes), GENERATORS[kind](seed, sizes=sizes)
    assert a == b
    ids = [ex.id for split in ("train", "valid", "test") for ex in a[split]]
    assert len(ids) == len(set(ids))
    for ex in a.train + a.valid + a.test:
        assert ex.input_units and list(ex.input_units) == deduplicate(ex.input_units)
        assert set(ex.labels) <= set(a.class_set)


def test_cls_generators_validate_arguments():
    with pytest.raises(ValueError):
        gen_cls_single(0, n_classes=1)
    with pytest.raises(ValueError):
        gen_cls_multi(0, slots=1)
