"""Seeded synthetic tasks shaped like keyword spotting, intent classification,
speech recognition and slot filling, plus the unit corpus for pre-training.

Every generator is a pure function of its arguments. Inputs are already
deduplicated unit sequences.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quantizer import deduplicate

GRAMMAR_SEED = 1234
TASK_KINDS = ("cls_single", "cls_multi", "seq_gen", "slot_gen")


@dataclass(frozen=True)
class LabeledExample:
    id: int
    input_units: tuple[int, ...]
    labels: tuple[str, ...]


@dataclass
class Dataset:
    task_kind: str
    class_set: list[str]
    splits: dict[str, list[LabeledExample]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[LabeledExample]:
        return self.splits[split]

    @property
    def train(self) -> list[LabeledExample]:
        return self.splits["train"]

    @property
    def valid(self) -> list[LabeledExample]:
        return self.splits["valid"]

    @property
    def test(self) -> list[LabeledExample]:
        return self.splits["test"]


# --------------------------------------------------------------------------
# unit grammar
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkovGrammar:
    """First-order unit chain, or a mixture of chains with one topic per sequence.

    ``transitions`` is ``[K, V, V]``; every sequence draws a topic uniformly
    and then walks that topic's chain. ``K == 1`` is a plain Markov chain.
    """

    transitions: np.ndarray

    @property
    def n_topics(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_units(self) -> int:
        return self.transitions.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """Topic-averaged transition matrix."""
        return self.transitions.mean(axis=0)

    def stationary(self, topic: int = 0) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transitions[topic].T)
        pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return pi / pi.sum()

    def entropy_rate(self) -> float:
        """Conditional entropy (nats) of the next unit given the current unit
        and the topic, under each topic's stationary chain."""
        rates = []
        for k, p in enumerate(self.transitions):
            with np.errstate(divide="ignore", invalid="ignore"):
                row_h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
            rates.append(float(self.stationary(k) @ row_h))
        return float(np.mean(rates))

    def sample(self, rng: np.random.Generator, lengths: Sequence[int]) -> list[list[int]]:
        """Walk the chain(s) for every requested length at once."""
        lengths = np.asarray(lengths, dtype=np.int64)
        n, longest = len(lengths), int(lengths.max(initial=0))
        if n == 0 or longest == 0:
            return [[] for _ in range(n)]
        topics = rng.integers(0, self.n_topics, size=n) if self.n_topics > 1 else np.zeros(n, dtype=np.int64)
        cum = np.cumsum(self.transitions, axis=2)
        cum[:, :, -1] = 1.0
        pi_cum = np.cumsum([self.stationary(k) for k in range(self.n_topics)], axis=1)
        pi_cum[:, -1] = 1.0
        walk = np.empty((n, longest), dtype=np.int64)
        u = rng.random(n)
        walk[:, 0] = (pi_cum[topics] <= u[:, None]).sum(axis=1)
        for t in range(1, longest):
            u = rng.random(n)
            walk[:, t] = (cum[topics, walk[:, t - 1]] <= u[:, None]).sum(axis=1)
        return [walk[i, :lengths[i]].tolist() for i in range(n)]


def markov_grammar(n_units: int = 100, seed: int = GRAMMAR_SEED, branching: int = 4,
                   n_topics: int = 1) -> MarkovGrammar:
    """Sparse chain(s): each unit has ``branching`` successors, never itself."""
    rng = np.random.default_rng(seed)
    p = np.zeros((n_topics, n_units, n_units))
    for k in range(n_topics):
        for i in range(n_units):
            others = np.delete(np.arange(n_units), i)
            succ = rng.choice(others, size=min(branching, n_units - 1), replace=False)
            p[k, i, succ] = rng.dirichlet(np.ones(len(succ)))
    return MarkovGrammar(p)


def gen_unit_corpus(seed: int, size: int, n_units: int = 100, min_len: int = 32, max_len: int = 128,
                    grammar: MarkovGrammar | None = None) -> list[list[int]]:
    if size < 1:
        raise ValueError("corpus size must be >= 1")
    grammar = grammar or markov_grammar(n_units)
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=size)
    return grammar.sample(rng, lengths)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _split_sizes(sizes) -> dict[str, int]:
    train, valid, test = sizes
    return {"train": int(train), "valid": int(valid), "test": int(test)}


def _motif_table(rng: np.random.Generator, n_motifs: int, motif_len: int, n_units: int) -> list[list[int]]:
    """Distinct-unit motifs; no unit is shared between motifs."""
    need = n_motifs * motif_len
    if need > n_units:
        raise ValueError(f"{n_motifs} motifs of length {motif_len} need {need} units, have {n_units}")
    pool = rng.permutation(n_units)[:need]
    return [pool[i * motif_len:(i + 1) * motif_len].tolist() for i in range(n_motifs)]


def _embed_motifs(rng: np.random.Generator, grammar: MarkovGrammar, motifs: Sequence[Sequence[int]],
                  bg_len: tuple[int, int]) -> list[int]:
    """Grammar background with ``motifs`` inserted, in order, at random cut points."""
    n_bg = int(rng.integers(bg_len[0], bg_len[1] + 1))
    background = grammar.sample(rng, [n_bg])[0]
    cuts = np.sort(rng.integers(0, n_bg + 1, size=len(motifs)))
    out: list[int] = []
    prev = 0
    for cut, motif in zip(cuts, motifs):
        out.extend(background[prev:cut])
        out.extend(motif)
        prev = cut
    out.extend(background[prev:])
    return deduplicate(out)


def _assemble(task_kind: str, class_set: list[str], sizes, make) -> Dataset:
    """``make(split, index)`` -> (units, labels); ids run over all splits."""
    ds = Dataset(task_kind, class_set)
    next_id = 0
    for split, n in _split_sizes(sizes).items():
        rows = []
        for i in range(n):
            units, labels = make(split, i)
            rows.append(LabeledExample(next_id, tuple(units), tuple(labels)))
            next_id += 1
        ds.splits[split] = rows
    return ds


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------

KEYWORDS = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
            "silence", "unknown"]


def gen_cls_single(seed: int, n_classes: int = 12, sizes=(600, 120, 240), motif_len: int = 3,
                   bg_len: tuple[int, int] = (8, 16), n_units: int = 100) -> Dataset:
    """One label per example, signalled by a class motif inside grammar background."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    names = KEYWORDS[:n_classes] if n_classes <= len(KEYWORDS) else [f"class{i:02d}" for i in range(n_classes)]
    rng = np.random.default_rng(seed)
    grammar = markov_grammar(n_units)
    motifs = _motif_table(rng, n_classes, motif_len, n_units)
    split_rngs = {s: np.random.default_rng([seed, k]) for k, s in enumerate(("train", "valid", "test"))}
    orders = {s: split_rngs[s].permutation(n) % n_classes for s, n in _split_sizes(sizes).items()}

    def make(split, i):
        c = int(orders[split][i])
        return _embed_motifs(split_rngs[split], grammar, [motifs[c]], bg_len), [names[c]]

    return _assemble("cls_single", sorted(names), sizes, make)


ACTIONS = ["activate", "deactivate", "increase", "decrease", "change_language", "bring"]
OBJECTS = ["none_object", "lights", "music", "lamp", "heat", "volume", "newspaper", "juice",
           "socks", "shoes", "chinese", "korean", "english", "german"]
LOCATIONS = ["none_location", "kitchen", "bedroom", "washroom"]

# (action, object, location) triples that may occur. Objects pair only with
# compatible actions: lights can be activated but never increased.
INTENTS = [
    ("activate", "lights", "none_location"), ("activate", "lights", "kitchen"),
    ("activate", "lights", "bedroom"), ("activate", "music", "none_location"),
    ("activate", "lamp", "none_location"), ("deactivate", "lights", "none_location"),
    ("deactivate", "lights", "kitchen"), ("deactivate", "lights", "washroom"),
    ("deactivate", "music", "none_location"), ("bring", "shoes", "none_location"),
    ("increase", "heat", "none_location"), ("increase", "heat", "kitchen"),
    ("increase", "volume", "none_location"), ("decrease", "heat", "none_location"),
    ("decrease", "heat", "bedroom"), ("decrease", "volume", "none_location"),
    ("change_language", "none_object", "none_location"), ("change_language", "chinese", "none_location"),
    ("change_language", "korean", "none_location"), ("change_language", "english", "none_location"),
    ("change_language", "german", "none_location"), ("bring", "newspaper", "none_location"),
    ("bring", "juice", "none_location"), ("bring", "socks", "none_location"),
]
COMPATIBLE = {(a, o) for a, o, _ in INTENTS}


def gen_cls_multi(seed: int, slots: int = 3, sizes=(720, 144, 240), motif_len: int = 2,
                  bg_len: tuple[int, int] = (6, 12), n_units: int = 100) -> Dataset:
    """(action, object, location) triples; each slot value has its own motif."""
    if slots < 2:
        raise ValueError("slots must be >= 2")
    slot_values = [ACTIONS, OBJECTS, LOCATIONS][:slots]
    intents = sorted({t[:slots] for t in INTENTS})
    names = [v for values in slot_values for v in values]
    rng = np.random.default_rng(seed)
    grammar = markov_grammar(n_units)
    motifs = dict(zip(names, _motif_table(rng, len(names), motif_len, n_units)))
    split_rngs = {s: np.random.default_rng([seed, k]) for k, s in enumerate(("train", "valid", "test"))}
    orders = {s: split_rngs[s].permutation(n) % len(intents) for s, n in _split_sizes(sizes).items()}

    def make(split, i):
        intent = intents[int(orders[split][i])]
        units = _embed_motifs(split_rngs[split], grammar, [motifs[v] for v in intent], bg_len)
        return units, list(intent)

    present = sorted({v for t in intents for v in t})
    return _assemble("cls_multi", present, sizes, make)


# --------------------------------------------------------------------------
# sequence generation
# --------------------------------------------------------------------------

WORD_BOUNDARY = "|"
CHARACTERS = list(string.ascii_lowercase) + ["'", "-", WORD_BOUNDARY]
DEFAULT_BUCKETS = ((5, 10), (20, 30), (50, 80))


def _random_text(rng: np.random.Generator, length: int, letters: Sequence[str]) -> list[str]:
    """Words of 2-7 letters joined by the boundary symbol, exactly ``length`` chars."""
    chars: list[str] = []
    while len(chars) < length:
        room = length - len(chars) - (1 if chars else 0)
        if room <= 0:
            chars.append(letters[int(rng.integers(len(letters)))])
            continue
        w = min(int(rng.integers(2, 8)), room)
        if room - w in (1, 2):
            w = room  # avoid a trailing stub that cannot hold a word
        if chars:
            chars.append(WORD_BOUNDARY)
        chars.extend(letters[int(j)] for j in rng.integers(0, len(letters), size=w))
    return chars[:length]


def gen_seq_gen(seed: int, alphabet: int = 29, length_buckets=DEFAULT_BUCKETS,
                sizes=(200, 40, 60), motif_len: int = 2, n_units: int = 100) -> Dataset:
    """Character transcription; ``sizes`` are per length bucket."""
    if not length_buckets:
        raise ValueError("length_buckets must be non-empty")
    if not 2 <= alphabet <= len(CHARACTERS):
        raise ValueError(f"alphabet must be in [2, {len(CHARACTERS)}]")
    chars = CHARACTERS[:alphabet - 1] + [WORD_BOUNDARY]
    letters = chars[:-1]
    rng = np.random.default_rng(seed)
    motifs = dict(zip(chars, _motif_table(rng, len(chars), motif_len, n_units)))
    split_rngs = {s: np.random.default_rng([seed, k]) for k, s in enumerate(("train", "valid", "test"))}
    n_buckets = len(length_buckets)

    def make(split, i):
        r = split_rngs[split]
        lo, hi = length_buckets[i % n_buckets]
        text = _random_text(r, int(r.integers(lo, hi + 1)), letters)
        return [u for ch in text for u in motifs[ch]], text

    per_bucket = _split_sizes(sizes)
    total = tuple(per_bucket[s] * n_buckets for s in ("train", "valid", "test"))
    return _assemble("seq_gen", sorted(chars), total, make)


SLOT_TYPES = ["city", "date", "time", "person", "artist", "song", "playlist", "device", "room",
              "genre", "album", "country", "weather", "food", "restaurant", "movie", "number",
              "language", "color", "app"]
FILLER = ["play", "set", "find", "book", "the", "in", "for", "at", "to", "me", "please", "now"]


def slot_tags(slot_type: str) -> tuple[str, str]:
    return f"<{slot_type}>", f"</{slot_type}>"


def gen_slot_gen(seed: int, sizes=(300, 60, 100), n_slot_types: int = 20, motif_len: int = 2,
                 n_units: int = 100) -> Dataset:
    """Transcripts with tagged slot spans; a slot's type is fixed by its value word."""
    rng = np.random.default_rng(seed)
    chars = CHARACTERS
    letters = list(string.ascii_lowercase)
    types = SLOT_TYPES[:n_slot_types]
    motifs = dict(zip(chars, _motif_table(rng, len(chars), motif_len, n_units)))
    lexicon = {t: ["".join(rng.choice(letters, size=int(rng.integers(3, 7)))) for _ in range(4)] for t in types}
    split_rngs = {s: np.random.default_rng([seed, k]) for k, s in enumerate(("train", "valid", "test"))}

    def make(split, i):
        r = split_rngs[split]
        spoken: list[str] = []
        labels: list[str] = []

        def word(w, tag=None):
            if spoken:
                spoken.append(WORD_BOUNDARY)
                labels.append(WORD_BOUNDARY)
            if tag:
                labels.append(slot_tags(tag)[0])
            spoken.extend(w)
            labels.extend(w)
            if tag:
                labels.append(slot_tags(tag)[1])

        for _ in range(int(r.integers(1, 3))):
            word(FILLER[int(r.integers(len(FILLER)))])
            t = types[int(r.integers(len(types)))]
            word(lexicon[t][int(r.integers(4))], tag=t)
        return [u for ch in spoken for u in motifs[ch]], labels

    classes = sorted(set(chars) | {tag for t in types for tag in slot_tags(t)})
    return _assemble("slot_gen", classes, sizes, make)


GENERATORS = {
    "cls_single": gen_cls_single,
    "cls_multi": gen_cls_multi,
    "seq_gen": gen_seq_gen,
    "slot_gen": gen_slot_gen,
}
