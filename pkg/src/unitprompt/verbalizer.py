"""Frequency-rank verbalizer: a one-to-one map from task labels to units."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class UnknownLabel(KeyError):
    pass


@dataclass(frozen=True)
class Verbalizer:
    label_to_unit: dict[str, int]
    eos_id: int
    n_units: int
    unit_to_label: dict[int, str] = field(init=False)

    def __post_init__(self):
        inverse = {u: lab for lab, u in self.label_to_unit.items()}
        if len(inverse) != len(self.label_to_unit):
            raise ValueError("verbalizer is not one-to-one")
        for u in inverse:
            if not 0 <= u < self.n_units:
                raise ValueError(f"verbalizer unit {u} outside [0, {self.n_units})")
        object.__setattr__(self, "unit_to_label", inverse)

    @property
    def labels(self) -> list[str]:
        """Labels in rank order."""
        return list(self.label_to_unit)

    def __len__(self) -> int:
        return len(self.label_to_unit)


@dataclass
class DecodeResult:
    labels: list[str]
    invalid_units: list[int]
    hit_eos: bool


def _ranked(counts: Counter, key) -> list:
    return sorted(counts, key=lambda item: (-counts[item], key(item)))


def build_verbalizer(train_inputs: Sequence[Sequence[int]], train_labels: Sequence[Sequence[str]],
                     n: int, n_units: int, eos_id: int, random_seed: int | None = None) -> Verbalizer:
    """Map the i-th most frequent class to the i-th most frequent input unit.

    Ties rank lower unit ids and lexicographically smaller labels first. With
    ``random_seed`` set, the top-``n`` units are assigned to the classes by a
    seeded random permutation instead (ablation baseline).
    """
    if n > n_units:
        raise ValueError(f"N={n} exceeds the unit inventory of {n_units}")
    unit_counts = Counter(int(u) for seq in train_inputs for u in seq)
    class_counts = Counter(lab for seq in train_labels for lab in seq)
    if len(unit_counts) < n:
        raise ValueError(f"training inputs contain {len(unit_counts)} distinct units, need {n}")
    if len(class_counts) != n:
        raise ValueError(f"training labels contain {len(class_counts)} distinct classes, expected {n}")
    units = _ranked(unit_counts, int)[:n]
    classes = _ranked(class_counts, str)
    if random_seed is not None:
        units = [units[i] for i in np.random.default_rng(random_seed).permutation(n)]
    return Verbalizer(dict(zip(classes, units)), eos_id=eos_id, n_units=n_units)


def encode_labels(v: Verbalizer, labels: Iterable[str]) -> list[int]:
    out = []
    for lab in labels:
        try:
            out.append(v.label_to_unit[lab])
        except KeyError:
            raise UnknownLabel(f"label {lab!r} is not in the verbalizer") from None
    out.append(v.eos_id)
    return out


def decode_units(v: Verbalizer, units: Iterable[int]) -> DecodeResult:
    """Map generated units back to labels, stopping at the first EOS.

    Units outside the verbalizer's image are skipped and reported.
    """
    labels, invalid = [], []
    hit_eos = False
    for u in units:
        u = int(u)
        if u == v.eos_id:
            hit_eos = True
            break
        lab = v.unit_to_label.get(u)
        if lab is None:
            invalid.append(u)
        else:
            labels.append(lab)
    return DecodeResult(labels, invalid, hit_eos)


def dumps(v: Verbalizer) -> str:
    return "".join(f"{lab}\t{u}\n" for lab, u in v.label_to_unit.items())


def loads(text: str, n_units: int, eos_id: int) -> Verbalizer:
    mapping = {}
    for line in text.splitlines():
        if not line:
            continue
        lab, unit = line.rsplit("\t", 1)
        mapping[lab] = int(unit)
    return Verbalizer(mapping, eos_id=eos_id, n_units=n_units)
