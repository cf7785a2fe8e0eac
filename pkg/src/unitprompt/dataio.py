"""Line-delimited record files for datasets, unit sequences and feature sequences."""

from __future__ import annotations

import json
from pathlib import Path

from .checkpoint import atomic_write
from .tasks import Dataset, LabeledExample

SPLITS = ("train", "valid", "test")


def _dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def write_records(path, records) -> None:
    atomic_write(path, "".join(_dumps(r) + "\n" for r in records))


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{n}: malformed record ({err.msg})") from None
    return out


def save_dataset(directory, ds: Dataset) -> None:
    directory = Path(directory)
    for split in SPLITS:
        write_records(directory / f"{split}.jsonl",
                      ({"id": ex.id, "units": list(ex.input_units), "labels": list(ex.labels)}
                       for ex in ds.splits.get(split, [])))
    atomic_write(directory / "dataset.json",
                 _dumps({"task_kind": ds.task_kind, "class_set": ds.class_set}) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "dataset.json").read_text(encoding="utf-8"))
    ds = Dataset(meta["task_kind"], list(meta["class_set"]))
    for split in SPLITS:
        path = directory / f"{split}.jsonl"
        rows = read_records(path) if path.exists() else []
        ds.splits[split] = [LabeledExample(int(r["id"]), tuple(int(u) for u in r["units"]),
                                           tuple(str(x) for x in r.get("labels", []))) for r in rows]
    return ds
