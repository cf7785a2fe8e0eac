"""Pipeline stages shared by the command line and the trend experiments.

Every stage is a pure function of an ``ExperimentConfig`` (plus the artifacts
it reads), so rerunning a stage with the same configuration reproduces its
outputs byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from statistics import mean, pstdev

from . import config as config_mod
from .checkpoint import CheckpointManifest, atomic_write, load_ulm, run_meta, save_prompts, save_ulm
from .config import ExperimentConfig
from .prompt import PromptSet, count_trainable_params, prompt_init
from .tasks import DEFAULT_BUCKETS, GENERATORS, Dataset, gen_unit_corpus, markov_grammar
from .train_eval import GenConfig, evaluate, finetune_lm, length_bucket_report, predict_labels, prompt_tune
from .ulm import ULM, evaluate_lm, ulm_init, ulm_pretrain
from .verbalizer import Verbalizer, build_verbalizer

log = logging.getLogger(__name__)

RESULTS_ENV = "UNITPROMPT_RESULTS"
METRIC_COLUMNS = ["task", "mode", "l", "params", "seed", "metric", "value"]
PRIMARY_METRIC = {"cls_single": "acc", "cls_multi": "acc", "seq_gen": "cer", "slot_gen": "f1"}


def results_root(override=None) -> Path:
    return Path(override or os.environ.get(RESULTS_ENV) or "results")


def fingerprint(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    t = cfg.task
    if t.kind not in GENERATORS:
        raise ValueError(f"unknown task kind {t.kind!r}; choose from {sorted(GENERATORS)}")
    kwargs = {"n_units": cfg.ulm.n_units}
    if t.train_size or t.valid_size or t.test_size:
        default = {"cls_single": (600, 120, 240), "cls_multi": (720, 144, 240),
                   "seq_gen": (200, 40, 60), "slot_gen": (300, 60, 100)}[t.kind]
        kwargs["sizes"] = tuple(s or d for s, d in zip((t.train_size, t.valid_size, t.test_size), default))
    return GENERATORS[t.kind](t.seed, **kwargs)


def make_corpus(cfg: ExperimentConfig) -> tuple[list[list[int]], list[list[int]]]:
    c = cfg.corpus
    grammar = markov_grammar(cfg.ulm.n_units, branching=c.branching, n_topics=c.topics)
    train = gen_unit_corpus(c.seed, c.size, cfg.ulm.n_units, grammar=grammar)
    valid = gen_unit_corpus(c.seed + 1, c.valid_size, cfg.ulm.n_units, grammar=grammar) if c.valid_size else []
    return train, valid


def make_verbalizer(cfg: ExperimentConfig, data: Dataset) -> Verbalizer:
    train = data.train
    return build_verbalizer([ex.input_units for ex in train], [ex.labels for ex in train],
                            len(data.class_set), cfg.ulm.n_units, cfg.ulm.eos_id)


def gen_config(cfg: ExperimentConfig, data: Dataset) -> GenConfig:
    n = cfg.gen.max_new_units or max(len(ex.labels) for ex in data.train) + 8
    return GenConfig(max_new_units=n)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


def pretrain_key(cfg: ExperimentConfig) -> str:
    flat = config_mod.to_flat(cfg)
    return fingerprint(*(f"{k}={v}" for k, v in flat.items() if k.split(".")[0] in ("corpus", "ulm", "pretrain")))


def pretrain(cfg: ExperimentConfig, corpus=None, valid=None) -> tuple[ULM, dict]:
    if corpus is None:
        corpus, valid = make_corpus(cfg)
    p = cfg.pretrain
    from .optim import TrainConfig
    train_cfg = TrainConfig(lr=p.lr, steps=p.steps, batch_size=p.batch_size, seed=p.seed, mode="pretrain",
                            clip_norm=cfg.train.clip_norm)
    ulm = ulm_init(cfg.ulm, p.seed)
    ulm, history = ulm_pretrain(ulm, corpus, train_cfg, valid=valid or None)
    if valid:
        history["valid_loss_no_eos"] = evaluate_lm(ulm, valid, include_eos=False)
    return ulm, history


def cached_pretrained(cfg: ExperimentConfig, root=None) -> tuple[ULM, Path]:
    """Pretrained model for ``cfg``, trained once and then reloaded from the results root."""
    path = results_root(root) / "ulm" / pretrain_key(cfg) / "ulm.ckpt"
    if not path.exists():
        log.info("pretraining model into %s", path)
        ulm, history = pretrain(cfg)
        write_history(path.with_name("history.jsonl"), history)
        save_ulm(path, ulm)
    return load_ulm(path), path


# --------------------------------------------------------------------------
# tuning and evaluation
# --------------------------------------------------------------------------


def tune(cfg: ExperimentConfig, ulm: ULM, data: Dataset, v: Verbalizer, seed: int):
    """Returns (PromptSet or tuned ULM, history)."""
    train_cfg = replace(cfg.train, seed=seed)
    if cfg.prompt.method == "finetune_lm":
        return finetune_lm(ulm.copy(), data, v, replace(train_cfg, mode="finetune_lm"))
    prompts = prompt_init(cfg.prompt.mode, cfg.prompt.length, cfg.ulm, seed)
    return prompt_tune(ulm, prompts, data, v, replace(train_cfg, mode="prompt_tune"))


def run_descriptor(cfg: ExperimentConfig, ulm: ULM, prompts: PromptSet | None, seed: int) -> dict:
    if prompts is None:
        return {"task": cfg.task.kind, "mode": "finetune_lm", "l": 0, "params": ulm.n_params(), "seed": seed}
    return {"task": cfg.task.kind, "mode": prompts.mode, "l": prompts.length,
            "params": count_trainable_params(prompts.mode, prompts.length, cfg.ulm.d_model, cfg.ulm.n_layers),
            "seed": seed}


def evaluate_run(cfg: ExperimentConfig, ulm: ULM, prompts: PromptSet | None, data: Dataset, v: Verbalizer,
                 split: str = "test") -> list[dict]:
    examples = data[split]
    preds, invalid = predict_labels(ulm, prompts, examples, v, gen_config(cfg, data))
    metrics = evaluate(data.task_kind, examples, preds)
    metrics["invalid_units"] = float(invalid)
    if data.task_kind == "seq_gen":
        for (lo, hi), cer in length_bucket_report(examples, preds, DEFAULT_BUCKETS):
            metrics[f"cer_len_{lo}_{hi}"] = cer
    return [{"metric": k, "value": float(val)} for k, val in metrics.items()]


def metric_rows(descriptor: dict, metrics: list[dict]) -> list[dict]:
    return [{**descriptor, **m} for m in metrics]


def format_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in columns})
    return buf.getvalue()


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    atomic_write(path, format_csv(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_history(path, history: dict) -> None:
    records = [{"kind": "train", "step": i + 1, "loss": float(x)} for i, x in enumerate(history.get("loss", []))]
    for r in history.get("valid", []):
        records.append({"kind": "valid", **{k: float(x) if isinstance(x, float) else x for k, x in r.items()}})
    if isinstance(history.get("valid_loss"), list):
        records += [{"kind": "valid", "loss": float(x)} for x in history["valid_loss"]]
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_checkpoint_meta(path) -> dict[str, str]:
    manifest = CheckpointManifest.parse(Path(path).read_text(encoding="utf-8"))
    return {**manifest.meta, **run_meta(manifest), "kind": manifest.kind}


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


@dataclass
class RunSpec:
    method: str  # prompt_tune | finetune_lm
    mode: str
    length: int
    seed: int

    @property
    def name(self) -> str:
        if self.method == "finetune_lm":
            return f"finetune_lm/seed{self.seed}"
        return f"{self.mode}-l{self.length}/seed{self.seed}"


def run_single(cfg: ExperimentConfig, spec: RunSpec, root=None, ulm: ULM | None = None,
               data: Dataset | None = None) -> list[dict]:
    """Tune and evaluate one configuration; cached on disk under the results root."""
    cfg = config_mod.loads(config_mod.dumps(cfg))  # private copy
    cfg.prompt.method, cfg.prompt.mode, cfg.prompt.length = spec.method, spec.mode, spec.length
    cfg.validate()
    if ulm is None:
        ulm, _ = cached_pretrained(cfg, root)
    out = results_root(root) / cfg.task.kind / spec.name
    key = fingerprint(config_mod.dumps(cfg), ulm.checksum(), str(spec.seed))
    metrics_path = out / "metrics.csv"
    if metrics_path.exists() and (out / "key").exists() and (out / "key").read_text().strip() == key:
        return read_csv(metrics_path)
    data = data or make_dataset(cfg)
    v = make_verbalizer(cfg, data)
    tuned, history = tune(cfg, ulm, data, v, spec.seed)
    run = {"task": cfg.task.kind, "seed": spec.seed}
    if spec.method == "finetune_lm":
        model, prompts = tuned, None
        save_ulm(out / "model.ckpt", model, run)
    else:
        model, prompts = ulm, tuned
        save_prompts(out / "prompts.ckpt", prompts, run)
    write_history(out / "history.jsonl", history)
    rows = metric_rows(run_descriptor(cfg, model, prompts, spec.seed), evaluate_run(cfg, model, prompts, data, v))
    write_csv(metrics_path, rows, METRIC_COLUMNS)
    atomic_write(out / "key", key + "\n")
    return read_csv(metrics_path)


def sweep(cfg: ExperimentConfig, specs: list[RunSpec], root=None) -> list[dict]:
    ulm, _ = cached_pretrained(cfg, root)
    data = make_dataset(cfg)
    rows = []
    for spec in specs:
        log.info("run %s %s", cfg.task.kind, spec.name)
        rows += run_single(cfg, spec, root, ulm=ulm, data=data)
    return rows


# --------------------------------------------------------------------------
# report tables
# --------------------------------------------------------------------------


def collect_metrics(results_dir) -> list[dict]:
    rows = []
    for path in sorted(Path(results_dir).rglob("metrics.csv")):
        rows += read_csv(path)
    return rows


def _aggregate(rows, key_fields, metric_filter):
    groups = defaultdict(list)
    for r in rows:
        if metric_filter(r):
            groups[tuple(r[k] for k in key_fields)].append(float(r["value"]))
    return groups


def _sort_key(key):
    return tuple(int(x) if isinstance(x, str) and x.isdigit() else x for x in key)


def report_tables(rows: list[dict]) -> dict[str, tuple[list[str], list[dict]]]:
    """The three report tables as (columns, rows)."""
    def primary(r):
        return r["metric"] == PRIMARY_METRIC.get(r["task"]) and r["mode"] in ("input", "deep")

    length_cols = ["task", "mode", "l", "params", "metric", "n_seeds", "mean", "std"]
    length_rows = []
    for key, vals in sorted(_aggregate(rows, ["task", "mode", "l", "params", "metric"], primary).items(),
                            key=lambda kv: _sort_key(kv[0])):
        length_rows.append({**dict(zip(length_cols, key)), "n_seeds": len(vals),
                            "mean": mean(vals), "std": pstdev(vals)})

    params_cols = ["task", "mode", "params", "l", "metric", "n_seeds", "mean"]
    params_rows = sorted(({k: r[k] for k in params_cols} for r in length_rows),
                         key=lambda r: (r["task"], r["mode"], int(r["params"])))

    bucket_cols = ["task", "mode", "l", "bucket", "n_seeds", "mean_cer"]
    bucket_rows = []
    groups = _aggregate(rows, ["task", "mode", "l", "metric"], lambda r: r["metric"].startswith("cer_len_"))
    for (task, mode, l, metric), vals in sorted(groups.items(), key=lambda kv: _sort_key(kv[0])):
        lo, hi = metric.removeprefix("cer_len_").split("_")
        bucket_rows.append({"task": task, "mode": mode, "l": l, "bucket": f"{lo}-{hi}",
                            "n_seeds": len(vals), "mean_cer": mean(vals)})
    bucket_rows.sort(key=lambda r: (r["task"], r["mode"], int(r["l"]), int(r["bucket"].split("-")[0])))
    return {"prompt_length.csv": (length_cols, length_rows),
            "params_vs_metric.csv": (params_cols, params_rows),
            "cer_by_length.csv": (bucket_cols, bucket_rows)}


def write_report(results_dir, out_dir=None) -> dict[str, Path]:
    out_dir = Path(out_dir or Path(results_dir) / "report")
    written = {}
    for name, (cols, rows) in report_tables(collect_metrics(results_dir)).items():
        write_csv(out_dir / name, rows, cols)
        written[name] = out_dir / name
    return written


def summary(rows: list[dict], metric: str) -> dict[tuple[str, int], float]:
    """Mean ``metric`` per (mode, l) over seeds."""
    groups = _aggregate(rows, ["mode", "l"], lambda r: r["metric"] == metric)
    return {(mode, int(l)): mean(vals) for (mode, l), vals in groups.items()}

