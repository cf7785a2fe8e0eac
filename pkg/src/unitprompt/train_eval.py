"""Prompt tuning, full fine-tuning, greedy generation and task metrics."""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .optim import Adam, NonFiniteLoss, TrainConfig
from .prompt import PromptSet
from .tasks import WORD_BOUNDARY, Dataset, LabeledExample
from .ulm import ULM, pad_batch, ulm_forward
from .verbalizer import Verbalizer, decode_units, encode_labels

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "GenConfig", "make_training_sequence", "prompt_tune", "finetune_lm",
    "generate", "generate_many", "predict_labels", "edit_distance", "evaluate", "length_bucket_report",
]


@dataclass(frozen=True)
class GenConfig:
    max_new_units: int = 8
    strategy: str = "greedy"

    def __post_init__(self):
        if self.max_new_units < 1:
            raise ValueError("max_new_units must be >= 1")
        if self.strategy != "greedy":
            raise ValueError("only greedy decoding is supported")


# --------------------------------------------------------------------------
# training data
# --------------------------------------------------------------------------


def make_training_sequence(example: LabeledExample, v: Verbalizer, sep_id: int, max_len: int,
                           prompt_len: int = 0) -> tuple[list[int], list[bool]]:
    """``u_x + [SEP] + v(y) + [EOS]`` and its loss mask.

    The mask is aligned with next-unit targets (``units[1:]``) and is set
    exactly where the target lies in the answer region.
    """
    answer = encode_labels(v, example.labels)
    units = list(example.input_units) + [sep_id] + answer
    if len(units) > max_len - prompt_len:
        raise ValueError(
            f"example {example.id}: sequence of {len(units)} units exceeds budget {max_len - prompt_len}")
    n_in = len(example.input_units)
    mask = [i >= n_in for i in range(len(units) - 1)]
    return units, mask


@dataclass
class Batch:
    inputs: np.ndarray   # [B, T]
    targets: np.ndarray  # [B, T]
    mask: np.ndarray     # [B, T] float

    @property
    def n_answer(self) -> int:
        return int(self.mask.sum())


def make_batch(examples: Sequence[LabeledExample], v: Verbalizer, ulm: ULM, prompt_len: int = 0) -> Batch:
    cfg = ulm.config
    seqs, masks = [], []
    for ex in examples:
        units, mask = make_training_sequence(ex, v, cfg.sep_id, cfg.max_len, prompt_len)
        seqs.append(units)
        masks.append(mask)
    arr = pad_batch(seqs, cfg.pad_id)
    m = np.zeros((len(seqs), arr.shape[1] - 1), dtype=np.float32)
    for i, mask in enumerate(masks):
        m[i, :len(mask)] = mask
    return Batch(arr[:, :-1], arr[:, 1:], m)


def batch_logits(ulm: ULM, prompts: PromptSet | None, batch: Batch) -> Tensor:
    logits = ulm_forward(ulm, batch.inputs, prompts)
    n = prompts.length if prompts is not None else 0
    if n:
        logits = ad.slice_rows(logits, n, logits.shape[-2])
    return logits


def task_loss(ulm: ULM, prompts: PromptSet | None, batch: Batch) -> Tensor:
    """Masked answer-region cross-entropy."""
    return ad.cross_entropy(batch_logits(ulm, prompts, batch), batch.targets, batch.mask)


# --------------------------------------------------------------------------
# tuning loops
# --------------------------------------------------------------------------


def teacher_forced_scores(ulm: ULM, prompts: PromptSet | None, examples: Sequence[LabeledExample],
                          v: Verbalizer, batch_size: int = 64) -> dict:
    """Exact-match and token accuracy of argmax predictions under teacher forcing.

    An example is an exact match here iff greedy decoding reproduces its
    answer and stops at EOS, so this equals generation accuracy for
    classification tasks at a fraction of the cost.
    """
    n_prompt = prompts.length if prompts is not None else 0
    exact = tokens = hits = 0
    loss_sum = 0.0
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i:i + batch_size], v, ulm, n_prompt)
        logits = batch_logits(ulm, prompts, batch)
        pred = logits.values.argmax(axis=-1)
        ok = (pred == batch.targets) | (batch.mask == 0)
        exact += int(ok.all(axis=1).sum())
        hits += int(((pred == batch.targets) & (batch.mask > 0)).sum())
        tokens += batch.n_answer
        loss_sum += ad.cross_entropy(logits, batch.targets, batch.mask).item() * batch.n_answer
    n = max(len(examples), 1)
    return {"exact": 100.0 * exact / n, "token_acc": 100.0 * hits / max(tokens, 1),
            "loss": loss_sum / max(tokens, 1)}


def _tune(ulm: ULM, prompts: PromptSet | None, params: list[Tensor], data: Dataset, v: Verbalizer,
          cfg: TrainConfig, select_metric: str) -> dict:
    train = data.train
    if not train:
        raise ValueError("training split is empty")
    n_prompt = prompts.length if prompts is not None else 0
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
               clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(train))
    steps_per_epoch = max(1, len(train) // bs)
    eval_every = cfg.eval_every or steps_per_epoch
    history: dict = {"loss": [], "valid": []}
    best_score, best_values, stale = -math.inf, None, 0
    order, cursor = rng.permutation(len(train)), 0

    for step in range(cfg.steps):
        if cursor + bs > len(train):
            order, cursor = rng.permutation(len(train)), 0
        chunk = [train[j] for j in order[cursor:cursor + bs]]
        cursor += bs
        batch = make_batch(chunk, v, ulm, n_prompt)
        opt.zero_grad()
        with Graph() as graph:
            loss = task_loss(ulm, prompts, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        graph.backward(loss)
        opt.lr = cfg.lr_at(step)
        opt.step()
        history["loss"].append(value)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.4f", step + 1, value)

        last = step + 1 == cfg.steps
        if data.valid and ((step + 1) % eval_every == 0 or last):
            scores = teacher_forced_scores(ulm, prompts, data.valid, v)
            history["valid"].append({"step": step + 1, **scores})
            score = scores[select_metric]
            if score > best_score:
                best_score, stale = score, 0
                best_values = [p.values.copy() for p in params]
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    log.info("early stop at step %d", step + 1)
                    break
    opt.zero_grad()
    if best_values is not None:
        for p, values in zip(params, best_values):
            p.values[...] = values
    history["best_valid"] = best_score if best_values is not None else None
    return history


def _select_metric(data: Dataset) -> str:
    return "exact" if data.task_kind.startswith("cls") else "token_acc"


def prompt_tune(ulm: ULM, prompts: PromptSet, data: Dataset, v: Verbalizer,
                cfg: TrainConfig) -> tuple[PromptSet, dict]:
    """Optimise only the prompt vectors; the model stays bit-identical."""
    if cfg.mode != "prompt_tune":
        raise ValueError("prompt_tune requires cfg.mode == 'prompt_tune'")
    ulm.set_trainable(False)
    for t in prompts.tensors():
        t.trainable = t.requires_grad = True
    history = _tune(ulm, prompts, prompts.tensors(), data, v, cfg, _select_metric(data))
    return prompts, history


def finetune_lm(ulm: ULM, data: Dataset, v: Verbalizer, cfg: TrainConfig) -> tuple[ULM, dict]:
    """Full fine-tuning baseline: every model tensor is trained, no prompts."""
    if cfg.mode != "finetune_lm":
        raise ValueError("finetune_lm requires cfg.mode == 'finetune_lm'")
    ulm.set_trainable(True)
    history = _tune(ulm, None, ulm.tensors(), data, v, cfg, _select_metric(data))
    ulm.set_trainable(False)
    return ulm, history


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _check_budget(ulm: ULM, prompts: PromptSet | None, context_len: int) -> None:
    n_prompt = prompts.length if prompts is not None else 0
    if n_prompt + context_len > ulm.config.max_len:
        raise ValueError(f"context of {n_prompt + context_len} positions overflows max_len {ulm.config.max_len}")


def generate(ulm: ULM, prompts: PromptSet | None, units: Sequence[int], gen: GenConfig) -> list[int]:
    """Greedy continuation of ``units + [SEP]`` until EOS or ``max_new_units``; EOS excluded."""
    return generate_many(ulm, prompts, [units], gen)[0]


def generate_many(ulm: ULM, prompts: PromptSet | None, inputs: Sequence[Sequence[int]],
                  gen: GenConfig) -> list[list[int]]:
    """Greedy decoding for many inputs; equal-length inputs share a batch."""
    cfg = ulm.config
    groups: dict[int, list[int]] = {}
    for i, u in enumerate(inputs):
        groups.setdefault(len(u), []).append(i)
    results: list[list[int]] = [[] for _ in inputs]
    for length, idx in groups.items():
        ctx = np.array([list(inputs[i]) + [cfg.sep_id] for i in idx], dtype=np.int64)
        _check_budget(ulm, prompts, ctx.shape[1])
        done = np.zeros(len(idx), dtype=bool)
        for _ in range(gen.max_new_units):
            if done.all():
                break
            _check_budget(ulm, prompts, ctx.shape[1])
            logits = ulm_forward(ulm, ctx, prompts).values[:, -1, :]
            nxt = logits.argmax(axis=-1)  # first maximum -> lowest id on ties
            for j, u in enumerate(nxt):
                if done[j]:
                    continue
                if u == cfg.eos_id:
                    done[j] = True
                else:
                    results[idx[j]].append(int(u))
            ctx = np.concatenate([ctx, nxt[:, None]], axis=1)
    return results


def predict_labels(ulm: ULM, prompts: PromptSet | None, examples: Sequence[LabeledExample],
                   v: Verbalizer, gen: GenConfig) -> tuple[list[list[str]], int]:
    """Decoded label sequences and the total number of invalid generated units."""
    outs = generate_many(ulm, prompts, [ex.input_units for ex in examples], gen)
    preds, invalid = [], 0
    for units in outs:
        res = decode_units(v, units)
        preds.append(res.labels)
        invalid += len(res.invalid_units)
    return preds, invalid


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def words(chars: Sequence[str]) -> list[str]:
    return [w for w in "".join(chars).split(WORD_BOUNDARY) if w]


def _is_tag(label: str) -> bool:
    return label.startswith("<") and label.endswith(">") and len(label) > 2


def slot_pairs(labels: Sequence[str]) -> list[tuple[str, str]]:
    """(slot type, value) pairs from a tagged label sequence; unclosed spans are dropped."""
    pairs, open_type, buf = [], None, []
    for lab in labels:
        if _is_tag(lab):
            if lab.startswith("</"):
                if open_type is not None and lab[2:-1] == open_type:
                    pairs.append((open_type, "".join(buf)))
                open_type, buf = None, []
            else:
                open_type, buf = lab[1:-1], []
        elif open_type is not None:
            buf.append(lab)
    return pairs


def _error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    total = sum(len(r) for r in refs)
    return 100.0 * errors / total if total else 0.0


def evaluate(task_kind: str, examples: Sequence[LabeledExample], predictions: Sequence[Sequence[str]]) -> dict:
    """Task metrics in percent: acc for classification, wer/cer for transcription,
    f1/cer for slot filling."""
    if len(examples) != len(predictions):
        raise ValueError(f"{len(predictions)} predictions for {len(examples)} examples")
    refs = [list(ex.labels) for ex in examples]
    hyps = [list(p) for p in predictions]
    if task_kind in ("cls_single", "cls_multi"):
        correct = sum(r == h for r, h in zip(refs, hyps))
        return {"acc": 100.0 * correct / len(refs) if refs else 0.0}
    if task_kind == "seq_gen":
        return {"wer": _error_rate([words(r) for r in refs], [words(h) for h in hyps]),
                "cer": _error_rate(refs, hyps)}
    if task_kind == "slot_gen":
        tp = n_pred = n_gold = 0
        for r, h in zip(refs, hyps):
            gold, pred = Counter(slot_pairs(r)), Counter(slot_pairs(h))
            tp += sum((gold & pred).values())
            n_pred += sum(pred.values())
            n_gold += sum(gold.values())
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gold if n_gold else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        strip = lambda seq: [c for c in seq if not _is_tag(c)]  # noqa: E731
        return {"f1": 100.0 * f1, "cer": _error_rate([strip(r) for r in refs], [strip(h) for h in hyps])}
    raise ValueError(f"unknown task kind {task_kind!r}")


def length_bucket_report(examples: Sequence[LabeledExample], predictions: Sequence[Sequence[str]],
                         buckets: Sequence[tuple[int, int]]) -> list[tuple[tuple[int, int], float]]:
    """CER per inclusive label-length bucket; empty buckets are skipped with a warning."""
    if len(examples) != len(predictions):
        raise ValueError(f"{len(predictions)} predictions for {len(examples)} examples")
    rows = []
    for lo, hi in buckets:
        sel = [i for i, ex in enumerate(examples) if lo <= len(ex.labels) <= hi]
        if not sel:
            warnings.warn(f"label-length bucket {lo}-{hi} is empty; row omitted", stacklevel=2)
            continue
        rows.append(((lo, hi), _error_rate([list(examples[i].labels) for i in sel],
                                           [list(predictions[i]) for i in sel])))
    return rows
