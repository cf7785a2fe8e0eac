import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitprompt import autodiff as ad
from unitprompt.autodiff import Tensor
from unitprompt.optim import Adam, NonFiniteLoss, TrainConfig
from unitprompt.prompt import prompt_init
from unitprompt.tasks import Dataset, LabeledExample, gen_cls_single
from unitprompt.train_eval import (GenConfig, edit_distance, evaluate, finetune_lm, generate, length_bucket_report,
                                   make_batch, make_training_sequence, predict_labels, prompt_tune, task_loss)
from unitprompt.ulm import ULMConfig, ulm_init
from unitprompt.verbalizer import Verbalizer, build_verbalizer, encode_labels

CFG = ULMConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, n_units=20, max_len=48)
V = Verbalizer({"a": 3, "b": 7, "c": 11}, eos_id=CFG.eos_id, n_units=CFG.n_units)


def ex(i, units, labels):
    return LabeledExample(i, tuple(units), tuple(labels))


def toy_dataset(n=24, kind="cls_single"):
    rows = []
    for i in range(n):
        lab = "abc"[i % 3]
        rows.append(ex(i, [1 + i % 3, 5, 9 + i % 3], [lab]))
    return Dataset(kind, ["a", "b", "c"], {"train": rows, "valid": rows[:6], "test": rows[:6]})


# --------------------------------------------------------------------------
# training sequences and loss
# --------------------------------------------------------------------------


def test_training_sequence_layout_and_mask():
    e = ex(0, [4, 5, 6], ["a", "b"])
    units, mask = make_training_sequence(e, V, CFG.sep_id, CFG.max_len)
    assert units == [4, 5, 6, CFG.sep_id, 3, 7, CFG.eos_id]
    assert sum(mask) == len(e.labels) + 1
    assert mask == [False, False, False, True, True, True]


def test_training_sequence_budget():
    e = ex(0, list(range(10)), ["a"])
    make_training_sequence(e, V, CFG.sep_id, 13)
    with pytest.raises(ValueError):
        make_training_sequence(e, V, CFG.sep_id, 13, prompt_len=1)


def test_input_region_logits_do_not_affect_loss():
    batch = make_batch([ex(0, [4, 5, 6], ["a"])], V, ulm_init(CFG, 0))
    rng = np.random.default_rng(0)
    logits = rng.normal(size=batch.inputs.shape + (CFG.vocab_size,))
    base = ad.cross_entropy(Tensor(logits), batch.targets, batch.mask).item()
    logits[0, :2] = rng.normal(size=(2, CFG.vocab_size)) * 10
    assert ad.cross_entropy(Tensor(logits), batch.targets, batch.mask).item() == base


def test_masked_loss_matches_hand_computation():
    batch = make_batch([ex(0, [4], ["b"])], V, ulm_init(CFG, 0))
    # sequence 4 SEP 7 EOS -> targets SEP 7 EOS, answer region = last two
    logits = np.zeros((1, 3, CFG.vocab_size))
    logits[0, 1, 7] = 2.0
    logits[0, 2, CFG.eos_id] = 1.0
    v = CFG.vocab_size
    expected = (-(2.0 - math.log(math.exp(2.0) + v - 1)) - (1.0 - math.log(math.e + v - 1))) / 2
    assert ad.cross_entropy(Tensor(logits), batch.targets, batch.mask).item() == pytest.approx(expected, rel=1e-6)


# --------------------------------------------------------------------------
# tuning loops
# --------------------------------------------------------------------------


def test_initial_prompt_loss_is_near_log_vocab():
    ulm = ulm_init(CFG, 0)
    ulm.set_trainable(False)
    prompts = prompt_init("deep", 2, CFG, 0)
    batch = make_batch(toy_dataset().train[:12], V, ulm, prompts.length)
    assert task_loss(ulm, prompts, batch).item() == pytest.approx(math.log(CFG.vocab_size), abs=0.05)


def test_prompt_tuning_keeps_model_frozen_and_is_reproducible():
    data = toy_dataset()
    cfg = TrainConfig(lr=1e-1, steps=60, batch_size=8, seed=1, patience=0)

    def run():
        ulm = ulm_init(CFG, 0)
        before = ulm.checksum()
        prompts, hist = prompt_tune(ulm, prompt_init("deep", 2, CFG, 0), data, V, cfg)
        assert ulm.checksum() == before
        assert all(t.grad is None for t in ulm.tensors())
        return prompts, hist

    (pa, ha), (pb, hb) = run(), run()
    assert ha["loss"] == hb["loss"]
    assert np.mean(ha["loss"][-10:]) < np.mean(ha["loss"][:10])
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(pa.tensors(), pb.tensors()))


def test_deep_prompts_steer_a_random_model_further_than_input_prompts():
    data = toy_dataset()
    ulm = ulm_init(CFG, 0)
    cfg = TrainConfig(lr=1e-1, steps=150, batch_size=8, patience=0)
    final = {}
    for mode in ("input", "deep"):
        prompts, hist = prompt_tune(ulm, prompt_init(mode, 4, CFG, 0), data, V, cfg)
        final[mode] = np.mean(hist["loss"][-20:])
        assert hist["valid"]
    assert final["deep"] < final["input"] - 0.05


def test_prompt_tune_rejects_wrong_mode():
    with pytest.raises(ValueError):
        prompt_tune(ulm_init(CFG, 0), prompt_init("input", 1, CFG, 0), toy_dataset(), V,
                    TrainConfig(mode="finetune_lm"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_step():
    ulm = ulm_init(CFG, 0)
    prompts = prompt_init("input", 1, CFG, 0)
    prompts.input_prompts.values[0, 0] = np.inf
    with pytest.raises(NonFiniteLoss, match="step 0"):
        prompt_tune(ulm, prompts, toy_dataset(), V, TrainConfig(steps=3, batch_size=4))


def test_finetune_memorizes_and_trains_every_tensor():
    data = toy_dataset(6)
    ulm = ulm_init(CFG, 0)
    n_params = ulm.n_params()
    seen = []
    orig = Adam.__post_init__

    def spy(self):
        seen.append(sum(p.size for p in self.params))
        orig(self)

    Adam.__post_init__ = spy
    try:
        tuned, hist = finetune_lm(ulm, data, V, TrainConfig(lr=1e-2, steps=150, batch_size=6, mode="finetune_lm",
                                                            patience=0))
    finally:
        Adam.__post_init__ = orig
    assert seen == [n_params]
    assert hist["loss"][-1] < 0.01
    out = generate(tuned, None, data.train[1].input_units, GenConfig(max_new_units=5))
    assert out == encode_labels(V, data.train[1].labels)[:-1]


def test_finetune_is_seed_deterministic():
    data = toy_dataset(6)
    cfg = TrainConfig(lr=1e-2, steps=5, batch_size=3, mode="finetune_lm")
    a, ha = finetune_lm(ulm_init(CFG, 0), data, V, cfg)
    b, hb = finetune_lm(ulm_init(CFG, 0), data, V, cfg)
    assert ha["loss"] == hb["loss"] and a.checksum() == b.checksum()


def test_zero_gradient_step_is_a_no_op():
    p = Tensor(np.ones(3, dtype=np.float32), trainable=True)
    p.grad = np.zeros(3, dtype=np.float32)
    Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.values, np.ones(3))


def test_gradient_clipping_bounds_norm():
    p = Tensor(np.zeros(2), trainable=True)
    p.grad = np.array([30.0, 40.0])
    opt = Adam([p], lr=1e-3, clip_norm=1.0)
    assert opt.step() == pytest.approx(50.0)


def test_linear_schedule_decays_to_zero():
    cfg = TrainConfig(lr=0.1, steps=4, schedule="linear")
    assert [cfg.lr_at(i) for i in range(4)] == pytest.approx([0.1, 0.075, 0.05, 0.025])
    assert TrainConfig(lr=0.1).lr_at(3) == 0.1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="sgd")
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def test_generation_is_deterministic_and_capped():
    ulm = ulm_init(CFG, 0)
    prompts = prompt_init("deep", 2, CFG, 0)
    a = generate(ulm, prompts, [1, 2, 3], GenConfig(max_new_units=6))
    assert a == generate(ulm, prompts, [1, 2, 3], GenConfig(max_new_units=6))
    assert len(generate(ulm, prompts, [1, 2, 3], GenConfig(max_new_units=1))) <= 1
    assert CFG.eos_id not in a


def test_generation_overflow():
    ulm = ulm_init(CFG, 0)
    with pytest.raises(ValueError):
        generate(ulm, prompt_init("input", 4, CFG, 0), [1] * (CFG.max_len - 4), GenConfig())


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(max_new_units=0)
    with pytest.raises(ValueError):
        GenConfig(strategy="beam")


def test_batched_generation_matches_single():
    ulm = ulm_init(CFG, 1)
    examples = [ex(i, u, ["a"]) for i, u in enumerate([[1, 2], [3, 4, 5], [6, 7]])]
    preds, _ = predict_labels(ulm, None, examples, V, GenConfig(max_new_units=4))
    single = [predict_labels(ulm, None, [e], V, GenConfig(max_new_units=4))[0][0] for e in examples]
    assert preds == single


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def dp_oracle(a, b):
    """Exhaustive recursion over all alignments (memoised)."""
    from functools import lru_cache

    @lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_edit_distance_examples():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance("abc", "abc") == 0
    assert edit_distance("abcd", "") == 4
    assert edit_distance([], []) == 0


@settings(max_examples=200)
@given(st.text("abc", max_size=7), st.text("abc", max_size=7), st.text("abc", max_size=7))
def test_edit_distance_is_a_metric(a, b, c):
    d = edit_distance(a, b)
    assert d == dp_oracle(a, b)
    assert d == edit_distance(b, a)
    assert (d == 0) == (a == b)
    assert edit_distance(a, c) <= d + edit_distance(b, c)


def test_classification_accuracy():
    examples = [ex(0, [1], ["a"]), ex(1, [1], ["b", "c"])]
    assert evaluate("cls_single", examples, [["a"], ["b", "c"]])["acc"] == 100.0
    assert evaluate("cls_multi", examples, [["a"], ["b"]])["acc"] == 50.0
    with pytest.raises(ValueError):
        evaluate("cls_single", examples, [["a"]])


def test_cer_single_substitution():
    ref = list("abcde|fghi")
    hyp = list("abcde|fghx")
    m = evaluate("seq_gen", [ex(0, [1], ref)], [hyp])
    assert m["cer"] == pytest.approx(10.0)
    assert m["wer"] == pytest.approx(50.0)


def test_slot_f1():
    gold = ["p", "|", "<city>", "r", "o", "m", "e", "</city>"]
    assert evaluate("slot_gen", [ex(0, [1], gold)], [list("p|rome")])["f1"] == 0.0
    m = evaluate("slot_gen", [ex(0, [1], gold)], [gold])
    assert m["f1"] == 100.0 and m["cer"] == 0.0


@settings(max_examples=30)
@given(st.randoms(use_true_random=False))
def test_evaluate_is_permutation_invariant(rnd):
    examples = [ex(i, [1], list(rnd.choice(["ab|c", "a|bb", "ccc"]))) for i in range(6)]
    preds = [list(rnd.choice(["ab|c", "a|b", "cc"])) for _ in range(6)]
    order = list(range(6))
    rnd.shuffle(order)
    for kind in ("cls_multi", "seq_gen"):
        a = evaluate(kind, examples, preds)
        b = evaluate(kind, [examples[i] for i in order], [preds[i] for i in order])
        assert a == pytest.approx(b)


def test_length_bucket_report():
    examples = [ex(0, [1], list("ab")), ex(1, [1], list("abcd")), ex(2, [1], list("abcdef"))]
    assert length_bucket_report(examples, [e.labels for e in examples], [(1, 3), (4, 6)]) == [((1, 3), 0.0),
                                                                                              ((4, 6), 0.0)]
    preds = [list("ax"), list("abcd"), list("abxdex")]
    rows = length_bucket_report(examples, preds, [(1, 3), (4, 6)])
    assert rows == [((1, 3), pytest.approx(50.0)), ((4, 6), pytest.approx(100.0 * 2 / 10))]
    with pytest.warns(UserWarning, match="empty"):
        rows = length_bucket_report(examples, preds, [(1, 3), (20, 30)])
    assert [r[0] for r in rows] == [(1, 3)]


def test_uniform_quality_gives_equal_bucket_cer():
    rng = random.Random(0)
    examples, preds = [], []
    for i in range(40):
        ref = [rng.choice("abc") for _ in range(5 if i % 2 else 20)]
        hyp = [c if j % 5 else "z" for j, c in enumerate(ref)]  # every 5th char wrong
        examples.append(ex(i, [1], ref))
        preds.append(hyp)
    rows = dict(length_bucket_report(examples, preds, [(1, 10), (11, 30)]))
    assert rows[(1, 10)] == pytest.approx(rows[(11, 30)])


def test_exhaustive_small_edit_distance():
    for a, b in itertools.product(["", "a", "ab", "ba", "abc"], repeat=2):
        assert edit_distance(a, b) == dp_oracle(a, b)


def test_generated_dataset_verbalizer_round_trip():
    ds = gen_cls_single(0, sizes=(24, 6, 6))
    v = build_verbalizer([e.input_units for e in ds.train], [e.labels for e in ds.train], 12, 100, 101)
    assert sorted(v.label_to_unit) == sorted(ds.class_set)
