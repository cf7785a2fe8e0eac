"""Command-line entry point: ``unitprompt <verb> [options]``.

Every verb reads an optional flat config file (``--config``) plus
``--set key=value`` overrides, validates it, and writes its outputs
atomically. ``--dump-config`` prints the effective configuration.
Relative output paths are resolved under ``$UNITPROMPT_RESULTS``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import experiments as ex
from .checkpoint import atomic_write, load_codebook, load_prompts, load_ulm, save_codebook, save_prompts, save_ulm
from .dataio import load_dataset, read_records, save_dataset, write_records
from .optim import NonFiniteLoss
from .quantizer import deduplicate, kmeans_fit, quantize
from .train_eval import generate
from .verbalizer import decode_units, dumps as dump_verbalizer, loads as load_verbalizer

log = logging.getLogger("unitprompt")


class UsageError(Exception):
    pass


def _config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    cfg = config_mod.from_flat(pairs, cfg)
    return cfg


def _out(args, path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else ex.results_root(args.results) / path


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_verbalizer(path, cfg):
    return load_verbalizer(_existing(path, "verbalizer").read_text(encoding="utf-8"),
                           n_units=cfg.ulm.n_units, eos_id=cfg.ulm.eos_id)


def _load_model(args, cfg):
    ulm = load_ulm(_existing(args.ulm, "model checkpoint"))
    if ulm.config != cfg.ulm:
        log.info("using model shape from checkpoint %s", args.ulm)
        cfg.ulm = ulm.config
    prompts = load_prompts(_existing(args.prompts, "prompt checkpoint")) if getattr(args, "prompts", None) else None
    return ulm, prompts


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = _out(args, args.out)
    if args.corpus:
        train, valid = ex.make_corpus(cfg)
        write_records(out / "train.jsonl", ({"id": i, "units": s} for i, s in enumerate(train)))
        write_records(out / "valid.jsonl", ({"id": len(train) + i, "units": s} for i, s in enumerate(valid)))
    else:
        save_dataset(out, ex.make_dataset(cfg))
    print(out)


def cmd_pretrain(args, cfg):
    if args.corpus:
        d = _existing(args.corpus, "corpus directory")
        corpus = [r["units"] for r in read_records(_existing(d / "train.jsonl", "corpus"))]
        valid_path = d / "valid.jsonl"
        valid = [r["units"] for r in read_records(valid_path)] if valid_path.exists() else []
        ulm, history = ex.pretrain(cfg, corpus, valid)
    else:
        ulm, history = ex.pretrain(cfg)
    out = _out(args, args.out)
    save_ulm(out, ulm)
    ex.write_history(Path(str(out) + ".history.jsonl"), history)
    print(out)


def cmd_quantize(args, cfg):
    records = read_records(_existing(args.features, "features file"))
    if not records or any("features" not in r for r in records):
        raise UsageError("every record in the features file needs a 'features' field")
    if args.codebook:
        codebook = load_codebook(_existing(args.codebook, "codebook"))
    else:
        import numpy as np
        frames = np.concatenate([np.asarray(r["features"], dtype=np.float64) for r in records])
        codebook = kmeans_fit(frames, args.k, max_iters=args.max_iters, seed=args.seed)
        if not args.out_codebook:
            raise UsageError("fitting a codebook requires --out-codebook")
        save_codebook(_out(args, args.out_codebook), codebook)
    if args.out_units:
        rows = []
        for r in records:
            units = quantize(r["features"], codebook)
            rows.append({"id": r.get("id"), "units": units if args.keep_repeats else deduplicate(units),
                         **({"labels": r["labels"]} if "labels" in r else {})})
        write_records(_out(args, args.out_units), rows)


def cmd_build_verbalizer(args, cfg):
    data = load_dataset(_existing(args.data, "dataset directory"))
    v = ex.make_verbalizer(cfg, data)
    out = _out(args, args.out)
    atomic_write(out, dump_verbalizer(v))
    print(out)


def cmd_tune(args, cfg):
    ulm, _ = _load_model(args, cfg)
    data = load_dataset(_existing(args.data, "dataset directory"))
    cfg.task.kind = data.task_kind
    v = _load_verbalizer(args.verbalizer, cfg)
    seed = cfg.prompt.seed
    tuned, history = ex.tune(cfg, ulm, data, v, seed)
    out = _out(args, args.out)
    run = {"task": data.task_kind, "seed": seed}
    if cfg.prompt.method == "finetune_lm":
        save_ulm(out, tuned, run)
    else:
        save_prompts(out, tuned, run)
    ex.write_history(Path(str(out) + ".history.jsonl"), history)
    print(out)


def cmd_eval(args, cfg):
    ulm, prompts = _load_model(args, cfg)
    data = load_dataset(_existing(args.data, "dataset directory"))
    cfg.task.kind = data.task_kind
    v = _load_verbalizer(args.verbalizer, cfg)
    meta = ex.read_checkpoint_meta(args.prompts or args.ulm)
    seed = int(meta.get("seed", cfg.prompt.seed))
    rows = ex.metric_rows(ex.run_descriptor(cfg, ulm, prompts, seed),
                          ex.evaluate_run(cfg, ulm, prompts, data, v, split=args.split))
    if args.out:
        ex.write_csv(_out(args, args.out), rows, ex.METRIC_COLUMNS)
    else:
        sys.stdout.write(ex.format_csv(rows, ex.METRIC_COLUMNS))


def cmd_generate(args, cfg):
    ulm, prompts = _load_model(args, cfg)
    v = _load_verbalizer(args.verbalizer, cfg)
    try:
        units = [int(u) for u in args.units.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--units must be integers, got {args.units!r}") from None
    if not units:
        raise UsageError("--units is empty")
    gen = ex.GenConfig(max_new_units=args.max_new_units)
    out = generate(ulm, prompts, units, gen)
    print(" ".join(decode_units(v, out).labels))


def cmd_report(args, cfg):
    root = Path(args.results_dir) if args.results_dir else ex.results_root(args.results)
    for name, path in ex.write_report(_existing(root, "results directory"), args.out).items():
        print(path)


def cmd_sweep(args, cfg):
    lengths = [int(x) for x in args.lengths.split(",")]
    input_lengths = [int(x) for x in args.input_lengths.split(",")] if args.input_lengths else lengths
    seeds = cfg.seed_list()
    specs = []
    for mode in args.modes.split(","):
        if mode not in ("input", "deep"):
            raise UsageError(f"unknown prompt mode {mode!r}")
        specs += [ex.RunSpec("prompt_tune", mode, l, s)
                  for l in (input_lengths if mode == "input" else lengths) for s in seeds]
    if args.finetune:
        specs += [ex.RunSpec("finetune_lm", "deep", 1, s) for s in seeds]
    ex.sweep(cfg, specs, args.results)
    print(ex.results_root(args.results) / cfg.task.kind)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--results", help=f"results root (default ${ex.RESULTS_ENV} or ./results)")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="unitprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic task dataset or unit corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", action="store_true", help="write the pretraining corpus instead of a task")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain the unit language model")
    s.add_argument("--corpus", help="corpus directory from gen-data --corpus (default: generate)")
    s.add_argument("--out", default="ulm.ckpt")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("quantize", parents=[common], help="fit a codebook and/or map features to units")
    s.add_argument("--features", required=True)
    s.add_argument("--codebook", help="existing codebook checkpoint (skip fitting)")
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-codebook")
    s.add_argument("--out-units")
    s.add_argument("--keep-repeats", action="store_true", help="skip run deduplication")
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("build-verbalizer", parents=[common], help="frequency-rank label to unit map")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build_verbalizer)

    s = sub.add_parser("tune", parents=[common], help="prompt-tune (or fine-tune) on a dataset")
    s.add_argument("--ulm", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--verbalizer", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_tune)

    s = sub.add_parser("eval", parents=[common], help="metrics CSV for a tuned checkpoint")
    s.add_argument("--ulm", required=True)
    s.add_argument("--prompts")
    s.add_argument("--data", required=True)
    s.add_argument("--verbalizer", required=True)
    s.add_argument("--split", default="test", choices=["train", "valid", "test"])
    s.add_argument("--out", help="CSV path (default: standard output)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("generate", parents=[common], help="decode labels for one unit sequence")
    s.add_argument("--ulm", required=True)
    s.add_argument("--prompts")
    s.add_argument("--verbalizer", required=True)
    s.add_argument("--units", required=True, help="space- or comma-separated unit ids")
    s.add_argument("--max-new-units", type=int, default=16)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("report", parents=[common], help="aggregate metrics CSVs into report tables")
    s.add_argument("results_dir", nargs="?")
    s.add_argument("--out", help="output directory (default: <results>/report)")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("sweep", parents=[common], help="pretrain once, then tune and evaluate a grid")
    s.add_argument("--modes", default="deep,input")
    s.add_argument("--lengths", default="1,2,3,6")
    s.add_argument("--input-lengths", help="input-mode lengths (default: same as --lengths)")
    s.add_argument("--finetune", action="store_true", help="add full fine-tuning baselines")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.dump_config:
            sys.stdout.write(config_mod.dumps(cfg))
            return 0
        args.fn(args, cfg)
    except (UsageError, ValueError, KeyError, NonFiniteLoss, OSError) as err:
        print(f"unitprompt {args.verb}: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
