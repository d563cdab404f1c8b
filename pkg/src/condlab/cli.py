"""Command-line entry point wiring the modules into reproducible experiments.

Subcommands: ``datagen`` (synthetic corpus), ``train`` (one conditioning
arm), ``generate`` (decode a split), ``eval`` (score generations).  Exit
codes: 0 success, 2 usage/validation error, 1 runtime failure.  Every
artifact embeds the merged run configuration, so a run can be re-executed
from any of its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .conditioning import CondMode, ConditioningBundle
from .config import (
    build_run_config,
    generation_config_from,
    model_config_from,
    train_config_from,
)
from .datakit import attribute_recall, generate as synth_generate, load_jsonl, split_of, write_jsonl, SynthSpec
from .metrics import EvalCorpus, TOKENIZATION_RULE, score_all
from .model import CheckpointError, TransformerLM, generate as lm_generate, load_checkpoint
from .tokenizer import decode, encode, load_vocab, save_vocab, train_bpe, vocab_hash
from .trainer import train


class UsageError(ValueError):
    pass


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# datagen


def cmd_datagen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output dir {out}: {e}") from e
    run_config = build_run_config(args.config, {"data.n_samples": args.n, "data.seed": args.seed})
    spec = SynthSpec(n_samples=args.n, seed=args.seed, img_size=run_config["data"]["img_size"])
    samples = synth_generate(spec)
    splits = {"train": [], "val": [], "test": []}
    for s in samples:
        splits[split_of(s.id)].append(s)
    for name, members in splits.items():
        write_jsonl(members, out / f"{name}.jsonl")
    manifest = {
        "spec": spec.to_dict(),
        "counts": {k: len(v) for k, v in splits.items()},
        "run_config": run_config,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(samples)} samples to {out} " f"(train/val/test = {[len(splits[k]) for k in ('train', 'val', 'test')]})")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_bundles(samples, vocab, max_images):
    bundles = []
    for s in samples:
        bundles.append(
            ConditioningBundle(
                images=s.images[:max_images],
                name_ids=encode(vocab, s.name),
                target_ids=encode(vocab, s.description),
            )
        )
    return bundles


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_path = data_dir / "train.jsonl"
    if not train_path.exists():
        raise UsageError(f"dataset not found: {train_path}")
    overrides = {
        "model.cond_mode": args.mode,
        "model.max_images": args.max_images,
        "train.seed": args.seed,
    }
    if args.p_text_dropout is not None:
        overrides["train.p_text_dropout"] = args.p_text_dropout
    if args.steps is not None:
        overrides["train.total_steps"] = args.steps
    run_config = build_run_config(args.config, overrides)
    tc = train_config_from(run_config)
    cfg = model_config_from(run_config)

    train_samples = load_jsonl(train_path, img_size=cfg.img_size)
    val_path = data_dir / "val.jsonl"
    val_samples = load_jsonl(val_path, img_size=cfg.img_size) if val_path.exists() else []
    if not train_samples:
        raise UsageError(f"no usable records in {train_path}")

    corpus = [s.name for s in train_samples] + [s.description for s in train_samples]
    vocab = train_bpe(corpus, run_config["data"]["vocab_size"], seed=tc.seed)
    run_config["model"]["vocab_size"] = vocab.size
    cfg = model_config_from(run_config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.cond_mode.value}-{tc.seed}"
    save_vocab(vocab, out / f"{stem}.vocab.txt")

    model = TransformerLM(cfg, seed=tc.seed)
    report = train(
        model,
        vocab,
        _load_bundles(train_samples, vocab, cfg.max_images),
        tc,
        val_bundles=_load_bundles(val_samples, vocab, cfg.max_images),
        checkpoint_path=out / f"{stem}.ckpt",
        run_config=run_config,
    )
    with open(out / f"{stem}.report.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_json() + "\n")
    print(f"trained {stem}: final loss {report.losses[-1]:.4f}, eval loss {report.final_eval_loss}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    model, header = load_checkpoint(ckpt_path)
    vocab_path = Path(args.vocab) if args.vocab else ckpt_path.with_suffix(".vocab.txt")
    if not vocab_path.exists():
        raise UsageError(f"vocab file not found: {vocab_path}")
    vocab = load_vocab(vocab_path)
    if header.get("vocab_hash") and header["vocab_hash"] != vocab_hash(vocab):
        print(
            f"warning: vocab hash mismatch (checkpoint {header['vocab_hash']}, file {vocab_hash(vocab)})",
            file=sys.stderr,
        )
    run_config = header.get("run_config") or build_run_config(args.config, {})
    gen_overrides = {}
    if args.strategy:
        gen_overrides["strategy"] = args.strategy
    if args.k is not None:
        gen_overrides["k"] = args.k
    if args.temperature is not None:
        gen_overrides["temperature"] = args.temperature
    if args.max_new_tokens is not None:
        gen_overrides["max_new_tokens"] = args.max_new_tokens
    gen_cfg_dict = dict(run_config["gen"])
    gen_cfg_dict.update(gen_overrides)
    gen_cfg_dict["seed"] = args.seed
    run_config = dict(run_config)
    run_config["gen"] = gen_cfg_dict
    gen = generation_config_from(run_config)

    samples = load_jsonl(args.input, img_size=model.cfg.img_size)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            bundle = ConditioningBundle(images=s.images[: model.cfg.max_images], name_ids=encode(vocab, s.name), target_ids=[])
            ids = lm_generate(model, bundle, gen, vocab)
            f.write(json.dumps({"id": s.id, "generated": decode(vocab, ids)}, separators=(",", ":")) + "\n")
    print(f"decoded {len(samples)} samples -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _read_generations(path) -> dict[str, str]:
    gens = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise UsageError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            gens[rec["id"]] = rec["generated"]
    return gens


def _score_model(gens: dict[str, str], refs: dict) -> dict:
    cands, ref_lists, img_recalls, name_recalls = [], [], [], []
    for sid, text in gens.items():
        sample = refs[sid]
        cands.append(text)
        ref_lists.append([sample.description])
        if sample.attributes:
            img_recalls.append(attribute_recall(text, sample.attributes, "image_only"))
            name_recalls.append(attribute_recall(text, sample.attributes, "name_only"))
    scores = score_all(EvalCorpus.from_strings(cands, ref_lists))
    scores["n_items"] = len(cands)
    if img_recalls:
        scores["attr_recall_image_only"] = sum(img_recalls) / len(img_recalls)
        scores["attr_recall_name_only"] = sum(name_recalls) / len(name_recalls)
    return scores


def cmd_eval(args) -> int:
    report = {
        "tokenization": TOKENIZATION_RULE,
        "notes": ["meteor_lite: exact + Porter-stem stages only"],
        "significance": None,
        "models": {},
        "run_config": build_run_config(args.config, {}),
    }
    if args.candidates:
        items = []
        with open(args.candidates, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    items.append((rec["candidate"], rec["references"]))
        scores = score_all(EvalCorpus.from_strings([c for c, _ in items], [r for _, r in items]))
        scores["n_items"] = len(items)
        report["models"][Path(args.candidates).stem] = scores
    else:
        if not args.generations:
            raise UsageError("pass --generations (repeatable) or --candidates")
        if not args.references:
            raise UsageError("--references is required with --generations")
        ref_samples = {s.id: s for s in load_jsonl(args.references)}
        for gen_path in args.generations:
            gens = _read_generations(gen_path)
            missing_refs = sorted(set(gens) - set(ref_samples))
            missing_gens = sorted(set(ref_samples) - set(gens))
            if missing_refs or missing_gens:
                detail = []
                if missing_refs:
                    detail.append(f"ids without references: {missing_refs[:10]}")
                if missing_gens:
                    detail.append(f"ids without generations: {missing_gens[:10]}")
                raise UsageError(f"id mismatch between {gen_path} and {args.references}; " + "; ".join(detail))
            if not gens:
                report["models"][Path(gen_path).stem] = {"n_items": 0}
                continue
            report["models"][Path(gen_path).stem] = _score_model(gens, ref_samples)
    _write_json(args.out, report)
    for name, scores in report["models"].items():
        row = " ".join(f"{k}={v:.4f}" for k, v in scores.items() if isinstance(v, float))
        print(f"{name}: {row}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    dg = sub.add_parser("datagen", help="generate the synthetic dataset")
    dg.add_argument("--n", type=int, required=True, help="number of samples")
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--out", required=True, help="output directory")
    dg.add_argument("--config", default=None)
    dg.set_defaults(func=cmd_datagen)

    tr = sub.add_parser("train", help="train one conditioning arm")
    tr.add_argument("--mode", required=True, choices=[m.value for m in CondMode])
    tr.add_argument("--data", required=True, help="dataset directory (train.jsonl/val.jsonl)")
    tr.add_argument("--out", required=True, help="artifact directory")
    tr.add_argument("--max-images", type=int, default=1, choices=range(1, 6))
    tr.add_argument("--p-text-dropout", type=float, default=None)
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--config", default=None)
    tr.set_defaults(func=cmd_train)

    ge = sub.add_parser("generate", help="decode a dataset split")
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--vocab", default=None)
    ge.add_argument("--input", required=True, help="JSONL split to condition on")
    ge.add_argument("--out", required=True, help="output JSONL of generations")
    ge.add_argument("--strategy", choices=["greedy", "top_k"], default=None)
    ge.add_argument("--k", type=int, default=None)
    ge.add_argument("--temperature", type=float, default=None)
    ge.add_argument("--max-new-tokens", type=int, default=None)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--config", default=None)
    ge.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="score generations against references")
    ev.add_argument("--generations", action="append", default=[], help="generation JSONL (repeatable)")
    ev.add_argument("--references", default=None, help="reference JSONL (dataset split)")
    ev.add_argument("--candidates", default=None, help="JSONL with id/candidate/references records")
    ev.add_argument("--out", required=True, help="score report path")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--config", default=None)
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
