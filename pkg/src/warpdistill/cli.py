"""Command-line surface.

Subcommands: prepare, pretrain-teacher, distill, evaluate, gradcheck,
dump-alignment.  Every command resolves (config, seed), writes exactly
one manifest into its output area before any artifact, and never
touches files outside that area.

Exit codes: 0 ok, 1 usage, 2 numeric failure, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys

import numpy as np

from .config import RunConfig
from .corpus import (
    CORPUS_VERSION,
    generate_corpus,
    load_pairs,
    save_pairs,
    split_corpus,
)
from .errors import MissingArtifactError, NumericError, UsageError
from .evaluate import evaluate_model
from .gradcheck import COMPONENTS, run_loss_gradcheck, run_softdtw_gradcheck
from .model import TinyLm, load_checkpoint, split_checkpoint_tensors
from .numerics import Rng, grid_to_csv
from .pipeline import LossSettings, distill_losses, encode_example
from .projection import ProjectorSet
from .tokenizers import CharTokenizer, PairTokenizer, Vocab, load_merges
from .train import MODES, distill, load_teacher, pretrain_teacher, resolve_mode

GRADCHECK_THRESHOLD = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


class Manifest:
    """One manifest per run, written before any artifact."""

    def __init__(self, command: str, config_path, seed: int, out_dir: str):
        self.data = {
            "command": command,
            "config": str(config_path) if config_path else None,
            "seed": seed,
            "git": _git_describe(),
            "start_time": _now(),
            "end_time": None,
            "out_dir": os.path.abspath(out_dir),
            "corpus_version": CORPUS_VERSION,
        }
        self.path = os.path.join(out_dir, "manifest.json")
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self):
        self.data["end_time"] = _now()
        self._write()


def _prepare_dir(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
    os.makedirs(path, exist_ok=True)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _corpus_paths(out):
    base = os.path.join(out, "corpus")
    return {
        "dir": base,
        "train": os.path.join(base, "train.tsv"),
        "valid": os.path.join(base, "valid.tsv"),
        "test": os.path.join(base, "test.tsv"),
        "char_vocab": os.path.join(base, "char_vocab.txt"),
        "pair_vocab": os.path.join(base, "pair_vocab.txt"),
        "merges": os.path.join(base, "merges.txt"),
    }


def _load_tokenizers(out):
    paths = _corpus_paths(out)
    for key in ("char_vocab", "pair_vocab", "merges", "train", "valid", "test"):
        if not os.path.exists(paths[key]):
            raise MissingArtifactError(f"missing {paths[key]}; run prepare first")
    student_tok = CharTokenizer(Vocab.load(paths["char_vocab"]))
    teacher_tok = PairTokenizer(Vocab.load(paths["pair_vocab"]), load_merges(paths["merges"]))
    return student_tok, teacher_tok, paths


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    paths = _corpus_paths(args.out)
    _prepare_dir(paths["dir"], args.force)
    manifest = Manifest("prepare", args.config, cfg.seed, paths["dir"])
    pairs = generate_corpus(cfg.seed, cfg.corpus_size)
    train, valid, test = split_corpus(pairs, cfg.valid_frac, cfg.test_frac)
    save_pairs(paths["train"], train)
    save_pairs(paths["valid"], valid)
    save_pairs(paths["test"], test)
    texts = [p + r for p, r in train]
    student_tok = CharTokenizer.train(texts)
    teacher_tok = PairTokenizer.train(texts, cfg.num_merges)
    student_tok.vocab.save(paths["char_vocab"])
    teacher_tok.save(paths["pair_vocab"], paths["merges"])
    manifest.finish()
    print(f"corpus: {len(train)} train / {len(valid)} valid / {len(test)} test lines")
    print(f"student vocab {student_tok.vocab.size}, teacher vocab {teacher_tok.vocab.size} "
          f"({len(teacher_tok.merges)} merges)")
    return 0


def cmd_pretrain_teacher(args) -> int:
    cfg = _load_config(args)
    student_tok, teacher_tok, paths = _load_tokenizers(args.out)
    teacher_dir = os.path.join(args.out, "teacher")
    _prepare_dir(teacher_dir, args.force)
    manifest = Manifest("pretrain-teacher", args.config, cfg.seed, teacher_dir)
    train = load_pairs(paths["train"])
    valid = load_pairs(paths["valid"])
    model, ppl, uni = pretrain_teacher(
        train, valid, teacher_tok, cfg, os.path.join(teacher_dir, "teacher.bin")
    )
    with open(os.path.join(teacher_dir, "report.txt"), "w") as fh:
        fh.write(f"held_out_ppl {ppl!r}\nunigram_ppl {uni!r}\n")
    manifest.finish()
    print(f"teacher held-out ppl {ppl:.3f} (unigram {uni:.3f}, "
          f"threshold {cfg.teacher_ppl_ratio * uni:.3f})")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    student_tok, teacher_tok, paths = _load_tokenizers(args.out)
    settings = resolve_mode(args.mode, cfg)
    teacher = None
    if settings.lambda_wkd != 0.0 or settings.lambda_dtw != 0.0:
        teacher = load_teacher(os.path.join(args.out, "teacher", "teacher.bin"))
    run_dir = os.path.join(args.out, "runs", args.mode)
    _prepare_dir(run_dir, args.force)
    manifest = Manifest(f"distill:{args.mode}", args.config, cfg.seed, run_dir)
    cfg.to_yaml(os.path.join(run_dir, "config.yaml"))
    train = load_pairs(paths["train"])
    artifacts = distill(train, student_tok, teacher_tok, teacher, cfg, args.mode, run_dir)
    manifest.finish()
    final = artifacts.breakdown_log[-1]
    print(f"mode {args.mode}: {len(artifacts.breakdown_log)} steps, "
          f"final total loss {final.total:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    student_tok, teacher_tok, paths = _load_tokenizers(args.out)
    ckpt = args.ckpt or os.path.join(args.out, "runs", args.mode, "student.bin")
    if not os.path.exists(ckpt):
        raise MissingArtifactError(f"checkpoint not found: {ckpt}")
    model_cfg, tensors = load_checkpoint(ckpt)
    params, _ = split_checkpoint_tensors(tensors)
    model = TinyLm(model_cfg, params)
    tokenizer = student_tok if model_cfg.vocab_size == student_tok.vocab.size else teacher_tok
    eval_dir = os.path.join(args.out, "eval", args.mode)
    _prepare_dir(eval_dir, args.force)
    manifest = Manifest(f"evaluate:{args.mode}", args.config, cfg.seed, eval_dir)
    test = load_pairs(paths["test"])[: cfg.eval_limit]
    seeds = [Rng(cfg.seed).child(f"eval-{i}").seed for i in range(cfg.eval_seeds)]
    report = evaluate_model(model, tokenizer, test, seeds, cfg.eval_max_new, cfg.rouge_beta)
    with open(os.path.join(eval_dir, "report.csv"), "w") as fh:
        fh.write("seed,rouge_l\n")
        for seed, score in zip(seeds, report.per_seed):
            fh.write(f"{seed},{score!r}\n")
        fh.write(f"mean,{report.mean!r}\n")
    manifest.finish()
    for seed, score in zip(seeds, report.per_seed):
        print(f"seed {seed}: rouge-l {score:.2f}")
    print(f"mean rouge-l {report.mean:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    check_dir = os.path.join(args.out, "gradcheck")
    _prepare_dir(check_dir, args.force)
    manifest = Manifest("gradcheck", args.config, cfg.seed, check_dir)
    seeds = [Rng(cfg.seed).child(f"gradcheck-{i}").seed for i in range(args.seeds)]
    if args.component == "softdtw":
        rows = run_softdtw_gradcheck(seeds)
    elif args.component == "all":
        rows = run_loss_gradcheck(seeds)
    else:
        name = args.component.replace("-", "_")
        if name not in COMPONENTS:
            raise UsageError(f"unknown component {args.component!r}")
        rows = run_loss_gradcheck(seeds, components=(name,))
    failed = False
    lines = []
    for name, err in rows:
        status = "ok" if err <= GRADCHECK_THRESHOLD else "FAIL"
        failed = failed or err > GRADCHECK_THRESHOLD
        lines.append(f"{name:<14} max rel err {err:.3e}  {status}")
    report = "\n".join(lines)
    with open(os.path.join(check_dir, "report.txt"), "w") as fh:
        fh.write(report + "\n")
    manifest.finish()
    print(report)
    if failed:
        raise NumericError(f"gradient check exceeded {GRADCHECK_THRESHOLD}")
    return 0


def cmd_dump_alignment(args) -> int:
    cfg = _load_config(args)
    student_tok, teacher_tok, paths = _load_tokenizers(args.out)
    ckpt = os.path.join(args.out, "runs", args.mode, "student.bin")
    if not os.path.exists(ckpt):
        raise MissingArtifactError(f"checkpoint not found: {ckpt}")
    teacher = load_teacher(os.path.join(args.out, "teacher", "teacher.bin"))
    model_cfg, tensors = load_checkpoint(ckpt)
    params, extra = split_checkpoint_tensors(tensors)
    student = TinyLm(model_cfg, params)
    projectors = ProjectorSet.from_namespaced(model_cfg.width, teacher.cfg.width, extra)
    test = load_pairs(paths["test"])
    if not 0 <= args.example < len(test):
        raise UsageError(f"--example {args.example} out of range (0..{len(test) - 1})")
    prompt, response = test[args.example]
    example = encode_example(prompt, response, student_tok, teacher_tok)
    dump_dir = os.path.join(args.out, "dumps", f"example{args.example}")
    _prepare_dir(dump_dir, args.force)
    manifest = Manifest(f"dump-alignment:{args.example}", args.config, cfg.seed, dump_dir)
    settings = resolve_mode("dwa", cfg)
    _, _, _, diag = distill_losses(
        student, teacher, projectors, example, settings, want_grads=False
    )
    dtw = diag.dtw
    for level, res in (("embed", dtw.embed), ("hidden", dtw.hidden)):
        grid_to_csv(os.path.join(dump_dir, f"{level}_cost.csv"), res.cross_cost)
        grid_to_csv(os.path.join(dump_dir, f"{level}_cost_banded.csv"), res.banded_cost)
        grid_to_csv(os.path.join(dump_dir, f"{level}_alignment_grad.csv"), res.alignment_grad)
    if dtw.band is not None:
        with open(os.path.join(dump_dir, "band.csv"), "w") as fh:
            fh.write("row,center,width\n")
            for i, (c, w) in enumerate(zip(dtw.band.centers, dtw.band.widths)):
                fh.write(f"{i + 1},{c!r},{w!r}\n")
    manifest.finish()
    print(f"alignment dump for example {args.example} written to {dump_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="warpdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default="out", help="workspace directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("prepare", help="generate corpus and train both tokenizers")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain-teacher", help="train and freeze the teacher")
    common(p)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", help="train a student under an ablation mode")
    common(p)
    p.add_argument("--mode", choices=MODES, default="dwa")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="generation quality of a trained student")
    common(p)
    p.add_argument("--mode", choices=MODES, default="dwa")
    p.add_argument("--ckpt", default=None, help="explicit checkpoint path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--component", default="all",
                   help="all, softdtw, total, or one loss term (e.g. kd-student)")
    p.add_argument("--seeds", type=int, default=20, help="number of random instances")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-alignment", help="CSV dump of cost/band/alignment grids")
    common(p)
    p.add_argument("--mode", choices=MODES, default="dwa")
    p.add_argument("--example", type=int, default=0, help="test-set example index")
    p.set_defaults(func=cmd_dump_alignment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
