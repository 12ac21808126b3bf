"""Command-line entry points.

Every verb writes delimited output (CSV / JSON) under ``--out`` (default:
``$OCTFUSION_OUT/<verb>``) and renders its figures next to it.  Exit status is
0 on success, 1 for input/configuration errors and 2 when a runtime invariant
check fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .data_pipeline import (
    SignalSpec,
    Split,
    generate_cohort,
    read_cohort,
    read_manifest,
    read_split,
    split_patients,
    subset_sample,
    task_ids,
    write_cohort,
    write_split,
)
from .errors import InvariantViolation, OctFusionError, TaskNotFound

log = logging.getLogger("octfusion")


def _out(args, verb: str) -> Path:
    from .runner import output_root

    out = Path(args.out) if args.out else output_root() / verb
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    from .runner import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "data", None):
        cfg.data_dir = str(args.data)
    if getattr(args, "split", None):
        cfg.split_file = str(args.split)
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    cfg.check_paths()
    return cfg


def _cohort(args, split: Split, task=None):
    task = task or getattr(args, "task", None)
    if task is not None and task not in task_ids(args.data):
        raise TaskNotFound(task)
    cohort = read_cohort(args.data, task)
    assignment = read_split(args.split)
    return cohort.by_patients(p for p, s in assignment.items() if s == split)


# -- verbs ---------------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    spec = SignalSpec(class_id=1, oct_amplitude=args.amplitude, enface_amplitude=args.enface_amplitude,
                      noise_sd=args.noise_sd, oct_radius=args.radius, enface_radius=args.radius)
    cohort = generate_cohort(args.patients, args.prevalence, seed=args.seed, dims=tuple(args.dims),
                             base_spec=spec, task_id=args.task)
    write_cohort(cohort, out)
    print(f"wrote {len(cohort)} pairs to {out}")


def cmd_split(args):
    rows = read_manifest(args.manifest)
    patients = sorted({r.patient_id for r in rows})
    assignment = split_patients(patients, pretrain_frac=args.pretrain_frac, seed=args.seed)
    path = Path(args.out) if args.out else Path(args.manifest).with_name("split.json")
    write_split(assignment, path)
    counts = {s.value: sum(1 for v in assignment.values() if v == s) for s in Split}
    print(json.dumps({"split": str(path), **counts}))


def cmd_pretrain(args):
    from .plotting import plot_loss_curves
    from .runner import pretrain_loop

    cfg = _config(args)
    if args.epochs is not None:
        cfg.pretrain.epochs = args.epochs
    out = _out(args, "pretrain")
    cfg.save(out / "config.json")
    cohort = _cohort(args, Split.PRETRAIN)
    resume = out / "checkpoint" if args.resume else None
    _, record = pretrain_loop(cfg, cohort, out_dir=out, resume_from=resume)
    with open(out / "pretrain_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    plot_loss_curves(rows, out / "loss_curves.png")
    print(f"pretrained {len(record.rows)} steps, final l_total {rows[-1]['l_total']}, checkpoint {out / 'checkpoint'}")


def cmd_finetune(args):
    from .runner import finetune_run, load_pretrained

    cfg = _config(args)
    model, _ = load_pretrained(args.pretrained)
    train = _cohort(args, Split.FT_TRAIN)
    if args.subset_n != "full":
        train = train.select(subset_sample(list(range(len(train))), int(args.subset_n), args.seed))
    valid = _cohort(args, Split.FT_VALID)
    out = _out(args, "finetune")
    finetune_run(model, cfg, train, valid, mode=cfg.mode, seed=args.seed, out_dir=out, task=args.task)
    print(f"fine-tuned on {len(train)} samples ({cfg.mode}); checkpoint {out / 'checkpoint'}")


def cmd_evaluate(args, fairness_only: bool = False):
    from .plotting import plot_fairness
    from .runner import _write_rows, evaluate_run

    if args.task not in task_ids(args.data):
        raise TaskNotFound(args.task)
    test = _cohort(args, Split.FT_TEST)
    out = _out(args, "fairness" if fairness_only else "evaluate")
    rows, fair = evaluate_run(args.checkpoint, test, args.task, args.mode)
    if not fairness_only:
        _write_rows(out / f"metrics_{args.task}_{args.mode}.csv", rows)
        for r in rows:
            print(f"{r['metric']},{r['value']}")
    if fair:
        _write_rows(out / f"fairness_{args.task}_{args.mode}.csv", fair)
        plot_fairness(fair, out / f"fairness_{args.task}_{args.mode}.png")
        if fairness_only:
            for r in fair:
                print(f"{r['attribute']},{r['metric']},{r['ratio']},{r['status']}")


def cmd_subset_harness(args):
    from .runner import load_pretrained, subset_harness

    cfg = _config(args)
    model, _ = load_pretrained(args.pretrained)
    train = _cohort(args, Split.FT_TRAIN)
    test = _cohort(args, Split.FT_TEST)
    out = _out(args, "subset_harness")
    res = subset_harness(model, cfg, train, test, sizes=tuple(args.sizes), seeds=tuple(range(1, args.seeds + 1)),
                         mode=cfg.mode, out_dir=out)
    for r in res.summary:
        print(f"n={r['size']} mean={r['mean']:.4f} ci=[{r['ci_low']:.4f}, {r['ci_high']:.4f}]")
    for a in res.advisories:
        print(f"advisory: {a}")


def cmd_gradcheck(args):
    from .diagnostics import gradient_checks, mae_contract_check, summarize

    torch.set_num_threads(1)
    reports = dict(gradient_checks(n_samples=args.samples, epsilon=args.epsilon, tol=args.tol))
    reports["mae_contract"] = mae_contract_check()
    lines = summarize(reports)
    print("\n".join(lines))
    if args.out:
        out = _out(args, "gradcheck")
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    if not all(r.passed for r in reports.values()):
        raise InvariantViolation("gradient check failed")


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octfusion", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired cohort")
    s.add_argument("--patients", type=int, required=True)
    s.add_argument("--prevalence", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=int, nargs=3, default=[64, 64, 10], metavar=("H", "W", "D"))
    s.add_argument("--amplitude", type=float, default=0.5)
    s.add_argument("--enface-amplitude", type=float, default=0.35)
    s.add_argument("--noise-sd", type=float, default=0.05)
    s.add_argument("--radius", type=float, default=6.0)
    s.add_argument("--task", default="synthetic")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="patient-level pretrain / fine-tune split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pretrain-frac", type=float, default=0.8)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    def data_args(s, task=True):
        s.add_argument("--data", required=True, help="cohort directory written by synth")
        s.add_argument("--split", required=True, help="split JSON written by split")
        if task:
            s.add_argument("--task", default="synthetic")
        s.add_argument("--out")

    s = sub.add_parser("pretrain", help="self-supervised pre-training on the PRETRAIN split")
    data_args(s, task=False)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    s.set_defaults(func=cmd_pretrain, mode=None)

    s = sub.add_parser("finetune", help="fine-tune a classifier on FT_TRAIN")
    data_args(s)
    s.add_argument("--pretrained", required=True, help="pre-training checkpoint directory")
    s.add_argument("--config")
    s.add_argument("--mode", choices=("dual", "oct", "enface"), default="dual")
    s.add_argument("--subset-n", default="full", help="integer subset size or 'full'")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_finetune)

    for verb, fn, desc in (("evaluate", cmd_evaluate, "metrics on FT_TEST"),
                           ("fairness", lambda a: cmd_evaluate(a, fairness_only=True), "subgroup ratio grid")):
        s = sub.add_parser(verb, help=desc)
        data_args(s)
        s.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint directory")
        s.add_argument("--mode", choices=("dual", "oct", "enface"), default="dual")
        s.set_defaults(func=fn)

    s = sub.add_parser("subset-harness", help="AUROC vs training-set size over seeds")
    data_args(s)
    s.add_argument("--pretrained", required=True)
    s.add_argument("--config")
    s.add_argument("--mode", choices=("dual", "oct", "enface"), default="dual")
    s.add_argument("--sizes", type=int, nargs="+", default=[200, 100, 50])
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=cmd_subset_harness)

    s = sub.add_parser("gradcheck", help="finite-difference checks on the toy model")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except InvariantViolation as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 2
    except (OctFusionError, ValueError, FileNotFoundError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
