"""Command-line surface.

Subcommands: train, eval, predict, explain, gradcheck, sweep, gen-synth,
kfold. The dataset directory defaults to the KGF_DATA_DIR environment
variable. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np
import torch

from .checkpoint import (
    ModelCheckpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    torch_rng_state_b64,
)
from .config import GRID, TrainConfig, parse_config_file
from .errors import DataError, NumericalError, UsageError
from .explain import extract_paths, paths_to_dot, paths_to_text
from .model import Model
from .optim import grad_check
from .store import TripleStore, generate_synthetic, kfold_split, load_dataset, write_split_files
from .training import apply_ablation, build_queries, evaluate, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    for f in dataclasses.fields(TrainConfig):
        arg = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            sub.add_argument(arg, type=str, choices=["true", "false"], default=None)
        else:
            sub.add_argument(arg, type=str, default=None)


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = parse_config_file(args.config, cfg)
    for f in dataclasses.fields(TrainConfig):
        raw = getattr(args, f.name, None)
        if raw is None:
            continue
        if f.type in ("bool", bool):
            setattr(cfg, f.name, raw == "true")
        elif f.type in ("int", int):
            setattr(cfg, f.name, int(raw))
        elif f.type in ("float", float):
            setattr(cfg, f.name, float(raw))
        else:
            setattr(cfg, f.name, raw)
    cfg.validate()
    return cfg


def _data_dir(args) -> str:
    data = args.data or os.environ.get("KGF_DATA_DIR")
    if not data:
        raise UsageError("no dataset directory: pass --data or set KGF_DATA_DIR")
    return data


def build_parser() -> _Parser:
    parser = _Parser(prog="kgfusion")
    parser.add_argument("--threads", type=int, default=0, help="torch CPU threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train a model")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history-out", help="JSONL training history output")
    _config_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])

    p = sub.add_parser("predict", help="rank tail entities for a query")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--entity", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--reverse", action="store_true", help="query the reverse relation")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--filter", action="store_true", help="drop known true tails")

    p = sub.add_parser("explain", help="attention paths towards a target entity")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--entity", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--reverse", action="store_true")
    p.add_argument("--target", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--dot-out", help="write a DOT graph file")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("sweep", help="grid sweep over one hyperparameter")
    p.add_argument("--data")
    p.add_argument("--param", required=True, choices=sorted(GRID))
    p.add_argument("--values", help="comma-separated override of the grid")
    p.add_argument("--out", help="JSONL results output")
    _config_args(p)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, required=True)
    p.add_argument("--facts", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--split-fractions",
        default="0.8,0.1,0.1",
        help="train,valid,test fractions",
    )

    p = sub.add_parser("kfold", help="write k disjoint folds of a split")
    p.add_argument("--data")
    p.add_argument("--split", default="train", choices=["background", "train", "valid", "test"])
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for fold files")
    return parser


def _resolve_query(store: TripleStore, args) -> tuple[int, int]:
    for label, idmap, kind in (
        (args.entity, store.entities, "entity"),
        (args.relation, store.relations, "relation"),
    ):
        if label not in idmap:
            near = [l for l in idmap.labels if l.startswith(label)][:5]
            hint = f"; closest by prefix: {', '.join(near)}" if near else ""
            raise DataError(f"unknown {kind} label {label!r}{hint}")
    q_e = store.entities.id_of(args.entity)
    q_r = store.relations.id_of(args.relation)
    if getattr(args, "reverse", False):
        q_r += store.scheme.n_original
    return q_e, q_r


def cmd_train(args) -> int:
    cfg = _build_config(args)
    store = load_dataset(_data_dir(args))
    result = train(store, cfg)
    ckpt = ModelCheckpoint.from_model(
        result.model,
        rng_state={"torch": torch_rng_state_b64(), "seed": cfg.seed},
        best_valid_mrr=result.best_valid_mrr,
        arrays=result.best_arrays,
    )
    save_checkpoint(args.out, ckpt)
    if args.history_out:
        with open(args.history_out, "w", encoding="utf-8") as fh:
            for record in result.history:
                fh.write(json.dumps(record) + "\n")
    print(
        f"best valid MRR {result.best_valid_mrr:.4f} at epoch {result.best_epoch}; "
        f"checkpoint written to {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    store = load_dataset(_data_dir(args))
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, store)
    report = evaluate(store, model, args.split)
    print(json.dumps({"split": args.split, **report.as_dict()}))
    return 0


def cmd_predict(args) -> int:
    store = load_dataset(_data_dir(args))
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, store)
    q_e, q_r = _resolve_query(store, args)
    with torch.no_grad():
        scores, _ = model.score_queries(
            np.array([[q_e, q_r]], dtype=np.int64), mode="infer"
        )
    row = scores[0].double().numpy()
    order = np.lexsort((np.arange(len(row)), -row))
    shown = 0
    print(f"rank\tentity\tscore")
    for idx in order:
        if args.filter and (q_e, q_r, int(idx)) in store.known_facts:
            continue
        shown += 1
        print(f"{shown}\t{store.entities.label_of(int(idx))}\t{row[idx]:.6f}")
        if shown >= args.top:
            break
    return 0


def cmd_explain(args) -> int:
    store = load_dataset(_data_dir(args))
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, store)
    q_e, q_r = _resolve_query(store, args)
    if args.target not in store.entities:
        raise DataError(f"unknown entity label {args.target!r}")
    target = store.entities.id_of(args.target)
    with torch.no_grad():
        trace = model.run_propagation((q_e, q_r), mode="infer")
        scores, _ = model.score_queries(
            np.array([[q_e, q_r]], dtype=np.int64), mode="infer"
        )
    paths = extract_paths(trace, target, beam=args.beam)
    for path in paths:
        path.terminal_score = float(scores[0, target])
    sys.stdout.write(paths_to_text(paths, store))
    if args.dot_out:
        with open(args.dot_out, "w", encoding="utf-8") as fh:
            fh.write(paths_to_dot(paths, store))
    return 0


def cmd_gradcheck(args) -> int:
    from .optim import default_check_config

    report = grad_check(config=default_check_config(seed=args.seed), tolerance=args.tolerance)
    for group in sorted(report.max_rel_err):
        status = "PASS" if report.max_rel_err[group] < report.tolerance else "FAIL"
        print(f"{status} {group}: max relative error {report.max_rel_err[group]:.3e}")
    if not report.passed:
        raise NumericalError(
            f"gradient check failed for groups: {', '.join(report.failed_groups)}"
        )
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    store = load_dataset(_data_dir(args))
    if args.values:
        raw = [v for v in args.values.split(",") if v]
        values = [int(v) if v.strip().isdigit() else float(v) for v in raw]
    else:
        values = GRID[args.param]
    rows = []
    print("value\tvalid_mrr\tvalid_hit1\tvalid_hit10\ttest_mrr\tseconds")
    for value in values:
        run_cfg = dataclasses.replace(cfg, **{args.param: value})
        start = time.perf_counter()
        result = train(store, run_cfg, log=lambda *_: None)
        model = result.model
        model.load_state_arrays(result.best_arrays)
        test_report = evaluate(store, model, "test")
        best = max(result.history, key=lambda rec: rec["valid_mrr"])
        row = {
            "param": args.param,
            "value": value,
            "valid_mrr": result.best_valid_mrr,
            "valid_hit1": best["valid_hit1"],
            "valid_hit10": best["valid_hit10"],
            "test_mrr": test_report.mrr,
            "seconds": time.perf_counter() - start,
        }
        rows.append(row)
        print(
            f"{value}\t{row['valid_mrr']:.4f}\t{row['valid_hit1']:.4f}"
            f"\t{row['valid_hit10']:.4f}\t{row['test_mrr']:.4f}\t{row['seconds']:.1f}"
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return 0


def cmd_gen_synth(args) -> int:
    fractions = tuple(float(x) for x in args.split_fractions.split(","))
    if len(fractions) != 3:
        raise UsageError("--split-fractions needs three comma-separated numbers")
    store = generate_synthetic(
        args.entities, args.relations, args.facts, args.seed, split_fractions=fractions
    )
    write_split_files(store, args.out)
    sizes = {s: len(store.splits[s]) for s in ("train", "valid", "test")}
    print(f"wrote {args.out}: {sizes}")
    return 0


def cmd_kfold(args) -> int:
    store = TripleStore()
    from .store import SPLITS, load_triples

    data = _data_dir(args)
    path = os.path.join(data, f"{args.split}.txt")
    load_triples(path, store, args.split)
    folds = kfold_split(store.splits[args.split], args.k, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i, fold in enumerate(folds):
        fold_path = os.path.join(args.out, f"fold_{i:02d}.txt")
        with open(fold_path, "w", encoding="utf-8") as fh:
            for h, r, t in fold:
                fh.write(
                    f"{store.entities.label_of(h)}\t{store.relations.label_of(r)}\t"
                    f"{store.entities.label_of(t)}\n"
                )
    print(f"wrote {len(folds)} folds to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "gen-synth": cmd_gen_synth,
    "kfold": cmd_kfold,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads > 0:
            torch.set_num_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())
