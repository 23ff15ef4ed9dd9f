"""Command-line entry points: parse, pretrain, finetune, eval, gradcheck.

Configuration precedence, lowest to highest: built-in defaults, --config
file, repeated --set key=value overrides, then dedicated flags. Every run
writes its fully resolved configuration next to its outputs. Exit codes:
0 success, 1 any error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import TrainConfig, apply_overrides, load_config, save_config
from .finetune import attach_head, evaluate, finetune, load_manifest, write_report
from .geometry import RBFConfig
from .graph_builder import build_graph, load_graph, save_graph
from .gradcheck import run_report
from .models import load_embeddings, validate_params
from .optim import load_checkpoint, save_checkpoint
from .pretrain import pretrain_run
from .structure_io import parse_pdb_file

import numpy as np


def _resolve_config(args):
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    for flag in ("no_mutual", "no_bilevel", "no_angle", "no_distance", "distance_regression"):
        if getattr(args, flag, False):
            setattr(cfg, flag, True)
    for name in ("seed", "epochs", "batch_size", "hidden_dim", "seq_dim", "seq_mode",
                 "embeddings", "threshold", "mask_ratio", "lr_gnn", "lr_lm",
                 "finetune_epochs", "finetune_lr", "rbf_count", "rbf_gamma"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg.validate()


def _add_config_options(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config field (repeatable)")


def _add_train_options(sub):
    _add_config_options(sub)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    sub.add_argument("--seq-dim", dest="seq_dim", type=int)
    sub.add_argument("--seq-mode", dest="seq_mode", choices=("toy", "frozen"))
    sub.add_argument("--embeddings", help="embedding file for frozen mode")
    sub.add_argument("--lr-gnn", dest="lr_gnn", type=float)
    sub.add_argument("--lr-lm", dest="lr_lm", type=float)
    sub.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    sub.add_argument("--no-mutual", dest="no_mutual", action="store_true")
    sub.add_argument("--no-bilevel", dest="no_bilevel", action="store_true")
    sub.add_argument("--no-angle", dest="no_angle", action="store_true")
    sub.add_argument("--no-distance", dest="no_distance", action="store_true")
    sub.add_argument("--distance-regression", dest="distance_regression", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="protein-ssl")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("parse", help="featurize PDB files into graph caches")
    p.add_argument("pdbs", nargs="+", help="PDB files to featurize")
    p.add_argument("--out", required=True, help="output directory for .sgr caches")
    p.add_argument("--chain", help="chain id (default: first chain in each file)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--rbf-count", dest="rbf_count", type=int)
    p.add_argument("--rbf-gamma", dest="rbf_gamma", type=float)
    _add_config_options(p)

    p = commands.add_parser("pretrain", help="self-supervised pretraining on graph caches")
    p.add_argument("cache_dir", help="directory of .sgr graph caches")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_options(p)

    p = commands.add_parser("finetune", help="supervised finetuning from a checkpoint")
    p.add_argument("manifest", help="id<TAB>label manifest")
    p.add_argument("cache_dir", help="directory of .sgr graph caches")
    p.add_argument("checkpoint", help="pretrained checkpoint (.spm)")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("full", "head"), default="full")
    p.add_argument("--classes", type=int, help="class count (default: max label + 1)")
    _add_train_options(p)

    p = commands.add_parser("eval", help="evaluate a finetuned checkpoint")
    p.add_argument("manifest")
    p.add_argument("cache_dir")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--classes", type=int)
    _add_config_options(p)

    p = commands.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20, help="number of seeds to sweep")
    return parser


def _load_caches(cache_dir):
    cache_dir = Path(cache_dir)
    if not cache_dir.is_dir():
        raise FileNotFoundError(f"cache directory {cache_dir} does not exist")
    paths = sorted(cache_dir.glob("*.sgr"))
    if not paths:
        raise FileNotFoundError(f"no .sgr caches under {cache_dir}")
    return [load_graph(p) for p in paths]


def _maybe_frozen(cfg):
    if cfg.seq_mode != "frozen":
        return None
    if not cfg.embeddings:
        raise ValueError("frozen sequence mode needs --embeddings")
    return load_embeddings(cfg.embeddings)


def cmd_parse(args):
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rbf = RBFConfig.uniform(cfg.rbf_count, cfg.rbf_gamma)
    failures = 0
    for pdb in args.pdbs:
        try:
            structure = parse_pdb_file(pdb, chain=args.chain)
            graph = build_graph(structure, np.zeros((len(structure), 0)), cfg.threshold, rbf)
            save_graph(out / f"{graph.id}.sgr", graph)
            print(f"{pdb}: wrote {graph.id}.sgr ({graph.node_count} residues, "
                  f"{len(graph.edges)} edges)")
        except Exception as exc:
            failures += 1
            print(f"error: {pdb}: {exc}", file=sys.stderr)
    save_config(out / "config.txt", cfg)
    return 1 if failures else 0


def cmd_pretrain(args):
    cfg = _resolve_config(args)
    graphs = _load_caches(args.cache_dir)
    frozen = _maybe_frozen(cfg)
    state = pretrain_run(graphs, cfg, args.out, frozen=frozen)
    last = state.history[-1]
    print(f"pretrained {len(graphs)} proteins for {state.step} steps; "
          f"final l_dis={last['l_dis']:.4f} l_angle={last['l_angle']:.4f}")
    print(f"outputs in {args.out}")
    return 0


def cmd_finetune(args):
    cfg = _resolve_config(args)
    dataset = load_manifest(args.manifest, args.cache_dir, n_classes=args.classes)
    params = load_checkpoint(args.checkpoint)
    validate_params(params, cfg)
    attach_head(params, cfg, dataset.n_classes)
    frozen = _maybe_frozen(cfg)
    history = finetune(dataset, params, cfg, mode=args.mode, frozen=frozen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.spm", params.values())
    lines = ["# columns: step\tlr\tloss"]
    lines += [f"{s}\t{lr!r}\t{loss!r}" for s, lr, loss in history]
    (out / "finetune.tsv").write_text("\n".join(lines) + "\n")
    save_config(out / "config.txt", cfg)
    result = evaluate(dataset, params, cfg, frozen=frozen)
    write_report(out / "train_report.txt", result)
    print(f"finetuned ({args.mode}) for {len(history)} steps; "
          f"train accuracy {result.accuracy:.4f}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    dataset = load_manifest(args.manifest, args.cache_dir, n_classes=args.classes, split="test")
    params = load_checkpoint(args.checkpoint)
    validate_params(params, cfg)
    if "head" not in params:
        raise ValueError("checkpoint has no classifier head; finetune first")
    frozen = _maybe_frozen(cfg)
    result = evaluate(dataset, params, cfg, frozen=frozen)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, result)
    save_config(out.parent / "config.txt", cfg)
    print(f"accuracy {result.accuracy:.4f} on {len(dataset)} proteins")
    return 0


def cmd_gradcheck(args):
    ok, lines = run_report(seed=args.seed, n_seeds=args.seeds)
    for line in lines:
        print(line)
    print("all gradients verified" if ok else "gradient verification FAILED")
    return 0 if ok else 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "parse": cmd_parse,
        "pretrain": cmd_pretrain,
        "finetune": cmd_finetune,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
