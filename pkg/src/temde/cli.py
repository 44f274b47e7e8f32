"""Command-line entry point: generate-data, train, eval, bench and sketch-dump.

Every subcommand takes ``--config FILE`` with ``key=value`` lines (``#`` starts
a comment); keys are flag names with dashes or underscores. Flags given on the
command line win over the file. Effective settings are echoed as a manifest
on stderr before anything runs. Exit codes: 0 ok, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from temde import bench as benchmod
from temde.coder import DISTANCE_SIGNS, TemdeConfig, sketch_dump
from temde.data import generate_synthetic, load_dataset, save_dataset
from temde.metrics import RetrievalMetrics, format_metric_line
from temde.model import BACKENDS, ModelConfig, RetrievalModel, load_model, save_model
from temde.tensor import Tensor, take
from temde.trainer import OPTIMIZERS, TrainConfig, evaluate, format_history, train

logger = logging.getLogger("temde")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temde", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="key=value file supplying defaults for any flag")
        p.add_argument("--out", help="output file (eval, bench, sketch-dump) or directory (train, generate-data)")
        return p

    g = add("generate-data", "write a synthetic paired caption/segment dataset")
    g.add_argument("--n-items", type=int, default=2560, help="total items across all splits")
    g.add_argument("--n-latents", type=int, default=16, help="shared latent factors")
    g.add_argument("--vocab-size", type=int, default=512, help="vocabulary size including <unk>")
    g.add_argument("--feat-dim", type=int, default=64, help="segment feature width F")
    g.add_argument("--seed", type=int, default=0, help="generator seed")

    t = add("train", "train a retrieval model; --n/--k lists run an ablation grid")
    t.add_argument("--data", help="dataset directory (see generate-data)")
    t.add_argument("--backend", choices=BACKENDS, default="temde", help="global-representation backend")
    t.add_argument("--n", type=_int_list, default=[16], help="sketch depth N (comma list for a grid)")
    t.add_argument("--k", type=_int_list, default=[8], help="sketch width K (comma list for a grid)")
    t.add_argument("--d", type=int, default=8, help="centroid-space dimension D")
    t.add_argument("--distance-sign", choices=DISTANCE_SIGNS, default="negative",
                   help="softmax over -distance (nearest wins) or +distance")
    t.add_argument("--embed-dim", type=int, default=128, help="token/segment embedding width E")
    t.add_argument("--head-dim", type=int, default=None, help="combined sketch width H (default min(256, N*K))")
    t.add_argument("--attn-width", type=int, default=256, help="attention backend width d")
    t.add_argument("--attn-depth", type=int, default=2, help="linear+batch-norm blocks per attention stack")
    t.add_argument("--margin", type=float, default=0.2, help="triplet margin")
    t.add_argument("--epochs", type=int, default=20, help="training epochs")
    t.add_argument("--batch-size", type=int, default=32, help="items per batch (>= 2)")
    t.add_argument("--lr", type=float, default=2e-4, help="learning rate")
    t.add_argument("--optimizer", choices=OPTIMIZERS, default="adam", help="update rule")
    t.add_argument("--warmup-epochs", type=int, default=1,
                   help="epochs using every violating negative before hardest-negative mining")
    t.add_argument("--eval-every", type=int, default=0, help="evaluate every S steps (0: each epoch end)")
    t.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")

    e = add("eval", "score a split and print retrieval metrics for both directions")
    e.add_argument("--model", help="model file written by train")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--split", default="test", help="train, val or test")

    b = add("bench", "time the sketch coder against both attention formulations")
    b.add_argument("--t", type=_int_list, default=list(benchmod.DEFAULT_T), help="comma list of sequence lengths")
    b.add_argument("--subjects", default=",".join(benchmod.SUBJECTS), help="comma list of subjects")
    b.add_argument("--width", type=int, default=256, help="token width E = d")
    b.add_argument("--repeats", type=int, default=10, help="timed samples per length (>= 10)")
    b.add_argument("--warmup", type=int, default=3, help="untimed calls per length (>= 3)")
    b.add_argument("--n", type=int, default=20, help="sketch depth N")
    b.add_argument("--k", type=int, default=8, help="sketch width K")
    b.add_argument("--d", type=int, default=8, help="centroid-space dimension D")
    b.add_argument("--seed", type=int, default=0, help="input and weight seed")

    s = add("sketch-dump", "print per-token sketches of one caption or image")
    s.add_argument("--model", help="model file written by train (sketch backend)")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--item", type=int, default=0, help="item id to dump")
    s.add_argument("--modality", choices=("text", "image"), default="text", help="which coder to dump")
    return parser


def parse_args(argv: Sequence[str] | None) -> tuple[argparse.ArgumentParser, argparse.Namespace]:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key in values:
            if key not in known or key in ("config", "help"):
                sub.error(f"unknown config key {key!r}")
        # re-parse with file values as defaults so explicit flags still win
        defaults = {}
        for key, raw in values.items():
            action = known[key]
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                sub.error(f"config key {key}: {exc}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return parser, args


def manifest(args: argparse.Namespace) -> str:
    return "".join(f"# {k}={v}\n" for k, v in sorted(vars(args).items()))


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_generate(args) -> int:
    if not args.out:
        raise UsageError("generate-data needs --out DIR")
    ds = generate_synthetic(args.n_items, args.n_latents, args.vocab_size, args.feat_dim, args.seed)
    save_dataset(ds, args.out)
    sizes = " ".join(f"{k}={len(v)}" for k, v in ds.splits.items())
    print(f"wrote {len(ds)} items to {args.out} ({sizes})")
    return 0


def _train_one(args, ds, n: int, k: int, out: Path) -> tuple[int, int, object]:
    mcfg = ModelConfig(
        vocab_size=ds.vocab_size, embed_dim=args.embed_dim, segment_feat_dim=ds.feat_dim,
        backend=args.backend,
        temde=TemdeConfig(n_divisions=n, n_centroids=k, inner_dim=args.d, distance_sign=args.distance_sign),
        head_dim=args.head_dim, attn_width=args.attn_width, attn_depth=args.attn_depth, margin=args.margin,
    )
    tcfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, optimizer=args.optimizer,
        seed=args.seed, checkpoint_dir=str(out), eval_every=args.eval_every, warmup_epochs=args.warmup_epochs,
    )
    model = RetrievalModel(mcfg, seed=args.seed)
    result = train(model, ds, tcfg, on_metrics=lambda row: logger.info("%s", row.line()))
    (out / "history.tsv").write_text(format_history(result), encoding="utf-8")
    return n, k, result


def cmd_train(args) -> int:
    if not args.data or not args.out:
        raise UsageError("train needs --data DIR and --out DIR")
    ds = load_dataset(args.data)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text(manifest(args), encoding="utf-8")
    grid = [(n, k) for n in args.n for k in args.k]
    if len(grid) == 1:
        _, _, result = _train_one(args, ds, *grid[0], root)
        sys.stdout.write(format_history(result))
        return 0
    lines = ["# N\tK\tstep\tloss\tr@1\tr@5\tr@10\tmrr"]
    for n, k in grid:
        _, _, result = _train_one(args, ds, n, k, root / f"n{n}_k{k}")
        best = result.best
        row = best.line() if best else format_metric_line(result.step, float("nan"), _nan_metrics())
        lines.append(f"{n}\t{k}\t{row}")
    summary = "\n".join(lines) + "\n"
    (root / "summary.tsv").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 0


def _nan_metrics() -> RetrievalMetrics:
    nan = float("nan")
    return RetrievalMetrics(nan, nan, nan, nan)


def cmd_eval(args) -> int:
    if not args.model or not args.data:
        raise UsageError("eval needs --model FILE and --data DIR")
    model = load_model(args.model)
    ds = load_dataset(args.data)
    if args.split not in ds.splits:
        raise UsageError(f"unknown split {args.split!r}")
    loss, directions = evaluate(model, ds, args.split)
    lines = ["# step\tloss\tr@1\tr@5\tr@10\tmrr"]
    for name, m in directions.items():
        lines.append(f"# direction={name} split={args.split}")
        lines.append(format_metric_line(0, loss, m))
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_bench(args) -> int:
    subjects = [s.strip() for s in args.subjects.split(",") if s.strip()]
    specs = []
    for subject in subjects:
        try:
            specs.append(benchmod.BenchSpec(
                subject, args.t, args.width, args.repeats, args.warmup, args.seed, args.n, args.k, args.d,
            ))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    results = []
    for spec in specs:
        logger.info("benchmarking %s", spec.subject)
        results.append(benchmod.run_bench(spec))
    _emit(benchmod.format_results(results), args.out)
    return 0


def cmd_sketch(args) -> int:
    if not args.model or not args.data:
        raise UsageError("sketch-dump needs --model FILE and --data DIR")
    model = load_model(args.model)
    if model.cfg.backend != "temde":
        raise UsageError("sketch-dump needs a model trained with --backend temde")
    ds = load_dataset(args.data)
    if args.item not in ds.item_ids:
        raise UsageError(f"no item {args.item} in {args.data}")
    i = ds.item_ids.index(args.item)
    model.eval()
    if args.modality == "text":
        tokens = take(model.embedding, np.asarray(ds.captions[i], dtype=np.int64))
        coder = model.text_backend
    else:
        tokens = model.image_proj(Tensor(ds.segments[i]))
        coder = model.image_backend
    _emit(sketch_dump(coder, tokens.detach()), args.out)
    return 0


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sketch-dump": cmd_sketch,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser, args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    sys.stderr.write(manifest(args))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"temde {args.command}: {exc}\n")
        return 2
    except Exception as exc:  # runtime failures become exit 1 with a diagnostic
        sys.stderr.write(f"temde {args.command}: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
