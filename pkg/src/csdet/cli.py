"""Command-line entry point: gen-data, train, eval, taxonomy-check, demo."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import detector as det
from . import evaluator as ev
from . import synthworld as sw
from . import taxonomy as tx
from . import trainer as tr


def worker_count() -> int:
    """Parallelism cap from CSRF_THREADS (0 = auto).  Execution is currently
    sequential, which satisfies any cap."""
    raw = os.environ.get("CSRF_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CSRF_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError(f"CSRF_THREADS must be >= 0, got {n}")
    return 1 if n == 0 else min(n, 1) or 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=7, help="master random seed (default 7)")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csdet",
        description="Cross-supervised shape detection sandbox: data generation, "
        "training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taxonomy-check", help="validate a category tree file")
    p.add_argument("tree_file", help="tab-separated child<TAB>parent edge file")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="world config JSON (default: built-in demo world)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--taxonomy", required=True, help="taxonomy edge file")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--out", required=True, help="output directory for log and checkpoints")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--taxonomy", required=True, help="taxonomy edge file")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="output directory for CSV reports")
    p.add_argument(
        "--proposal-counts",
        default="10,20,50,100,200,300",
        help="comma-separated ascending proposal budgets",
    )
    _add_common(p)

    p = sub.add_parser("demo", help="end-to-end tiny run: gen-data, train, eval")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    return parser


def cmd_taxonomy_check(args: argparse.Namespace) -> int:
    try:
        taxonomy = tx.load_taxonomy(args.tree_file)
    except (tx.TaxonomyError, OSError) as e:
        print(f"INVALID: {e}", file=sys.stderr)
        return 1
    print(f"nodes: {len(taxonomy.nodes)}")
    print(f"leaves: {taxonomy.num_leaves}")
    print(f"depth: {taxonomy.depth()}")
    print(f"root: {taxonomy.root}")
    print("OK")
    return 0


def _generate(config: sw.WorldConfig, out: Path, verbose: bool) -> None:
    taxonomy = config.validate()
    if verbose:
        print(
            f"generating {config.train_box_images}+{config.train_image_images} train "
            f"and {config.eval_images} eval images over {taxonomy.num_leaves} leaves"
        )
    data = sw.generate_dataset(config)
    out.mkdir(parents=True, exist_ok=True)
    sw.save_dataset(data.train, data.eval_set, data.hidden_gt, out)
    tx.write_edge_file(list(config.edges), out / "taxonomy.tsv")
    (out / "world_config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    if verbose:
        print(f"wrote dataset to {out}")


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.config:
        config = sw.WorldConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
        if args.seed is not None:
            config = sw.WorldConfig(**{**config.__dict__, "seed": args.seed})
    else:
        config = sw.demo_world_config(seed=args.seed)
    _generate(config, Path(args.out), args.verbose)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    dataset = sw.load_dataset(data_dir / "train_manifest.jsonl")
    taxonomy = tx.load_taxonomy(args.taxonomy)
    if args.config:
        config = tr.parse_train_config(args.config)
    else:
        config = tr.TrainConfig()
    import dataclasses

    config = dataclasses.replace(config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = tr.train(dataset, taxonomy, config, checkpoint_dir=out, verbose=args.verbose)
    tr.write_log_csv(result.log_rows, out / "log.csv")
    if args.verbose:
        print(f"wrote {len(result.checkpoints)} checkpoints and log.csv to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    taxonomy = tx.load_taxonomy(args.taxonomy)
    images = sw.load_dataset(data_dir / "eval_manifest.jsonl")
    params = det.load_checkpoint(args.ckpt, taxonomy)
    counts = tuple(int(v) for v in args.proposal_counts.split(",") if v)
    world_path = data_dir / "world_config.json"
    split_of: dict[str, str] = {}
    categories = None
    if world_path.exists():
        config = sw.WorldConfig.from_json(world_path.read_text(encoding="utf-8"))
        split_of = config.split_of()
        categories = sorted(set(config.box_level) | set(config.image_level))
    report = ev.evaluate_model(
        params,
        taxonomy,
        images,
        categories=categories,
        split_of=split_of,
        proposal_counts=counts,
    )
    out = Path(args.out)
    ev.write_report(report, out)
    _print_summary(report)
    return 0


def _print_summary(report: ev.EvalReport) -> None:
    def show(v: float | None) -> str:
        return "NA" if v is None else f"{v:.4f}"

    print(f"mAP all: {show(report.map_all)}")
    print(f"mAP box-level: {show(report.map_box_level)}")
    print(f"mAP image-level: {show(report.map_image_level)}")
    if report.proposal_table:
        print("proposals  ap_all  ap_box  ap_img  ar_all  ar_box  ar_img")
        for row in report.proposal_table:
            print(
                f"{row.count:9d}  {show(row.ap_all):>6}  {show(row.ap_box_level):>6}  "
                f"{show(row.ap_image_level):>6}  {show(row.ar_all):>6}  "
                f"{show(row.ar_box_level):>6}  {show(row.ar_image_level):>6}"
            )


def cmd_demo(args: argparse.Namespace) -> int:
    out = Path(args.out)
    data_dir = out / "data"
    run_dir = out / "run"
    eval_dir = out / "eval"
    config = sw.demo_world_config(seed=args.seed)
    _generate(config, data_dir, args.verbose)

    dataset = sw.load_dataset(data_dir / "train_manifest.jsonl")
    taxonomy = tx.load_taxonomy(data_dir / "taxonomy.tsv")
    train_config = tr.TrainConfig(seed=args.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    result = tr.train(dataset, taxonomy, train_config, checkpoint_dir=run_dir, verbose=args.verbose)
    tr.write_log_csv(result.log_rows, run_dir / "log.csv")

    images = sw.load_dataset(data_dir / "eval_manifest.jsonl")
    report = ev.evaluate_model(
        result.params,
        taxonomy,
        images,
        categories=sorted(set(config.box_level) | set(config.image_level)),
        split_of=config.split_of(),
    )
    ev.write_report(report, eval_dir)
    _print_summary(report)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        worker_count()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    handlers = {
        "taxonomy-check": cmd_taxonomy_check,
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "demo": cmd_demo,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, tr.NonFiniteLossError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
