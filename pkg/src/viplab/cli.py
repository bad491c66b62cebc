"""Command-line entry point. Exit codes: 0 success, 2 config error, 3 numeric abort."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("viplab")


def _config(args):
    from .experiment import load_config

    return load_config(args.config, args.set)


def cmd_generate_corpus(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "support", "test"):
        spec = cfg.corpus_split(split)
        spec.save(out / f"{split}.json")
        if args.records:
            from .bench.scenes import write_records

            scenes = spec.build_scenes()
            write_records(out / f"{split}_gt.csv",
                          ((i, c, b) for i, s in enumerate(scenes) for b, c in s.instances))
    log.info("corpus splits written to %s", out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import run_training

    cfg = _config(args)
    rec = run_training(cfg, args.out)
    final = rec.final
    print(json.dumps({"config_hash": rec.config_hash, "checkpoint": rec.checkpoint,
                      **{k: final[k] for k in ("map_g", "map_i", "iisr")}}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import Workspace, evaluate_model, load_checkpoint

    cfg, model = load_checkpoint(args.checkpoint)
    result = evaluate_model(model, Workspace(cfg), cfg.run.seed)
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablation_ladder(args) -> int:
    from .experiment import run_ablation_ladder

    cfg = _config(args)
    variants = args.variants.split(",") if args.variants else None
    report = run_ablation_ladder(cfg, n_seeds=args.seeds, variants=variants, include_scl=not args.no_scl,
                                 out_dir=args.out, workers=args.workers)
    for row in report.summary():
        print(f"{row['variant']:<20} mAP {row['map_g_mean']:.4f}±{row['map_g_std']:.4f}  "
              f"IISR {row['iisr_mean']:.4f}±{row['iisr_std']:.4f}  {row['status']}")
    return EXIT_OK


def cmd_prompt_sweep(args) -> int:
    from .experiment import run_prompt_count_sweep

    if args.checkpoint:
        ckpts = args.checkpoint
    else:
        ckpts = {}
        for mode, paths in (("full", args.full), ("selective", args.selective)):
            if paths:
                ckpts[mode] = paths
        if not ckpts:
            raise ConfigError("give --checkpoint or at least one of --full/--selective")
    counts = [int(n) for n in args.counts.split(",")] if args.counts else None
    report = run_prompt_count_sweep(ckpts, counts, seed=args.seed, out_dir=args.out)
    for mode in report.modes():
        print(mode, "spread", round(report.spread(mode), 4),
              {n: round(report.mean_map(mode, n), 4) for n in report.counts})
    return EXIT_OK


def cmd_analyze_embeddings(args) -> int:
    from .experiment import Workspace, load_checkpoint, safe_iisr, embeddings_of_test_split
    from .metrics import project_2d, read_dump, similarity_distributions, write_dump

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dump:
        data = read_dump(args.dump)
    else:
        cfg, model = load_checkpoint(args.checkpoint)
        data = embeddings_of_test_split(model, Workspace(cfg))
        write_dump(data, out / "embeddings.txt")
    report = similarity_distributions(data)
    report.write_csv(out / "similarity.csv")
    proj = project_2d(data)
    with open(out / "projection.csv", "w") as fh:
        fh.write("label,x,y\n")
        for lbl, (x, y) in zip(data.labels, proj.coords):
            fh.write(f"{lbl},{x!r},{y!r}\n")
    print(json.dumps({"iisr": safe_iisr(data), "n": len(data.labels)}))
    return EXIT_OK


def cmd_export_plots(args) -> int:
    from .experiment import export_plots

    paths = export_plots(args.out, ladder=args.ladder, sweep=args.sweep, dump=args.dump,
                         render=not args.csv_only)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viplab", description="Desk-scale visual-prompt detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def configured(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        return p

    p = configured("generate-corpus", "write corpus split files")
    p.add_argument("--out", required=True)
    p.add_argument("--records", action="store_true", help="also write ground-truth box records")
    p.set_defaults(func=cmd_generate_corpus)

    p = configured("train", "train one model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Visual-G / Visual-I mAP and IISR of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = configured("ablation-ladder", "train every ladder variant over several seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", help="comma-separated subset of variant names")
    p.add_argument("--no-scl", action="store_true", help="skip the contrastive substitute")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablation_ladder)

    p = sub.add_parser("prompt-sweep", help="mAP against the number of prompts in the bank")
    p.add_argument("--checkpoint", help="one checkpoint swept under both fusion modes")
    p.add_argument("--full", nargs="+", help="checkpoints trained with full fusion")
    p.add_argument("--selective", nargs="+", help="checkpoints trained with selective fusion")
    p.add_argument("--counts", help="comma-separated prompt counts (default 1,2,4,8,K)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompt_sweep)

    p = sub.add_parser("analyze-embeddings", help="IISR, similarity histograms and projection")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--dump")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_embeddings)

    p = sub.add_parser("export-plots", help="plot CSVs and images from saved records")
    p.add_argument("--ladder", help="ladder.json")
    p.add_argument("--sweep", help="sweep.csv")
    p.add_argument("--dump", help="embedding dump")
    p.add_argument("--out", required=True)
    p.add_argument("--csv-only", action="store_true")
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
