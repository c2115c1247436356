"""Command-line entry point: ``aptbench <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .campaign import CampaignExists, run_campaign
from .config import ConfigError, load_run_config
from .data import ChecksumError
from .experiments import (
    ABLATIONS,
    D_VALUES,
    OutputExists,
    attack_images,
    evaluate_run,
    ingest_data,
    pretrain_all,
    render_report,
    run_ablation,
    run_d_sweep,
    run_robustify,
    with_seed,
)
from .models import CheckpointError, NumericalFault
from .workspace import FIXTURES, MissingPrerequisite, Workspace

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML run configuration (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="experiment seed for attacks and fine-tuning")
    p.add_argument("--workers", type=int, default=1, help="parallel attack batches")
    p.add_argument("--force", action="store_true", help="recompute outputs that already exist")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aptbench", description="Generative adversarial attacks by pivotal tuning, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("ingest", help="generate the toy dataset and verify checksums"))
    p = sub.add_parser("pretrain", help="train the GAN, the perceptual net and the classifier zoo")
    _common(p)
    p.add_argument("--only", nargs="+", choices=FIXTURES, help="train only these fixtures")

    p = sub.add_parser("invert", help="invert the campaign images into pivots")
    _common(p)
    p.add_argument("--split", default=None, help="dataset split (default: campaign.split)")

    p = sub.add_parser("attack", help="run an attack campaign")
    _common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--mode", choices=("apt", "latent", "random"), help="override attack.mode")
    p.add_argument("--target", help="override attack.target")
    p.add_argument("--d", type=float, help="override the distance bound")

    p = sub.add_parser("eval", help="score a finished campaign")
    _common(p)
    p.add_argument("campaign_id")

    p = sub.add_parser("finetune", help="fine-tune the target on attacked training images and compare")
    _common(p)
    p.add_argument("--train-per-class", type=int, default=10)

    p = sub.add_parser("ablate", help="campaigns with objective terms removed")
    _common(p)
    p.add_argument("--variants", nargs="+", default=list(ABLATIONS), choices=ABLATIONS)

    p = sub.add_parser("sweep-d", help="campaigns at several distance bounds")
    _common(p)
    p.add_argument("--values", nargs="+", type=float, default=list(D_VALUES))

    p = sub.add_parser("report", help="tables and plots for finished campaigns")
    _common(p)
    p.add_argument("run_ids", nargs="*")
    return parser


def _print_files(files) -> None:
    for f in files:
        print(f)


def _run(args) -> int:
    cfg = with_seed(load_run_config(args.config), args.seed)
    ws = Workspace.from_config(cfg)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")

    if args.command == "ingest":
        data = ingest_data(ws, cfg)
        sizes = {s: len(data.split(s)) for s in ("train", "val", "test")}
        print(f"ingest: {data.dataset_id} at {ws.data_root / data.dataset_id} splits {sizes}")
    elif args.command == "pretrain":
        metas = pretrain_all(ws, cfg, force=args.force, names=args.only or FIXTURES)
        acc = {k: round(m["test_accuracy"], 4) for k, m in metas.items() if "test_accuracy" in m}
        print(f"pretrain: {sorted(metas)} ready in {ws.home / 'checkpoints'}; test accuracy {acc}")
    elif args.command == "invert":
        split = args.split or cfg.campaign.split
        images = attack_images(ws, cfg, split)
        fx = ws.fixtures([])
        x, y = images.tensors()
        pivots = ws.pivots(x, y, images.ids, fx, cfg.inversion)
        worst = max(p.final_loss for p in pivots)
        print(f"invert: {len(pivots)} pivots in {ws.pivot_dir(cfg.inversion)}; worst final loss {worst:.4g}")
    elif args.command == "attack":
        a = cfg.attack
        if args.mode:
            a = replace(a, mode=args.mode)
        if args.target:
            a = replace(a, target=args.target)
        if args.d is not None:
            a = replace(a, d=args.d)
        split = args.split or cfg.campaign.split
        if a.mode == "random":
            classes = [c for c in range(cfg.model.num_classes) for _ in range(cfg.campaign.per_class)]
            images = None
        else:
            classes = None
            images = attack_images(ws, cfg, split)
        c = run_campaign(ws, images, a, cfg.inversion, cfg.campaign, split, cfg.campaign.select_seed,
                         force=args.force, workers=args.workers, random_classes=classes, refuse_existing=not args.force)
        n = c.info["counts"]
        print(f"attack: {c.campaign_id} attacked {n['attacked']} emitted {n['emitted']} "
              f"fooled {sum(r.fooled.get(a.target, False) for r in c.records)} -> {c.directory}")
    elif args.command == "eval":
        report, files = evaluate_run(ws, cfg, args.campaign_id)
        print(f"eval: {args.campaign_id} fooling rate {report['fooling_rate']} class preservation {report['class_preservation']}")
        _print_files(files)
    elif args.command == "finetune":
        report, files = run_robustify(ws, cfg, args.train_per_class, args.workers, args.force)
        d = report["delta"]
        print(f"finetune: {report['after_id']} attack-set acc {report['before']['acc']:.4f} -> {report['after']['acc']:.4f} "
              f"(clean delta {d.get('clean_acc', 0.0):+.4f})")
        _print_files(files)
    elif args.command == "ablate":
        report, files = run_ablation(ws, cfg, args.variants, args.workers, args.force)
        rates = {v: s["fooling_rate"] for v, s in report["variants"].items()}
        print(f"ablate: fooling rates {rates}")
        _print_files(files)
    elif args.command == "sweep-d":
        if any(v <= 0 for v in args.values):
            raise ConfigError("distance bounds must be positive")
        report, files = run_d_sweep(ws, cfg, args.values, args.workers, args.force)
        rates = {k: s["fooling_rate"] for k, s in report["d"].items()}
        print(f"sweep-d: fooling rates {rates}")
        _print_files(files)
    elif args.command == "report":
        ids = args.run_ids or sorted(p.name for p in (ws.home / "runs").glob("*") if (p / "campaign.json").exists())
        files = render_report(ws, ids)
        print(f"report: {len(ids)} campaigns")
        _print_files(files)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, CampaignExists, OutputExists) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (MissingPrerequisite, ChecksumError, CheckpointError, NumericalFault, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
