"""Command line entry point: ``gda attack|transfer|ablate|sweep-k|diagnose|make-fixture``.

Exit codes: 0 success, 1 fatal config or I/O error, 2 completed with skipped
pairs or lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..core import AttackConfig, Budget, parse_number
from ..encoders import get_adapter
from ..pipeline import load_example, save_example
from .experiments import feature_space_diagnostics, run_ablation, run_transfer, sweep_k
from .manifest import ManifestError, load_manifest
from .reports import build_results, write_report

log = logging.getLogger("gda")

EXIT_OK, EXIT_FATAL, EXIT_SKIPS = 0, 1, 2


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def add_attack_flags(p: argparse.ArgumentParser, with_k: bool = True) -> None:
    g = p.add_argument_group("attack configuration")
    g.add_argument("--eps-image", default="8/255", help="l-inf image budget, e.g. 8/255")
    g.add_argument("--eps-text", type=int, default=1, help="max substituted tokens per caption")
    g.add_argument("--steps", type=int, default=10, help="PGD iterations T")
    g.add_argument("--step-size", default="2/255", help="PGD step size alpha")
    if with_k:
        g.add_argument("--k", type=int, default=3, help="number of influential tokens searched by GAR")
    g.add_argument("--width", type=int, default=10, help="MLM candidates per position (W)")
    g.add_argument("--scales", default="0.5,0.75,1.0,1.25,1.5")
    g.add_argument("--bsr-grid", type=int, default=2)
    g.add_argument("--bsr-angle", type=float, default=24.0)
    g.add_argument("--bsr-copies", type=int, default=20)
    g.add_argument("--rotation-mode", choices=["continuous", "right_angle"], default="continuous")
    g.add_argument("--interpolation", choices=["nearest", "bilinear"], default="nearest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-cte", action="store_true", help="MLM candidates only")
    g.add_argument("--no-gar", action="store_true", help="greedy top-1 substitution")
    g.add_argument("--stage-mode", choices=["two", "three"], default="two")
    g.add_argument("--s3-eps-text", type=int, default=None, help="budget of the final text round in --stage-mode three")
    g.add_argument("--gallery-side", choices=["clean", "adversarial"], default="clean",
                   help="clean: only queries are perturbed; adversarial: both sides")
    g.add_argument("--workers", type=int, default=1)


def config_from_args(args: argparse.Namespace) -> AttackConfig:
    return AttackConfig(
        budget=Budget(parse_number(args.eps_image), args.eps_text),
        pgd_steps=args.steps,
        step_size=parse_number(args.step_size),
        k_influential=getattr(args, "k", 3),
        candidate_width=args.width,
        scales=tuple(parse_number(s) for s in _csv_list(args.scales)),
        bsr_grid=args.bsr_grid,
        bsr_angle_max=args.bsr_angle,
        bsr_copies=args.bsr_copies,
        seed=args.seed,
        enable_cte=not args.no_cte,
        enable_gar=not args.no_gar,
        stage_mode="two_stage" if args.stage_mode == "two" else "three_stage_legacy",
        rotation_mode=args.rotation_mode,
        interpolation=args.interpolation,
        s3_eps_text=args.s3_eps_text,
    )


def _status(gallery, examples=()) -> int:
    degraded = any(e.degraded for e in examples)
    return EXIT_SKIPS if gallery.skipped or degraded else EXIT_OK


def cmd_attack(args) -> int:
    config = config_from_args(args)
    gallery = load_manifest(args.manifest)
    get_adapter(args.adapter)
    matrix, examples = run_transfer(
        args.adapter, [], gallery, config, gallery_side=args.gallery_side, workers=args.workers
    )
    out = Path(args.out)
    for pair, ex in zip(gallery.pairs, examples):
        save_example(ex, pair.image, out / "examples")
    results = build_results(
        "attack", config, matrix=matrix, examples=examples,
        gallery_side=args.gallery_side, skipped_lines=gallery.skipped,
    )
    write_report(results, out, matrix=matrix)
    cell = matrix.cell(args.adapter, args.adapter)
    print(f"white-box {args.adapter}: TR ASR {cell.tr_asr} IR ASR {cell.ir_asr}")
    return _status(gallery, examples)


def cmd_transfer(args) -> int:
    config = config_from_args(args)
    gallery = load_manifest(args.manifest)
    matrix, examples = run_transfer(
        args.surrogate, _csv_list(args.targets), gallery, config,
        gallery_side=args.gallery_side, workers=args.workers,
    )
    results = build_results(
        "transfer", config, matrix=matrix, examples=examples,
        gallery_side=args.gallery_side, skipped_lines=gallery.skipped,
    )
    write_report(results, args.out, matrix=matrix)
    for target in matrix.cols:
        cell = matrix.cell(args.surrogate, target)
        print(f"{args.surrogate} -> {target}: TR {cell.tr_asr} IR {cell.ir_asr}")
    return _status(gallery, examples)


def cmd_ablate(args) -> int:
    config = config_from_args(args)
    gallery = load_manifest(args.manifest)
    rows = run_ablation(
        gallery, args.surrogate, _csv_list(args.targets), config, _csv_list(args.modes),
        gallery_side=args.gallery_side,
    )
    results = build_results("ablate", config, ablation=rows, gallery_side=args.gallery_side, skipped_lines=gallery.skipped)
    write_report(results, args.out, rows=rows)
    for r in rows:
        print(f"{r['attack']:>10} {r['target']}: TR {r['tr_r1_asr']} IR {r['ir_r1_asr']}")
    return _status(gallery)


def cmd_sweep_k(args) -> int:
    config = config_from_args(args)
    gallery = load_manifest(args.manifest)
    ks = [int(k) for k in _csv_list(args.k_values)]
    rows, series = sweep_k(gallery, args.surrogate, _csv_list(args.targets), config, ks, gallery_side=args.gallery_side)
    results = build_results(
        "sweep-k", config, sweep=rows, series=series, gallery_side=args.gallery_side, skipped_lines=gallery.skipped
    )
    write_report(results, args.out, rows=rows)
    return _status(gallery)


def cmd_diagnose(args) -> int:
    config = config_from_args(args)
    gallery = load_manifest(args.manifest)
    by_id = {p.pair_id: p for p in gallery.pairs}
    examples, missing = [], []
    for record in sorted(Path(args.examples).glob("*.json")):
        if record.name.endswith(".delta.json"):
            continue
        pair_id = json.loads(record.read_text(encoding="utf-8"))["pair_id"]
        if pair_id not in by_id:
            missing.append(pair_id)
            continue
        examples.append(load_example(record, by_id[pair_id].image))
    if not examples:
        raise ManifestError(f"no adversarial examples found under {args.examples}")
    diag = feature_space_diagnostics(gallery, examples, args.adapter, bins=args.bins)
    diag.skipped.extend(missing)
    results = build_results("diagnose", config, diagnostics=diag, skipped_lines=gallery.skipped)
    write_report(results, args.out, diagnostics=diag, config=config)
    s = diag.summary()
    print(f"mean euclidean {s['mean_euclidean']:.6f} mean cosine {s['mean_cosine']:.6f} (n={s['n']})")
    return EXIT_SKIPS if gallery.skipped or diag.skipped else EXIT_OK


def cmd_make_fixture(args) -> int:
    from ..fixtures import make_desk_fixture, write_manifest

    pairs = make_desk_fixture(args.pairs, args.captions, args.size, args.seed)
    path = write_manifest(pairs, Path(args.out))
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gda", description="Two-stage text+image attack on dual-encoder retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="craft adversarial pairs and score them white-box")
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapter", default="toy:seed=1:d=64")
    p.add_argument("--out", required=True)
    add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", help="surrogate -> targets ASR row")
    p.add_argument("--manifest", required=True)
    p.add_argument("--surrogate", default="toy:seed=1:d=64")
    p.add_argument("--targets", default="toy:seed=2:d=64")
    p.add_argument("--out", required=True)
    add_attack_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", help="completed method vs w/o 2S, CTE, GAR")
    p.add_argument("--manifest", required=True)
    p.add_argument("--surrogate", default="toy:seed=1:d=64")
    p.add_argument("--targets", default="toy:seed=2:d=64")
    p.add_argument("--modes", default="2s,cte,gar")
    p.add_argument("--out", required=True)
    add_attack_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-k", help="ASR as a function of k")
    p.add_argument("--manifest", required=True)
    p.add_argument("--surrogate", default="toy:seed=1:d=64")
    p.add_argument("--targets", default="toy:seed=2:d=64")
    p.add_argument("--k", dest="k_values", default="1,2,3,5,8", help="comma-separated k values")
    p.add_argument("--out", required=True)
    add_attack_flags(p, with_k=False)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("diagnose", help="feature-space distances of saved examples")
    p.add_argument("--examples", required=True, help="directory written by 'gda attack' (its examples/ folder)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapter", default="toy:seed=1:d=64")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)
    add_attack_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("make-fixture", help="write the synthetic desk-scale gallery")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--captions", type=int, default=5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ManifestError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
