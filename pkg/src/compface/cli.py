"""Command-line entry point: ``compface <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .eigenspace import save_model
from .experiment import ExperimentError, fds_ranking_study, prepare_assets, run_experiment
from .parts import LibraryError
from .procedural import gen_gallery, gen_procedural_parts
from .report import emit_ranks_csv, write_outputs

log = logging.getLogger("compface")


def _counts(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"counts must be comma-separated integers, got {text!r}") from None
    if len(values) != 8:
        raise argparse.ArgumentTypeError("counts need 8 entries: head,eyes,lips,noses,brows,hairs,glasses,mustaches")
    return values


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _load(args):
    config = load_config(args.config)
    if getattr(args, "out", None):
        config = config.with_out(args.out)
    return config


def cmd_gen_parts(args) -> int:
    path = gen_procedural_parts(args.counts, args.seed, args.out, optional_absent=args.optional_absent)
    print(path)
    return 0


def cmd_gen_gallery(args) -> int:
    path = gen_gallery(args.out, args.identities, args.images, args.seed)
    print(path)
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    assets = prepare_assets(config)
    out = config.out / "model"
    out.mkdir(parents=True, exist_ok=True)
    g = assets.gallery
    save_model(out / "fds.eigm", g.fds_model)
    save_model(out / "intra.eigm", g.dual.intra)
    save_model(out / "extra.eigm", g.dual.extra)
    calib = {"s0": g.s0, "tau": g.tau, "identities": list(g.identities), "real_fds": g.real_fds.tolist()}
    (out / "calibration.json").write_text(json.dumps(calib, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def _run(args, attack: bool, ranks: bool) -> int:
    config = _load(args)
    if getattr(args, "seed", None) is not None and attack:
        config = config.with_seeds([args.seed])
    assets = prepare_assets(config)
    config.out.mkdir(parents=True, exist_ok=True)
    table = None
    if ranks:
        rs = config.rank_study
        seed = args.seed if args.seed is not None and not attack else rs.seed
        table = fds_ranking_study(
            assets.gallery, assets.library, rs.n_composites, rs.panel_size, seed, rs.mu, assets.held_out
        )
    if attack:
        report = run_experiment(config, assets, workers=args.workers)
        write_outputs(report, assets, config.out, table)
        for a in report.aggregates:
            log.info("%-12s n=%d mean S=%.3f improved=%.2f top1=%.2f", a.defense, a.n, a.mean_similarity,
                     a.improved_rate, a.top1_rate)
    else:
        emit_ranks_csv(table, config.out / "ranks.csv")
    if table is not None:
        log.info("flagged: composites %.2f, real %.2f", table.flagged_fraction("composite"),
                 table.flagged_fraction("real"))
    print(config.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compface", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-parts", help="write a procedural part library")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--counts", type=_counts, default=(1, 4, 4, 4, 3, 3, 2, 2),
                   help="head,eyes,lips,noses,brows,hairs,glasses,mustaches")
    p.add_argument("--optional-absent", action="store_true", help="allow glasses/mustache to be left out")
    p.set_defaults(func=cmd_gen_parts)

    p = sub.add_parser("gen-gallery", help="write a synthetic identity gallery")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--images", type=int, default=4)
    p.set_defaults(func=cmd_gen_gallery)

    for name, helptext, attack, ranks in (
        ("attack", "run the attack sweep", True, False),
        ("rank-study", "rank composites and held-out faces by FDS", False, True),
        ("report", "attack sweep plus rank study, all outputs", True, True),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=_seed, help="override the config seed(s)")
        p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=lambda a, at=attack, rk=ranks: _run(a, at, rk))

    p = sub.add_parser("train", help="train and save the recognizer models")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError, LibraryError, FileNotFoundError, ValueError) as exc:
        print(f"compface: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
