"""Command-line interface for unipair."""

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

from unipair import io
from unipair.core import cosine_similarity_matrix, normalize_rows
from unipair.errors import ConfigError, UnipairError
from unipair.gradients import (
    FD_STEP_RANGE,
    KINK_TOLERANCE,
    finite_diff_grad,
    grad_for_spec,
    kink_distance,
    raw_loss,
    relative_error,
)
from unipair.losses import (
    LOSS_KINDS,
    LossSpec,
    canonical_kind,
    evaluate_loss,
    limit_gap_bound,
    loss_unified,
    loss_vlc,
    loss_vlc_pair_form,
    triplet_limit_gap,
)
from unipair.retrieval import evaluate, gap_stats
from unipair.synthlab import (
    SynthConfig,
    TrainConfig,
    generate_synthetic_pairs,
    run_convergence_comparison,
    run_sweep,
    train,
)

logger = logging.getLogger("unipair")

GRADCHECK_TOLERANCE = 1e-5
IDENTITY_TOLERANCE = 1e-12
PAIR_FORM_TOLERANCE = 1e-10
COMPARE_LOSSES = ("triplet_hn", "vlc", "unified")


def _step(text: str) -> float:
    h = float(text)
    lo, hi = FD_STEP_RANGE
    if not lo <= h <= hi:
        raise argparse.ArgumentTypeError(f"step must be in [{lo:g}, {hi:g}], got {h:g}")
    return h


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _loss_name(text: str) -> str:
    try:
        return canonical_kind(text)
    except UnipairError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _rel(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0


def _fail(record: dict) -> None:
    print(json.dumps({"status": "FAIL", **record}, sort_keys=True))


def _gradcheck_spec(kind: str, args, rng: np.random.Generator) -> LossSpec:
    b = args.batch_size
    weights = rng.uniform(0.5, 1.5, (b, b)) if kind == "weighted_unified" else None
    margins = rng.uniform(0.0, 2 * args.margin, b) if kind == "adaptive_margin_unified" else None
    return LossSpec(kind=kind, margin=args.margin, gamma=args.gamma, weights=weights, margins=margins)


def cmd_gradcheck(args) -> int:
    """Compare analytic gradients with central differences over seeded batches."""
    kinds = LOSS_KINDS if args.loss == "all" else (args.loss,)
    failed = False
    print(f"{'loss':<26}{'trials':>8}{'skipped':>9}{'max rel err':>14}  status")
    for kind in kinds:
        worst, skipped = 0.0, 0
        for seed in tqdm(range(args.seeds), desc=kind, disable=not args.progress):
            rng = np.random.default_rng(seed)
            v = normalize_rows(rng.standard_normal((args.batch_size, args.dim)))
            t = normalize_rows(rng.standard_normal((args.batch_size, args.dim)))
            spec = _gradcheck_spec(kind, args, rng)
            if kind == "triplet_hn" and kink_distance(cosine_similarity_matrix(v, t), args.margin) < KINK_TOLERANCE:
                skipped += 1
                continue
            err = relative_error(grad_for_spec(v, t, spec), finite_diff_grad(raw_loss(spec), v, t, args.h))
            worst = max(worst, err)
            logger.debug("%s seed %d relative error %.3e", kind, seed, err)
        ok = worst <= GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{kind:<26}{args.seeds:>8}{skipped:>9}{worst:>14.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            _fail({"check": "gradcheck", "loss": kind, "max_rel_err": worst, "tolerance": GRADCHECK_TOLERANCE})
    return 1 if failed else 0


def cmd_limits(args) -> int:
    """Check the m = 0 identity, the pair form and the large-γ bound on random batches."""
    gammas = args.gamma_list
    worst_gap = dict.fromkeys(gammas, 0.0)
    worst_identity = dict.fromkeys(gammas, 0.0)
    worst_pair = dict.fromkeys(gammas, 0.0)
    for seed in tqdm(range(args.seeds), desc="limits", disable=not args.progress):
        rng = np.random.default_rng(seed)
        v = normalize_rows(rng.standard_normal((args.batch_size, args.dim)))
        t = normalize_rows(rng.standard_normal((args.batch_size, args.dim)))
        s = cosine_similarity_matrix(v, t)
        for gamma in gammas:
            vlc = loss_vlc(s, gamma).total
            worst_identity[gamma] = max(worst_identity[gamma], _rel(gamma * loss_unified(s, 0.0, gamma).total, vlc))
            worst_pair[gamma] = max(worst_pair[gamma], _rel(loss_vlc_pair_form(s, gamma).total, vlc))
            worst_gap[gamma] = max(worst_gap[gamma], triplet_limit_gap(s, args.margin, gamma))

    failed = False
    print(f"{'gamma':>10}{'max gap':>14}{'bound':>14}{'identity err':>15}{'pair err':>12}  status")
    for gamma in gammas:
        bound = limit_gap_bound(args.batch_size, gamma)
        ok = (
            worst_gap[gamma] <= bound
            and worst_identity[gamma] <= IDENTITY_TOLERANCE
            and worst_pair[gamma] <= PAIR_FORM_TOLERANCE
        )
        failed |= not ok
        print(
            f"{gamma:>10g}{worst_gap[gamma]:>14.6e}{bound:>14.6e}{worst_identity[gamma]:>15.3e}"
            f"{worst_pair[gamma]:>12.3e}  {'PASS' if ok else 'FAIL'}"
        )
        if not ok:
            _fail(
                {
                    "check": "limits",
                    "gamma": gamma,
                    "max_gap": worst_gap[gamma],
                    "bound": bound,
                    "identity_err": worst_identity[gamma],
                    "pair_err": worst_pair[gamma],
                }
            )
    return 1 if failed else 0


def resolve_run_config(args) -> tuple[SynthConfig, TrainConfig]:
    """Config file values with command-line flags layered on top."""
    synth, cfg = io.load_config(args.config) if args.config else (SynthConfig(), TrainConfig())
    synth_over = {
        "n_pairs": args.n_pairs,
        "dim": args.dim,
        "noise_sigma": args.noise,
        "seed": args.seed,
        "text_rotation": args.text_rotation,
        "shared_offset": args.shared_offset,
        "n_clusters": args.clusters,
        "cluster_spread": args.cluster_spread,
    }
    synth = replace(synth, **{k: v for k, v in synth_over.items() if v is not None})
    loss_over = {"kind": getattr(args, "loss", None), "margin": args.margin, "gamma": args.gamma}
    loss = replace(cfg.loss, **{k: v for k, v in loss_over.items() if v is not None})
    opt_over = {"name": args.optimizer, "beta": args.beta, "eps": args.eps}
    optimizer = replace(cfg.optimizer, **{k: v for k, v in opt_over.items() if v is not None})
    train_over = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "lr_decay": args.lr_decay,
        "seed": args.seed,
        "eval_every": args.eval_every,
    }
    cfg = replace(cfg, loss=loss, optimizer=optimizer, **{k: v for k, v in train_over.items() if v is not None})
    return synth, cfg


def cmd_train(args) -> int:
    """Train one loss on synthetic pairs and write curves.csv with its manifest."""
    synth, cfg = resolve_run_config(args)
    data = generate_synthetic_pairs(synth)
    records = train(data.v, data.t, cfg, data.split, progress=args.progress)
    curves = args.output_dir / "curves.csv"
    io.write_curves(curves, records)
    io.write_manifest(args.output_dir / "manifest.json", "train", io.resolved_config(synth, cfg), cfg.seed, [curves])
    final = records[-1]
    print(f"Trained {cfg.loss.kind} for {cfg.epochs} epochs")
    print(f"Final RSUM: {final.metrics.rsum:.2f}  gap: {final.gaps.gap:.4f}  loss: {final.loss:.6f}")
    print(f"Curves written to: {curves}")
    return 0


def cmd_sweep(args) -> int:
    """Retrain over margin or scale values and write one final-metrics row per value."""
    synth, cfg = resolve_run_config(args)
    saved = io.load_command_args(args.config, "sweep") if args.config else {}
    axis = args.axis or saved.get("axis")
    values = args.values or saved.get("values")
    if axis is None or not values:
        raise ConfigError("sweep", "--axis and --values are needed unless --config holds a sweep section")
    rows = run_sweep(axis, values, synth, cfg, workers=args.workers, progress=args.progress)
    out = args.output_dir / "sweep.csv"
    io.write_rows(out, ["value", *io.CURVES_HEADER], [[row.value, *io.curve_row(row.final)] for row in rows])
    config = io.resolved_config(synth, cfg) | {"sweep": {"axis": axis, "values": list(values)}}
    io.write_manifest(args.output_dir / "manifest.json", "sweep", config, cfg.seed, [out])
    for row in rows:
        print(f"{axis}={row.value:<10g} RSUM {row.final.metrics.rsum:8.2f}  gap {row.final.gaps.gap:.4f}")
    print(f"Sweep written to: {out}")
    return 0


def cmd_compare(args) -> int:
    """Train each loss from the same start and tabulate convergence and final metrics."""
    synth, cfg = resolve_run_config(args)
    saved = io.load_command_args(args.config, "compare") if args.config else {}
    losses = args.losses or saved.get("losses") or list(COMPARE_LOSSES)
    fraction = args.fraction if args.fraction is not None else saved.get("fraction", 0.95)
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("compare.fraction", f"must be in (0, 1], got {fraction}")
    specs = [replace(cfg.loss, kind=kind) for kind in losses]
    rows = run_convergence_comparison(
        specs, synth, cfg, fraction=fraction, workers=args.workers, progress=args.progress
    )
    out = args.output_dir / "compare.csv"
    outputs = [out]
    table = []
    for row in rows:
        table.append([row.loss.kind, row.epochs_to_target, row.early_gain, *io.curve_row(row.final)])
        curves = args.output_dir / f"curves_{row.loss.kind}.csv"
        io.write_curves(curves, row.records)
        outputs.append(curves)
    io.write_rows(out, ["loss", "epochs_to_target", "early_gain", *io.CURVES_HEADER], table)
    compare = {"losses": [spec.kind for spec in specs], "fraction": fraction}
    config = io.resolved_config(synth, cfg) | {"compare": compare}
    io.write_manifest(args.output_dir / "manifest.json", "compare", config, cfg.seed, outputs)
    print(f"{'loss':<26}{'epochs to target':>17}{'early gain':>12}{'RSUM':>9}{'gap':>9}")
    for row in rows:
        print(
            f"{row.loss.kind:<26}{row.epochs_to_target:>17}{row.early_gain:>12.2f}"
            f"{row.final.metrics.rsum:>9.2f}{row.final.gaps.gap:>9.4f}"
        )
    print(f"Comparison written to: {out}")
    return 0


def cmd_evaluate(args) -> int:
    """Report every loss, the retrieval metrics and the similarity gaps of two embedding files."""
    v, t = io.load_embeddings(args.visual, args.text)
    s = cosine_similarity_matrix(v, t)
    print(f"Loaded {v.shape[0]} pairs of dimension {v.shape[1]}")
    for kind in ("triplet_hn", "vlc", "unified"):
        value = evaluate_loss(s, LossSpec(kind=kind, margin=args.margin, gamma=args.gamma))
        print(f"{kind:<12}{value.total:.17g}")
    metrics = evaluate(s)
    print("R@1/5/10 i2t: " + " ".join(f"{x:.2f}" for x in metrics.recalls()[:3]))
    print("R@1/5/10 t2i: " + " ".join(f"{x:.2f}" for x in metrics.recalls()[3:]))
    print(f"RSUM: {metrics.rsum:.2f}")
    if v.shape[0] > 1:
        gaps = gap_stats(s)
        print(f"mean positive {gaps.mean_pos:.6f}  mean hardest negative {gaps.mean_hardneg:.6f}  gap {gaps.gap:.6f}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser, with_loss: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON config (or a previous manifest.json) to start from")
    p.add_argument(
        "-o", "--output-dir", type=Path, default=Path("./output"), help="Output directory (default: ./output)"
    )
    if with_loss:
        p.add_argument("--loss", type=_loss_name, help="Loss to train (default: unified)")
    p.add_argument("--margin", type=float, help="Margin m (default: 0.2)")
    p.add_argument("--gamma", type=float, help="Scale factor γ (default: 60)")
    p.add_argument("--epochs", type=int, help="Training epochs (default: 30)")
    p.add_argument("--batch-size", type=int, help="Minibatch size (default: 32)")
    p.add_argument("--lr", type=float, help="Learning rate (default: 0.5)")
    p.add_argument("--lr-decay", choices=["constant", "linear"], help="Learning-rate schedule (default: constant)")
    p.add_argument("--optimizer", choices=["plain_gd", "momentum", "adam"], help="Optimizer (default: plain_gd)")
    p.add_argument("--beta", type=float, help="Momentum coefficient (default: 0.9)")
    p.add_argument("--eps", type=float, help="Adam denominator epsilon (default: 1e-8)")
    p.add_argument("--eval-every", type=int, help="Epochs between snapshots (default: 1)")
    p.add_argument("--seed", type=int, help="Seed for data and training (default: 0)")
    p.add_argument("--n-pairs", type=int, help="Synthetic pairs (default: 256)")
    p.add_argument("--dim", type=int, help="Embedding dimension (default: 32)")
    p.add_argument("--noise", type=float, help="Noise length σ relative to the unit latents (default: 0.3)")
    p.add_argument(
        "--text-rotation", action="store_true", default=None, help="Put the text side in a rotated coordinate frame"
    )
    p.add_argument(
        "--shared-offset", type=float, help="Length of a direction added to every embedding (default: 0)"
    )
    p.add_argument("--clusters", type=int, help="Group the latents around this many centers (default: 0, no groups)")
    p.add_argument("--cluster-spread", type=float, help="Latent spread around each center (default: 1.0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unipair",
        description="Pair-similarity losses, their gradients and a synthetic retrieval lab",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Analytic vs finite-difference gradients
  unipair gradcheck --loss unified --seeds 50

  # Limit identities between the losses
  unipair limits --gamma-list 100 1000 10000

  # Train and compare losses on synthetic pairs
  unipair train --loss unified -o runs/unified
  unipair compare --losses triplet-hn vlc unified -o runs/compare
  unipair sweep --axis m --values 0 0.1 0.2 0.4 -o runs/margin
        """,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-v info, -vv debug)")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="Check analytic gradients against finite differences")
    p.add_argument("--loss", default="unified", type=lambda x: x if x == "all" else _loss_name(x))
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--gamma", type=float, default=60.0)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--seeds", type=_positive_int, default=50)
    p.add_argument("--h", type=_step, default=1e-6, help="Finite-difference step in [1e-8, 1e-4]")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("limits", help="Check the m = 0 identity and the large-γ bound")
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--gamma-list", type=float, nargs="+", default=[1e2, 1e3, 1e4])
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--seeds", type=_positive_int, default=100)
    p.set_defaults(func=cmd_limits)

    p = sub.add_parser("train", help="Train one loss on synthetic pairs")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="Sweep the margin or the scale factor")
    _add_run_flags(p)
    p.add_argument("--axis", choices=["m", "gamma"], help="Swept parameter (taken from --config when omitted)")
    p.add_argument("--values", type=float, nargs="+", help="Ascending values to sweep")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="Compare convergence of several losses")
    _add_run_flags(p, with_loss=False)
    p.add_argument("--losses", type=_loss_name, nargs="+", help="Losses to compare (default: triplet_hn vlc unified)")
    p.add_argument("--fraction", type=float, help="Fraction of final RSUM that counts as converged (default: 0.95)")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("evaluate", help="Losses and retrieval metrics of two embedding CSV files")
    p.add_argument("visual", type=Path, help="Visual embeddings CSV")
    p.add_argument("text", type=Path, help="Text embeddings CSV, paired by row")
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=60.0)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None):
    """Main entry point for the unipair CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "limits":
        if any(b <= a for a, b in zip(args.gamma_list, args.gamma_list[1:])):
            parser.error("--gamma-list must be strictly ascending")
        if any(not math.isfinite(g) or g <= 0 for g in args.gamma_list):
            parser.error("--gamma-list values must be positive")
    if args.command == "sweep" and args.values and list(args.values) != sorted(args.values):
        parser.error("--values must be ascending")

    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        sys.exit(args.func(args))
    except KeyboardInterrupt:
        print("\nCancelled by user", file=sys.stderr)
        sys.exit(130)
    except (UnipairError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
