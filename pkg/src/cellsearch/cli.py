"""Command-line front end.

Subcommands operate on a workspace directory (``--out``) with a fixed
layout: ``dataset/`` (binary cache), ``backbone.npz``, and one run
directory per search (``search-lth/``, ``search-baseline/``) holding
``config.json``, ``genotype.json``, ``trajectory.csv``, ``metrics.json``
and ``omega_init.npz``; final trainings nest under the run directory as
``final-<policy>/``.  Every command exits 0 on success and nonzero with a
machine-readable JSON error record on stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import genotype as gen
from .backbone import UNetBackbone, evaluate_model, pretrain_backbone
from .runio import (
    RunConfig,
    export_metrics,
    load_arrays,
    load_config,
    load_dataset_cache,
    load_genotype,
    reference_config,
    save_arrays,
    save_config,
    save_dataset_cache,
    save_genotype,
    save_metrics,
)
from .search import run_search, train_final
from .seeding import rng_stream
from .task import generate_dataset
from .trajectory import TrajectoryLog

__all__ = ["main", "entry"]


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else reference_config()
    return config.with_overrides(seed=args.seed, mode=getattr(args, "mode", None))


def _build_dataset(config: RunConfig):
    d = config.dataset
    return generate_dataset(
        config.seed, d.n_patients, d.slices_per_patient, d.height, d.width, d.n_foreground
    )


def save_backbone(backbone: UNetBackbone, path) -> None:
    meta = {
        "in_channels": backbone.in_channels,
        "n_classes": backbone.n_classes,
        "enc_channels": list(backbone.enc_channels),
        "bottleneck_channels": backbone.bottleneck_channels,
        "frozen": backbone.frozen,
        "weight_sha256": backbone.weight_hash(),
    }
    save_arrays(backbone.named_arrays(), path, meta)


def load_backbone(path) -> UNetBackbone:
    arrays, meta = load_arrays(path)
    backbone = UNetBackbone(
        rng_stream(0, "backbone-shell"),
        in_channels=meta["in_channels"],
        n_classes=meta["n_classes"],
        enc_channels=tuple(meta["enc_channels"]),
        bottleneck_channels=meta["bottleneck_channels"],
    )
    for p in backbone.parameters():
        p.data = arrays[p.name].copy()
    if backbone.weight_hash() != meta["weight_sha256"]:
        raise ValueError(f"backbone weight hash mismatch in {path}")
    if meta["frozen"]:
        backbone.freeze()
    return backbone


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing upstream artifact ({what}): {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _load_run_config(args)
    out = Path(args.out)
    dataset = _build_dataset(config)
    save_dataset_cache(dataset, out / "dataset")
    save_config(config, out / "config.json")
    print(f"wrote dataset cache ({len(dataset.volumes)} patients) to {out / 'dataset'}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_run_config(args)
    out = Path(args.out)
    dataset = load_dataset_cache(_require(out / "dataset", "dataset cache"))
    backbone = UNetBackbone(rng_stream(config.seed, "backbone-init"), n_classes=dataset.n_classes)
    result = pretrain_backbone(
        backbone,
        dataset,
        epochs=config.pretrain.epochs,
        lr=config.pretrain.lr,
        batch_size=config.pretrain.batch_size,
        seed=config.seed,
    )
    backbone.freeze()
    save_backbone(backbone, out / "backbone.npz")
    _, test_dice, per_class = evaluate_model(
        backbone.forward, dataset.test, dataset.n_classes, config.pretrain.batch_size
    )
    save_metrics(
        {
            "best_epoch": result.best_epoch,
            "best_val_dice": result.best_val_dice,
            "test_mean_foreground_dice": test_dice,
            "test_dice_per_class": {str(k): v for k, v in per_class.items()},
            "epochs": config.pretrain.epochs,
            "wall_time_s": result.wall_time_s,
            "backbone_sha256": backbone.weight_hash(),
        },
        out / "pretrain_metrics.json",
    )
    print(f"pretrained backbone: val dice {result.best_val_dice:.4f}, test dice {test_dice:.4f}")
    return 0


def _run_dir(out: Path, mode: str) -> Path:
    return out / f"search-{mode}"


def cmd_search(args) -> int:
    config = _load_run_config(args)
    out = Path(args.out)
    dataset = load_dataset_cache(_require(out / "dataset", "dataset cache"))
    backbone = load_backbone(_require(out / "backbone.npz", "pretrained backbone"))
    result = run_search(config.search, backbone, dataset, config.cell.to_spec())
    run_dir = _run_dir(out, config.search.mode)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    save_genotype(result.genotype, run_dir / "genotype.json")
    result.trajectory.to_csv(run_dir / "trajectory.csv")
    save_arrays(result.snapshot, run_dir / "omega_init.npz", {"seed": config.seed})
    save_metrics(
        {
            "mode": config.search.mode,
            "seed": config.seed,
            "epochs_used": result.epochs_used,
            "converged": result.converged,
            "warning": result.warning,
            "wall_time_s": result.wall_time_s,
            "n_final_edges": len(result.genotype.edges),
            "backbone_sha256": backbone.weight_hash(),
        },
        run_dir / "metrics.json",
    )
    print(
        f"search mode={config.search.mode} seed={config.seed}: "
        f"epochs_used={result.epochs_used} converged={result.converged} "
        f"wall_time={result.wall_time_s:.1f}s"
    )
    return 0


def cmd_train_final(args) -> int:
    config = _load_run_config(args)
    out = Path(args.out)
    dataset = load_dataset_cache(_require(out / "dataset", "dataset cache"))
    backbone = load_backbone(_require(out / "backbone.npz", "pretrained backbone"))
    run_dir = _require(_run_dir(out, args.mode), "search run directory")
    run_config = load_config(run_dir / "config.json")
    spec = run_config.cell.to_spec()
    genotype = load_genotype(_require(run_dir / "genotype.json", "genotype"))
    traj = TrajectoryLog.from_csv(_require(run_dir / "trajectory.csv", "trajectory"), spec)
    final_active = traj.final_active()
    for ge in genotype.edges:
        e = spec.edge_id(ge.src, ge.dst)
        if not final_active[e, int(ge.op)]:
            raise ValueError(f"genotype references pruned op on edge ({ge.src}, {ge.dst})")
    snapshot = None
    if args.init_policy == "lth_reset":
        arrays, _ = load_arrays(_require(run_dir / "omega_init.npz", "weight snapshot"))
        snapshot = arrays
    hash_before = backbone.weight_hash()
    result = train_final(
        genotype,
        backbone,
        dataset,
        spec,
        init_policy=args.init_policy,
        seed=run_config.seed,
        snapshot=snapshot,
        epochs=config.final.epochs,
        lr=config.final.lr,
        batch_size=config.final.batch_size,
    )
    final_dir = run_dir / f"final-{args.init_policy}"
    final_dir.mkdir(parents=True, exist_ok=True)
    named = {}
    for cw in result.cells:
        named.update(cw.named_arrays())
    save_arrays(named, final_dir / "weights.npz", {"init_policy": args.init_policy})
    save_metrics(
        {
            "init_policy": args.init_policy,
            "seed": run_config.seed,
            "best_epoch": result.best_epoch,
            "best_val_dice": result.best_val_dice,
            "test_mean_foreground_dice": result.test_mean_fg_dice,
            "test_dice_per_class": {str(k): v for k, v in result.test_per_class.items()},
            "wall_time_s": result.wall_time_s,
            "backbone_unchanged": backbone.weight_hash() == hash_before,
        },
        final_dir / "metrics.json",
    )
    print(
        f"final training ({args.init_policy}): test mean fg dice "
        f"{result.test_mean_fg_dice:.4f}"
    )
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    run_dir = _require(_run_dir(out, args.mode), "search run directory")
    run_config = load_config(run_dir / "config.json")
    spec = run_config.cell.to_spec()
    traj = TrajectoryLog.from_csv(_require(run_dir / "trajectory.csv", "trajectory"), spec)
    start_epoch = run_config.search.warmup_epochs + 1

    if args.checkpoints:
        checkpoints = [int(c) for c in args.checkpoints.split(",")]
    else:
        checkpoints = traj.epochs[-1:]
    representation = args.similarity or args.representation
    if representation:
        mat = gen.similarity_matrix(traj, representation, checkpoints)
        path = run_dir / f"similarity_{representation}.csv"
        with open(path, "w") as fh:
            fh.write("epoch," + ",".join(str(c) for c in checkpoints) + "\n")
            for cp, row in zip(checkpoints, mat):
                fh.write(str(cp) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")
        print(f"wrote {path}")

    genotype = load_genotype(_require(run_dir / "genotype.json", "genotype"))
    report = gen.emergence_epochs(traj, genotype, start_epoch)
    em_path = run_dir / "emergence.csv"
    with open(em_path, "w") as fh:
        fh.write("edge_src,edge_dst,winner_op,in_final,top3_epoch,top2_epoch,top1_epoch,flagged\n")
        for e, (src, dst) in enumerate(report.edges):
            fh.write(
                f"{src},{dst},{report.winners[e]},{int(report.in_final[e])},"
                f"{report.top3[e]},{report.top2[e]},{report.top1[e]},"
                f"{int(report.flagged.get(e, False))}\n"
            )
    summary = {
        "medians": report.medians(),
        "edges_fixed_first_epoch": report.edges_fixed_first,
        "edges_fixed_persistent_from_epoch": report.edges_fixed_persistent,
    }
    save_metrics(summary, run_dir / "emergence_summary.json")
    print(f"wrote {em_path}")
    return 0


def cmd_export(args) -> int:
    out = Path(args.out)
    run_dir = _require(_run_dir(out, args.mode), "search run directory")
    baseline_dir = _run_dir(out, "baseline") if args.against_baseline else None
    if baseline_dir is not None and not baseline_dir.exists():
        baseline_dir = None  # speed_up omitted, not fabricated
    merged = export_metrics(run_dir, baseline_dir)
    path = run_dir / "export.json"
    save_metrics(merged, path)
    print(json.dumps(merged, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellsearch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode_default=None):
        sp.add_argument("--config", help="run config JSON (defaults to the reference config)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=True, help="workspace directory")
        if mode_default is not None:
            sp.add_argument("--mode", choices=("baseline", "lth"), default=mode_default)

    sp = sub.add_parser("gen-data", help="generate and cache the synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train and freeze the backbone (Stage I)")
    common(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("search", help="run the cell search (Stage II)")
    common(sp, mode_default="lth")
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("train-final", help="train the discrete cell (Stage III)")
    common(sp, mode_default="lth")
    sp.add_argument("--init-policy", choices=("reinit", "lth_reset"), default="lth_reset")
    sp.set_defaults(fn=cmd_train_final)

    sp = sub.add_parser("analyze", help="similarity matrices and emergence tables")
    common(sp, mode_default="lth")
    sp.add_argument("--similarity", choices=("full", "final", "top1", "top2", "top3"))
    sp.add_argument(
        "--representation",
        choices=("full", "final", "top1", "top2", "top3"),
        help="alias for --similarity",
    )
    sp.add_argument("--checkpoints", help="comma-separated epoch list, e.g. 16,20,40")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("export", help="consolidated metrics JSON")
    common(sp, mode_default="lth")
    sp.add_argument(
        "--against-baseline",
        action="store_true",
        help="compute speed_up against the workspace's baseline run",
    )
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # structured, machine-readable failure record
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
