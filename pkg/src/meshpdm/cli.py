"""Command-line entry point.

Subcommands: synth, template, train, infer, evaluate, analyze. Every run
creates its output directory, writes a resolved-config snapshot (including
the seed) for provenance, and renders figures next to the delimited reports.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime/numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, geometry, plots
from .errors import NumericError, ValidationError
from .trainer import (TrainConfig, Trainer, _atomic_write_text, parse_config_file,
                      write_config_file, write_history_csv)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, name: str, payload: dict) -> None:
    _atomic_write_text(out / name, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _mesh_paths(directory) -> list[Path]:
    paths = sorted(Path(directory).glob("*.obj"))
    if not paths:
        raise ValidationError(f"no .obj meshes found in {directory}")
    return paths


def _load_meshes(directory):
    paths = _mesh_paths(directory)
    return paths, [geometry.load_mesh(p) for p in paths]


def _pad_to_common(meshes, seed: int):
    target = max(m.n_vertices for m in meshes)
    return [geometry.pad_vertices(m, target, seed=seed + i) if m.n_vertices < target else m
            for i, m in enumerate(meshes)]


# -- subcommands ----------------------------------------------------------


def _cmd_synth(args) -> int:
    out = _out_dir(args.out_dir)
    if args.count < 2:
        raise ValidationError(f"synth needs count >= 2, got {args.count}")
    ts = np.linspace(args.t_min, args.t_max, args.count)
    manifest = ["filename,t\n"]
    for i, t in enumerate(ts):
        name = f"box_bump_{i:04d}.obj"
        mesh = geometry.generate_box_bump(
            float(t), resolution=args.resolution, bump_height=args.bump_height,
            bump_sigma=args.bump_sigma, seed=args.seed)
        geometry.save_mesh(mesh, out / name)
        manifest.append(f"{name},{float(t)!r}\n")
    _atomic_write_text(out / "manifest.csv", "".join(manifest))
    _snapshot(out, "synth_config.json", {
        "count": args.count, "t_min": args.t_min, "t_max": args.t_max,
        "resolution": args.resolution, "bump_height": args.bump_height,
        "bump_sigma": args.bump_sigma, "seed": args.seed})
    print(f"wrote {args.count} meshes to {out}")
    return EXIT_OK


def _cmd_template(args) -> int:
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "sphere":
        points = geometry.sphere_template(args.count, radius=args.radius)
        source = "sphere"
    else:
        if not args.meshes:
            raise ValidationError(f"template mode {args.mode!r} requires --meshes")
        paths, meshes = _load_meshes(args.meshes)
        if args.mode == "medoid":
            idx = geometry.compute_medoid(meshes)
            source = paths[idx].name
            points = geometry.sample_surface_points(meshes[idx], args.count, seed=args.seed)
        else:  # sample-mesh: first mesh in the directory
            source = paths[0].name
            points = geometry.sample_surface_points(meshes[0], args.count, seed=args.seed)
    geometry.save_points(points, out_path)
    _snapshot(out_path.parent, out_path.stem + "_config.json", {
        "mode": args.mode, "count": args.count, "radius": args.radius,
        "seed": args.seed, "source": source})
    print(f"wrote {len(points)}-point template to {out_path}")
    return EXIT_OK


def _apply_overrides(config: TrainConfig, pairs: list[str]) -> TrainConfig:
    raw = config.to_dict()
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        key, value = (s.strip() for s in pair.split("=", 1))
        raw[key] = [v.strip() for v in value.split(",")] if "," in value else value
    return TrainConfig.from_dict(raw)


def _cmd_train(args) -> int:
    out = _out_dir(args.out_dir)
    config = TrainConfig.from_dict(parse_config_file(args.config)) if args.config \
        else TrainConfig()
    if args.seed is not None:
        config = _apply_overrides(config, [f"seed={args.seed}"])
    config = _apply_overrides(config, args.set or [])
    _, meshes = _load_meshes(args.data_dir)
    meshes = _pad_to_common(meshes, config.seed)
    val_meshes = []
    if args.val_dir:
        _, val_meshes = _load_meshes(args.val_dir)
        val_meshes = _pad_to_common(val_meshes, config.seed)
    template = geometry.load_points(args.template)

    trainer = Trainer(meshes, template, config, val_meshes=val_meshes)
    trainer.run()
    trainer.save(out / "checkpoint.npz")
    write_history_csv(trainer.history, out / "loss.csv")
    if trainer.val_history:
        lines = ["epoch,val_loss\n"] + [f"{r['epoch']},{r['val_loss']!r}\n"
                                        for r in trainer.val_history]
        _atomic_write_text(out / "val_loss.csv", "".join(lines))
    geometry.save_points(trainer.template, out / "final_template.xyz")
    plots.plot_loss_history(trainer.history, out / "loss_curves.png")
    write_config_file(config, out / "config_resolved.txt")
    print(f"trained {config.epochs} epochs; checkpoint at {out / 'checkpoint.npz'}")
    return EXIT_OK


def _restore(checkpoint, data_dir, seed_hint: int = 0):
    paths, meshes = _load_meshes(data_dir)
    meshes = _pad_to_common(meshes, seed_hint)
    trainer = Trainer.load(checkpoint, meshes)
    return paths, meshes, trainer


def _cmd_infer(args) -> int:
    out = _out_dir(args.out_dir)
    paths, meshes, trainer = _restore(args.checkpoint, args.meshes, trainer_seed(args))
    for path, mesh in zip(paths, meshes):
        corr = trainer.infer(mesh)
        geometry.save_points(corr, out / (path.stem + ".xyz"))
    _snapshot(out, "infer_config.json", {
        "checkpoint": str(args.checkpoint), "meshes": str(args.meshes),
        "count": len(paths), "seed": trainer.config.seed})
    print(f"wrote {len(paths)} correspondence files to {out}")
    return EXIT_OK


def trainer_seed(args) -> int:
    return getattr(args, "seed", None) or 0


def _cmd_evaluate(args) -> int:
    out = _out_dir(args.out_dir)
    paths, meshes, trainer = _restore(args.checkpoint, args.meshes, trainer_seed(args))
    rows, summary = analysis.evaluate_test(
        meshes, trainer.mae, trainer.deformer, trainer.template,
        sample_ids=[p.stem for p in paths])
    _atomic_write_text(out / "metrics.csv", analysis.metrics_csv_text(rows, summary))
    plots.plot_metric_distribution(rows, out / "metrics.png")
    _snapshot(out, "evaluate_config.json", {
        "checkpoint": str(args.checkpoint), "meshes": str(args.meshes),
        "seed": trainer.config.seed,
        "note": "surface_to_surface is point-to-surface distance from predicted "
                "correspondences to the mesh"})
    print(f"evaluated {len(rows)} meshes; metrics at {out / 'metrics.csv'}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    out = _out_dir(args.out_dir)
    paths, meshes, trainer = _restore(args.checkpoint, args.meshes, trainer_seed(args))
    corr = np.stack([trainer.infer(m) for m in meshes])
    model = analysis.fit_pca(corr)

    test_corr = corr
    if args.test_meshes:
        _, test_meshes = _load_meshes(args.test_meshes)
        test_meshes = _pad_to_common(test_meshes, trainer.config.seed)
        test_corr = np.stack([trainer.infer(m) for m in test_meshes])

    stats = analysis.shape_stats(model, corr, test_corr,
                                 n_specificity_samples=args.specificity_samples,
                                 seed=args.seed)
    lines = ["n_modes,compactness,generalization_mm,specificity_mm\n"]
    for i in range(model.rank):
        lines.append(f"{i + 1},{stats.compactness[i]!r},{stats.generalization[i]!r},"
                     f"{stats.specificity[i]!r}\n")
    _atomic_write_text(out / "shape_stats.csv", "".join(lines))
    plots.plot_shape_stats(stats, out / "shape_stats.png")

    sweep_manifest = []
    k_sigmas = (-2.0, -1.0, 0.0, 1.0, 2.0)
    for mode in range(1, min(args.modes, model.rank) + 1):
        sweep = analysis.pca_mode_sweep(model, mode, k_sigmas)
        for k, shape in zip(sweep.values, sweep.shapes):
            name = f"pca_mode{mode}_{k:+.1f}.xyz"
            geometry.save_points(shape, out / name)
            sweep_manifest.append({"kind": "pca", "mode": mode, "k": k,
                                   "scale": sweep.scale, "file": name})
        plots.plot_mode_sweep(sweep, out / f"pca_mode{mode}.png")

    latents = analysis.latent_codes(trainer.vae, corr)
    for rank in range(1, min(args.modes, latents.shape[1]) + 1):
        sweep = analysis.vae_mode_sweep(trainer.vae, latents, rank, k_sigmas)
        for k, shape in zip(sweep.values, sweep.shapes):
            name = f"vae_rank{rank}_{k:+.1f}.xyz"
            geometry.save_points(shape, out / name)
            sweep_manifest.append({"kind": "vae", "rank": rank, "latent_dim": sweep.mode,
                                   "k": k, "scale": sweep.scale, "file": name})
        plots.plot_mode_sweep(sweep, out / f"vae_rank{rank}.png")

    _snapshot(out, "sweeps.json", {"seed": args.seed, "sweeps": sweep_manifest})
    _snapshot(out, "analyze_config.json", {
        "checkpoint": str(args.checkpoint), "meshes": str(args.meshes),
        "test_meshes": str(args.test_meshes) if args.test_meshes else None,
        "modes": args.modes, "specificity_samples": args.specificity_samples,
        "seed": args.seed})
    print(f"analysis written to {out}")
    return EXIT_OK


# -- argument wiring --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshpdm",
                     description="Correspondence-based shape models from surface meshes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic box-bump dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--t-min", type=float, default=0.0)
    p.add_argument("--t-max", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=14)
    p.add_argument("--bump-height", type=float, default=0.25)
    p.add_argument("--bump-sigma", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("template", help="build an initial template point set")
    p.add_argument("--mode", choices=["sphere", "medoid", "sample-mesh"], required=True)
    p.add_argument("--meshes", help="mesh directory (medoid / sample-mesh modes)")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_template)

    p = sub.add_parser("train", help="train the full pipeline")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--val-dir")
    p.add_argument("--template", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="predict correspondences for meshes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--meshes", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="distance metrics on a mesh set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--meshes", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("analyze", help="shape statistics and mode sweeps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--meshes", required=True, help="training meshes")
    p.add_argument("--test-meshes", help="held-out meshes for generalization")
    p.add_argument("--modes", type=int, default=3)
    p.add_argument("--specificity-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
