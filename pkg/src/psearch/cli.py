"""Command-line entry point: ``psearch <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from psearch.errors import CatalogError, ConfigError, PersonSearchError


def _config(args):
    from psearch.pipeline.config import PipelineConfig, preset_config

    cfg = PipelineConfig.load(args.config, args.preset) if args.config else preset_config(args.preset)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.data.path = args.data
    if getattr(args, "tau", None) is not None:
        cfg.dgrpn.tau = args.tau
    if getattr(args, "delta", None) is not None:
        cfg.dgrpn.delta = args.delta
    if getattr(args, "peak_radius", None) is not None:
        cfg.dgrpn.peak_radius = args.peak_radius
    if getattr(args, "timestep", None) is not None:
        cfg.backbone.det_timestep = cfg.backbone.reid_timestep = args.timestep
    if getattr(args, "epochs", None) is not None:
        cfg.optim.epochs = args.epochs
    return cfg


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_gen_data(args):
    from psearch.pipeline.data import generate_toy_dataset

    cfg = _config(args)
    d = cfg.data
    seed = args.seed if args.seed is not None else d.seed
    ds = generate_toy_dataset(d.num_scenes, d.num_identities, (d.persons_min, d.persons_max), seed,
                              tuple(d.image_size), d.unlabeled_fraction, d.test_fraction)
    ds.save(args.out)
    print(f"wrote {len(ds)} scenes to {args.out}")


def cmd_train(args):
    from psearch.pipeline.train import train

    cfg = _config(args)
    res = train(cfg, args.mode, out_dir=args.out)
    print(json.dumps(res.metrics, indent=2, sort_keys=True))


def cmd_eval(args):
    from psearch.pipeline.data import build_protocol
    from psearch.pipeline.features import FeatureStore
    from psearch.pipeline.train import evaluate_model, load_checkpoint

    model, cfg, dataset, backbone = load_checkpoint(args.checkpoint)
    metrics = evaluate_model(model, FeatureStore(backbone, dataset), dataset,
                             build_protocol(dataset, cfg.data.gallery_size, cfg.data.seed))
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "eval.json").write_text(text)
        rows = "".join(f"{k}\t{v:.6f}\n" for k, v in sorted(metrics.items()))
        Path(args.out, "eval.tsv").write_text("metric\tvalue\n" + rows)
    print(text)


def _write_report(report, out):
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        Path(out, "report.tsv").write_text(report.to_tsv())
        Path(out, "report.json").write_text(report.to_json())
    print(report.to_tsv(), end="")


def _probe_setup(args):
    from psearch.pipeline.train import build_backbone, load_dataset

    cfg = _config(args)
    dataset = load_dataset(cfg)
    return cfg, dataset, build_backbone(cfg, dataset)


def _tasks(text):
    tasks = tuple(t for t in text.split(",") if t)
    if not set(tasks) <= {"det", "reid"} or not tasks:
        raise ConfigError(f"--tasks must name det and/or reid, got {text!r}")
    return tasks


def cmd_probe_layers(args):
    from psearch.evaluation import probe_layers

    cfg, dataset, backbone = _probe_setup(args)
    layers = [s for s in args.layers.split(",") if s]
    _write_report(probe_layers(backbone, layers, cfg, dataset, _tasks(args.tasks)), args.out)


def cmd_probe_timesteps(args):
    from psearch.evaluation import probe_timesteps

    cfg, dataset, backbone = _probe_setup(args)
    _write_report(probe_timesteps(backbone, _ints(args.timesteps), cfg, dataset, _tasks(args.tasks)), args.out)


def cmd_ablate(args):
    from psearch.pipeline.ablate import ablate

    cfg = _config(args)
    seeds = _ints(args.seeds) if args.seeds else None
    _write_report(ablate(cfg, seeds=seeds, mode=args.mode), args.out)


def cmd_viz(args):
    from psearch.backbone import LayerId
    from psearch.pipeline.features import FeatureStore
    from psearch.pipeline.train import build_backbone, load_dataset
    from psearch.pipeline.viz import visualize_pca

    cfg = _config(args)
    dataset = load_dataset(cfg)
    store = FeatureStore(build_backbone(cfg, dataset), dataset)
    scene = args.scene or dataset.scenes[0].scene_id
    try:
        layers = [LayerId.parse(s) for s in args.layers.split(",") if s]
    except (ValueError, CatalogError) as exc:
        raise ConfigError(str(exc)) from exc
    t = cfg.backbone.reid_timestep
    feats = store.features(scene, False, t, layers)
    out = Path(args.out)
    path = out if out.suffix == ".png" else out / f"pca-{scene}.png"
    visualize_pca([feats[l] for l in layers], path, scale=args.scale)
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psearch", description="Person search on frozen diffusion-style features.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, out_default):
        sp.add_argument("--config", help="YAML config; keys override the preset")
        sp.add_argument("--preset", default="toy", choices=("toy", "default"),
                        help="base settings (default: toy, minute-scale on CPU)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", help="dataset directory written by gen-data")
        sp.add_argument("--out", default=out_default)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    common(sp, "runs/data")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one or both branches")
    common(sp, "runs/train")
    sp.add_argument("--mode", default="joint", choices=("joint", "detection_only", "reid_only"))
    sp.add_argument("--tau", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--peak-radius", type=int)
    sp.add_argument("--timestep", type=int)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("probe-layers", help="one row per backbone layer")
    common(sp, "runs/probe-layers")
    sp.add_argument("--layers", default="up.3.vit_key.0,up.2.vit_query.2,up.1.vit_query.2,down.3.res.0")
    sp.add_argument("--tasks", default="det,reid")
    sp.add_argument("--timestep", type=int)
    sp.set_defaults(func=cmd_probe_layers)

    sp = sub.add_parser("probe-timesteps", help="one row per diffusion timestep")
    common(sp, "runs/probe-timesteps")
    sp.add_argument("--timesteps", default="0,200,400,600,800")
    sp.add_argument("--tasks", default="det,reid")
    sp.set_defaults(func=cmd_probe_timesteps)

    sp = sub.add_parser("ablate", help="module on/off table")
    common(sp, "runs/ablate")
    sp.add_argument("--seeds")
    sp.add_argument("--mode", default="joint", choices=("joint", "detection_only", "reid_only"))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("viz", help="PCA false-color image of feature maps")
    common(sp, "runs/viz")
    sp.add_argument("--layers", default="up.1.vit_query.2,up.2.vit_query.2,up.3.vit_key.0")
    sp.add_argument("--scene")
    sp.add_argument("--timestep", type=int)
    sp.add_argument("--scale", type=int, default=8)
    sp.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PersonSearchError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
