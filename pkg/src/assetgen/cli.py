"""Command-line entry point wiring dataset, training, sampling, and eval.

Subcommands: gen-data, render, train, sample, eval, ablate. Every run honors
--seed, writes its outputs under one directory, and drops a resolved.cfg
there so the run is replayable from its artifacts. Exit codes: 0 success,
1 configuration error, 2 I/O or data-format error, 3 numeric failure; each
failure prints one machine-parseable line to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, TRAIN_DEFAULTS, load_config, write_config
from .dataset import (
    DatasetError,
    gen_asset,
    generate_dataset,
    read_dataset,
    read_manifest,
    write_dataset,
)
from .geometry import GeometryError, load_obj, normalize_mesh, render_viewset, save_obj, write_png
from .model import JointDiT, ModelConfig
from .sampling import SampleConfig, euler_sample
from .training import NumericError, TrainConfig, load_model, train


def _out_dir(args, name: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("ASSETGEN_OUT", "runs")) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(out: Path, pairs: dict):
    write_config(pairs, out / "resolved.cfg")


def _mesh_from_args(args):
    if getattr(args, "mesh", None):
        mesh, _ = normalize_mesh(load_obj(args.mesh))
        return mesh
    return gen_asset(args.asset_seed).mesh


def cmd_gen_data(args) -> int:
    out = _out_dir(args, "dataset")
    samples = generate_dataset(args.seed, args.count, n_views=args.views,
                               poses_per_asset=args.poses_per_asset,
                               height=args.size, width=args.size)
    write_dataset(out, samples)
    _resolved(out, {"seed": args.seed, "count": args.count, "views": args.views,
                    "poses_per_asset": args.poses_per_asset, "size": args.size})
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_render(args) -> int:
    out = _out_dir(args, "render")
    mesh = _mesh_from_args(args)
    save_obj(out / "asset.obj", mesh)
    views = render_viewset(mesh, args.views, height=args.size, width=args.size)
    for k, view in enumerate(views):
        write_png(out / f"view_{k:02d}_rgb.png", view.rgb)
        write_png(out / f"view_{k:02d}_pointmap.png", view.pointmap)
        write_png(out / f"view_{k:02d}_mask.png", view.mask)
    _resolved(out, {"asset_seed": args.asset_seed, "mesh": args.mesh or "",
                    "views": args.views, "size": args.size, "seed": args.seed})
    print(f"rendered {len(views)} views to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args, "train")
    samples, meta = read_dataset(args.data)
    if meta["height"] != cfg["image_size"] or meta["width"] != cfg["image_size"]:
        raise ConfigError(f"dataset is {meta['height']}x{meta['width']} but config "
                          f"image_size={cfg['image_size']}")
    if meta["n_views"] < cfg["n_views"]:
        raise ConfigError(f"dataset stores {meta['n_views']} views but config "
                          f"needs n_views={cfg['n_views']}")
    model = JointDiT(_model_config(cfg), seed=cfg["model_seed"])
    tcfg = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       lr_schedule=cfg["lr_schedule"], dropout_p=cfg["dropout_p"],
                       n_views=cfg["n_views"], seed=cfg["seed"],
                       base_freeze_step=cfg["base_freeze_step"],
                       rgb_weight=cfg["rgb_weight"], pm_weight=cfg["pm_weight"],
                       checkpoint_every=cfg["checkpoint_every"],
                       debug_checks=cfg["debug_checks"])
    _resolved(out, cfg)
    ckpt = train(model, samples, tcfg, out, resume=args.resume)
    print(f"trained {cfg['steps']} steps; checkpoint at {ckpt}")
    return 0


def _model_config(cfg: dict) -> ModelConfig:
    keys = ["image_size", "patch", "dim", "depth", "heads", "mlp_ratio", "time_dim",
            "domain_dim", "cond_dim", "text_len", "n_captions", "n_views", "lora_rank",
            "lora_alpha", "shared_pe", "text_agnostic", "domain_lora", "pointmap"]
    return ModelConfig(**{k: cfg[k] for k in keys})


def cmd_sample(args) -> int:
    out = _out_dir(args, "sample")
    model, _ = load_model(args.checkpoint)
    mesh = _mesh_from_args(args)
    views = render_viewset(mesh, model.cfg.n_views, height=model.cfg.image_size,
                           width=model.cfg.image_size)
    use_text = args.conditions in ("both", "text")
    use_ref = args.conditions in ("both", "reference")
    scfg = SampleConfig(steps=args.steps, guidance=args.cfg, seed=args.seed,
                        use_text=use_text, use_reference=use_ref)
    rgb, pm = euler_sample(model, views, args.caption_id, scfg)
    write_png(out / "rgb.png", rgb)
    rgb.astype("<f4").tofile(out / "rgb.f32")
    if pm is not None:
        write_png(out / "pointmap.png", pm)
        pm.astype("<f4").tofile(out / "pointmap.f32")
    _resolved(out, {"checkpoint": args.checkpoint, "asset_seed": args.asset_seed,
                    "mesh": args.mesh or "", "caption_id": args.caption_id,
                    "steps": args.steps, "cfg": args.cfg, "seed": args.seed,
                    "conditions": args.conditions,
                    "image_size": model.cfg.image_size})
    print(f"sampled to {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import contact_sheet, evaluate_model

    out = _out_dir(args, "eval")
    model, _ = load_model(args.checkpoint)
    report, images = evaluate_model(model, asset_seed=args.asset_seed, n_poses=args.poses,
                                    seed=args.seed, sample_steps=args.steps,
                                    guidance=args.cfg, collect_images=True)
    report.variant = "eval"
    report.to_csv(out / "report.csv")
    contact_sheet(out / "contact_sheet.png", images)
    _resolved(out, {"checkpoint": args.checkpoint, "asset_seed": args.asset_seed,
                    "poses": args.poses, "steps": args.steps, "cfg": args.cfg,
                    "seed": args.seed})
    for key, val in report.aggregates().items():
        print(f"{key}={val:.6f}")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ABLATION_VARIANTS, AblationConfig, run_ablation, write_comparison

    out = _out_dir(args, "ablate")
    names = list(ABLATION_VARIANTS) if args.variants == "all" else args.variants.split(",")
    for name in names:
        if name not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {name!r}; "
                              f"known: {', '.join(ABLATION_VARIANTS)}")
    ab = AblationConfig(seed=args.seed, train_steps=args.steps)
    reports = [run_ablation(name, ab, out) for name in names]
    write_comparison(reports, out / "comparison.csv")
    _resolved(out, {"variants": ",".join(names), "steps": args.steps, "seed": args.seed})
    print(f"ablation reports under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="assetgen",
                                description="3D-asset-referenced joint RGB + point-map generation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic training dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--poses-per-asset", type=int, default=4)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_gen_data)

    r = sub.add_parser("render", help="render condition views of an asset")
    r.add_argument("--asset-seed", type=int, default=0)
    r.add_argument("--mesh", default=None, help="OBJ file (overrides --asset-seed)")
    r.add_argument("--views", type=int, default=8)
    r.add_argument("--size", type=int, default=32)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_render)

    t = sub.add_parser("train", help="train the flow-matching model")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="sample an (rgb, pointmap) pair")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--asset-seed", type=int, default=0)
    s.add_argument("--mesh", default=None)
    s.add_argument("--caption-id", type=int, default=0)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--cfg", type=float, default=3.0, help="guidance scale")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--conditions", choices=["both", "text", "reference", "none"],
                   default="both")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out poses")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--asset-seed", type=int, default=0)
    e.add_argument("--poses", type=int, default=4)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--cfg", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare mechanism ablations")
    a.add_argument("--variants", default="all")
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f'error kind=config msg="{e}"', file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, GeometryError, FileNotFoundError, OSError) as e:
        print(f'error kind=io msg="{e}"', file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as e:
        print(f'error kind=numeric msg="{e}"', file=sys.stderr)
        return 3
    except ValueError as e:
        print(f'error kind=config msg="{e}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
