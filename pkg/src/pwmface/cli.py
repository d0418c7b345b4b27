"""Command line interface: ``pwmface <subcommand> --config cfg.yaml [--set key=value ...]``.

One YAML file configures every subcommand.  Top-level keys are training
settings (see :class:`~pwmface.training.TrainConfig`); the optional ``data``
section configures ``gen-data`` and the optional ``eval`` section configures
``eval``.  ``--set`` overrides any key by dotted path, e.g.
``--set generator.guidance_kind=nmfc --set data.n_identities=8``.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .data import SyntheticDataset, gen_dataset, to_uint8
from .face_model import make_toy_asset
from .guidance import CODE_DIM, geom_disp_from_geometry, nmfc_from_geometry
from .metrics import to_unit_range
from .rasterizer import interpolate
from .pipeline import (AnimatorPredictor, CopySourcePredictor, ProtocolError, edit, evaluate, parse_sweep,
                       reenact)
from .training import TrainConfig, Trainer, TrainingDivergedError, load_checkpoint, save_config, set_by_path

EXIT_INVARIANT = 2


@dataclass
class DataConfig:
    seed: int = 0
    n_identities: int = 20
    frames_per_identity: int = 20
    resolution: int = 64
    workers: int = 1


@dataclass
class EvalConfig:
    protocol: str = "same"
    n_pairs: int = 16
    seed: int = 0
    baseline: str = "model"


def _section(cls, raw):
    raw = dict(raw or {})
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


def load_all(path, overrides):
    """Parse the config file plus overrides into (TrainConfig, DataConfig, EvalConfig)."""
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} must look like key=value")
        set_by_path(raw, key.strip(), yaml.safe_load(value))
    data = _section(DataConfig, raw.pop("data", None))
    ev = _section(EvalConfig, raw.pop("eval", None))
    return TrainConfig.from_dict(raw).validate(), data, ev


def _save_png(img, path):
    """Write a 3 x H x W image in [-1, 1] as 8-bit RGB."""
    arr = to_uint8(to_unit_range(np.asarray(img)).transpose(1, 2, 0))
    Image.fromarray(arr, mode="RGB").save(path)


def _dataset(args, cfg):
    root = args.data or cfg.data_dir
    return SyntheticDataset(root, holdout_identities=cfg.holdout_identities)


def _load_model(path, dataset):
    _, animator, _, _, _ = load_checkpoint(path, dataset.asset.n_vertices, dataset.asset.normalized_template)
    if animator.cfg.resolution != dataset.resolution:
        raise ProtocolError(f"checkpoint is {animator.cfg.resolution}px but the dataset is {dataset.resolution}px")
    return animator


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg, data, ev):
    out = args.out or cfg.data_dir
    gen_dataset(out, seed=data.seed, n_identities=data.n_identities, frames_per_identity=data.frames_per_identity,
                resolution=data.resolution, asset=make_toy_asset(), workers=data.workers)
    print(f"wrote {data.n_identities} identities x {data.frames_per_identity} frames to {out}")
    return 0


def _visualize(channels, coverage):
    """Map a c-channel guidance image to RGB for inspection."""
    c = channels.shape[0]
    if c == 2:
        scale = max(float(np.abs(channels).max()), 1e-6)
        rgb = np.stack([channels[0] / scale, channels[1] / scale, np.zeros_like(channels[0])])
    else:
        x = channels[:3]
        lo, hi = x.min(), x.max()
        rgb = (x - lo) / max(hi - lo, 1e-6) * 2 - 1
    return np.where(coverage[None], np.clip(rgb, -1, 1), -1.0)


def cmd_render_guidance(args, cfg, data, ev):
    ds = _dataset(args, cfg)
    res = ds.resolution
    geom_s = ds.geometry(args.identity, args.source_frame)
    geom_d = ds.geometry(args.driving_identity if args.driving_identity is not None else args.identity,
                         args.driving_frame)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    maps = {
        "geom-disp": geom_disp_from_geometry(geom_s, geom_d),
        "nmfc": nmfc_from_geometry(ds.asset, geom_d),
    }
    if args.checkpoint:
        animator = _load_model(args.checkpoint, ds)
        if animator.codes is not None:
            maps["neural-codes"] = animator.codes.render(geom_d).detach().numpy()
    else:
        # untrained codes drawn with the configured seed
        codes = np.random.default_rng(cfg.seed).normal(0, 0.02, (ds.asset.n_vertices, CODE_DIM))
        maps["neural-codes"] = interpolate(geom_d.cache, codes)
    for name, m in maps.items():
        img = m.image if hasattr(m, "image") else m
        _save_png(_visualize(img, geom_d.coverage), f"{prefix}_{name}.png")
        np.save(f"{prefix}_{name}.npy", np.asarray(img, dtype=np.float32))
    _save_png(_visualize(np.ones((3, res, res)), geom_d.coverage), f"{prefix}_coverage.png")
    print(f"wrote guidance maps {sorted(maps)} with prefix {prefix}")
    return 0


def cmd_train(args, cfg, data, ev):
    ds = _dataset(args, cfg)
    if cfg.generator.resolution != ds.resolution:
        raise ValueError(f"generator.resolution={cfg.generator.resolution} but the dataset is {ds.resolution}px")
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    log_path = out / "log.jsonl"
    if log_path.exists():
        log_path.unlink()
    trainer = Trainer(cfg, ds.asset.n_vertices, ds.asset.normalized_template)

    def progress(report):
        if args.verbose and report["iteration"] % max(cfg.log_every, 1) == 0:
            print(json.dumps(report, sort_keys=True), flush=True)

    trainer.fit(ds, log_path=log_path, checkpoint_dir=out, progress=progress)
    trainer.save(out / "final.pwma")
    print(f"trained {trainer.iteration} iterations; checkpoint {out / 'final.pwma'}")
    return 0


def cmd_animate(args, cfg, data, ev):
    ds = _dataset(args, cfg)
    animator = _load_model(args.checkpoint, ds)
    drv_id = args.driving_identity if args.driving_identity is not None else args.identity
    mode = "same" if drv_id == args.identity else "cross"
    img = reenact(animator, ds.asset, ds.image(args.identity, args.source_frame),
                  ds.params(args.identity, args.source_frame), ds.params(drv_id, args.driving_frame), mode)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _save_png(img.numpy(), args.out)
    print(f"wrote {mode}-identity reenactment to {args.out}")
    return 0


def cmd_edit(args, cfg, data, ev):
    ds = _dataset(args, cfg)
    animator = _load_model(args.checkpoint, ds)
    overrides = dict(parse_sweep(s) for s in args.sweep or ())
    images = edit(animator, ds.asset, ds.image(args.identity, args.frame), ds.params(args.identity, args.frame),
                  overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images):
        _save_png(img.numpy(), out / f"edit_{k:03d}.png")
    print(f"wrote {len(images)} edited frames to {out}")
    return 0


def cmd_eval(args, cfg, data, ev):
    ds = _dataset(args, cfg)
    if ev.baseline == "copy-source":
        predictor, source = CopySourcePredictor(), "copy-source"
    else:
        if not args.checkpoint:
            raise ValueError("eval needs --checkpoint unless eval.baseline=copy-source")
        predictor, source = AnimatorPredictor(_load_model(args.checkpoint, ds), ds.asset), str(args.checkpoint)
    report = evaluate(predictor, ds, ev.protocol, ev.n_pairs, ev.seed)
    out = {"model": source, "dataset": str(ds.root), "heldout_identities": ds.heldout_ids}
    out.update(report.to_dict())
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "render-guidance": cmd_render_guidance,
    "train": cmd_train,
    "animate": cmd_animate,
    "edit": cmd_edit,
    "eval": cmd_eval,
}


def build_parser():
    p = argparse.ArgumentParser(prog="pwmface", description="Geometry-guided face reenactment toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = common(sub.add_parser("gen-data", help="render the synthetic dataset"))
    g.add_argument("--out", help="dataset directory (default: data_dir from the config)")

    r = common(sub.add_parser("render-guidance", help="write guidance maps for a frame pair"))
    r.add_argument("--data")
    r.add_argument("--identity", type=int, default=0)
    r.add_argument("--source-frame", type=int, default=0)
    r.add_argument("--driving-identity", type=int)
    r.add_argument("--driving-frame", type=int, default=1)
    r.add_argument("--checkpoint", help="take neural codes from this checkpoint")
    r.add_argument("--out", required=True, help="output path prefix")

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--data")
    t.add_argument("--out", help="run directory (default: output_dir from the config)")

    a = common(sub.add_parser("animate", help="reenact one source frame with a driving frame"))
    a.add_argument("--data")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--identity", type=int, default=0)
    a.add_argument("--source-frame", type=int, default=0)
    a.add_argument("--driving-identity", type=int, help="different identity selects cross-identity mode")
    a.add_argument("--driving-frame", type=int, default=1)
    a.add_argument("--out", required=True)

    e = common(sub.add_parser("edit", help="sweep face parameters of one source frame"))
    e.add_argument("--data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--identity", type=int, default=0)
    e.add_argument("--frame", type=int, default=0)
    e.add_argument("--sweep", action="append", help="KEY=v1,v2,... e.g. theta.jaw.x=0,0.1,0.2 (repeatable)")
    e.add_argument("--out", required=True, help="output directory")

    v = common(sub.add_parser("eval", help="print a metric report"))
    v.add_argument("--data")
    v.add_argument("--checkpoint")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, data, ev = load_all(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg, data, ev)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValueError, ProtocolError, OSError, KeyError, IndexError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
