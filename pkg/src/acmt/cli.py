"""Command-line entry points: gen, train, translate, register, eval.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Logging verbosity comes from ``ACMT_LOG_LEVEL`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint
from .config import ConfigError, load_run_config, to_plain
from .errors import (CorruptCheckpointError, CorruptDatasetError, InvalidInputError,
                     RegistrationError, TrainingAborted, UndefinedMetricError)
from .metrics import (FeatureExtractorProxy, MetricsReport, evaluate_registration,
                      frechet_distance, kid_bootstrap_stderr, mmd2_unbiased,
                      write_report)
from .phantom import (fixed_zone_mask, generate_dataset, load_dataset, read_field, read_image,
                      read_manifest, read_mask, save_dataset, write_field)
from .registration import register
from .sampler import TranslateOptions, translate_dataset
from .trainer import fit

logger = logging.getLogger("acmt")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
EFFECTIVE_CONFIG = "config.effective.json"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _setup_logging():
    name = os.environ.get("ACMT_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"ACMT_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _echo_config(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / EFFECTIVE_CONFIG).write_text(json.dumps(payload, indent=1, sort_keys=True))


def _ensure_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".acmt_write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path} does not exist")


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    out = _ensure_dir(args.out)
    size = (args.size, args.size)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    effective = {"count": args.count, "size": list(size), "seed": args.seed,
                 "max_displacement": args.max_displacement}
    samples = generate_dataset(args.count, size, args.seed, args.max_displacement)
    # the effective config lives in the manifest so the directory holds only dataset files
    save_dataset(samples, out, image_size=size, extra={"generator": effective})
    print(f"wrote {args.count} pairs to {out}")
    return EXIT_OK


def _train_overrides(args):
    return {"seed": args.seed, "train.epochs": args.epochs, "train.batch_size": args.batch_size,
            "train.learning_rate": args.lr}


def _config_sets(path, section, key):
    if path is None:
        return False
    data = yaml.safe_load(Path(path).read_text()) or {}
    return isinstance(data.get(section), dict) and key in data[section]


def cmd_train(args):
    _require_dir(args.data, "data directory")
    manifest = read_manifest(args.data)
    overrides = _train_overrides(args)
    run = load_run_config(args.config, overrides)
    size = tuple(manifest.image_size or run.network.image_size)
    if run.network.image_size != size:
        # the network follows the data unless the config pins a different size
        if _config_sets(args.config, "network", "image_size"):
            raise ConfigError(f"network.image_size {run.network.image_size} does not match "
                              f"the data {size}", ["network.image_size"])
        run = load_run_config(args.config, {**overrides, "network.image_size": list(size)})
    config = run.train_config()
    out = _ensure_dir(args.out)
    _echo_config(out, run.to_dict())
    dataset = load_dataset(args.data)
    ckpt, log = fit(dataset, config, out_dir=out)
    print(f"trained {ckpt.epoch} epochs ({ckpt.step} steps) in {log.wall_clock:.1f}s; "
          f"checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _resolve_checkpoint(path):
    path = Path(path)
    if (path / "checkpoint" / "meta.json").is_file():
        path = path / "checkpoint"
    return load_checkpoint(path)


def cmd_translate(args):
    _require_dir(args.data, "data directory")
    ckpt = _resolve_checkpoint(args.ckpt)
    opts = TranslateOptions(nfe=args.nfe, stochastic=args.stochastic, seed=args.seed)
    out = _ensure_dir(args.out)
    manifest, errors = translate_dataset(args.data, ckpt, opts, out)
    _echo_config(out, {"checkpoint": str(args.ckpt), "data": str(args.data),
                       "bridge": to_plain(ckpt.bridge), "nfe": args.nfe,
                       "stochastic": args.stochastic, "seed": args.seed})
    print(f"translated {len(manifest.samples)} pairs into {out}")
    if errors:
        logger.error("%d samples failed; manifest marked partial", len(errors))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_register(args):
    run = load_run_config(args.config)
    cfg = run.registration
    if args.data is not None:
        _require_dir(args.data, "data directory")
        samples, ids = load_dataset(args.data, with_ids=True)
        out = _ensure_dir(args.out)
        _echo_config(out, {"data": str(args.data), "registration": to_plain(cfg)})
        for sid, s in zip(ids, samples):
            # US is the fixed frame; warp(MR, u) lands in it
            write_field(out / f"field_{sid}.bin", register(s.us, s.mr, cfg))
        print(f"registered {len(samples)} pairs into {out}")
        return EXIT_OK
    if args.fixed is None or args.moving is None:
        raise UsageError("register needs --fixed and --moving, or --data")
    fixed, moving = read_image(args.fixed), read_image(args.moving)
    if fixed.shape != moving.shape:
        raise UsageError(f"image shapes differ: {fixed.shape} vs {moving.shape}")
    out = Path(args.out)
    _ensure_dir(out.parent)
    write_field(out, register(fixed, moving, cfg))
    print(f"wrote field {out}")
    return EXIT_OK


def _images(directory):
    samples = load_dataset(directory)
    return [s.mr for s in samples], [s.us for s in samples]


def _eval_translation(args):
    extractor = FeatureExtractorProxy()
    mr, us = _images(args.data)
    if args.against is not None:
        mr2, us2 = _images(args.against)
        set_a, set_b = mr + us, mr2 + us2
    else:
        set_a, set_b = mr, us
    if len(set_a) < 2 or len(set_b) < 2:
        raise UsageError("translation eval needs at least 2 images per set")
    fa, fb = extractor(np.stack(set_a)), extractor(np.stack(set_b))
    report = MetricsReport(fid_proxy=frechet_distance(fa, fb), kid_proxy=mmd2_unbiased(fa, fb),
                           n_images_a=len(set_a), n_images_b=len(set_b))
    extra = {"data": str(args.data), "against": str(args.against) if args.against else None,
             "kid_proxy_stderr": kid_bootstrap_stderr(fa, fb)}
    return report, extra


def _eval_registration(args):
    if args.field is not None:
        if args.moving_mask is None or args.fixed_mask is None:
            raise UsageError("--field needs --moving-mask and --fixed-mask")
        moving, fixed = read_mask(args.moving_mask), read_mask(args.fixed_mask)
        field = read_field(args.field)
        if moving.shape != fixed.shape or field.shape[1:] != moving.shape:
            raise UsageError(f"shape mismatch: masks {moving.shape}/{fixed.shape}, "
                             f"field {field.shape}")
        return evaluate_registration(field, moving, fixed), {"field": str(args.field)}
    if args.data is None or args.fields is None:
        raise UsageError("registration eval needs --field/--moving-mask/--fixed-mask "
                         "or --data/--fields")
    samples, ids = load_dataset(args.data, with_ids=True)
    if not samples:
        raise UsageError("registration eval needs at least one pair")
    per_pair = []
    for sid, s in zip(ids, samples):
        field = read_field(Path(args.fields) / f"field_{sid}.bin")
        if field.shape[1:] != s.shape:
            raise UsageError(f"field for {sid} has shape {field.shape}, images are {s.shape}")
        r = evaluate_registration(field, s.zone_mask, fixed_zone_mask(s))
        per_pair.append({"id": sid, "dsc": r.dsc, "iou": r.iou, "asd_px": r.asd_px})
    report = MetricsReport(dsc=float(np.mean([p["dsc"] for p in per_pair])),
                           iou=float(np.mean([p["iou"] for p in per_pair])),
                           asd_px=float(np.mean([p["asd_px"] for p in per_pair])),
                           n_pairs=len(per_pair))
    return report, {"data": str(args.data), "fields": str(args.fields), "pairs": per_pair}


def cmd_eval(args):
    if args.mode == "translation":
        if args.data is None:
            raise UsageError("translation eval needs --data")
        report, extra = _eval_translation(args)
    else:
        report, extra = _eval_registration(args)
    out = Path(args.out)
    _ensure_dir(out.parent)
    payload = write_report(out, report, args.mode, extra)
    print(json.dumps({k: v for k, v in payload.items() if k != "pairs"}, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="acmt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic paired MR/US dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-displacement", type=float, default=5.0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the translation network")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a dataset to the intermediate modality")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--nfe", type=int)
    tr.add_argument("--stochastic", action="store_true")
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_translate)

    r = sub.add_parser("register", help="SSD registration of one pair or a whole dataset")
    r.add_argument("--fixed")
    r.add_argument("--moving")
    r.add_argument("--data", help="register every pair (US fixed, MR moving)")
    r.add_argument("--out", required=True, help="field file, or a directory with --data")
    r.add_argument("--config")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="translation or registration metrics")
    e.add_argument("--mode", choices=("translation", "registration"), required=True)
    e.add_argument("--data")
    e.add_argument("--against")
    e.add_argument("--fields")
    e.add_argument("--field")
    e.add_argument("--moving-mask")
    e.add_argument("--fixed-mask")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.keys:
            print("offending keys: " + ", ".join(k for k in exc.keys if k), file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RegistrationError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InvalidInputError, UndefinedMetricError, CorruptDatasetError,
            CorruptCheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
