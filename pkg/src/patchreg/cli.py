"""Command-line entry points: train, register, evaluate, synth, gradcheck.

Batch-oriented: every run reads flags plus an optional JSON config
(flags win), persists its fully resolved configuration, and writes
files/CSV/JSON reports. Exit codes: 0 success, 1 verification failure,
2 usage or config error, 3 data integrity error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, models, svf, training
from .gradcore import ContractError, DimensionError, grad_check, set_grad_fault
from .metrics import jacobian_stats, evaluate_pairs
from .models import CheckpointError, ConfigError, init_model, load_checkpoint, preset
from .svf import FieldKindError, compose_displacements, mean_interior_magnitude
from .training import TrainConfig, TrainingDiverged, symmetric_loss


def _resolve_model_config(section: dict) -> models.ModelConfig:
    section = dict(section)
    base = preset(section.pop("preset")) if "preset" in section else models.ModelConfig()
    d = base.to_dict()
    if "scales" in section:
        d["scales"] = section.pop("scales")
    d.update(section)
    cfg = models.ModelConfig.from_dict(d)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    model_cfg = _resolve_model_config(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    data = raw.get("data", {})
    if "manifest" not in data:
        raise ConfigError("config 'data' section needs a 'manifest' path")
    manifest = (Path(args.config).parent / data["manifest"]).resolve()
    train_split = data.get("train_split", "train")
    val_split = data.get("val_split", "val")
    if args.seed is not None:
        model_cfg.seed = args.seed
        train_cfg.seed = args.seed
    train_cfg.validate()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": {"manifest": str(manifest), "train_split": train_split, "val_split": val_split},
    }
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    train_pairs = dataio.load_image_pairs(manifest, train_split, model_cfg.image_size)
    val_pairs = dataio.load_image_pairs(manifest, val_split, model_cfg.image_size)
    if not train_pairs:
        raise ConfigError(f"no '{train_split}' pairs in {manifest}")
    if not val_pairs:
        raise ConfigError(f"no '{val_split}' pairs in {manifest}")
    model = init_model(model_cfg, dtype=train_cfg.dtype)
    result = training.train(model, train_pairs, val_pairs, train_cfg, out_dir=out)
    print(
        f"trained {model_cfg.family} for {len(result.log)} epochs "
        f"(best val {result.best_val_loss:.6g} at epoch {result.best_epoch})"
    )
    return 0


def cmd_register(args) -> int:
    model = load_checkpoint(args.checkpoint)
    size = model.config.image_size
    fix = dataio.read_pgm(args.fix)
    mov = dataio.read_pgm(args.mov)
    if args.no_resize:
        if fix.shape != (size, size) or mov.shape != (size, size):
            raise DimensionError(
                f"images {fix.shape}/{mov.shape} do not match model size {size} "
                "(drop --no-resize to resample)"
            )
    else:
        fix = dataio.resize_image(fix, size)
        mov = dataio.resize_image(mov, size)
    result = model.register(fix, mov)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    svf.write_field(result.disp_forward, out / "disp_forward.prgf")
    svf.write_field(result.disp_inverse, out / "disp_inverse.prgf")
    warped = svf.warp_image(mov, result.disp_forward).data
    dataio.write_pgm(warped, out / "warped.pgm")
    margin = max(1, size // 32)
    residual = mean_interior_magnitude(
        compose_displacements(result.disp_inverse, result.disp_forward), margin=margin
    )
    stats = jacobian_stats(
        result.disp_forward, np.ones((size, size), dtype=np.int64), 1
    )
    summary = {
        "inverse_consistency_residual_px": residual,
        "jacobian": {
            "mean": stats.mean,
            "std": stats.std,
            "min": stats.min,
            "neg_frac": stats.neg_frac,
        },
        "mse_warped": float(((warped - fix) ** 2).mean()),
        "mse_identity": float(((mov - fix) ** 2).mean()),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    pairs = dataio.load_eval_pairs(args.manifest, args.split, model.config.image_size)
    if not pairs:
        raise ConfigError(f"split '{args.split}' of {args.manifest} is empty")
    report = evaluate_pairs(model, pairs, threads=args.threads)
    report.write(args.out)
    n_rows = len({r.pair_id for r in report.rows})
    print(f"evaluated {n_rows} pairs, skipped {len(report.skipped)}")
    return 0


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.n):
        pair = dataio.synth_pair(args.seed + i, size=args.size, max_disp=args.max_disp)
        rows.append(dataio.export_synth_pair(pair, out, f"synth{i:04d}", split=args.split))
    dataio.write_manifest(rows, out / "manifest.csv")
    print(f"wrote {args.n} synthetic pairs to {out}")
    return 0


_GRADCHECK_SIZE_LIMIT = 64


def cmd_gradcheck(args) -> int:
    if args.size > _GRADCHECK_SIZE_LIMIT:
        raise ConfigError(f"gradcheck is desk scale only (size <= {_GRADCHECK_SIZE_LIMIT})")
    families = list(models.FAMILIES) if args.family == "all" else [args.family]
    pair = dataio.synth_pair(args.seed, size=args.size, max_disp=2.0)
    fix = pair.fix.astype(np.float64)
    mov = pair.mov.astype(np.float64)
    ok = True
    set_grad_fault(args.inject_fault)
    try:
        for family in families:
            scale = (
                models.ScaleConfig(patch=args.patch, window=4, heads=4, weight=1.0)
                if family == "swin_trans"
                else models.ScaleConfig(patch=args.patch, weight=1.0)
            )
            cfg = models.ModelConfig(
                family=family,
                scales=[scale],
                dim=args.dim,
                depth_extract=args.depth,
                depth_cross=args.depth,
                image_size=args.size,
                seed=args.seed,
            )
            model = init_model(cfg, dtype=np.float64, head_init="random")

            def loss_fn(_params):
                result = model.register(fix, mov)
                return symmetric_loss(fix, mov, result, lam=0.01)

            report = grad_check(
                loss_fn, model.params, n_probes=args.probes, step=args.step, seed=args.seed
            )
            status = "ok" if report.max_rel_err < args.threshold else "FAIL"
            print(
                f"{family}: max rel err {report.max_rel_err:.3e} "
                f"(mean {report.mean_rel_err:.3e}, {report.n_probes} probes) {status}"
            )
            if report.max_rel_err >= args.threshold:
                ok = False
    finally:
        set_grad_fault(False)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config and manifest")
    p.add_argument("--config", required=True, help="JSON with model/train/data sections")
    p.add_argument("--out", required=True, help="output directory for artifacts")
    p.add_argument("--seed", type=int, default=None, help="override model and train seeds")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("register", help="register one image pair with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fix", required=True, help="fixed image (PGM)")
    p.add_argument("--mov", required=True, help="moving image (PGM)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-resize", action="store_true", help="require exact input size")
    p.set_defaults(handler=cmd_register)

    p = sub.add_parser("evaluate", help="metric report over a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("synth", help="generate synthetic pairs plus a manifest")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-disp", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=dataio.SPLITS)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss gradient")
    p.add_argument("--family", default="all", choices=("all",) + models.FAMILIES)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (
        ConfigError,
        ContractError,
        DimensionError,
        FieldKindError,
        dataio.ManifestError,
        dataio.PgmParseError,
        FileNotFoundError,
        NotADirectoryError,
        json.JSONDecodeError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
