"""Command-line entry points for the baking pipeline.

Exit codes: 0 success, 1 user error (bad config, missing or stale inputs),
2 internal error.  Logs are line-delimited JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="volbake",
        description="Optimize an SDF scene from posed images, bake it to a mesh, "
        "fit spherical-Gaussian appearance, and export a real-time glTF asset.",
    )
    p.add_argument("--config", type=str, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="K=V",
                   help="override a config key, e.g. --set train.iters=500")
    p.add_argument("--out", type=str, help="run directory (overrides config)")
    p.add_argument("--scene", type=str, help="scene file (overrides config)")
    p.add_argument("--seed", type=int, help="root RNG seed")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded numerics")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="render the ground-truth dataset from the scene file")
    sub.add_parser("train", help="optimize the distance field on the train split")
    bake = sub.add_parser("bake", help="extract the world-space mesh")
    bake.add_argument("--resolution", type=int)
    bake.add_argument("--iso", type=float)
    bake.add_argument("--weight-threshold", type=float)
    bake.add_argument("--growth-iterations", type=int)
    fit = sub.add_parser("fit", help="fit per-vertex view-dependent appearance")
    fit.add_argument("--lobes-center", type=int)
    fit.add_argument("--lobes-periphery", type=int)
    fit.add_argument("--lambda-max", type=float)
    fit.add_argument("--loss", choices=["robust", "l2"])
    fit.add_argument("--iters", type=int)
    sub.add_parser("export", help="write the gzip-compressed glTF asset")
    render = sub.add_parser("render", help="render the baked asset for a dataset split")
    render.add_argument("--split", default="test")
    metrics = sub.add_parser("metrics", help="PSNR/SSIM of renders against ground truth")
    metrics.add_argument("--split", default="test")
    run = sub.add_parser("run", help="run all stages in order")
    run.add_argument("--skip-synth", action="store_true")
    return p


def _apply_flag_overrides(cfg, args) -> None:
    direct = {
        "resolution": "bake.resolution",
        "iso": "bake.iso",
        "weight_threshold": "bake.weight_threshold",
        "growth_iterations": "bake.growth_iterations",
        "lobes_center": "fit.lobes_center",
        "lobes_periphery": "fit.lobes_periphery",
        "lambda_max": "fit.lambda_max",
        "loss": "fit.loss",
        "iters": "fit.iters",
    }
    for attr, key in direct.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.apply_overrides([f"{key}={json.dumps(val)}"])


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(1)
        except ImportError:
            pass

    from .pipeline import Pipeline, PipelineConfig, PipelineError, log_event

    try:
        doc = {}
        if args.config:
            doc = json.loads(Path(args.config).read_text())
        cfg = PipelineConfig.from_dict(doc)
        if args.out:
            cfg.out = args.out
        if args.scene:
            cfg.scene = args.scene
        if args.seed is not None:
            cfg.seed = args.seed
        if args.deterministic:
            cfg.deterministic = True
        cfg.apply_overrides(args.set)
        _apply_flag_overrides(cfg, args)

        pipe = Pipeline(cfg)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

        if args.command == "run":
            if not args.skip_synth:
                pipe.synth()
            pipe.train()
            pipe.bake()
            pipe.fit()
            pipe.export()
            pipe.render()
            report = pipe.metrics()
            print(f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f}")
        elif args.command == "synth":
            print(json.dumps(pipe.synth()))
        elif args.command == "train":
            print(json.dumps(pipe.train()))
        elif args.command == "bake":
            print(json.dumps(pipe.bake()))
        elif args.command == "fit":
            print(json.dumps(pipe.fit()))
        elif args.command == "export":
            print(json.dumps(pipe.export()))
        elif args.command == "render":
            print(json.dumps(pipe.render(split=args.split)))
        elif args.command == "metrics":
            print(json.dumps(pipe.metrics(split=args.split).as_dict()))
        return 0
    except (PipelineError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        log_event("cli", "user_error", error=str(exc))
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        log_event("cli", "internal_error", error=repr(exc))
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
