"""Command-line entry point: ``wrivinder <subcommand> ...``."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .errors import ConfigError, StageError, WrivinderError
from .evaluate import evaluate, read_cameras_geojson
from .pipeline import STAGES, PipelineConfig, run_stages, seed_from_env, synth_config, write_json
from .synth import SynthParams, generate_scene, write_scene

logger = logging.getLogger("wrivinder")

# subcommand -> stages it runs
STAGE_COMMANDS = {
    "align": STAGES,
    "zenith": ("semantics", "zenith"),
    "scale": ("metric",),
    "render-zenith": ("raster",),
    "match": ("dtm",),
    "geolocate": ("geolocator",),
}


def _add_pipeline_args(p: argparse.ArgumentParser, stop_after: bool):
    p.add_argument("--config", type=Path, help="pipeline config JSON")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set dtm.stride=4 (repeatable)")
    if stop_after:
        p.add_argument("--stop-after", choices=STAGES, help="stop after this stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wrivinder", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_pipeline_args(sub.add_parser("align", help="run the full pipeline"), stop_after=True)
    _add_pipeline_args(sub.add_parser("zenith", help="estimate the vertical and the zenith camera"), False)
    _add_pipeline_args(sub.add_parser("scale", help="metric scale and footprint"), False)
    _add_pipeline_args(sub.add_parser("render-zenith", help="render the zenith view and cut the template"), False)
    _add_pipeline_args(sub.add_parser("match", help="place the template on the satellite tile"), False)
    _add_pipeline_args(sub.add_parser("geolocate", help="correspondences, similarity and camera GPS"), False)

    ev = sub.add_parser("eval", help="score predicted camera GPS against ground truth")
    ev.add_argument("--pred", type=Path, required=True, help="predicted cameras GeoJSON")
    ev.add_argument("--gt", type=Path, required=True, help="ground-truth cameras GeoJSON")
    ev.add_argument("--out", type=Path, help="write the report here instead of stdout")

    sy = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    sy.add_argument("--seed", type=int, default=None, help="scene seed (default: WRIVINDER_SEED or 0)")
    sy.add_argument("--out", type=Path, required=True, help="scene directory")
    sy.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a SynthParams field, e.g. --set n_cameras=30")
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    for s in args.set:
        cfg.set(s)
    seed_from_env(cfg)
    if args.out is not None:
        cfg.data["output"] = str(args.out)
    return cfg


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    stages = STAGE_COMMANDS[args.command]
    if args.command == "align" and not cfg["inputs"]["gt"]:
        stages = tuple(s for s in stages if s != "eval")
    stop = getattr(args, "stop_after", None)
    if stop is not None and stop not in stages:
        raise ConfigError(f"--stop-after {stop} is not part of this run")
    ctx = run_stages(cfg, stages, stop)
    if "metrics" in ctx._cache:
        rep = dataclasses.replace(ctx._cache["metrics"], runtime_min=sum(ctx.timings.values()) / 60.0)
        print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    logger.info("artifacts in %s", ctx.out)
    return 0


def _cmd_eval(args) -> int:
    try:
        pred = read_cameras_geojson(json.loads(args.pred.read_text()))
        gt = read_cameras_geojson(json.loads(args.gt.read_text()))
    except (OSError, json.JSONDecodeError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read cameras GeoJSON: {exc}") from exc
    gt = {k: v for k, v in gt.items() if v is not None}
    doc = evaluate(pred, gt).to_dict()
    if args.out:
        write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))
    return 0


def _cmd_synth(args) -> int:
    fields = {f.name: f for f in dataclasses.fields(SynthParams)}
    kw = {}
    for s in args.set:
        key, _, text = s.partition("=")
        if key not in fields:
            raise ConfigError(f"unknown synth parameter '{key}'")
        try:
            kw[key] = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
    seed = args.seed
    if seed is None:
        cfg = PipelineConfig()
        seed_from_env(cfg)
        seed = cfg.seed
    scene = generate_scene(seed, SynthParams(**kw))
    out = write_scene(scene, args.out)
    (out / "config.json").write_text(json.dumps(synth_config(out), indent=2, sort_keys=True) + "\n")
    logger.info("scene written to %s (s_true %.4f)", out, scene.s_true)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=max(1, args.threads))
    try:
        with limiter:
            if args.command == "eval":
                return _cmd_eval(args)
            if args.command == "synth":
                return _cmd_synth(args)
            return _cmd_pipeline(args)
    except StageError as exc:
        logger.error("stage '%s' failed: %s", exc.stage, exc.cause)
        return 2
    except (ConfigError, WrivinderError, ValueError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
