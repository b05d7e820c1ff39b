"""Command line entry point.

Every subcommand accepts ``--config``, ``--seed``, ``--out`` and ``--threads``.
Failures print one JSON line ``{"error": {"category": ..., "message": ...}}``
to stderr and exit with the code listed in :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .association import AssociationConfig, MatchCounts, match_frame, score_matches
from .boxfit import FitConfig
from .contrastive import SiameseEncoder
from .exceptions import ConfigError, SianmsError
from .metrics import EvalConfig
from .pipeline import (REGIONS, VARIANTS, BenchmarkConfig, PipelineConfig, align_to_scene,
                       benchmark_inputs, detections_to_dict, evaluate_scene, load_detections,
                       report_table, run_benchmark, run_pipeline, save_detections,
                       training_seeds)
from .scene import load_scene, save_scene, scene_to_dict, write_json
from .simulator import SimConfig, generate_scene
from .suppression import NmsConfig

log = logging.getLogger("sianms")

EXIT_CODES = {"error": 1, "usage": 2, "config": 3, "format": 4, "validation": 5, "io": 6}


@dataclass
class Settings:
    """Parsed ``--config`` file, one entry per section."""

    sim: SimConfig = field(default_factory=SimConfig)
    encoder: dict = field(default_factory=dict)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    pipeline: dict = field(default_factory=dict)

    def pipeline_config(self, variant: str | None = None) -> PipelineConfig:
        opts = dict(self.pipeline)
        if variant is not None:
            opts["variant"] = variant
        return _build(PipelineConfig, opts, "pipeline", fit=self.fit, nms=self.nms,
                      association=self.association)


def _build(cls, opts: dict, section: str, **extra):
    try:
        return cls(**opts, **extra)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _aoe_period(value) -> float:
    named = {"pi": math.pi, "2pi": 2.0 * math.pi}
    if isinstance(value, str):
        if value not in named:
            raise ConfigError(f"[eval] aoe_period must be 'pi' or '2pi', got {value!r}")
        return named[value]
    return value


def load_settings(path: str | None) -> Settings:
    if path is None:
        return Settings()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    sim_keys = {f.name for f in fields(SimConfig)}
    if raw and "sim" not in raw and set(raw) <= sim_keys:
        raw = {"sim": raw}  # a bare simulator config
    unknown = set(raw) - {f.name for f in fields(Settings)}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    s = Settings()
    if "sim" in raw:
        s.sim = SimConfig.from_dict(raw["sim"])
    if "encoder" in raw:
        allowed = set(inspect.signature(SiameseEncoder).parameters) - {"random_state"}
        bad = set(raw["encoder"]) - allowed
        if bad:
            raise ConfigError(f"[encoder] unknown options {sorted(bad)}")
        s.encoder = dict(raw["encoder"])
    if "association" in raw:
        opts = dict(raw["association"])
        if opts.get("classes") is not None:
            opts["classes"] = frozenset(opts["classes"])
        s.association = _build(AssociationConfig, opts, "association")
    if "nms" in raw:
        s.nms = _build(NmsConfig, raw["nms"], "nms")
    if "fit" in raw:
        s.fit = _build(FitConfig, raw["fit"], "fit")
    if "eval" in raw:
        opts = dict(raw["eval"])
        if "aoe_period" in opts:
            opts["aoe_period"] = _aoe_period(opts["aoe_period"])
        s.eval = _build(EvalConfig, opts, "eval")
    if "benchmark" in raw:
        opts = dict(raw["benchmark"])
        if "variants" in opts:
            opts["variants"] = tuple(opts["variants"])
        s.benchmark = _build(BenchmarkConfig, opts, "benchmark")
    if "pipeline" in raw:
        s.pipeline = dict(raw["pipeline"])
        s.pipeline_config()
    return s


def _emit(obj, out: str | None) -> None:
    if out:
        write_json(obj, out)
    else:
        sys.stdout.write(json.dumps(obj, allow_nan=False, sort_keys=True) + "\n")


def _encoder(path: str | None, needed: bool):
    if path is None:
        if needed:
            raise ConfigError("this variant needs --encoder (train one with 'sianms train-embed')")
        return None
    return SiameseEncoder.load(path)


# --------------------------------------------------------------------------- subcommands

def cmd_simulate(args, s: Settings) -> int:
    sim = s.sim
    if args.seed is not None:
        sim = sim.replace(seed=args.seed)
    if args.n_frames is not None:
        sim = sim.replace(n_frames=args.n_frames)
    scene = generate_scene(sim)
    if args.out:
        save_scene(scene, args.out)
    else:
        _emit(scene_to_dict(scene), None)
    log.info("simulated %d frames (seed %d)", len(scene.frames), sim.seed)
    return 0


def cmd_train_embed(args, s: Settings) -> int:
    seed = args.seed if args.seed is not None else s.sim.seed
    if args.scene:
        scenes = [load_scene(p) for p in args.scene]
    else:
        bcfg = replace(s.benchmark, seed=seed)
        scenes = [generate_scene(s.sim.replace(n_frames=bcfg.train_frames, seed=k))
                  for k in training_seeds(bcfg)]
    params = {"random_state": seed, **s.encoder}
    if args.epochs is not None:
        params["epochs"] = args.epochs
    est = SiameseEncoder(**params).fit(scenes)
    out = args.out or "encoder.txt"
    est.save(out)
    summary = {"encoder": out, "final_loss": est.loss_curve_[-1] if est.loss_curve_ else None,
               "margins": est.margin_stats_, "n_components": est.n_components}
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def cmd_match(args, s: Settings) -> int:
    scene = load_scene(args.scene)
    enc = _encoder(args.encoder, needed=False)
    cfg = s.association
    if args.dis_thr is not None:
        cfg = replace(cfg, dis_thr=args.dis_thr)
    if args.mode is not None:
        cfg = replace(cfg, mode=args.mode)
    frames, counts = [], MatchCounts()
    for frame in scene.frames:
        res = match_frame(scene.rig, frame, cfg, enc)
        counts += score_matches(scene.rig, frame, res, cfg)
        frames.append({"frame_id": frame.frame_id,
                       "pairs": [[list(a), list(b), d] for a, b, d in res.pairs],
                       "unmatched": [list(r) for r in res.unmatched]})
    _emit({"kind": "sianms-matches", "dis_thr": cfg.dis_thr, "mode": cfg.mode, "frames": frames,
           "scores": {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
                      "precision": counts.precision, "recall": counts.recall, "f1": counts.f1}},
          args.out)
    return 0


def cmd_pipeline(args, s: Settings) -> int:
    scene = load_scene(args.scene)
    cfg = s.pipeline_config(args.variant)
    enc = _encoder(args.encoder, cfg.needs_encoder)
    boxes, logs = run_pipeline(scene, cfg, enc, args.threads)
    for r in logs:
        for d in r.dismissed:
            log.info("frame %s: dismissed match %s", r.frame_id, d["pair"])
    frame_ids = [f.frame_id for f in scene.frames]
    if args.out:
        save_detections(args.out, boxes, frame_ids, cfg.variant, logs)
    else:
        _emit(detections_to_dict(boxes, frame_ids, cfg.variant, logs), None)
    return 0


def cmd_eval(args, s: Settings) -> int:
    scene = load_scene(args.scene)
    ids, boxes = load_detections(args.detections)
    boxes = align_to_scene(scene, ids, boxes)
    regions = REGIONS if args.region == "both" else [r for r in REGIONS if r[1] == args.region]
    name = args.name or "detections"
    results = {"kind": "sianms-benchmark", "variants": {name: {
        label: {str(k): v for k, v in evaluate_scene(scene, boxes, region, s.eval).to_dict().items()}
        for label, region in regions}}}
    sys.stdout.write(report_table(results))
    if args.out:
        write_json(results, args.out)
    return 0


def cmd_benchmark(args, s: Settings) -> int:
    bcfg = s.benchmark
    if args.seed is not None:
        bcfg = replace(bcfg, seed=args.seed)
    if args.n_frames is not None:
        bcfg = replace(bcfg, n_frames=args.n_frames)
    if args.variants:
        bcfg = replace(bcfg, variants=tuple(args.variants))
    enc = SiameseEncoder.load(args.encoder) if args.encoder else None
    scene, enc = benchmark_inputs(bcfg, s.sim, enc)
    results = run_benchmark(scene, enc, bcfg, s.pipeline_config(), s.eval, args.threads)
    table = report_table(results)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        write_json(results, out)
        out.with_suffix(".txt").write_text(table)
    return 0


# --------------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("usage", message)
        sys.exit(EXIT_CODES["usage"])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-frame work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sianms", description="Cross-camera duplicate suppression toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene")
    sp.add_argument("--n-frames", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train-embed", parents=[common], help="train the embedding encoder")
    sp.add_argument("--scene", action="append", help="labelled training scene (repeatable)")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_embed)

    sp = sub.add_parser("match", parents=[common], help="associate detections across cameras")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--encoder")
    sp.add_argument("--dis-thr", type=float)
    sp.add_argument("--mode", choices=("greedy", "optimal"))
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("pipeline", parents=[common], help="run one detection variant")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--encoder")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("eval", parents=[common], help="score a detections file")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--region", choices=("all", "overlap_only", "both"), default="both")
    sp.add_argument("--name", help="row label in the report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("benchmark", parents=[common], help="compare all variants")
    sp.add_argument("--n-frames", type=int)
    sp.add_argument("--variants", nargs="+", choices=VARIANTS)
    sp.add_argument("--encoder", help="pretrained encoder (skips training)")
    sp.set_defaults(func=cmd_benchmark)
    return p


def _report(category: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"category": category, "message": message}}) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return args.func(args, load_settings(args.config))
    except SianmsError as exc:
        _report(exc.category, str(exc))
        return EXIT_CODES.get(exc.category, EXIT_CODES["error"])
    except OSError as exc:
        _report("io", f"{exc.filename or ''}: {exc.strerror or exc}".strip(": "))
        return EXIT_CODES["io"]
    except Exception as exc:  # last resort: keep the error machine-parsable
        log.debug("unexpected failure", exc_info=True)
        _report("error", f"{type(exc).__name__}: {exc}")
        return EXIT_CODES["error"]


if __name__ == "__main__":
    sys.exit(main())
