"""Command-line entry point wiring the pipeline end to end.

Subcommands: gen-data, train, autolabel, edit, eval, plot. Every command
writes the effective configuration (config file merged with --set overrides)
next to its outputs, so any artifact can be reproduced from the snapshot it
carries. Exit codes: 0 success, 1 validation/runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .types import EFFECTS, WeatherStrength

log = logging.getLogger("wxdiff")


def parse_strengths(text: str) -> WeatherStrength:
    """Parse `effect=value,...`; `all=v` sets every effect. Unlisted effects
    are 0; values are clamped to [0, 1] with a warning."""
    vals = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"bad strength item {item!r}; expected effect=value")
        name, _, raw = item.partition("=")
        name = name.strip()
        try:
            v = float(raw)
        except ValueError:
            raise ValueError(f"bad strength value {raw!r} for {name!r}")
        clamped = min(1.0, max(0.0, v))
        if clamped != v:
            log.warning("strength %s=%g clamped to %g", name, v, clamped)
        if name == "all":
            for e in EFFECTS:
                vals[e] = clamped
        elif name in EFFECTS:
            vals[name] = clamped
        else:
            raise ValueError(f"unknown effect {name!r}; expected {EFFECTS} or 'all'")
    return WeatherStrength(**vals)


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ValueError(f"override {item!r} must look like key=value")
    key, _, raw = item.partition("=")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key, val


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    config = json.loads(json.dumps(config))  # deep copy
    for item in overrides or []:
        key, val = _parse_override(item)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return config


def _load_config(path: str | None, overrides: list[str]) -> dict:
    base = json.loads(Path(path).read_text()) if path else {}
    return _apply_overrides(base, overrides)


def _snapshot(config: dict, out_dir: Path, command: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": config}
    (out_dir / "effective_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


# --- subcommand bodies ---------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .procsim.dataset import DatasetConfig, emit_dataset

    config = _load_config(args.config, args.set)
    config["out_dir"] = args.out
    if args.seed is not None:
        config["base_seed"] = args.seed
    cfg = DatasetConfig.from_dict(config)
    _snapshot(cfg.to_dict(), args.out, "gen-data")
    manifest = emit_dataset(cfg)
    log.info("wrote %d samples under %s", len(manifest["samples"]), args.out)
    return 0


def _load_sources(manifest_path: str, sources_needed: list[str], autolabeled: str | None):
    from .datapipe import Dataset, load_dataset

    datasets = {}
    for source in sources_needed:
        if source == "real_autolabeled":
            if not autolabeled:
                continue
            datasets[source] = load_dataset(Path(autolabeled), splits=("train",),
                                            sources=("real_autolabeled",))
        else:
            datasets[source] = load_dataset(Path(manifest_path), splits=("train",),
                                            sources=(source,))
    return datasets


def cmd_train(args) -> int:
    from .training import StagePlan, train_stage

    config = _load_config(args.config, args.set)
    config["stage"] = args.stage
    if args.seed is not None:
        config["seed"] = args.seed
    if "source_weights" not in config:
        if args.stage == "synthesis_joint":
            # Joint-stage mix: recorded default, surfaced here as config.
            config["source_weights"] = {"simulation": 0.4, "generation": 0.2,
                                        "real_autolabeled": 0.4}
        else:
            config["source_weights"] = {"simulation": 0.8, "generation": 0.2}
    plan = StagePlan.from_dict(config)
    _snapshot(plan.to_dict(), args.out, "train")
    needed = [k for k, v in plan.source_weights.items() if v > 0]
    datasets = _load_sources(args.data, needed, args.autolabeled)
    ckpt = train_stage(plan, datasets, Path(args.out), device=args.device)
    log.info("finished %s at step %d; checkpoint %s (sha %s)",
             plan.stage, ckpt.manifest["step"], ckpt.path, ckpt.sha256[:12])
    return 0


def cmd_autolabel(args) -> int:
    from .autolabel import emit_pseudo_pairs
    from .datapipe import load_dataset

    ds = load_dataset(Path(args.data), splits=("pseudo_real",),
                      full_pairs_only=False)
    clips = [p for p in ds.samples if p.is_partial]
    if not clips:
        log.error("no weather-only (pseudo_real) clips found in %s", args.data)
        return 1
    _snapshot({"ckpt": args.ckpt, "data": args.data, "steps": args.steps,
               "seed": args.seed}, args.out, "autolabel")
    manifest = emit_pseudo_pairs(Path(args.ckpt), clips, Path(args.out),
                                 steps=args.steps, seed=args.seed, device=args.device)
    log.info("auto-labeled %d clips -> %s", len(manifest["samples"]), args.out)
    return 0


def cmd_edit(args) -> int:
    from .edit import edit_video
    from .videoio import read_clip, write_clip

    strengths = parse_strengths(args.strengths)
    video, _ = read_clip(Path(args.video))
    _snapshot({"mode": args.mode, "ckpt": args.ckpt, "video": args.video,
               "strengths": strengths.as_dict(), "steps": args.steps,
               "seed": args.seed}, args.out, "edit")
    out = edit_video(Path(args.ckpt), video, strengths, mode=args.mode,
                     steps=args.steps, seed=args.seed, device=args.device)
    write_clip(Path(args.out) / "clip", out, strengths=strengths.as_dict(),
               source="edited", mode=args.mode)
    log.info("wrote edited clip to %s", Path(args.out) / "clip")
    return 0


def cmd_eval(args) -> int:
    from .datapipe import load_dataset
    from .evalkit import (EvalReport, controllability_probe, fidelity,
                          temporal_consistency, write_report)

    report = EvalReport()
    if args.mode == "removal":
        from .autolabel import remove_weather

        ds = load_dataset(Path(args.data), splits=("val",), sources=("simulation",))
        clips = [p for p in ds.samples if getattr(p.strengths, args.effect) > 0][:args.max_clips]
        if not clips:
            log.error("no val clips with %s > 0", args.effect)
            return 1
        for pair in clips:
            out = remove_weather(Path(args.ckpt), pair.weather, steps=args.steps,
                                 seed=args.seed, device=args.device)
            ps, ss = fidelity(out, pair.clear)
            ps_in, _ = fidelity(pair.weather, pair.clear)
            report.add_row(pair.sample_id, psnr=ps, ssim=ss, input_psnr=ps_in,
                           psnr_gain=ps - ps_in,
                           temporal_consistency=temporal_consistency(out))
    elif args.mode == "probe":
        from .edit import edit_video

        ds = load_dataset(Path(args.data), splits=("val",), sources=("simulation",))
        clips = [(p.sample_id, p.clear, p.meta) for p in ds.samples][:args.max_clips]
        if not clips:
            log.error("no val clips available")
            return 1

        def synthesize(video, s):
            return edit_video(Path(args.ckpt), video, s, mode="synthesize",
                              steps=args.steps, seed=args.seed, device=args.device)

        grid = [float(x) for x in args.s_grid.split(",")]
        result = controllability_probe(synthesize, clips, args.effect, grid)
        report.probe = result.to_dict()
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    snap = {k: v for k, v in vars(args).items() if isinstance(v, (str, int, float, type(None)))}
    _snapshot(snap, out_path.parent, "eval")
    write_report(report, out_path)
    log.info("report written to %s", out_path)
    return 0


def cmd_plot(args) -> int:
    from .evalkit import plot_report, read_report

    report = read_report(Path(args.report))
    written = plot_report(report, Path(args.out),
                          train_log=Path(args.train_log) if args.train_log else None)
    log.info("wrote %d plots under %s", len(written), args.out)
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wxdiff",
                                 description="controllable weather synthesis and "
                                             "removal in videos")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--device", default="cpu")

    p = sub.add_parser("gen-data", help="render the paired dataset")
    p.add_argument("--config", help="DatasetConfig JSON")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True,
                   choices=("removal_base", "synthesis_base", "synthesis_joint"))
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--autolabeled", help="auto-labeled dataset manifest.json")
    p.add_argument("--config", help="StagePlan JSON")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("autolabel", help="pseudo-pair weather-only clips")
    p.add_argument("--ckpt", required=True, help="removal checkpoint .pt")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--steps", type=int, default=30)
    common(p)
    p.set_defaults(func=cmd_autolabel, seed=0)

    p = sub.add_parser("edit", help="synthesize or remove weather on a clip")
    p.add_argument("--mode", required=True, choices=("synthesize", "remove"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="clip directory")
    p.add_argument("--strengths", required=True,
                   help="comma list effect=value; 'all=v' sets every effect")
    p.add_argument("--steps", type=int, default=30)
    common(p)
    p.set_defaults(func=cmd_edit, seed=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--mode", required=True, choices=("removal", "probe"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--effect", default="fog", choices=EFFECTS)
    p.add_argument("--s-grid", default="0,0.25,0.5,0.75,1")
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--max-clips", type=int, default=16)
    common(p)
    p.set_defaults(func=cmd_eval, seed=0)

    p = sub.add_parser("plot", help="render figures from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--train-log", help="train_log.jsonl for a loss curve")
    common(p)
    p.set_defaults(func=cmd_plot)

    return ap


def dispatch(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
