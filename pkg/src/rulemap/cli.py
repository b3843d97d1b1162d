"""Command line: synth | run | eval | render | tokenize | detokenize."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .codec import Prompt, from_text, parse, serialize_segment, to_text
from .config import RunConfig
from .errors import BadScenario, ConfigError, MalformedSequence, MissingPair, RulemapError
from .eval import aggregate, evaluate, format_table
from .geometry import graph_to_world, slice_graph
from .io import atomic_write, dumps, graph_to_json, load_any, load_clip, load_map, save_clip, save_map
from .map_model import Pose, validate_clip
from .models import NoiseSpec, make_model
from .pipeline import build_request, plan_segments, run_clip, MapRuleCache
from .render import render_svg
from .synth import SCENARIOS, generate

log = logging.getLogger("rulemap")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MODEL = 3
EXIT_PROTOCOL = 4

# flag name -> RunConfig field
_CONFIG_FLAGS = {
    "width_bins": int,
    "height_bins": int,
    "bin_size": float,
    "overlap_ratio": float,
    "images_per_segment": int,
    "angle_bins": int,
    "adapter_timeout": float,
    "join_epsilon": float,
    "join_heading_deg": float,
    "half_width": float,
    "resolution": float,
    "seed": int,
    "jobs": int,
}
_NOISE_FLAGS = {
    "jitter": "point_jitter_sigma",
    "lane_drop": "lane_drop_prob",
    "rule_drop": "rule_drop_prob",
    "visibility": "sign_visibility_segments",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", help="JSON file with RunConfig fields")
    for name, typ in _CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=typ, default=None)
    g.add_argument("--backend", choices=("oracle", "noisy", "adapter"), default=None)
    g.add_argument("--adapter-cmd", default=None, help="adapter command line (shell-quoted)")
    g.add_argument("--jitter", type=float, default=None, help="noisy backend: point jitter sigma, meters")
    g.add_argument("--lane-drop", type=float, default=None)
    g.add_argument("--rule-drop", type=float, default=None)
    g.add_argument("--visibility", type=int, default=None, help="noisy backend: segments a sign stays visible")
    g.add_argument("--no-cache", action="store_true", help="run every segment with an empty cache")
    g.add_argument("--rule-keys", default=None, help="comma-separated rule key vocabulary")


def resolve_config(args) -> RunConfig:
    """Defaults, then the --config file, then explicit flags, then the environment."""
    import shlex

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for name in _CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    if getattr(args, "backend", None):
        changes["backend"] = args.backend
    if getattr(args, "adapter_cmd", None):
        changes["adapter_command"] = tuple(shlex.split(args.adapter_cmd))
    if getattr(args, "no_cache", False):
        changes["use_cache"] = False
    if getattr(args, "rule_keys", None):
        changes["rule_keys"] = tuple(k.strip() for k in args.rule_keys.split(",") if k.strip())
    noise = {flag: getattr(args, flag, None) for flag in _NOISE_FLAGS}
    if any(v is not None for v in noise.values()):
        base = cfg.noise.__dict__.copy()
        base.update({_NOISE_FLAGS[k]: v for k, v in noise.items() if v is not None})
        changes["noise"] = NoiseSpec(**base)
    cfg = cfg.replace(**changes) if changes else cfg
    return cfg.with_env()


def _expand(paths, pattern: str = "*.json") -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            skip = lambda q: q.name == "run_log.json" or (pattern == "*.json" and q.name.endswith(".map.json"))
            out.extend(q for q in sorted(p.glob(pattern)) if not skip(q))
        else:
            out.append(p)
    return out


def _prompt(text: str | None) -> Prompt | None:
    if not text:
        return None
    try:
        u, v = (int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--prompt expects u,v integers, got {text!r}") from None
    return Prompt(coord=(u, v))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    names = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    out = Path(args.out)
    written = 0
    for name in names:
        for clip in generate(name, args.count, args.seed):
            save_clip(clip, out / f"{clip.clip_id}.json")
            written += 1
    print(f"wrote {written} clip(s) to {out}")
    return EXIT_OK


def _run_one(path: Path, config: RunConfig, out: Path, prompt):
    entry = {"file": str(path), "clip_id": None, "status": "ok", "segments": []}
    start = time.perf_counter()
    try:
        clip = load_clip(path)
    except (RulemapError, OSError) as exc:
        entry.update(status="invalid", error=str(exc))
        return entry
    entry["clip_id"] = clip.clip_id
    errors = [str(f) for f in validate_clip(clip, config.rule_keys) if f.severity == "error"]
    if errors:
        entry.update(status="invalid", error="; ".join(errors))
        return entry
    try:
        with make_model(config) as model:
            run = run_clip(clip, model, config, prompt)
    except RulemapError as exc:
        entry.update(status="invalid", error=f"{type(exc).__name__}: {exc}")
        return entry
    save_map(run, out / f"{clip.clip_id}.map.json")
    for seg in run.segments:
        entry["segments"].append(
            {
                "index": seg.index,
                "seconds": round(seg.seconds, 6),
                "parse_diagnostics": [d.message for d in seg.diagnostics],
                "failure": seg.failure,
                "error": seg.error,
                "output_tokens": seg.output_text,
                "model_info": seg.model_info,
            }
        )
    kinds = {s.failure for s in run.segments if s.failure}
    if "protocol" in kinds:
        entry["status"] = "protocol_violation"
    elif kinds:
        entry["status"] = "model_failure"
    entry["gaps"] = len(run.stitched.diagnostics.get("gaps", []))
    entry["seconds"] = round(time.perf_counter() - start, 6)
    return entry


def cmd_run(args) -> int:
    config = resolve_config(args)
    prompt = _prompt(args.prompt)
    out = Path(args.out)
    paths = _expand(args.clips)
    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        entries = list(pool.map(lambda p: _run_one(p, config, out, prompt), paths))
    statuses = {e["status"] for e in entries}
    if "protocol_violation" in statuses:
        code = EXIT_PROTOCOL
    elif "model_failure" in statuses:
        code = EXIT_MODEL
    elif "invalid" in statuses:
        code = EXIT_VALIDATION
    else:
        code = EXIT_OK
    run_log = {"version": __version__, "config": config.to_dict(), "clips": entries, "exit_code": code}
    atomic_write(out / "run_log.json", dumps(run_log))
    for e in entries:
        print(f"{e['clip_id'] or e['file']}: {e['status']}" + (f" ({e['error']})" if e.get("error") else ""))
    return code


def cmd_eval(args) -> int:
    config = resolve_config(args)
    preds = {}
    for p in _expand(args.pred, "*.map.json"):
        m = load_map(p)
        preds[m.clip_id] = m.graph
    gts = {}
    for p in _expand(args.gt):
        c = load_clip(p)
        gts[c.clip_id] = c.ground_truth
    missing = sorted(set(gts) ^ set(preds))
    if missing and not args.allow_missing:
        raise MissingPair(f"no prediction/ground-truth pair for: {', '.join(missing)}")
    reports = [
        evaluate(preds[cid], gts[cid], cid, config.half_width, config.resolution, optimal=args.optimal)
        for cid in sorted(set(gts) & set(preds))
    ]
    total = aggregate(reports)
    print(format_table(reports, total))
    if args.out:
        record = {
            "config": {"half_width": config.half_width, "resolution": config.resolution, "optimal": args.optimal},
            "clips": [r.to_json() for r in reports],
            "aggregate": total.to_json(detail=False),
            "missing": missing,
        }
        atomic_write(args.out, dumps(record))
    return EXIT_OK


def cmd_render(args) -> int:
    kind, obj = load_any(args.input)
    frames = []
    trajectory = None
    if kind == "clip":
        graph, trajectory, title = obj.ground_truth, obj.trajectory, obj.clip_id
        if args.frames:
            frames = list(plan_segments(obj.trajectory, resolve_config(args).frame_template()).frames)
    else:
        graph, title = obj.graph, obj.clip_id
        frames = obj.frames if args.frames else []
        if args.clip:
            trajectory = load_clip(args.clip).trajectory
    atomic_write(args.output, render_svg(graph, trajectory, frames, title))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    config = resolve_config(args)
    clip = load_clip(args.clip)
    plan = plan_segments(clip.trajectory, config.frame_template())
    if not 0 <= args.segment < len(plan):
        raise ConfigError(f"segment {args.segment} out of range (clip has {len(plan)})")
    frame = plan.frames[args.segment]
    if args.input:
        req = build_request(clip, args.segment, frame, MapRuleCache(), _prompt(args.prompt), config)
        tokens = req.input_tokens
    else:
        tokens = serialize_segment(slice_graph(clip.ground_truth, frame), frame, config.rule_keys)
    print(to_text(tokens))
    return EXIT_OK


def cmd_detokenize(args) -> int:
    config = resolve_config(args)
    text = Path(args.file).read_text(encoding="utf-8") if args.file else args.text
    if text is None:
        text = sys.stdin.read()
    template = config.frame_template()
    if args.clip is not None:
        clip = load_clip(args.clip)
        frame = plan_segments(clip.trajectory, template).frames[args.segment]
    elif args.center:
        frame = template.recentered(Pose(0.0, *(float(c) for c in args.center.split(","))))
    else:
        frame = template
    graph, diags = parse(from_text(text), frame, recover=args.recover, rule_keys=config.rule_keys)
    out = graph_to_json(graph_to_world(graph, frame) if args.world else graph)
    out["diagnostics"] = [{"index": d.index, "expected": list(d.expected), "message": d.message} for d in diags]
    sys.stdout.write(dumps(out))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rulemap", description="Lane and traffic-rule map building from clip segments.")
    ap.add_argument("--version", action="version", version=f"rulemap {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic clips")
    p.add_argument("scenario", help=f"one of {', '.join(SCENARIOS)}, curve(radius=R), or 'all'")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="build maps for clip files")
    p.add_argument("clips", nargs="+", help="clip files or directories")
    p.add_argument("--out", required=True, help="output directory for map files and run_log.json")
    p.add_argument("--prompt", help="sign prompt as u,v image coordinates")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score map files against clip ground truth")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--optimal", action="store_true", help="optimal instead of greedy lane assignment")
    p.add_argument("--allow-missing", action="store_true", help="score only clips present on both sides")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="draw a clip or map file as SVG")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--frames", action="store_true", help="overlay dashed segment outlines")
    p.add_argument("--clip", help="clip file supplying the trajectory when rendering a map")
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("tokenize", help="print the token text for one segment of a clip")
    p.add_argument("clip")
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--input", action="store_true", help="print the model input sequence instead of the target")
    p.add_argument("--prompt", help="sign prompt u,v (with --input)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("detokenize", help="parse token text into a map fragment (JSON)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--text")
    src.add_argument("--file")
    p.add_argument("--center", help="frame center pose x,y,theta (world)")
    p.add_argument("--clip", help="take the frame from this clip's plan")
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--world", action="store_true", help="emit world coordinates")
    p.add_argument("--recover", action="store_true", help="skip malformed lane blocks instead of failing")
    _add_config_flags(p)
    p.set_defaults(func=cmd_detokenize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MalformedSequence as exc:
        print(f"error: malformed token sequence at index {exc.index}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BadScenario, ConfigError, MissingPair, RulemapError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
