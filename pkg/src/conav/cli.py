"""``conav`` command-line entry point.

Exit codes: 0 ok, 1 runtime failure (e.g. aborted episodes), 2 usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .adapters import (
    GEN_3D_MODEL,
    GEN_NAV_AGENT,
    FirstCandidatePolicy,
    RandomPolicy,
    RemoteBeliefSource,
    RemoteClient,
    RemotePolicy,
    ScriptedBeliefSource,
    ScriptedTextPolicy,
    greedy_policy,
    load_endpoint_config,
    oracle_policy,
)
from .comms import TEMPLATE_VERSION, all_templates, template_hashes
from .config import ConfigError, load_run_config
from .datagen import export_alignment_records, write_manifests
from .engine import AbortRecord, EngineConfig, derive_seed, read_trajectories, run_episodes, write_trajectories
from .metrics import EpisodeResult, aggregate
from .pointcloud import (
    PointCloud,
    load_masks,
    remove_outliers,
    uniform_sample,
    viewpoint_cloud,
    write_cloud,
    write_ply,
)
from .scene import SceneError, load_episodes, load_scene, load_scenes

log = logging.getLogger("conav")


class UsageError(Exception):
    pass


def _load_json(path: str) -> object:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def _policy_factory(spec: str, threshold: float, seed: int):
    kind, _, arg = spec.partition(":")
    if kind == "oracle":
        return lambda scene, ep: oracle_policy(ep)
    if kind == "greedy":
        return lambda scene, ep: greedy_policy(scene, ep.goal, threshold)
    if kind == "first":
        return lambda scene, ep: FirstCandidatePolicy()
    if kind == "random":
        return lambda scene, ep: RandomPolicy(derive_seed(seed, "policy", ep.id))
    if kind == "scripted":
        table = _load_json(arg)
        return lambda scene, ep: ScriptedTextPolicy(list(table.get(ep.id, [])))
    if kind == "remote":
        client = RemoteClient(load_endpoint_config(arg))
        policy = RemotePolicy(client, GEN_NAV_AGENT)
        return lambda scene, ep: policy
    raise ConfigError(f"unknown policy backend {spec!r}")


def _belief_factory(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "null":
        return lambda scene, ep: None
    if kind == "scripted":
        table = _load_json(arg)
        flat = isinstance(table, dict) and all(str(k).isdigit() for k in table)
        if flat:
            source = ScriptedBeliefSource(table)
            return lambda scene, ep: source
        return lambda scene, ep: ScriptedBeliefSource(table.get(ep.id, {}))
    if kind == "remote":
        client = RemoteClient(load_endpoint_config(arg))
        source = RemoteBeliefSource(client, GEN_3D_MODEL)
        return lambda scene, ep: source
    raise ConfigError(f"unknown belief backend {spec!r}")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    overrides = {
        "scenes": args.scenes,
        "episodes": args.episodes,
        "policy": args.policy,
        "belief": args.belief,
        "max_steps": args.max_steps,
        "threshold": args.threshold,
        "seed": args.seed,
        "jobs": args.jobs,
        "out": args.out,
    }
    cfg = load_run_config(args.config, overrides)
    if args.num_points is not None:
        cfg.pointcloud.num_points = args.num_points
    cfg.validate()
    scenes = load_scenes(cfg.scenes)
    episodes = load_episodes(cfg.episodes, scenes)
    make_policy = _policy_factory(cfg.policy, cfg.threshold, cfg.seed)
    make_belief = _belief_factory(cfg.belief)
    engine_cfg = EngineConfig(cfg.max_steps, cfg.seed, cfg.pointcloud)
    results = run_episodes(scenes, episodes, make_policy, make_belief, engine_cfg, cfg.jobs)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories(results, out / "trajectories.jsonl")
    _dump([ep.to_dict() for ep in episodes], out / "episodes.json")
    aborts = [r for r in results if isinstance(r, AbortRecord)]
    meta = {
        "conav_version": __version__,
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "template_version": TEMPLATE_VERSION,
        "template_sha256": template_hashes(),
        "n_episodes": len(results),
        "n_aborted": len(aborts),
        "aborted": [{"episode_id": a.episode_id, "step": a.step, "error": a.error} for a in aborts],
    }
    _dump(meta, out / "metadata.json")
    print(json.dumps({"out": str(out), "episodes": len(results), "aborted": len(aborts)}))
    return 1 if aborts else 0


def _results_from_log(traj_path: Path, scenes, threshold: float) -> list[EpisodeResult]:
    done, aborts = read_trajectories(traj_path)
    if aborts:
        log.warning("%d aborted episodes excluded from scoring", len(aborts))
    results = []
    for ep in done:
        if ep.scene_id not in scenes:
            raise UsageError(f"trajectory {ep.episode_id} references unknown scene {ep.scene_id!r}")
        results.append(EpisodeResult.from_trajectory(ep, scenes[ep.scene_id], threshold))
    if not results:
        raise UsageError(f"{traj_path}: no scorable trajectories")
    return results


def _emit_report(report, json_out: str | None) -> None:
    print(report.to_table())
    print(report.to_json())
    if json_out:
        Path(json_out).write_text(report.to_json() + "\n")


def cmd_eval(args) -> int:
    path = Path(args.trajectories)
    if not path.exists():
        raise UsageError(f"{path} does not exist")
    scenes = load_scenes(args.scenes, check_files=False)
    results = _results_from_log(path, scenes, args.threshold)
    _emit_report(aggregate(results, args.metric_distance), args.json)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    meta_path = run / "metadata.json"
    if not meta_path.exists():
        raise UsageError(f"{run} is not a run directory (no metadata.json)")
    meta = json.loads(meta_path.read_text())
    cfg = meta["config"]
    scenes = load_scenes(cfg["scenes"], check_files=False)
    results = _results_from_log(run / "trajectories.jsonl", scenes, cfg["threshold"])
    report = aggregate(results, args.metric_distance)
    out = {
        "metrics": report.to_dict(),
        "seed": meta["seed"],
        "n_aborted": meta["n_aborted"],
        "pointcloud": cfg["pointcloud"],
        "generation": cfg["generation"],
        "mixture": cfg["mixture"],
        "template_sha256": meta["template_sha256"],
    }
    (run / "report.txt").write_text(report.to_table() + "\n")
    _dump(out, run / "report.json")
    print(report.to_table())
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _parse_mask_args(items: Sequence[str] | None) -> dict[int, list]:
    masks: dict[int, list] = {}
    for item in items or ():
        heading, sep, path = item.partition(":")
        if not sep:
            raise UsageError(f"--masks expects HEADING:FILE.npz, got {item!r}")
        masks.setdefault(int(heading), []).extend(load_masks(path))
    return masks


def _make_cloud(scene, vid, args, masks) -> PointCloud | None:
    if not scene.viewpoints[vid].frames:
        return None
    cloud = viewpoint_cloud(scene, vid, masks=masks or None)
    if cloud.is_empty:
        return None
    if args.remove_outliers:
        cloud = remove_outliers(cloud)
    return uniform_sample(cloud, args.num_points, derive_seed(args.seed, scene.id, vid))


def cmd_pcgen(args) -> int:
    scene = load_scene(args.scene)
    masks = _parse_mask_args(args.masks)
    if args.all:
        out_dir = Path(args.out) / scene.id
        out_dir.mkdir(parents=True, exist_ok=True)
        written = {}
        for vid in sorted(scene.viewpoints):
            cloud = _make_cloud(scene, vid, args, {})
            if cloud is None:
                continue
            p = out_dir / f"{vid}.pc6"
            write_cloud(cloud, p)
            written[vid] = hashlib.sha256(p.read_bytes()).hexdigest()
        print(json.dumps({"scene": scene.id, "clouds": written}, indent=2))
        return 0
    if args.viewpoint is None:
        raise UsageError("pcgen needs --viewpoint or --all")
    if args.viewpoint not in scene.viewpoints:
        raise UsageError(f"unknown viewpoint {args.viewpoint!r}")
    cloud = _make_cloud(scene, args.viewpoint, args, masks)
    if cloud is None:
        print(f"viewpoint {args.viewpoint} has no valid depth", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cloud(cloud, out)
    if args.ply:
        write_ply(cloud, args.ply)
    print(json.dumps({"out": str(out), "points": len(cloud), "sha256": hashlib.sha256(out.read_bytes()).hexdigest()}))
    return 0


def _run_dirs(root: Path) -> list[Path]:
    if (root / "trajectories.jsonl").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/trajectories.jsonl"))


def cmd_export_align(args) -> int:
    root = Path(args.inp)
    runs = _run_dirs(root)
    if not runs:
        raise UsageError(f"no run directories under {root}")
    pairs = []
    scenes = {}
    for run in runs:
        meta = json.loads((run / "metadata.json").read_text())
        for sid, s in load_scenes(meta["config"]["scenes"], check_files=False).items():
            scenes.setdefault(sid, s)
        episodes = {e.id: e for e in load_episodes(run / "episodes.json", scenes)}
        done, _ = read_trajectories(run / "trajectories.jsonl")
        pairs.extend((episodes[d.episode_id], d.records) for d in done)
    cloud_dir = Path(args.clouds) if args.clouds else root / "clouds"
    stats: dict = {}
    written = export_alignment_records(pairs, scenes, args.out, cloud_dir, args.with_hypotheses, stats)
    print(json.dumps({"out": args.out, "written": written, "skipped": stats.get("skipped", 0)}))
    return 0


def cmd_templates(args) -> int:
    templates = all_templates()
    hashes = template_hashes()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in templates.items():
            (out / name).write_text(text)
        _dump({"version": TEMPLATE_VERSION, "sha256": hashes}, out / "index.json")
    for name, text in templates.items():
        print(f"=== {name} ({TEMPLATE_VERSION}, sha256 {hashes[name]}) ===")
        print(text)
    return 0


def cmd_manifests(args) -> int:
    for p in write_manifests(args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run episodes and write trajectory logs")
    p.add_argument("--config", help="TOML run config; flags override it")
    p.add_argument("--scenes", nargs="+")
    p.add_argument("--episodes")
    p.add_argument("--policy", help="oracle | greedy | first | random | scripted:FILE | remote:ENDPOINT")
    p.add_argument("--belief", help="null | scripted:FILE | remote:ENDPOINT")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--num-points", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a trajectory log")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=3.0)
    p.add_argument("--metric-distance", choices=["geodesic", "euclidean"], default="geodesic")
    p.add_argument("--json", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="score a run directory using its config snapshot")
    p.add_argument("--run", required=True)
    p.add_argument("--metric-distance", choices=["geodesic", "euclidean"], default="geodesic")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pcgen", help="build a sampled point cloud from RGB-D frames")
    p.add_argument("--scene", required=True)
    p.add_argument("--viewpoint")
    p.add_argument("--all", action="store_true", help="every viewpoint with frames; --out is a directory")
    p.add_argument("--masks", nargs="*", metavar="HEADING:FILE.npz")
    p.add_argument("--num-points", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--remove-outliers", action="store_true")
    p.add_argument("--ply", help="also write an ASCII PLY here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pcgen)

    p = sub.add_parser("export-align", help="export alignment supervision records")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clouds", help="cloud directory (default: IN/clouds)")
    p.add_argument("--with-hypotheses", action="store_true", help="include earlier hypotheses in history")
    p.set_defaults(func=cmd_export_align)

    p = sub.add_parser("templates", help="prompt template utilities")
    tsub = p.add_subparsers(dest="templates_command", required=True)
    d = tsub.add_parser("dump", help="print (and optionally write) the prompt templates")
    d.add_argument("--out")
    d.set_defaults(func=cmd_templates)

    p = sub.add_parser("manifests", help="write curriculum stage manifests")
    p.add_argument("--out", default="manifests")
    p.set_defaults(func=cmd_manifests)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, SceneError) as e:
        print(f"conav: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
