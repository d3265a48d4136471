"""Joint inference loop: belief source -> prompt -> policy -> step, until stop."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .actions import STOP, Action, GoTo, Stop, action_from_str
from .adapters import AdapterError, BeliefSource, NavPolicy
from .comms import (
    BeliefHypothesis,
    CandidateView,
    ParseFailure,
    PromptBundle,
    build_3d_request,
    fmt,
    heading_index,
    parse_action,
)
from .pointcloud import PointCloudOptions, build_cloud
from .scene import Episode, FrameRef, Scene, SceneError

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 15


class Terminal(str, enum.Enum):
    STOPPED = "StoppedByPolicy"
    MAX_STEPS = "MaxSteps"
    ILLEGAL = "IllegalAction"


class IllegalAction(ValueError):
    pass


class EpisodeAborted(RuntimeError):
    def __init__(self, episode_id: str, step: int, cause: BaseException, partial: "Trajectory | None" = None):
        super().__init__(f"episode {episode_id} aborted at step {step}: {cause!r}")
        self.episode_id = episode_id
        self.step = step
        self.cause = cause
        self.partial = partial


@dataclass(frozen=True)
class Observation:
    at: str
    rgb: tuple[FrameRef, ...]
    depth: tuple[FrameRef, ...]
    candidates: tuple[str, ...]
    step_index: int


@dataclass
class History:
    entries: list[tuple[str, Action]] = field(default_factory=list)

    def append(self, at: str, action: Action) -> None:
        self.entries.append((at, action))

    def __len__(self) -> int:
        return len(self.entries)

    def viewpoints(self) -> list[str]:
        return [at for at, _ in self.entries]


@dataclass
class StepLog:
    t: int
    at: str
    candidates: tuple[str, ...]
    prompt: PromptBundle
    hypothesis: BeliefHypothesis
    raw_output: str
    action: Action
    warning: str | None = None


@dataclass
class Trajectory:
    episode_id: str
    scene_id: str
    start: str
    goal: str
    gt_path_length: float
    visited: list[str]
    length_m: float
    terminal: Terminal
    per_step_log: list[StepLog] = field(default_factory=list)

    @property
    def final(self) -> str:
        return self.visited[-1]

    @property
    def steps_taken(self) -> int:
        return len(self.visited) - 1


@dataclass
class EngineConfig:
    max_steps: int = DEFAULT_MAX_STEPS
    seed: int = 0
    pointcloud: PointCloudOptions = field(default_factory=PointCloudOptions)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def derive_seed(seed: int, *parts: object) -> int:
    h = hashlib.sha256(repr((seed,) + parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def observe(scene: Scene, at: str, t: int) -> Observation:
    frames = tuple(fr for _, fr in sorted(scene.viewpoints[at].frames.items()))
    return Observation(at, frames, frames, tuple(sorted(scene.navigable_from(at))), t)


def step(scene: Scene, current: str, action: Action) -> str:
    if isinstance(action, Stop):
        return current
    if action.target not in scene.navigable_from(current):
        raise IllegalAction(f"{action.target!r} is not navigable from {current!r}")
    return action.target


def _candidate_views(scene: Scene, at: str, candidates: Sequence[str]) -> list[CandidateView]:
    here = scene.viewpoints[at].position
    return [
        CandidateView(c, heading_index(here, scene.viewpoints[c].position, scene.headings))
        for c in candidates
    ]


def run_episode(
    scene: Scene,
    episode: Episode,
    policy: NavPolicy,
    belief_source: BeliefSource | None,
    config: EngineConfig | None = None,
) -> Trajectory:
    """Run one episode to Stop, an illegal move, or the step budget."""
    config = config or EngineConfig()
    if episode.scene_id != scene.id:
        raise SceneError(f"episode {episode.id} belongs to scene {episode.scene_id}, not {scene.id}")
    at = episode.start
    visited = [at]
    history = History()
    traj = Trajectory(
        episode.id, scene.id, episode.start, episode.goal, episode.gt_path_length,
        visited, 0.0, Terminal.MAX_STEPS,
    )
    terminal = Terminal.MAX_STEPS
    for t in range(config.max_steps):
        obs = observe(scene, at, t)
        hyp = BeliefHypothesis("", t)
        try:
            if belief_source is not None:
                cloud = build_cloud(scene, at, config.pointcloud, derive_seed(config.seed, episode.id, t))
                request = build_3d_request(episode.task_kind, episode.instruction)
                out = belief_source(request, cloud, t)
                hyp = out if isinstance(out, BeliefHypothesis) else BeliefHypothesis(str(out), t)
            prompt = fmt(
                hyp, episode.instruction, _candidate_views(scene, at, obs.candidates),
                history.viewpoints(), episode.task_kind,
            )
            raw = policy(prompt, obs, history)
        except AdapterError as e:
            traj.length_m = scene.path_length(visited)
            raise EpisodeAborted(episode.id, t, e, traj) from e

        warning = None
        if isinstance(raw, (GoTo, Stop)):
            action, raw_text = raw, str(raw)
        else:
            raw_text = str(raw)
            try:
                # a dead end leaves stop as the only legal action
                action = parse_action(raw_text, obs.candidates) if obs.candidates else STOP
            except ParseFailure:
                action = STOP
                warning = "parse_failure"
                log.warning("episode %s step %d: unparseable output %r, stopping", episode.id, t, raw_text)
        traj.per_step_log.append(StepLog(t, at, obs.candidates, prompt, hyp, raw_text, action, warning))
        if isinstance(action, Stop):
            terminal = Terminal.STOPPED
            break
        try:
            at = step(scene, at, action)
        except IllegalAction:
            log.warning("episode %s step %d: illegal action %s at %s", episode.id, t, action, at)
            terminal = Terminal.ILLEGAL
            break
        visited.append(at)
        history.append(obs.at, action)
    traj.terminal = terminal
    traj.length_m = scene.path_length(visited)
    return traj


@dataclass
class AbortRecord:
    episode_id: str
    scene_id: str
    step: int
    error: str
    partial: Trajectory | None = None


def run_episodes(
    scenes: Mapping[str, Scene],
    episodes: Iterable[Episode],
    make_policy: Callable[[Scene, Episode], NavPolicy],
    make_belief: Callable[[Scene, Episode], BeliefSource | None],
    config: EngineConfig | None = None,
    jobs: int = 1,
) -> list[Trajectory | AbortRecord]:
    """Run episodes (in parallel when ``jobs > 1``); output is sorted by episode id."""
    config = config or EngineConfig()

    def one(ep: Episode) -> Trajectory | AbortRecord:
        scene = scenes[ep.scene_id]
        try:
            return run_episode(scene, ep, make_policy(scene, ep), make_belief(scene, ep), config)
        except EpisodeAborted as e:
            log.error("%s", e)
            return AbortRecord(ep.id, ep.scene_id, e.step, repr(e.cause), e.partial)

    eps = sorted(episodes, key=lambda e: e.id)
    if jobs <= 1:
        return [one(ep) for ep in eps]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, eps))


def step_records(traj: Trajectory) -> list[dict]:
    """The JSON-lines records for one trajectory (one per step)."""
    out = []
    for i, s in enumerate(traj.per_step_log):
        rec = {
            "episode_id": traj.episode_id,
            "scene_id": traj.scene_id,
            "t": s.t,
            "at": s.at,
            "candidates": list(s.candidates),
            "hypothesis": s.hypothesis.text,
            "prompt_sha256": s.prompt.sha256,
            "raw_output": s.raw_output,
            "action": str(s.action),
        }
        if s.hypothesis.truncated:
            rec["hypothesis_truncated"] = True
        if s.warning:
            rec["warning"] = s.warning
        if i == len(traj.per_step_log) - 1:
            rec["terminal"] = traj.terminal.value
            rec["start"] = traj.start
            rec["goal"] = traj.goal
            rec["final"] = traj.final
            rec["gt_path_length"] = traj.gt_path_length
            rec["length_m"] = traj.length_m
        out.append(rec)
    return out


def result_records(result: Trajectory | AbortRecord) -> list[dict]:
    if isinstance(result, Trajectory):
        return step_records(result)
    recs = []
    if result.partial is not None:
        recs = step_records(result.partial)
        for r in recs:
            for k in ("terminal", "start", "goal", "final", "gt_path_length", "length_m"):
                r.pop(k, None)
    recs.append({
        "episode_id": result.episode_id,
        "scene_id": result.scene_id,
        "t": result.step,
        "aborted": True,
        "error": result.error,
    })
    return recs


def write_trajectories(results: Iterable[Trajectory | AbortRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            for rec in result_records(r):
                f.write(json.dumps(rec) + "\n")


@dataclass
class LoggedEpisode:
    """A trajectory as recovered from a JSON-lines log."""

    episode_id: str
    scene_id: str
    start: str
    goal: str
    gt_path_length: float
    visited: list[str]
    terminal: Terminal
    records: list[dict]


def read_trajectories(path: str | Path) -> tuple[list[LoggedEpisode], list[dict]]:
    """Parse a trajectory log into completed episodes and abort records."""
    groups: dict[str, list[dict]] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                groups.setdefault(rec["episode_id"], []).append(rec)
    done, aborts = [], []
    for eid, recs in groups.items():
        if any(r.get("aborted") for r in recs):
            aborts.append(next(r for r in recs if r.get("aborted")))
            continue
        last = recs[-1]
        if "terminal" not in last:
            raise ValueError(f"episode {eid}: log ends without a terminal record")
        visited = [r["at"] for r in recs]
        terminal = Terminal(last["terminal"])
        act = action_from_str(last["action"])
        if terminal is Terminal.MAX_STEPS and isinstance(act, GoTo):
            visited.append(act.target)
        if visited[-1] != last["final"]:
            raise ValueError(f"episode {eid}: reconstructed final {visited[-1]} != logged {last['final']}")
        done.append(LoggedEpisode(
            eid, last["scene_id"], last["start"], last["goal"], float(last["gt_path_length"]),
            visited, terminal, recs,
        ))
    return done, aborts
