"""Navigation metrics: TL, NE, SR, SPL, GP and OSR.

Distances to the goal use the graph geodesic by default; pass
``distance="euclidean"`` for straight-line distances. Success is inclusive
(``NE <= threshold``).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

from .scene import Scene, Unreachable

DEFAULT_SUCCESS_THRESHOLD = 3.0


class SPLClampWarning(UserWarning):
    """Executed path shorter than the reference path; efficiency ratio clamped to 1."""


class UnreachableWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    scene: Scene
    visited: tuple[str, ...]
    goal: str
    gt_path_length: float
    success_threshold: float = DEFAULT_SUCCESS_THRESHOLD
    failed: bool = False
    episode_id: str = ""

    def __post_init__(self):
        if not self.visited:
            raise ValueError("trajectory must visit at least its start")
        if not self.success_threshold > 0:
            raise ValueError("success threshold must be positive")
        if self.gt_path_length < 0:
            raise ValueError("gt_path_length must be non-negative")

    @classmethod
    def from_trajectory(cls, traj, scene: Scene, threshold: float = DEFAULT_SUCCESS_THRESHOLD) -> "EpisodeResult":
        """Build from an engine ``Trajectory`` or a ``LoggedEpisode``."""
        return cls(
            scene,
            tuple(traj.visited),
            traj.goal,
            traj.gt_path_length,
            threshold,
            failed=getattr(traj.terminal, "value", traj.terminal) == "IllegalAction",
            episode_id=traj.episode_id,
        )

    @property
    def start(self) -> str:
        return self.visited[0]

    @property
    def final(self) -> str:
        return self.visited[-1]

    @cached_property
    def trajectory_length(self) -> float:
        return self.scene.path_length(self.visited)


def _dist(result: EpisodeResult, a: str, distance: str) -> float:
    d = result.scene.distance(a, result.goal, distance)
    return math.inf if d is Unreachable else float(d)


def trajectory_length(result: EpisodeResult) -> float:
    return result.trajectory_length


def nav_error(result: EpisodeResult, distance: str = "geodesic") -> float:
    """Distance from the final viewpoint to the goal; ``inf`` if unreachable."""
    return _dist(result, result.final, distance)


def success(result: EpisodeResult, distance: str = "geodesic") -> int:
    if result.failed:
        return 0
    return int(nav_error(result, distance) <= result.success_threshold)


def oracle_success(result: EpisodeResult, distance: str = "geodesic") -> int:
    best = min(_dist(result, v, distance) for v in result.visited)
    return int(best <= result.success_threshold)


def goal_progress(result: EpisodeResult, distance: str = "geodesic") -> float:
    """Reduction in distance-to-goal from start to final (positive = progress)."""
    d0 = _dist(result, result.start, distance)
    d1 = _dist(result, result.final, distance)
    if math.isinf(d0) or math.isinf(d1):
        warnings.warn(UnreachableWarning(f"episode {result.episode_id}: goal unreachable, GP=0"))
        return 0.0
    return d0 - d1


def _spl_term(result: EpisodeResult, distance: str) -> tuple[float, str | None]:
    if not success(result, distance):
        return 0.0, None
    t_ref = result.gt_path_length
    t_pred = result.trajectory_length
    if t_pred < t_ref:
        note = f"episode {result.episode_id}: executed {t_pred:.6g} m < reference {t_ref:.6g} m; ratio clamped to 1"
        return 1.0, note
    if t_pred == 0.0:
        return 1.0, None
    return t_ref / max(t_pred, t_ref), None


def spl(results: Sequence[EpisodeResult], distance: str = "geodesic") -> float:
    if not results:
        raise ValueError("spl needs at least one result")
    total = 0.0
    for r in results:
        term, note = _spl_term(r, distance)
        if note:
            warnings.warn(SPLClampWarning(note))
        total += term
    return total / len(results)


@dataclass
class MetricReport:
    n_episodes: int
    TL: float
    NE: float
    SR: float
    SPL: float
    OSR: float
    GP: float
    distance: str = "geodesic"
    success_threshold: float = DEFAULT_SUCCESS_THRESHOLD
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        cols = ["N", "TL", "NE", "SR", "SPL", "OSR", "GP"]
        vals = [
            str(self.n_episodes),
            f"{self.TL:.2f}",
            f"{self.NE:.2f}",
            f"{self.SR:.2f}",
            f"{self.SPL:.2f}",
            f"{self.OSR:.2f}",
            f"{self.GP:.2f}",
        ]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{row}"


def aggregate(results: Sequence[EpisodeResult], distance: str = "geodesic") -> MetricReport:
    """Per-episode metrics averaged over ``results`` in the given order."""
    if not results:
        raise ValueError("aggregate needs at least one result")
    thresholds = {r.success_threshold for r in results}
    if len(thresholds) != 1:
        raise ValueError(f"mixed success thresholds: {sorted(thresholds)}")
    notes: list[str] = []
    tl = ne = sr = spl_sum = osr = gp = 0.0
    for r in results:
        tl += r.trajectory_length
        ne += nav_error(r, distance)
        sr += success(r, distance)
        term, note = _spl_term(r, distance)
        if note:
            notes.append(note)
        spl_sum += term
        osr += oracle_success(r, distance)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            gp += goal_progress(r, distance)
        notes.extend(str(w.message) for w in caught)
    n = len(results)
    return MetricReport(
        n_episodes=n,
        TL=tl / n,
        NE=ne / n,
        SR=sr / n,
        SPL=spl_sum / n,
        OSR=osr / n,
        GP=gp / n,
        distance=distance,
        success_threshold=thresholds.pop(),
        warnings=notes,
    )
