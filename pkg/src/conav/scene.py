"""Viewpoint-graph environment: scenes, episodes and geodesic queries."""

from __future__ import annotations

import heapq
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_HEADINGS = 12

TASK_KINDS = ("VLN", "SpatialQA")


class SceneError(ValueError):
    """Malformed or inconsistent scene / episode data."""


class UnknownViewpoint(KeyError):
    pass


class _Unreachable:
    """Sentinel distance for viewpoint pairs with no connecting path."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Unreachable"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_Unreachable, ())


Unreachable = _Unreachable()


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a camera-to-world pose (4x4, row-major)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: tuple[float, ...] = tuple(np.eye(4).ravel().tolist())

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneError(f"principal point ({self.cx}, {self.cy}) outside image")
        if len(self.pose) != 16:
            raise SceneError("pose must have 16 entries")
        mat = self.pose_matrix
        if not np.all(np.isfinite(mat)):
            raise SceneError("pose has non-finite entries")
        rot = mat[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or not np.allclose(mat[3], [0, 0, 0, 1]):
            raise SceneError("pose is not a rigid transform")

    @property
    def pose_matrix(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=np.float64).reshape(4, 4)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Camera":
        pose = d.get("pose")
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            pose=tuple(float(x) for x in pose) if pose is not None else tuple(np.eye(4).ravel().tolist()),
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pose": list(self.pose),
        }


@dataclass(frozen=True)
class FrameRef:
    heading: int
    rgb_path: str | None
    depth_path: str | None
    camera: Camera

    def resolve(self, base: Path | None) -> tuple[Path | None, Path | None]:
        def _r(p):
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() or base is None else base / p

        return _r(self.rgb_path), _r(self.depth_path)


@dataclass(frozen=True)
class Viewpoint:
    id: str
    position: tuple[float, float, float]
    frames: Mapping[int, FrameRef] = field(default_factory=dict)

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable viewpoint graph.

    ``adjacency`` maps each viewpoint id to the ids navigable from it; edges are
    undirected and weighted by Euclidean distance between positions.
    """

    id: str
    viewpoints: Mapping[str, Viewpoint]
    adjacency: Mapping[str, frozenset[str]]
    base_dir: Path | None = None
    headings: int = DEFAULT_HEADINGS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: Any = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        validate_scene(self)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and dict(self.viewpoints) == dict(other.viewpoints)
            and dict(self.adjacency) == dict(other.adjacency)
            and self.headings == other.headings
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def edges(self) -> list[tuple[str, str]]:
        """Undirected edges, each listed once with ids in sorted order."""
        out = set()
        for u, nbrs in self.adjacency.items():
            for v in nbrs:
                out.add((u, v) if u < v else (v, u))
        return sorted(out)

    @property
    def edge_lengths(self) -> dict[tuple[str, str], float]:
        if "edge_lengths" not in self._cache:
            self._cache["edge_lengths"] = {
                (u, v): self.euclidean(u, v) for (u, v) in self.edges
            }
        return self._cache["edge_lengths"]

    def edge_length(self, u: str, v: str) -> float:
        if v not in self.navigable_from(u):
            raise SceneError(f"{u} and {v} are not adjacent in scene {self.id}")
        return self.euclidean(u, v)

    def position(self, vid: str) -> np.ndarray:
        self._check(vid)
        return self.viewpoints[vid].xyz

    def euclidean(self, a: str, b: str) -> float:
        return float(np.linalg.norm(self.position(a) - self.position(b)))

    def navigable_from(self, at: str) -> frozenset[str]:
        self._check(at)
        return self.adjacency[at]

    def geodesic(self, a: str, b: str):
        """Shortest-path length between ``a`` and ``b``, or ``Unreachable``."""
        self._check(a)
        self._check(b)
        if a == b:
            return 0.0
        # canonical source keeps the result bitwise symmetric
        src, dst = (a, b) if a < b else (b, a)
        d = self._distances_from(src).get(dst)
        return Unreachable if d is None else d

    def distance(self, a: str, b: str, mode: str = "geodesic"):
        if mode == "geodesic":
            return self.geodesic(a, b)
        if mode == "euclidean":
            return self.euclidean(a, b)
        raise ValueError(f"unknown distance mode {mode!r}")

    def path_length(self, path: Sequence[str]) -> float:
        return float(sum(self.edge_length(u, v) for u, v in zip(path[:-1], path[1:])))

    def shortest_path(self, a: str, b: str) -> list[str] | None:
        self._check(a)
        self._check(b)
        dist = {a: 0.0}
        prev: dict[str, str] = {}
        heap = [(0.0, a)]
        while heap:
            d, u = heapq.heappop(heap)
            if u == b:
                break
            if d > dist[u]:
                continue
            for v in sorted(self.adjacency[u]):
                nd = d + self.euclidean(u, v)
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    prev[v] = u
                    heapq.heappush(heap, (nd, v))
        if b not in dist:
            return None
        path = [b]
        while path[-1] != a:
            path.append(prev[path[-1]])
        return path[::-1]

    def _distances_from(self, src: str) -> dict[str, float]:
        key = ("sssp", src)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        dist = {src: 0.0}
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v in self.adjacency[u]:
                nd = d + self.euclidean(u, v)
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        with self._lock:
            self._cache[key] = dist
        return dist

    def _check(self, vid: str) -> None:
        if vid not in self.viewpoints:
            raise UnknownViewpoint(f"unknown viewpoint {vid!r} in scene {self.id}")


def validate_scene(scene: Scene) -> None:
    for vid, vp in scene.viewpoints.items():
        if vid != vp.id:
            raise SceneError(f"viewpoint key {vid!r} does not match id {vp.id!r}")
        if len(vp.position) != 3 or not all(math.isfinite(c) for c in vp.position):
            raise SceneError(f"viewpoint {vid!r} has invalid position {vp.position}")
        for h, fr in vp.frames.items():
            if not 0 <= h < scene.headings:
                raise SceneError(f"viewpoint {vid!r} heading {h} out of range")
    for vid, nbrs in scene.adjacency.items():
        if vid not in scene.viewpoints:
            raise SceneError(f"adjacency references unknown viewpoint {vid!r}")
        for v in nbrs:
            if v == vid:
                raise SceneError(f"self-edge on viewpoint {vid!r}")
            if v not in scene.viewpoints:
                raise SceneError(f"edge {vid!r}->{v!r} references unknown viewpoint {v!r}")
            if vid not in scene.adjacency.get(v, ()):
                raise SceneError(f"asymmetric adjacency: {vid!r}->{v!r} without {v!r}->{vid!r}")
    missing = set(scene.viewpoints) - set(scene.adjacency)
    if missing:
        raise SceneError(f"viewpoints without adjacency entry: {sorted(missing)}")


def scene_from_dict(d: Mapping[str, Any], base_dir: Path | None = None, check_files: bool = True) -> Scene:
    try:
        sid = str(d["scene_id"])
        raw_vps = d["viewpoints"]
        raw_edges = d.get("edges", [])
    except (KeyError, TypeError) as e:
        raise SceneError(f"malformed scene manifest: missing {e}") from e
    headings = int(d.get("headings", DEFAULT_HEADINGS))
    viewpoints: dict[str, Viewpoint] = {}
    for rv in raw_vps:
        try:
            vid = str(rv["id"])
            pos = tuple(float(x) for x in rv["position"])
        except (KeyError, TypeError, ValueError) as e:
            raise SceneError(f"malformed viewpoint entry {rv!r}") from e
        if vid in viewpoints:
            raise SceneError(f"duplicate viewpoint id {vid!r}")
        frames = {}
        for rf in rv.get("frames", []) or []:
            fr = FrameRef(
                heading=int(rf["heading"]),
                rgb_path=rf.get("rgb_path"),
                depth_path=rf.get("depth_path"),
                camera=Camera.from_dict(rf["camera"]),
            )
            if check_files:
                for p in fr.resolve(base_dir):
                    if p is not None and not p.exists():
                        raise SceneError(f"viewpoint {vid!r}: frame file {p} does not exist")
            frames[fr.heading] = fr
        viewpoints[vid] = Viewpoint(vid, pos, frames)  # type: ignore[arg-type]

    directed: dict[str, set[str]] = {vid: set() for vid in viewpoints}
    for e in raw_edges:
        if len(e) != 2:
            raise SceneError(f"malformed edge {e!r}")
        u, v = str(e[0]), str(e[1])
        for x in (u, v):
            if x not in viewpoints:
                raise SceneError(f"edge {u!r}-{v!r} references unknown viewpoint {x!r}")
        directed[u].add(v)
    # edges are directed pairs; validate_scene rejects any pair listed one way only
    adjacency = {k: frozenset(v) for k, v in directed.items()}
    return Scene(sid, viewpoints, adjacency, base_dir=base_dir, headings=headings)


def load_scene(path: str | Path, check_files: bool = True) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"malformed scene manifest {path}: {e}") from e
    return scene_from_dict(data, base_dir=path.parent, check_files=check_files)


def scene_to_dict(scene: Scene) -> dict:
    vps = []
    for vid in sorted(scene.viewpoints):
        vp = scene.viewpoints[vid]
        entry: dict[str, Any] = {"id": vid, "position": list(vp.position)}
        if vp.frames:
            entry["frames"] = [
                {
                    "heading": fr.heading,
                    "rgb_path": fr.rgb_path,
                    "depth_path": fr.depth_path,
                    "camera": fr.camera.to_dict(),
                }
                for _, fr in sorted(vp.frames.items())
            ]
        vps.append(entry)
    return {
        "scene_id": scene.id,
        "headings": scene.headings,
        "viewpoints": vps,
        "edges": [[u, v] for (a, b) in scene.edges for (u, v) in ((a, b), (b, a))],
    }


def dump_scene(scene: Scene, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


def navigable_from(scene: Scene, at: str) -> frozenset[str]:
    return scene.navigable_from(at)


def geodesic(scene: Scene, a: str, b: str):
    return scene.geodesic(a, b)


@dataclass(frozen=True)
class Episode:
    id: str
    scene_id: str
    start: str
    goal: str
    instruction: str
    gt_path: tuple[str, ...]
    gt_path_length: float
    task_kind: str = "VLN"

    def validate(self, scene: Scene) -> None:
        if scene.id != self.scene_id:
            raise SceneError(f"episode {self.id}: scene {self.scene_id!r} != {scene.id!r}")
        if self.task_kind not in TASK_KINDS:
            raise SceneError(f"episode {self.id}: unknown task kind {self.task_kind!r}")
        if not self.gt_path or self.gt_path[0] != self.start or self.gt_path[-1] != self.goal:
            raise SceneError(f"episode {self.id}: gt_path must run from start to goal")
        for u, v in zip(self.gt_path[:-1], self.gt_path[1:]):
            if v not in scene.navigable_from(u):
                raise SceneError(f"episode {self.id}: gt_path step {u}->{v} is not an edge")
        length = scene.path_length(self.gt_path)
        if not math.isclose(length, self.gt_path_length, rel_tol=1e-6, abs_tol=1e-9):
            raise SceneError(
                f"episode {self.id}: gt_path_length {self.gt_path_length} != path sum {length}"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scene_id": self.scene_id,
            "start": self.start,
            "goal": self.goal,
            "instruction": self.instruction,
            "gt_path": list(self.gt_path),
            "gt_path_length": self.gt_path_length,
            "task_kind": self.task_kind,
        }


def episode_from_dict(d: Mapping[str, Any], scene: Scene | None = None) -> Episode:
    path = tuple(str(v) for v in d["gt_path"])
    length = d.get("gt_path_length")
    if length is None:
        if scene is None:
            raise SceneError(f"episode {d.get('id')}: gt_path_length missing and no scene given")
        length = scene.path_length(path)
    ep = Episode(
        id=str(d["id"]),
        scene_id=str(d["scene_id"]),
        start=str(d.get("start", path[0])),
        goal=str(d.get("goal", path[-1])),
        instruction=str(d.get("instruction", "")),
        gt_path=path,
        gt_path_length=float(length),
        task_kind=str(d.get("task_kind", "VLN")),
    )
    if scene is not None:
        ep.validate(scene)
    return ep


def load_episodes(path: str | Path, scenes: Mapping[str, Scene] | None = None) -> list[Episode]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["episodes"]
    out = []
    for d in data:
        scene = None
        if scenes is not None:
            sid = str(d["scene_id"])
            if sid not in scenes:
                raise SceneError(f"episode {d.get('id')} references unknown scene {sid!r}")
            scene = scenes[sid]
        out.append(episode_from_dict(d, scene))
    return out


def load_scenes(paths: Iterable[str | Path], check_files: bool = True) -> dict[str, Scene]:
    scenes: dict[str, Scene] = {}
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            s = load_scene(f, check_files=check_files)
            if s.id in scenes:
                raise SceneError(f"duplicate scene id {s.id!r} ({f})")
            scenes[s.id] = s
    return scenes
