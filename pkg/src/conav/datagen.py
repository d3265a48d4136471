"""Training-side artifacts: dataset mixtures, curriculum manifests and
alignment supervision records exported from navigation runs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .actions import STOP, Action, GoTo
from .comms import CandidateView, fmt, heading_index
from .scene import Episode, Scene

log = logging.getLogger(__name__)

# (dataset, weight) for the alignment fine-tuning mixture
DEFAULT_MIXTURE = (
    ("R2R", 4),
    ("CVDN", 1),
    ("REVERIE", 2),
    ("SOON", 1),
    ("ScanQA", 1),
    ("SQA", 1),
)

COMPONENTS = ("Encoder", "Projector", "LLM")


@dataclass(frozen=True)
class MixtureSpec:
    sources: tuple[tuple[str, int], ...] = DEFAULT_MIXTURE
    seed: int = 0

    def __post_init__(self):
        for name, w in self.sources:
            if not isinstance(w, (int, np.integer)) or isinstance(w, bool) or w <= 0:
                raise ValueError(f"weight for {name!r} must be a positive integer, got {w!r}")

    @property
    def proportions(self) -> dict[str, float]:
        total = sum(w for _, w in self.sources)
        return {name: w / total for name, w in self.sources}

    def to_dict(self) -> dict:
        return {"sources": [list(s) for s in self.sources], "seed": self.seed}


def build_mixture(spec: MixtureSpec, n: int) -> list[str]:
    """``n`` seeded draws of dataset names, weighted by the spec."""
    if not spec.sources:
        raise ValueError("mixture has no sources")
    if n < 1:
        raise ValueError("n must be >= 1")
    names = [s[0] for s in spec.sources]
    p = np.array([s[1] for s in spec.sources], dtype=np.float64)
    idx = np.random.default_rng(spec.seed).choice(len(names), size=n, p=p / p.sum())
    return [names[i] for i in idx]


@dataclass(frozen=True)
class StageManifest:
    stage: int
    goal: str
    datasets: tuple[str, ...]
    tasks: tuple[str, ...]
    trainable: Mapping[str, bool]
    example_instructions: tuple[str, ...] = ()
    hyperparameters: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = list(self.datasets)
        d["tasks"] = list(self.tasks)
        d["example_instructions"] = list(self.example_instructions)
        d["trainable"] = dict(self.trainable)
        d["hyperparameters"] = dict(self.hyperparameters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageManifest":
        return cls(
            stage=int(d["stage"]),
            goal=d["goal"],
            datasets=tuple(d["datasets"]),
            tasks=tuple(d["tasks"]),
            trainable=dict(d["trainable"]),
            example_instructions=tuple(d.get("example_instructions", ())),
            hyperparameters=dict(d.get("hyperparameters", {})),
        )


_SHARED_HPARAMS = {
    "optimizer": "AdamW",
    "warmup_ratio": 0.03,
    "lr_scheduler": "cosine",
    "num_workers": 4,
    "precision": "bfloat16",
    "accumulate_grad_batches": 1,
}

_STAGES = {
    1: StageManifest(
        1,
        "Align point clouds with LLM.",
        ("Cap3D",),
        ("Brief Description",),
        {"Encoder": False, "Projector": True, "LLM": False},
        ("How would you interpret this 3D point cloud?",),
        {"learning_rate": 2e-5, "parallel": "DDP", "batch_size": 16, "epochs": 3, **_SHARED_HPARAMS},
    ),
    2: StageManifest(
        2,
        "Enable 3D-text model to handle complex multiple objects indoor scenes.",
        ("3D-FRONT",),
        ("Detailed Description", "Spatial Relation QA"),
        {"Encoder": False, "Projector": False, "LLM": True},
        (
            "Could you elaborate extensively on what this represents?",
            "What is the spatial relationship between TV and sofa?",
        ),
        {"learning_rate": 1e-6, "parallel": "FSDP (full shard auto wrap)", "batch_size": 4, "epochs": 1, **_SHARED_HPARAMS},
    ),
    3: StageManifest(
        3,
        "Maintain spatial reasoning capabilities. Adapt to scanned point cloud data.",
        ("R2R point", "ScanQA"),
        ("Brief Description", "3D QA"),
        {"Encoder": True, "Projector": True, "LLM": False},
        (
            "What detailed insights can you give about this point cloud?",
            "What is placed next to the fridge upper of the cabinets?",
        ),
        {"learning_rate": 2e-5, "parallel": "DDP", "batch_size": 8, "epochs": 3, **_SHARED_HPARAMS},
    ),
}


def stage_manifest(stage: int) -> StageManifest:
    try:
        return _STAGES[stage]
    except KeyError:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage!r}") from None


def write_manifests(out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in sorted(_STAGES):
        p = out_dir / f"stage{s}.json"
        p.write_text(json.dumps(stage_manifest(s).to_dict(), indent=2) + "\n")
        paths.append(p)
    return paths


def gt_actions(episode: Episode) -> list[tuple[str, Action]]:
    """(state, ground-truth action) per step: a move along the path, then stop."""
    path = episode.gt_path
    return [(path[t], GoTo(path[t + 1])) for t in range(len(path) - 1)] + [(path[-1], STOP)]


def cloud_ref(cloud_dir: str | Path, scene_id: str, viewpoint: str) -> Path:
    return Path(cloud_dir) / scene_id / f"{viewpoint}.pc6"


@dataclass
class TripleRecord:
    episode_id: str
    scene_id: str
    t: int
    viewpoint: str
    rgb: list[str]
    cloud: str
    history: list[dict]
    instruction: str
    candidates: list[str]
    gt_action: str
    hypothesis: str
    prompt_sha256: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _logged_hypotheses(records: Sequence[Mapping] | None) -> dict[tuple[int, str], str]:
    out = {}
    for r in records or ():
        if "hypothesis" in r:
            out[(int(r["t"]), r["at"])] = r["hypothesis"]
    return out


def alignment_records(
    episode: Episode,
    scene: Scene,
    cloud_dir: str | Path,
    step_records: Sequence[Mapping] | None = None,
    include_hypotheses: bool = False,
) -> Iterator[TripleRecord | str]:
    """Yield one record per ground-truth step, or a skip reason string.

    Hypotheses are taken from the run's log when the agent stood at the same
    viewpoint at the same step; otherwise the slot is empty.
    """
    hyps = _logged_hypotheses(step_records)
    history: list[dict] = []
    visited: list[str] = []
    for t, (state, action) in enumerate(gt_actions(episode)):
        cands = sorted(scene.navigable_from(state))
        if isinstance(action, GoTo) and action.target not in cands:
            raise ValueError(f"episode {episode.id}: gt action {action} illegal at {state}")
        hyp = hyps.get((t, state), "")
        ref = cloud_ref(cloud_dir, scene.id, state)
        here = scene.viewpoints[state].position
        views = [CandidateView(c, heading_index(here, scene.viewpoints[c].position, scene.headings)) for c in cands]
        prompt = fmt(hyp, episode.instruction, views, visited, episode.task_kind)
        if not ref.exists():
            yield f"missing cloud {ref}"
        else:
            yield TripleRecord(
                episode_id=episode.id,
                scene_id=scene.id,
                t=t,
                viewpoint=state,
                rgb=[str(fr.resolve(scene.base_dir)[0]) for _, fr in sorted(scene.viewpoints[state].frames.items()) if fr.rgb_path],
                cloud=str(ref),
                history=[dict(h) for h in history],
                instruction=episode.instruction,
                candidates=cands,
                gt_action=str(action),
                hypothesis=hyp,
                prompt_sha256=prompt.sha256,
            )
        entry = {"viewpoint": state, "action": str(action)}
        if include_hypotheses:
            entry["hypothesis"] = hyp
        history.append(entry)
        visited.append(state)


def export_alignment_records(
    runs: Iterable[tuple[Episode, Sequence[Mapping] | None]],
    scenes: Mapping[str, Scene],
    out_path: str | Path,
    cloud_dir: str | Path,
    include_hypotheses: bool = False,
    stats: dict | None = None,
) -> int:
    """Write JSON-lines supervision records; returns the number written.

    ``runs`` pairs each episode with its logged step records (or ``None``).
    Steps whose cloud file is missing are skipped; the skip count is logged
    and stored in ``stats["skipped"]`` when a dict is passed.
    """
    written = skipped = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for episode, recs in runs:
            for item in alignment_records(episode, scenes[episode.scene_id], cloud_dir, recs, include_hypotheses):
                if isinstance(item, str):
                    skipped += 1
                    continue
                f.write(item.to_json() + "\n")
                written += 1
    if skipped:
        log.warning("skipped %d alignment records with missing cloud artifacts", skipped)
    if stats is not None:
        stats["skipped"] = skipped
    return written


def validate_records(path: str | Path, scenes: Mapping[str, Scene]) -> list[str]:
    """Problems found in an exported file (empty when every action is legal)."""
    problems = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            r = json.loads(line)
            scene = scenes[r["scene_id"]]
            nbrs = scene.navigable_from(r["viewpoint"])
            if set(r["candidates"]) != set(nbrs):
                problems.append(f"{r['episode_id']}@{r['t']}: candidate set mismatch")
            act = r["gt_action"]
            if act != "stop" and (not act.startswith("goto:") or act[5:] not in nbrs):
                problems.append(f"{r['episode_id']}@{r['t']}: illegal action {act}")
            if not Path(r["cloud"]).exists():
                problems.append(f"{r['episode_id']}@{r['t']}: cloud {r['cloud']} missing")
    return problems
