"""Text protocol between the 3D-text model and the navigation agent.

Builds byte-stable prompts from the versioned templates in ``templates/`` and
parses the navigation agent's free-text answer back into an action.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

from .actions import STOP, Action, GoTo

TEMPLATE_VERSION = "v1"

FOR_3D_MODEL = "For3DModel"
FOR_NAV_AGENT = "ForNavAgent"

TASK_INFO_PREFIX = "Here are some additional task descriptions: "
EMPTY_HYPOTHESIS = "None"

# template file and slot order per (kind, task_kind)
TEMPLATES: dict[tuple[str, str], tuple[str, tuple[str, ...]]] = {
    (FOR_3D_MODEL, "VLN"): ("vln_3d.txt", ("task_info",)),
    (FOR_3D_MODEL, "SpatialQA"): ("qa_3d.txt", ("question",)),
    (FOR_NAV_AGENT, "VLN"): ("vln_nav.txt", ("instruction", "history", "candidate", "spatial_information")),
    (FOR_NAV_AGENT, "SpatialQA"): ("qa_nav.txt", ("question", "spatial_information", "observation")),
}


class PromptError(ValueError):
    pass


class ParseFailure(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"could not parse an action from {raw!r}")
        self.raw = raw


@dataclass(frozen=True)
class BeliefHypothesis:
    text: str
    source_step: int = 0
    truncated: bool = False


@dataclass(frozen=True)
class PromptBundle:
    kind: str
    task_kind: str
    rendered: str
    slots: Mapping[str, str] = field(default_factory=dict)
    version: str = TEMPLATE_VERSION

    @property
    def sha256(self) -> str:
        return sha256_text(self.rendered)


@dataclass(frozen=True)
class CandidateView:
    """What the agent is told about one navigable viewpoint."""

    viewpoint_id: str
    heading: int


def sha256_text(s: str) -> str:
    return hashlib.sha256(s.encode("utf-8")).hexdigest()


def load_template(kind: str, task_kind: str, version: str = TEMPLATE_VERSION) -> str:
    try:
        name, _ = TEMPLATES[(kind, task_kind)]
    except KeyError:
        raise PromptError(f"no template for kind={kind!r} task_kind={task_kind!r}") from None
    return resources.files("conav").joinpath("templates").joinpath(version).joinpath(name).read_text(encoding="utf-8")


def all_templates(version: str = TEMPLATE_VERSION) -> dict[str, str]:
    return {TEMPLATES[key][0]: load_template(*key, version=version) for key in TEMPLATES}


def template_hashes(version: str = TEMPLATE_VERSION) -> dict[str, str]:
    return {name: sha256_text(text) for name, text in all_templates(version).items()}


def escape(s: str) -> str:
    """Neutralize ``<`` / ``>`` so slot text cannot forge special tokens."""
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def unescape(s: str) -> str:
    return re.sub(r"&(amp|lt|gt);", lambda m: {"amp": "&", "lt": "<", "gt": ">"}[m.group(1)], s)


def _decorate(slot: str, value: str) -> str:
    if slot == "task_info":
        return f"{TASK_INFO_PREFIX}{value}\n" if value else ""
    return value


def _render(kind: str, task_kind: str, slots: Mapping[str, str]) -> PromptBundle:
    template = load_template(kind, task_kind)
    _, names = TEMPLATES[(kind, task_kind)]
    filled = {n: _decorate(n, escape(slots[n])) for n in names}
    rendered = template.format_map(filled)
    return PromptBundle(kind, task_kind, rendered, dict(slots))


def parse_prompt(rendered: str, kind: str, task_kind: str) -> dict[str, str]:
    """Recover the inserted slot values from a rendered prompt."""
    template = load_template(kind, task_kind)
    _, names = TEMPLATES[(kind, task_kind)]
    pattern = ""
    pos = 0
    for m in re.finditer(r"\{(\w+)\}", template):
        pattern += re.escape(template[pos : m.start()])
        name = m.group(1)
        if name == "task_info":
            pattern += f"(?:{re.escape(TASK_INFO_PREFIX)}(?P<task_info>.*?)\\n)?"
        else:
            pattern += f"(?P<{name}>.*?)"
        pos = m.end()
    pattern += re.escape(template[pos:])
    match = re.fullmatch(pattern, rendered, flags=re.DOTALL)
    if match is None:
        raise PromptError("rendered text does not match the template")
    return {n: unescape(match.group(n) or "") for n in names}


def build_3d_request(task_kind: str, task_info: str = "") -> PromptBundle:
    """Prompt for the 3D-text model; point tokens are left as placeholders."""
    if task_kind == "VLN":
        return _render(FOR_3D_MODEL, task_kind, {"task_info": task_info})
    if task_kind == "SpatialQA":
        if not task_info:
            raise PromptError("SpatialQA requests need the question as task_info")
        return _render(FOR_3D_MODEL, task_kind, {"question": task_info})
    raise PromptError(f"unknown task kind {task_kind!r}")


def render_candidates(candidates: Sequence[CandidateView]) -> str:
    return "\n".join(
        f"Candidate {i}: {c.viewpoint_id} (heading {c.heading})" for i, c in enumerate(candidates, 1)
    )


def render_history(history: Sequence[str]) -> str:
    return " -> ".join(history) if history else "None"


def render_observation(views: Sequence[CandidateView]) -> str:
    return "\n".join(f"Location {i}: {c.viewpoint_id} (heading {c.heading})" for i, c in enumerate(views, 1))


def fmt(
    hypothesis: BeliefHypothesis | str | None,
    instruction: str,
    candidates: Sequence[CandidateView] = (),
    history: Sequence[str] = (),
    task_kind: str = "VLN",
) -> PromptBundle:
    """Inject the 3D hypothesis into the navigation agent's prompt."""
    if not instruction:
        raise PromptError("instruction must be nonempty")
    text = hypothesis.text if isinstance(hypothesis, BeliefHypothesis) else (hypothesis or "")
    spatial = text if text else EMPTY_HYPOTHESIS
    if task_kind == "VLN":
        slots = {
            "instruction": instruction,
            "history": render_history(history),
            "candidate": render_candidates(candidates),
            "spatial_information": spatial,
        }
    elif task_kind == "SpatialQA":
        slots = {
            "question": instruction,
            "spatial_information": spatial,
            "observation": render_observation(candidates),
        }
    else:
        raise PromptError(f"unknown task kind {task_kind!r}")
    return _render(FOR_NAV_AGENT, task_kind, slots)


def heading_index(origin: Sequence[float], target: Sequence[float], headings: int = 12) -> int:
    """Discrete heading from ``origin`` toward ``target``.

    Heading 0 faces +y; indices increase clockwise seen from above (+z up).
    """
    dx = target[0] - origin[0]
    dy = target[1] - origin[1]
    angle = math.atan2(dx, dy) % (2 * math.pi)
    return int(round(angle / (2 * math.pi / headings))) % headings


_STOP_RE = re.compile(r"\bstop\b", re.IGNORECASE)
_OPTION_RE = re.compile(r"\b(?:option|candidate|choice|direction)\s*#?\s*(\d+|[a-z])\b", re.IGNORECASE)
_BARE_RE = re.compile(r"\s*\(?\s*(\d+|[a-z])\s*[.:)]?\s*", re.IGNORECASE)


def _index_of(token: str) -> int:
    if token.isdigit():
        return int(token)
    return ord(token.upper()) - ord("A") + 1


def parse_action(raw: str, candidates: Sequence[str]) -> Action:
    """Map free text to an action.

    Rules, first match wins: the word "stop"; a 1-based candidate index
    ("2", "B", "option 2"); a candidate id appearing as a whole token (longest
    id wins, then candidate order). Anything else raises :class:`ParseFailure`.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")
    if _STOP_RE.search(raw):
        return STOP
    tokens = []
    m = _BARE_RE.fullmatch(raw)
    if m:
        tokens.append(m.group(1))
    tokens.extend(m.group(1) for m in _OPTION_RE.finditer(raw))
    for tok in tokens:
        i = _index_of(tok)
        if 1 <= i <= len(candidates):
            return GoTo(candidates[i - 1])
    best = None
    lowered = raw.lower()
    for c in candidates:
        pat = r"(?<![0-9a-z_])" + re.escape(c.lower()) + r"(?![0-9a-z_])"
        if re.search(pat, lowered) and (best is None or len(c) > len(best)):
            best = c
    if best is not None:
        return GoTo(best)
    raise ParseFailure(raw)
