"""Agent actions: move to an adjacent viewpoint, or stop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class GoTo:
    target: str

    def __str__(self) -> str:
        return f"goto:{self.target}"


@dataclass(frozen=True)
class Stop:
    def __str__(self) -> str:
        return "stop"


Action = Union[GoTo, Stop]

STOP = Stop()


def action_from_str(s: str) -> Action:
    if s == "stop":
        return STOP
    if s.startswith("goto:"):
        return GoTo(s[len("goto:"):])
    raise ValueError(f"not a serialized action: {s!r}")
