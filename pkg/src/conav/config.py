"""Run configuration: defaults < config file < command-line flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ._toml import loads
from .adapters import GEN_3D_MODEL, GEN_NAV_AGENT
from .datagen import MixtureSpec
from .engine import DEFAULT_MAX_STEPS
from .metrics import DEFAULT_SUCCESS_THRESHOLD
from .pointcloud import PointCloudOptions


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenes: list[str] = field(default_factory=list)
    episodes: str = ""
    policy: str = "oracle"
    belief: str = "null"
    max_steps: int = DEFAULT_MAX_STEPS
    threshold: float = DEFAULT_SUCCESS_THRESHOLD
    seed: int = 0
    jobs: int = 1
    out: str = "runs/latest"
    pointcloud: PointCloudOptions = field(default_factory=PointCloudOptions)

    def validate(self) -> None:
        if not self.scenes:
            raise ConfigError("no scene paths configured")
        for p in self.scenes:
            if not Path(p).exists():
                raise ConfigError(f"scene path {p} does not exist")
        if not self.episodes or not Path(self.episodes).exists():
            raise ConfigError(f"episode file {self.episodes!r} does not exist")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not self.threshold > 0:
            raise ConfigError("threshold must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        for spec in (self.policy, self.belief):
            kind, _, arg = spec.partition(":")
            if kind in ("scripted", "remote") and not Path(arg).exists():
                raise ConfigError(f"backend file {arg!r} for {spec!r} does not exist")

    def snapshot(self) -> dict:
        """Everything needed to re-score the run without re-running models."""
        d = asdict(self)
        d["scenes"] = [str(Path(p).resolve()) for p in self.scenes]
        d["episodes"] = str(Path(self.episodes).resolve())
        d["generation"] = {"3d_model": asdict(GEN_3D_MODEL), "nav_agent": asdict(GEN_NAV_AGENT)}
        d["mixture"] = MixtureSpec().to_dict()
        return d


_SCALARS = {f.name for f in fields(RunConfig)} - {"pointcloud"}
_PC_FIELDS = {f.name for f in fields(PointCloudOptions)}


def _rebase(value: str, base: Path | None) -> str:
    if base is None or Path(value).is_absolute():
        return value
    return str(base / value)


def _rebase_backend(spec: str, base: Path | None) -> str:
    kind, sep, arg = spec.partition(":")
    return f"{kind}:{_rebase(arg, base)}" if sep and kind in ("scripted", "remote") else spec


def _apply(cfg: RunConfig, data: Mapping[str, Any], where: str, base: Path | None = None) -> None:
    """Merge ``data`` into ``cfg``; relative paths resolve against ``base``."""
    for key, value in data.items():
        if key == "pointcloud":
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where}: [pointcloud] must be a table")
            for k, v in value.items():
                if k not in _PC_FIELDS:
                    raise ConfigError(f"{where}: unknown pointcloud option {k!r}")
                setattr(cfg.pointcloud, k, v)
        elif key in _SCALARS:
            if key == "scenes" and isinstance(value, str):
                value = [value]
            if key == "scenes":
                value = [_rebase(v, base) for v in value]
            elif key in ("episodes", "out"):
                value = _rebase(value, base)
            elif key in ("policy", "belief"):
                value = _rebase_backend(value, base)
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"{where}: unknown option {key!r}")


def load_run_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            data = loads(path.read_text())
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        _apply(cfg, data, str(path), path.parent)
    if overrides:
        _apply(cfg, {k: v for k, v in overrides.items() if v is not None}, "command line")
    return cfg
