"""Declarative run configuration shared by every command.

A run is described by a single JSON config file; command-line flags override
file values. Every artifact a command writes embeds the hash of the resolved
configuration, and downstream commands refuse inputs whose hash does not
match unless forced. The output directory and worker count are excluded from
the hash: neither may influence artifact bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from maple.pipeline import ABLATION_ROWS, AblationFlags

__all__ = ["ConfigError", "RunConfig", "ablation_configs", "parse_backend_spec"]

HASHED_EXCLUDED = ("out", "workers", "manifest_dir")


class ConfigError(Exception):
    """The run configuration is invalid or inconsistent."""


def parse_backend_spec(spec: str) -> tuple[str, object]:
    """Validate a backend selector: ``reference``, ``exec:<command>``, or
    ``tcp:<host:port>``."""
    if spec == "reference":
        return ("reference", None)
    if spec.startswith("exec:"):
        command = spec[len("exec:") :]
        if not command.strip():
            raise ConfigError("exec backend needs a command")
        return ("exec", command)
    if spec.startswith("tcp:"):
        address = spec[len("tcp:") :]
        host, sep, port = address.rpartition(":")
        if not sep or not host:
            raise ConfigError(f"tcp backend needs host:port, got {address!r}")
        try:
            return ("tcp", (host, int(port)))
        except ValueError as exc:
            raise ConfigError(f"bad tcp port in {address!r}") from exc
    raise ConfigError(
        f"unknown backend {spec!r}; expected reference, exec:<command> or tcp:<host:port>"
    )


@dataclass
class RunConfig:
    """Everything a run depends on, in one hashable place."""

    manifests: tuple[str, ...] = ()
    n: int = 3  # category-sequence length; keys are n-1 long
    type_k: int = 3  # top categories in a first-stage sentence
    k: int = 5  # prediction list length
    window: int = 15
    gap_seconds: int = 300
    max_session_records: int = 5000
    min_user_records: int = 10
    max_reject_ratio: float = 0.01
    use_stage1: bool = True
    use_app_history: bool = True
    use_installed_apps: bool = True
    use_optional_context: bool = True
    backend_stage1: str = "reference"
    backend_stage2: str = "reference"
    weights: tuple[float, float, float, float] = (0.5, 0.25, 0.15, 0.1)
    seed: int = 0
    out: str = "out"
    workers: int = 1
    manifest_dir: str = "."  # resolution base for relative manifest paths

    def __post_init__(self) -> None:
        self.manifests = tuple(self.manifests)
        self.weights = tuple(self.weights)
        positive = (
            "n",
            "type_k",
            "k",
            "window",
            "gap_seconds",
            "max_session_records",
            "min_user_records",
            "workers",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if not (0 <= self.max_reject_ratio <= 1):
            raise ConfigError("max_reject_ratio must be within [0, 1]")
        for spec in (self.backend_stage1, self.backend_stage2):
            parse_backend_spec(spec)
        try:
            self.flags
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(
            use_stage1=self.use_stage1,
            use_app_history=self.use_app_history,
            use_installed_apps=self.use_installed_apps,
            use_optional_context=self.use_optional_context,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"config file {path} must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
        try:
            config = cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config in {path}: {exc}") from exc
        return replace(config, manifest_dir=str(path.parent))

    def with_overrides(self, **overrides) -> "RunConfig":
        cleaned = {k: v for k, v in overrides.items() if v is not None}
        if not cleaned:
            return self
        return replace(self, **cleaned)

    def with_ablation(self, flags: AblationFlags) -> "RunConfig":
        return replace(
            self,
            use_stage1=flags.use_stage1,
            use_app_history=flags.use_app_history,
            use_installed_apps=flags.use_installed_apps,
            use_optional_context=flags.use_optional_context,
        )

    def manifest_paths(self) -> list[Path]:
        base = Path(self.manifest_dir)
        return [
            p if p.is_absolute() else base / p
            for p in (Path(m) for m in self.manifests)
        ]

    def config_hash(self) -> str:
        """Hash of everything that can influence artifact content."""
        payload = asdict(self)
        for name in HASHED_EXCLUDED:
            payload.pop(name, None)
        payload["manifests"] = list(payload["manifests"])
        payload["weights"] = list(payload["weights"])
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def descriptor(self) -> dict:
        """Compact description embedded in reports."""
        return {
            "config_hash": self.config_hash(),
            "flags": {
                "use_stage1": self.use_stage1,
                "use_app_history": self.use_app_history,
                "use_installed_apps": self.use_installed_apps,
                "use_optional_context": self.use_optional_context,
            },
            "backend_stage1": self.backend_stage1,
            "backend_stage2": self.backend_stage2,
            "n": self.n,
            "type_k": self.type_k,
            "k": self.k,
            "seed": self.seed,
        }


def ablation_configs(config: RunConfig) -> dict[str, RunConfig]:
    """The full configuration plus one row per disabled context source."""
    return {name: config.with_ablation(flags) for name, flags in ABLATION_ROWS.items()}
