"""Project and server configuration.

Config files are JSON. Ports may be overridden by environment variables
(GRADLOOM_PORT for the coordinator, GRADLOOM_DATASTORE_PORT for the
datastore) so deployments can rebind without editing files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from gradloom.nn.optim import Hyperparams
from gradloom.nn.spec import NetworkSpec, SpecError

TIME_BUDGET = "time_budget"
STEP_BUDGET = "step_budget"


class ConfigError(ValueError):
    pass


@dataclass
class ProjectConfig:
    project_id: str
    spec: NetworkSpec
    hyper: Hyperparams = field(default_factory=Hyperparams)
    T_seconds: float = 4.0
    per_worker_cap: int = 3000
    mode: str = TIME_BUDGET
    step_budget_steps: int = 0
    reduce_margin_ms: float = 100.0
    min_budget_ms: float = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.project_id:
            raise ConfigError("project_id must be non-empty")
        if not 1.0 <= self.T_seconds <= 30.0:
            raise ConfigError(f"T_seconds must be in [1, 30], got {self.T_seconds}")
        if self.per_worker_cap <= 0:
            raise ConfigError(f"per_worker_cap must be > 0, got {self.per_worker_cap}")
        if self.mode not in (TIME_BUDGET, STEP_BUDGET):
            raise ConfigError(f"mode must be {TIME_BUDGET} or {STEP_BUDGET}, got {self.mode!r}")
        if self.mode == STEP_BUDGET and self.step_budget_steps < 1:
            raise ConfigError("step_budget mode requires step_budget_steps >= 1")
        if self.reduce_margin_ms < 0 or self.min_budget_ms < 0:
            raise ConfigError("margins must be >= 0")

    def to_obj(self) -> dict:
        return {
            "project_id": self.project_id,
            "spec": self.spec.to_obj(),
            "hyper": self.hyper.to_obj(),
            "T_seconds": self.T_seconds,
            "per_worker_cap": self.per_worker_cap,
            "mode": self.mode,
            "step_budget_steps": self.step_budget_steps,
            "reduce_margin_ms": self.reduce_margin_ms,
            "min_budget_ms": self.min_budget_ms,
            "seed": self.seed,
        }

    @staticmethod
    def from_obj(obj) -> "ProjectConfig":
        if not isinstance(obj, dict):
            raise ConfigError("project config must be an object")
        known = {
            "project_id", "spec", "hyper", "T_seconds", "per_worker_cap", "mode",
            "step_budget_steps", "reduce_margin_ms", "min_budget_ms", "seed",
        }
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown project config fields: {sorted(extra)}")
        if "project_id" not in obj or "spec" not in obj:
            raise ConfigError("project config requires project_id and spec")
        try:
            spec = NetworkSpec.from_obj(obj["spec"])
        except SpecError as e:
            raise ConfigError(f"spec: {e}") from None
        try:
            hyper = Hyperparams.from_obj(obj.get("hyper", {}))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"hyper: {e}") from None
        kwargs = {}
        for key, cast in [
            ("T_seconds", float), ("per_worker_cap", int), ("mode", str),
            ("step_budget_steps", int), ("reduce_margin_ms", float),
            ("min_budget_ms", float), ("seed", int),
        ]:
            if key in obj:
                try:
                    kwargs[key] = cast(obj[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"{key}: expected {cast.__name__}") from None
        return ProjectConfig(
            project_id=str(obj["project_id"]), spec=spec, hyper=hyper, **kwargs
        )


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8700
    max_frame_bytes: int = 64 * 1024 * 1024
    project: ProjectConfig | None = None

    @staticmethod
    def load(path: str) -> "ServerConfig":
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(obj, dict):
            raise ConfigError("server config must be an object")
        cfg = ServerConfig()
        if "host" in obj:
            cfg.host = str(obj["host"])
        if "port" in obj:
            try:
                cfg.port = int(obj["port"])
            except (TypeError, ValueError):
                raise ConfigError("port: expected integer") from None
        if "max_frame_bytes" in obj:
            try:
                cfg.max_frame_bytes = int(obj["max_frame_bytes"])
            except (TypeError, ValueError):
                raise ConfigError("max_frame_bytes: expected integer") from None
        if "project" in obj:
            cfg.project = ProjectConfig.from_obj(obj["project"])
        cfg.apply_env()
        return cfg

    def apply_env(self) -> None:
        port = os.environ.get("GRADLOOM_PORT")
        if port:
            try:
                self.port = int(port)
            except ValueError:
                raise ConfigError(f"GRADLOOM_PORT is not an integer: {port!r}") from None
