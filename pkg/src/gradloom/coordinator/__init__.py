"""The master process: project state, the iteration loop, and the control API."""

from gradloom.coordinator.config import ConfigError, ProjectConfig, ServerConfig
from gradloom.coordinator.loop import ProjectRuntime, WorkerLink
from gradloom.coordinator.state import ProjectState, RegistrationError, WorkerRecord

__all__ = [
    "ConfigError",
    "ProjectConfig",
    "ProjectState",
    "RegistrationError",
    "ServerConfig",
]
