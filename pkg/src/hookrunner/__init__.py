"""Webhook-driven pull/execute/push automation server."""

from .config import Config, ConfigError, load_config
from .executor import ExecutionReport, JobSpec, PipelineExecutor, ReportTarget
from .server import AutomationServer
from .state import Phase, PushEvent, ServerState, SharedState, Source, Task, TaskStatus
from .taskqueue import EnqueueResult, QueueClosed, TaskQueue

__all__ = [
    "AutomationServer", "Config", "ConfigError", "EnqueueResult", "ExecutionReport", "JobSpec",
    "Phase", "PipelineExecutor", "PushEvent", "QueueClosed", "ReportTarget", "ServerState",
    "SharedState", "Source", "Task", "TaskQueue", "TaskStatus", "load_config",
]

__version__ = "0.1.0"
