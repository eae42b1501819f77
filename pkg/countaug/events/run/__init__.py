from .aggregate import Run, RunStatus
from .application import RunLedger, TrackedRun

__all__ = ["Run", "RunLedger", "RunStatus", "TrackedRun"]
