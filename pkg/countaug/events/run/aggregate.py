from enum import Enum

from eventsourcing.domain import Aggregate, event


class RunStatus(str, Enum):
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"
    FAILED = "FAILED"


class Run(Aggregate):
    """Append-only record of one command run: config, per-step losses, checkpoints, outcome"""

    @event("Started")
    def __init__(
        self,
        kind: str,
        config: dict,
        config_hash: str,
        code_hash: str,
        data_hash: str,
        command: list,
        started_at: str,
    ) -> None:
        self.kind = kind
        self.config = config
        self.config_hash = config_hash
        self.code_hash = code_hash
        self.data_hash = data_hash
        self.command = command
        self.started_at = started_at
        self.loss_log = []
        self.checkpoints = []
        self.outputs = {}
        self.finished_at = None
        self.wall_clock_seconds = None
        self.error = None
        self.status = RunStatus.RUNNING

    @event("StepLogged")
    def log_step(self, row: dict) -> None:
        if self.status != RunStatus.RUNNING:
            raise ValueError("Can only log steps on a running run")
        if self.loss_log and row.get("step", 0) <= self.loss_log[-1].get("step", 0):
            raise ValueError(f"Step {row.get('step')} does not follow step {self.loss_log[-1].get('step')}")
        self.loss_log.append(row)

    @event("CheckpointRecorded")
    def record_checkpoint(self, name: str, path: str, config_hash: str, parameter_hash: str) -> None:
        if config_hash != self.config_hash:
            raise ValueError(
                f"Checkpoint {name} carries config hash {config_hash[:12]}, run has {self.config_hash[:12]}"
            )
        self.checkpoints.append({"name": name, "path": path, "config_hash": config_hash,
                                 "parameter_hash": parameter_hash})

    @event("Finished")
    def finish(self, outputs: dict, finished_at: str, wall_clock_seconds: float) -> None:
        if self.status != RunStatus.RUNNING:
            raise ValueError("Can only finish a running run")
        self.outputs = outputs
        self.finished_at = finished_at
        self.wall_clock_seconds = wall_clock_seconds
        self.status = RunStatus.FINISHED

    @event("Failed")
    def fail(self, error: str, finished_at: str, wall_clock_seconds: float) -> None:
        if self.status != RunStatus.RUNNING:
            raise ValueError("Can only fail a running run")
        self.error = error
        self.finished_at = finished_at
        self.wall_clock_seconds = wall_clock_seconds
        self.status = RunStatus.FAILED
