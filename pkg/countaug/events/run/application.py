import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any
from uuid import UUID

from eventsourcing.application import Application

from ...utils import write_json
from .aggregate import Run


@dataclass
class TrackedRun:
    run_id: UUID
    manifest_path: Path
    outputs: dict[str, str] = field(default_factory=dict)


class RunLedger(Application):
    """
    Application service owning run manifests.
    Open runs stay in memory so logging a step only saves the new event.
    """

    def __init__(self, **kwargs) -> None:
        super().__init__(**kwargs)
        self._open: dict[UUID, Run] = {}
        self._clock: dict[UUID, float] = {}

    def _run(self, run_id: UUID) -> Run:
        return self._open.get(run_id) or self.repository.get(run_id)

    def start(
        self,
        kind: str,
        config: dict,
        config_hash: str,
        code_hash: str = "",
        data_hash: str = "",
        command: list[str] | None = None,
    ) -> UUID:
        run = Run(
            kind=kind,
            config=config,
            config_hash=config_hash,
            code_hash=code_hash,
            data_hash=data_hash,
            command=list(command or []),
            started_at=datetime.now().isoformat(),
        )
        self.save(run)
        self._open[run.id] = run
        self._clock[run.id] = time.perf_counter()
        return run.id

    def log_step(self, run_id: UUID, row: dict[str, Any]) -> None:
        run = self._run(run_id)
        run.log_step({k: (float(v) if isinstance(v, float) else v) for k, v in row.items()})
        self.save(run)

    def record_checkpoint(self, run_id: UUID, name: str, path: str | Path, config_hash: str,
                          parameter_hash: str = "") -> None:
        run = self._run(run_id)
        run.record_checkpoint(name, str(path), config_hash, parameter_hash)
        self.save(run)

    def _elapsed(self, run_id: UUID) -> float:
        return time.perf_counter() - self._clock.pop(run_id, time.perf_counter())

    def finish(self, run_id: UUID, outputs: dict[str, str]) -> None:
        run = self._run(run_id)
        run.finish({k: str(v) for k, v in outputs.items()}, datetime.now().isoformat(), self._elapsed(run_id))
        self.save(run)
        self._open.pop(run_id, None)

    def fail(self, run_id: UUID, error: str) -> None:
        run = self._run(run_id)
        run.fail(error, datetime.now().isoformat(), self._elapsed(run_id))
        self.save(run)
        self._open.pop(run_id, None)

    def manifest(self, run_id: UUID) -> dict[str, Any]:
        """Projection of the run's events into the manifest written next to its artifacts"""
        run = self._run(run_id)
        return {
            "run_id": str(run.id),
            "kind": run.kind,
            "status": run.status.value.lower(),
            "config": run.config,
            "config_hash": run.config_hash,
            "code_hash": run.code_hash,
            "data_hash": run.data_hash,
            "command": run.command,
            "started_at": run.started_at,
            "finished_at": run.finished_at,
            "wall_clock_seconds": run.wall_clock_seconds,
            "loss_log": run.loss_log,
            "checkpoints": run.checkpoints,
            "outputs": run.outputs,
            "error": run.error,
        }

    def write_manifest(self, run_id: UUID, path: str | Path) -> Path:
        return write_json(path, self.manifest(run_id))

    def get_events(self, run_id: UUID) -> list[dict[str, Any]]:
        return [
            {"event": type(e).__name__, "version": e.originator_version, "timestamp": e.timestamp.isoformat()}
            for e in self.events.get(run_id)
        ]

    @contextmanager
    def track(
        self,
        kind: str,
        config: dict,
        config_hash: str,
        manifest_path: str | Path,
        code_hash: str = "",
        data_hash: str = "",
        command: list[str] | None = None,
    ):
        """Start a run, then finish or fail it and write its manifest when the block exits"""
        run = TrackedRun(self.start(kind, config, config_hash, code_hash, data_hash, command), Path(manifest_path))
        try:
            yield run
        except BaseException as e:
            self.fail(run.run_id, f"{type(e).__name__}: {e}")
            self.write_manifest(run.run_id, run.manifest_path)
            raise
        self.finish(run.run_id, run.outputs)
        self.write_manifest(run.run_id, run.manifest_path)
