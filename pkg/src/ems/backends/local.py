"""Local simulated batch queue.

Jobs are real subprocesses, each started in its own session in an isolated
working directory, with stdout/stderr captured to ``stdout.txt``/``stderr.txt``
there. One engine loop owns every state change; at most ``slots`` jobs run at
once and queued jobs start FIFO by (submit_time, job_index).
"""
from __future__ import annotations

import logging
import os
import signal
import subprocess
import tempfile
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..errors import BackendUnavailable, InvalidTransition
from ..scriptgrid import TaskSpec
from .registry import (CANCELLED, DONE, FAILED, QUEUED, RUNNING, TIMED_OUT, JobRecord,
                       JobRegistry)

logger = logging.getLogger(__name__)


@dataclass
class _Running:
    proc: subprocess.Popen
    started: float
    record: JobRecord


def _kill(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
    proc.wait()


class LocalBackend:
    """Queue plus engine; ``gate`` is called before submitting and running and
    raises :class:`BackendUnavailable` when the backend may not accept work."""

    def __init__(self, registry: JobRegistry | None = None, name: str = "local",
                 gate: Callable[[], None] | None = None, tick: float = 0.002,
                 workroot: Path | None = None):
        self.registry = registry if registry is not None else JobRegistry()
        self.name = name
        self.gate = gate
        self.tick = tick
        self.workroot = Path(workroot) if workroot else None
        self._running: dict[str, _Running] = {}
        self.stopped = False

    def check_available(self) -> None:
        if self.stopped:
            raise BackendUnavailable(f"backend {self.name} is stopped")
        if self.gate is not None:
            self.gate()

    # -- contract ----------------------------------------------------------
    def submit(self, task: TaskSpec) -> JobRecord:
        self.check_available()
        env = {"EMS_PID": task.pid, "EMS_JOB_INDEX": str(task.job_index), "EMS_SEED": str(task.seed)}
        env.update(task.env)
        rec = JobRecord(job_id="", backend=self.name, pid=task.pid, job_index=task.job_index,
                        command=list(task.command), workdir=task.workdir, env=env,
                        max_runtime_s=int(task.resources.max_runtime_s))
        return self.registry.register(rec)

    def status(self, job_id: str) -> JobRecord:
        return self.registry.get(self.name, job_id)

    def cancel(self, job_id: str) -> JobRecord:
        with self.registry.lock:
            rec = self.registry.get(self.name, job_id)
            if rec.state not in (QUEUED, RUNNING):
                raise InvalidTransition(f"job {job_id} is {rec.state}; only queued or running jobs can be cancelled")
            run = self._running.pop(str(job_id), None)
            if run is not None:
                _kill(run.proc)
                return self.registry.transition(self.name, job_id, CANCELLED, exit_code=run.proc.returncode)
            return self.registry.transition(self.name, job_id, CANCELLED)

    def running_count(self) -> int:
        return len(self._running)

    def running_pids(self) -> dict[str, int]:
        with self.registry.lock:
            return {jid: r.proc.pid for jid, r in self._running.items()}

    # -- engine ------------------------------------------------------------
    def _queued(self, only: set[str] | None) -> deque[JobRecord]:
        recs = [r for r in self.registry.records(backend=self.name)
                if r.state == QUEUED and (only is None or r.job_id in only)]
        recs.sort(key=lambda r: (r.submit_time, r.job_index, r.seq))
        return deque(recs)

    def _workdir(self, rec: JobRecord) -> Path:
        if rec.workdir:
            path = Path(rec.workdir)
        elif self.workroot is not None:
            path = self.workroot / self.name / rec.job_id
        else:
            path = Path(tempfile.mkdtemp(prefix=f"ems-{self.name}-{rec.job_id}-"))
            with self.registry.lock:
                self.registry._get(self.name, rec.job_id).workdir = str(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _start(self, rec: JobRecord) -> None:
        wd = self._workdir(rec)
        env = dict(os.environ)
        env.update(rec.env)
        rec = self.registry.transition(self.name, rec.job_id, RUNNING, workdir=str(wd))
        try:
            with open(wd / "stdout.txt", "wb") as out, open(wd / "stderr.txt", "wb") as err:
                proc = subprocess.Popen(rec.command, cwd=wd, env=env, stdout=out, stderr=err,
                                        stdin=subprocess.DEVNULL, start_new_session=True)
        except OSError as exc:
            logger.warning("job %s/%s failed to start: %s", self.name, rec.job_id, exc)
            (wd / "stderr.txt").write_text(f"cannot start {rec.command!r}: {exc}\n")
            self.registry.transition(self.name, rec.job_id, FAILED, exit_code=127,
                                     note=f"start failed: {exc}")
            return
        self._running[rec.job_id] = _Running(proc, time.monotonic(), rec)

    def _reap(self) -> None:
        now = time.monotonic()
        for jid, run in list(self._running.items()):
            rc = run.proc.poll()
            if rc is not None:
                del self._running[jid]
                self.registry.transition(self.name, jid, DONE if rc == 0 else FAILED, exit_code=rc)
            elif now - run.started > run.record.max_runtime_s:
                _kill(run.proc)
                del self._running[jid]
                self.registry.transition(self.name, jid, TIMED_OUT, exit_code=run.proc.returncode,
                                         note=f"exceeded max_runtime_s={run.record.max_runtime_s}")

    def run_local(self, slots: int = 1, on_tick: Callable[["LocalBackend"], None] | None = None,
                  only: set[str] | None = None) -> list[JobRecord]:
        """Drive queued jobs (optionally just ``only``) to a terminal state."""
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.check_available()
        only = {str(j) for j in only} if only is not None else None
        pending = self._queued(only)
        touched = [r.job_id for r in pending]
        try:
            while True:
                with self.registry.lock:
                    self._reap()
                    while len(self._running) < slots and pending:
                        rec = pending.popleft()
                        current = self.registry.get(self.name, rec.job_id)
                        if current.state == QUEUED:
                            self._start(current)
                    idle = not pending and not self._running
                if on_tick is not None:
                    on_tick(self)
                self.registry.flush()
                if idle:
                    break
                time.sleep(self.tick)
        finally:
            with self.registry.lock:
                for jid, run in list(self._running.items()):
                    _kill(run.proc)
                    del self._running[jid]
                    self.registry.transition(self.name, jid, CANCELLED, exit_code=run.proc.returncode,
                                             note="engine interrupted")
            self.registry.flush()
        return [self.registry.get(self.name, j) for j in touched]
