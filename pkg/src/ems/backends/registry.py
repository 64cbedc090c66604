"""Job records and the append-only job-state registry.

Every state change is appended to ``state/events.jsonl`` before it is visible;
``state/jobs.json`` is a materialized view rewritten on :meth:`JobRegistry.flush`.
Loading replays the event log, so a stale view never wins.
"""
from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

from ..errors import InvalidTransition, IoFailure, UnknownJob
from ..fsutil import write_json
from ..packaging import utc_now

QUEUED, RUNNING, DONE, FAILED, TIMED_OUT, CANCELLED = (
    "queued", "running", "done", "failed", "timed_out", "cancelled")
STATES = (QUEUED, RUNNING, DONE, FAILED, TIMED_OUT, CANCELLED)
TERMINAL = frozenset({DONE, FAILED, TIMED_OUT, CANCELLED})
TRANSITIONS = {
    QUEUED: frozenset({RUNNING, CANCELLED}),
    RUNNING: frozenset({DONE, FAILED, TIMED_OUT, CANCELLED}),
}


def legal(old: str, new: str) -> bool:
    return new in TRANSITIONS.get(old, ())


@dataclass
class JobRecord:
    job_id: str
    backend: str
    pid: str
    job_index: int
    state: str = QUEUED
    submit_time: str | None = None
    start_time: str | None = None
    end_time: str | None = None
    exit_code: int | None = None
    command: list[str] = field(default_factory=list)
    workdir: str | None = None
    env: dict[str, str] = field(default_factory=dict)
    max_runtime_s: int = 300
    seq: int = 0
    note: str = ""

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "JobRecord":
        return cls(**data)


class JobRegistry:
    """Single-writer store of :class:`JobRecord` objects.

    ``state_dir=None`` keeps everything in memory (used for ephemeral map runs).
    All mutations take the registry lock; readers get copies.
    """

    def __init__(self, state_dir: Path | None = None):
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self._lock = threading.RLock()
        self._records: dict[tuple[str, str], JobRecord] = {}
        self._next_id: dict[str, int] = {}
        self._seq = 0
        self._dirty = False
        self._memory_events: list[dict] = []
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    @property
    def events_path(self) -> Path | None:
        return self.state_dir / "events.jsonl" if self.state_dir else None

    @property
    def jobs_path(self) -> Path | None:
        return self.state_dir / "jobs.json" if self.state_dir else None

    @property
    def lock(self) -> threading.RLock:
        return self._lock

    # -- persistence -------------------------------------------------------
    def _append(self, event: dict) -> None:
        if self.events_path is None:
            self._memory_events.append(event)
            return
        try:
            with open(self.events_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot append to {self.events_path}: {exc}") from exc

    def events(self) -> Iterator[dict]:
        if self.events_path is None:
            yield from list(self._memory_events)
            return
        if not self.events_path.exists():
            return
        with open(self.events_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)

    def _replay(self) -> None:
        for ev in self.events():
            key = (ev["backend"], ev["job_id"])
            if ev["event"] == "submit":
                rec = JobRecord.from_dict(ev["record"])
                self._records[key] = rec
                self._seq = max(self._seq, rec.seq)
                self._next_id[rec.backend] = max(self._next_id.get(rec.backend, 0), int(rec.job_id))
            else:
                rec = self._records[key]
                for k, v in ev["fields"].items():
                    setattr(rec, k, v)
                rec.state = ev["to"]

    def flush(self) -> None:
        with self._lock:
            if self.jobs_path is None or not self._dirty:
                self._dirty = False
                return
            write_json(self.jobs_path, [r.to_dict() for r in
                                        sorted(self._records.values(), key=lambda r: r.seq)])
            self._dirty = False

    # -- mutation ----------------------------------------------------------
    def register(self, record: JobRecord) -> JobRecord:
        """Assign the next dense job id for the record's backend and persist it queued."""
        with self._lock:
            n = self._next_id.get(record.backend, 0) + 1
            self._next_id[record.backend] = n
            self._seq += 1
            rec = replace(record, job_id=str(n), state=QUEUED, seq=self._seq,
                          submit_time=record.submit_time or utc_now())
            self._append({"event": "submit", "backend": rec.backend, "job_id": rec.job_id,
                          "time": rec.submit_time, "to": QUEUED, "record": rec.to_dict()})
            self._records[(rec.backend, rec.job_id)] = rec
            self._dirty = True
            return replace(rec)

    def transition(self, backend: str, job_id: str, new_state: str, **fields) -> JobRecord:
        with self._lock:
            rec = self._get(backend, job_id)
            if not legal(rec.state, new_state):
                raise InvalidTransition(
                    f"job {backend}/{job_id}: {rec.state} -> {new_state} is not allowed")
            now = utc_now()
            if new_state == RUNNING:
                fields.setdefault("start_time", now)
            elif new_state in TERMINAL:
                fields.setdefault("end_time", now)
            self._append({"event": "transition", "backend": backend, "job_id": job_id,
                          "time": now, "from": rec.state, "to": new_state, "fields": fields})
            for k, v in fields.items():
                setattr(rec, k, v)
            rec.state = new_state
            self._dirty = True
            return replace(rec)

    # -- queries -----------------------------------------------------------
    def _get(self, backend: str, job_id: str) -> JobRecord:
        try:
            return self._records[(backend, str(job_id))]
        except KeyError:
            raise UnknownJob(f"no job {job_id} on backend {backend}") from None

    def get(self, backend: str, job_id: str) -> JobRecord:
        with self._lock:
            return replace(self._get(backend, job_id))

    def records(self, backend: str | None = None, pid: str | None = None) -> list[JobRecord]:
        with self._lock:
            out = [replace(r) for r in self._records.values()
                   if (backend is None or r.backend == backend) and (pid is None or r.pid == pid)]
        return sorted(out, key=lambda r: r.seq)

    def latest_for_package(self, pid: str) -> dict[int, JobRecord]:
        """Most recent record per job index of a package."""
        latest: dict[int, JobRecord] = {}
        for rec in self.records(pid=pid):
            latest[rec.job_index] = rec
        return latest


def audit(events) -> list[str]:
    """Replay an event stream and report every illegal transition."""
    states: dict[tuple[str, str], str] = {}
    problems = []
    for ev in events:
        key = (ev["backend"], ev["job_id"])
        if ev["event"] == "submit":
            if key in states:
                problems.append(f"{key}: submitted twice")
            states[key] = QUEUED
            continue
        old = states.get(key)
        if old is None:
            problems.append(f"{key}: transition before submit")
        elif old != ev["from"] or not legal(old, ev["to"]):
            problems.append(f"{key}: {old} -> {ev['to']}")
        states[key] = ev["to"]
    return problems
