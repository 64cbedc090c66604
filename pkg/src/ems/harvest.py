"""Collecting per-job results of a package: reduce, get and progress."""
from __future__ import annotations

import shutil
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from .backends.registry import STATES, TERMINAL, JobRegistry
from .errors import NoSuchResultFile, NotLineOriented, UnknownPackage
from .fsutil import atomic_write_bytes, read_tree, write_json
from .packaging import MANIFEST_NAME, normalize_path, package_dir, read_manifest, sha1_hex


@dataclass
class ReduceReport:
    pid: str
    filename: str
    jobs_included: list[int]
    header_deduplicated: bool
    output_path: str
    jobs_missing: list[int] = field(default_factory=list)
    jobs_excluded: list[int] = field(default_factory=list)
    lines: int = 0

    def to_dict(self) -> dict:
        return {
            "pid": self.pid, "filename": self.filename, "jobs_included": self.jobs_included,
            "jobs_missing": self.jobs_missing, "jobs_excluded": self.jobs_excluded,
            "header_deduplicated": self.header_deduplicated, "output_path": self.output_path,
            "lines": self.lines,
        }


def _n_jobs(root: Path, pid: str) -> int:
    return read_manifest(root, pid).n_jobs


def _check_text(path: Path, data: bytes) -> None:
    if b"\0" in data:
        raise NotLineOriented(f"{path} looks binary (contains NUL bytes)")
    try:
        data.decode("utf-8")
    except UnicodeDecodeError:
        raise NotLineOriented(f"{path} is not UTF-8 text") from None


def _lines(data: bytes) -> list[bytes]:
    if data and not data.endswith(b"\n"):
        data += b"\n"
    return data.splitlines(keepends=True)


def reduce(root: Path, pid: str, filename: str, registry: JobRegistry | None = None) -> ReduceReport:
    """Concatenate ``jobs/<k>/<filename>`` in job order into ``reduce/<filename>``.

    When every collected file starts with the same line it is kept once, as a
    header. Files lacking a final newline get one. Jobs whose latest record is
    not terminal are excluded; jobs without the file are reported missing.
    """
    filename = normalize_path(filename)
    n = _n_jobs(root, pid)
    latest = registry.latest_for_package(pid) if registry is not None else {}
    pdir = package_dir(root, pid)
    included, missing, excluded = [], [], []
    chunks: list[list[bytes]] = []
    for k in range(n):
        rec = latest.get(k)
        if rec is not None and rec.state not in TERMINAL:
            excluded.append(k)
            continue
        path = pdir / "jobs" / str(k) / filename
        if not path.is_file():
            missing.append(k)
            continue
        data = path.read_bytes()
        _check_text(path, data)
        included.append(k)
        chunks.append(_lines(data))
    if not included:
        raise NoSuchResultFile(f"no job of package {pid} has {filename}")

    firsts = {c[0] if c else None for c in chunks}
    dedup = len(chunks) > 1 and len(firsts) == 1 and None not in firsts
    out: list[bytes] = []
    for i, c in enumerate(chunks):
        out += c[1:] if dedup and i > 0 else c
    output = pdir / "reduce" / filename
    atomic_write_bytes(output, b"".join(out))
    report = ReduceReport(pid, filename, included, dedup, str(output), missing, excluded, len(out))
    write_json(output.parent / f"{PurePosixPath(filename).name}.report.json", report.to_dict())
    return report


@dataclass
class GetResult:
    pid: str
    dest: str
    files: dict[str, str]

    def to_dict(self) -> dict:
        return {"pid": self.pid, "dest": self.dest, "files": self.files}


def _ignore_links(directory: str, names: list[str]) -> set[str]:
    return {n for n in names if Path(directory, n).is_symlink()}


def get(root: Path, pid: str, dest: Path) -> GetResult:
    """Copy manifest, script, reduce outputs and per-job outputs to ``<dest>/<pid>/``.

    Dependency links inside job directories are not copied. Re-running replaces
    the destination, so repeated calls leave identical trees.
    """
    pdir = package_dir(root, pid)
    if not (pdir / MANIFEST_NAME).is_file():
        raise UnknownPackage(f"no package {pid} under {root}")
    target = Path(dest) / str(pid)
    if target.exists():
        shutil.rmtree(target)
    target.mkdir(parents=True)
    shutil.copy2(pdir / MANIFEST_NAME, target / MANIFEST_NAME)
    if (pdir / "script").exists():
        shutil.copy2(pdir / "script", target / "script")
    for sub in ("reduce", "jobs"):
        if (pdir / sub).is_dir():
            shutil.copytree(pdir / sub, target / sub, ignore=_ignore_links)
    files = {rel: sha1_hex(data) for rel, data in read_tree(target).items()}
    return GetResult(str(pid), str(target), files)


def progress(root: Path, pid: str, registry: JobRegistry) -> dict[str, int]:
    """Job counts per state (latest record per job); unsubmitted jobs counted too."""
    n = _n_jobs(root, pid)
    latest = registry.latest_for_package(pid)
    counts = Counter(latest[k].state if k in latest else "unsubmitted" for k in range(n))
    order = list(STATES) + ["unsubmitted"]
    return {s: counts[s] for s in order if counts[s]}
