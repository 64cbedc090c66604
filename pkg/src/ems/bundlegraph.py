"""Immutable provenance store of bundles.

Upload bundles are file trees addressed by the SHA-1 of their canonical form.
Run bundles are produced by executing a shell command in a fresh directory
where each dependency is staged under its alias; the bundle's contents are
exactly the files the command wrote there. Dependencies only ever point at
existing bundles, so the graph is a DAG by construction.

Store layout::

    <root>/bundles/<id>/meta.json
    <root>/bundles/<id>/contents/...
    <root>/bundles/<id>/stdout, stderr      (run bundles)
    <root>/worksheets/<name>.ws
"""
from __future__ import annotations

import hashlib
import os
import re
import shutil
import stat
import subprocess
import tempfile
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (CycleDetected, DanglingReference, DependencyNotReady, EmptyUpload,
                     InvalidPath, IoFailure, UnknownBundle, UnknownDependency)
from .fsutil import atomic_write_text, read_json, read_tree, write_json, write_tree
from .packaging import canonicalize, sha1_hex, utc_now

UPLOAD, RUN = "upload", "run"
CREATED, STAGED, RUNNING, READY, FAILED = "created", "staged", "running", "ready", "failed"

_ALIAS = re.compile(r"^[A-Za-z0-9_.][A-Za-z0-9_.\-]*$")


@dataclass
class Bundle:
    bundle_id: str
    kind: str
    name: str
    deps: list[tuple[str, str]] = field(default_factory=list)
    command: str | None = None
    state: str = CREATED
    contents_hash: str | None = None
    is_dir: bool = True
    seq: int = 0
    exit_code: int | None = None
    created_at: str = ""
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "bundle_id": self.bundle_id, "kind": self.kind, "name": self.name,
            "deps": [list(d) for d in self.deps], "command": self.command, "state": self.state,
            "contents_hash": self.contents_hash, "is_dir": self.is_dir, "seq": self.seq,
            "exit_code": self.exit_code, "created_at": self.created_at, "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Bundle":
        d = dict(d)
        d["deps"] = [tuple(x) for x in d.get("deps", [])]
        return cls(**d)


@dataclass
class MimicResult:
    mapping: dict[str, str]
    executed: list[str]
    failed: list[str]

    def to_dict(self) -> dict:
        return {"mapping": dict(self.mapping), "executed": list(self.executed),
                "failed": list(self.failed)}


def tree_hash(tree: dict[str, bytes]) -> str:
    return sha1_hex(canonicalize("", tree, {}))


def _run_id(command: str, deps: Sequence[tuple[str, str]], nonce: int) -> str:
    h = hashlib.sha1()
    h.update(b"run\0" + command.encode("utf-8") + b"\0")
    for alias, dep in deps:
        h.update(f"{alias}\0{dep}\0".encode("utf-8"))
    h.update(f"nonce\0{nonce}".encode("ascii"))
    return h.hexdigest()


def _make_readonly(path: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(path):
        for fn in filenames:
            os.chmod(os.path.join(dirpath, fn), 0o444)


def _make_writable(path: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(path):
        os.chmod(dirpath, 0o755)
        for fn in filenames:
            p = os.path.join(dirpath, fn)
            if not os.path.islink(p):
                os.chmod(p, 0o644)


class BundleStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.bundle_dir = self.root / "bundles"
        self.worksheet_dir = self.root / "worksheets"
        self.bundle_dir.mkdir(parents=True, exist_ok=True)
        self._bundles: dict[str, Bundle] = {}
        for meta in sorted(self.bundle_dir.glob("*/meta.json")):
            b = Bundle.from_dict(read_json(meta))
            self._bundles[b.bundle_id] = b
        self._seq = max((b.seq for b in self._bundles.values()), default=0)

    # -- bookkeeping -------------------------------------------------------
    def _path(self, bundle_id: str) -> Path:
        return self.bundle_dir / bundle_id

    def contents_path(self, ref: str) -> Path:
        return self._path(self.resolve(ref)) / "contents"

    def _save(self, b: Bundle) -> None:
        write_json(self._path(b.bundle_id) / "meta.json", b.to_dict())
        self._bundles[b.bundle_id] = b

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def bundles(self) -> list[Bundle]:
        return [replace(b) for b in sorted(self._bundles.values(), key=lambda b: b.seq)]

    def resolve(self, ref: str, error=UnknownBundle) -> str:
        """Full id for an id, a unique id prefix (4+ chars) or a bundle name (latest wins)."""
        if ref in self._bundles:
            return ref
        if re.fullmatch(r"[0-9a-f]{4,40}", ref):
            hits = [i for i in self._bundles if i.startswith(ref)]
            if len(hits) == 1:
                return hits[0]
            if len(hits) > 1:
                raise error(f"bundle prefix {ref!r} is ambiguous")
        named = [b for b in self._bundles.values() if b.name == ref]
        if named:
            return max(named, key=lambda b: b.seq).bundle_id
        raise error(f"no bundle {ref!r}")

    def get(self, ref: str) -> Bundle:
        return replace(self._bundles[self.resolve(ref)])

    def contents(self, ref: str) -> dict[str, bytes]:
        path = self.contents_path(ref)
        return read_tree(path) if path.exists() else {}

    # -- uploads -----------------------------------------------------------
    def upload(self, path: Path, name: str | None = None) -> Bundle:
        path = Path(path)
        name = name or path.resolve().name
        if path.is_dir():
            return self.upload_tree(read_tree(path), name, is_dir=True)
        if path.is_file():
            return self.upload_tree({name: path.read_bytes()}, name, is_dir=False)
        raise IoFailure(f"cannot upload {path}: no such file or directory")

    def upload_tree(self, tree: dict[str, bytes], name: str, is_dir: bool = True) -> Bundle:
        """Store an upload bundle; identical content and name give the same id."""
        if not tree:
            raise EmptyUpload("cannot upload an empty tree")
        if not _ALIAS.match(name):
            raise InvalidPath(f"bundle name must be a single path component: {name!r}")
        if not is_dir and list(tree) != [name]:
            raise ValueError("a file bundle holds exactly one file named after the bundle")
        keyed = tree if not is_dir else {f"{name}/{k}": v for k, v in tree.items()}
        bundle_id = tree_hash(keyed)
        if bundle_id in self._bundles:
            return self.get(bundle_id)
        bdir = self._path(bundle_id)
        write_tree(bdir / "contents", tree)
        _make_readonly(bdir / "contents")
        b = Bundle(bundle_id, UPLOAD, name, [], None, READY, tree_hash(dict(tree)), is_dir,
                   self._next_seq(), None, utc_now())
        self._save(b)
        return replace(b)

    # -- runs --------------------------------------------------------------
    def _check_deps(self, deps: Sequence[tuple[str, str]]) -> list[tuple[str, str]]:
        resolved = []
        seen = set()
        for alias, ref in deps:
            dep_id = self.resolve(ref, UnknownDependency)
            alias = alias or self._bundles[dep_id].name
            if not _ALIAS.match(alias) or alias in (".", ".."):
                raise InvalidPath(f"bad dependency alias {alias!r}")
            if alias in seen:
                raise InvalidPath(f"duplicate dependency alias {alias!r}")
            seen.add(alias)
            resolved.append((alias, dep_id))
        return resolved

    def run(self, deps: Sequence[tuple[str, str]], command: str, name: str | None = None,
            timeout: float | None = None) -> Bundle:
        """Create and execute a run bundle.

        ``deps`` is a list of ``(alias, ref)``; an empty alias means the
        dependency's own name. The bundle ends ``ready`` on exit status 0 and
        ``failed`` otherwise; contents are captured either way.
        """
        resolved = self._check_deps(deps)
        for alias, dep_id in resolved:
            if self._bundles[dep_id].state != READY:
                raise DependencyNotReady(f"dependency {alias}:{dep_id[:8]} is {self._bundles[dep_id].state}")
        b = self._create_run(resolved, command, name)
        return self._execute(b, timeout)

    def _create_run(self, resolved, command: str, name: str | None, state: str = CREATED,
                    note: str = "") -> Bundle:
        seq = self._next_seq()
        bundle_id = _run_id(command, resolved, seq)
        b = Bundle(bundle_id, RUN, name or "run", list(resolved), command, state, None, True, seq,
                   None, utc_now(), note)
        self._path(bundle_id).mkdir(parents=True, exist_ok=True)
        self._save(b)
        return b

    def _stage(self, b: Bundle, workdir: Path) -> None:
        for alias, dep_id in b.deps:
            dep = self._bundles[dep_id]
            src = self._path(dep_id) / "contents"
            dest = workdir / alias
            if dep.is_dir:
                if src.exists():
                    shutil.copytree(src, dest)
                else:
                    dest.mkdir()
            else:
                shutil.copyfile(src / dep.name, dest)
            # read-only staging; not enforceable against root, hence capture skips aliases
            if dest.is_dir():
                _make_readonly(dest)
                for dirpath, _, _ in os.walk(dest):
                    os.chmod(dirpath, 0o555)
            else:
                os.chmod(dest, 0o444)

    def _execute(self, b: Bundle, timeout: float | None) -> Bundle:
        bdir = self._path(b.bundle_id)
        tmp_root = self.root / "tmp"
        tmp_root.mkdir(parents=True, exist_ok=True)
        workdir = Path(tempfile.mkdtemp(prefix=f"{b.bundle_id[:8]}-", dir=tmp_root))
        try:
            self._stage(b, workdir)
            b.state = STAGED
            self._save(b)
            b.state = RUNNING
            self._save(b)
            env = dict(os.environ, EMS_BUNDLE_ID=b.bundle_id)
            with open(bdir / "stdout", "wb") as out, open(bdir / "stderr", "wb") as err:
                try:
                    proc = subprocess.run(b.command, shell=True, cwd=workdir, env=env, stdout=out,
                                          stderr=err, stdin=subprocess.DEVNULL, timeout=timeout)
                    b.exit_code = proc.returncode
                except subprocess.TimeoutExpired:
                    b.exit_code = None
                    b.note = f"timed out after {timeout}s"
            staged = {alias for alias, _ in b.deps}
            captured: dict[str, bytes] = {}
            for entry in sorted(os.listdir(workdir)):
                if entry in staged:
                    continue
                full = workdir / entry
                if full.is_dir():
                    captured.update(read_tree(full, prefix=f"{entry}/"))
                elif full.is_file():
                    captured[entry] = full.read_bytes()
            write_tree(bdir / "contents", captured)
            (bdir / "contents").mkdir(exist_ok=True)
            _make_readonly(bdir / "contents")
            b.contents_hash = tree_hash(captured)
            b.state = READY if b.exit_code == 0 else FAILED
            self._save(b)
        finally:
            _make_writable(workdir)
            shutil.rmtree(workdir, ignore_errors=True)
        return replace(b)

    # -- graph -------------------------------------------------------------
    def dependents(self) -> dict[str, list[str]]:
        rev: dict[str, list[str]] = defaultdict(list)
        for b in self._bundles.values():
            for _, dep in b.deps:
                rev[dep].append(b.bundle_id)
        return rev

    def downstream_closure(self, ref: str) -> list[Bundle]:
        """Run bundles reachable from ``ref`` along reverse dependency edges,
        dependencies first, ties broken by (level, bundle_id)."""
        start = self.resolve(ref)
        rev = self.dependents()
        reach: set[str] = set()
        todo = deque([start])
        while todo:
            cur = todo.popleft()
            for nxt in rev.get(cur, ()):
                if nxt not in reach:
                    reach.add(nxt)
                    todo.append(nxt)
        level: dict[str, int] = {start: 0}

        def lvl(bid: str) -> int:
            if bid not in level:
                parents = [d for _, d in self._bundles[bid].deps if d in reach or d == start]
                level[bid] = 1 + max(lvl(p) for p in parents)
            return level[bid]

        order = sorted(reach, key=lambda bid: (lvl(bid), bid))
        return [replace(self._bundles[bid]) for bid in order]

    def check_acyclic(self) -> None:
        indeg = {bid: 0 for bid in self._bundles}
        rev = self.dependents()
        for b in self._bundles.values():
            indeg[b.bundle_id] = len(b.deps)
        todo = deque(bid for bid, n in indeg.items() if n == 0)
        seen = 0
        while todo:
            cur = todo.popleft()
            seen += 1
            for nxt in rev.get(cur, ()):
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    todo.append(nxt)
        if seen != len(indeg):
            raise CycleDetected("bundle dependency graph has a cycle")

    def verify(self) -> list[str]:
        """Ids of ready bundles whose contents no longer hash to ``contents_hash``."""
        bad = []
        for b in self._bundles.values():
            if b.state == READY and tree_hash(self.contents(b.bundle_id)) != b.contents_hash:
                bad.append(b.bundle_id)
        return bad

    def mimic(self, old: str, new: str, timeout: float | None = None) -> MimicResult:
        """Re-execute everything downstream of ``old`` with ``new`` substituted."""
        old_id, new_id = self.resolve(old), self.resolve(new)
        if self._bundles[new_id].state != READY:
            raise DependencyNotReady(f"replacement {new_id[:8]} is {self._bundles[new_id].state}")
        mapping = {old_id: new_id}
        executed, failed = [], []
        for orig in self.downstream_closure(old_id):
            deps = [(alias, mapping.get(dep, dep)) for alias, dep in orig.deps]
            blocked = [d for _, d in deps if self._bundles[d].state != READY]
            if blocked:
                b = self._create_run(deps, orig.command, orig.name, FAILED,
                                     note="dependency failed: " + ", ".join(x[:8] for x in blocked))
            else:
                b = self._execute(self._create_run(deps, orig.command, orig.name), timeout)
                executed.append(b.bundle_id)
            if b.state != READY:
                failed.append(b.bundle_id)
            mapping[orig.bundle_id] = b.bundle_id
        return MimicResult(mapping, executed, failed)

    # -- worksheets --------------------------------------------------------
    def worksheet_path(self, name: str) -> Path:
        return self.worksheet_dir / f"{name}.ws"

    def load_worksheet(self, name: str) -> "Worksheet":
        path = self.worksheet_path(name)
        if not path.exists():
            raise IoFailure(f"no worksheet {name!r} at {path}")
        return parse_worksheet(path.read_text(encoding="utf-8"), name)

    def save_worksheet(self, ws: "Worksheet") -> Path:
        path = self.worksheet_path(ws.name)
        atomic_write_text(path, dump_worksheet(ws))
        return path

    def render_worksheet(self, ws: "Worksheet") -> str:
        return render_worksheet(ws, self)


# -- worksheets ---------------------------------------------------------------

DEFAULT_COLUMNS = ("id", "kind", "state", "command")
COLUMNS = ("id", "name", "kind", "state", "command", "deps", "contents_hash", "exit_code")


@dataclass
class TextItem:
    text: str


@dataclass
class BundleItem:
    ref: str


@dataclass
class SchemaItem:
    columns: tuple[str, ...]


@dataclass
class Worksheet:
    name: str
    items: list = field(default_factory=list)


def parse_worksheet(text: str, name: str = "worksheet") -> Worksheet:
    """Item-per-line format: ``% text``, ``{bundle-ref}``, ``%% schema col ...``.

    Other lines are kept as text verbatim.
    """
    items: list = []
    for raw in text.splitlines():
        line = raw.rstrip()
        if line.startswith("%%"):
            words = line[2:].split()
            if not words or words[0] != "schema":
                raise ValueError(f"unknown worksheet directive: {line!r}")
            cols = tuple(words[1:]) or DEFAULT_COLUMNS
            unknown = [c for c in cols if c not in COLUMNS]
            if unknown:
                raise ValueError(f"unknown schema columns {unknown}; choose from {COLUMNS}")
            items.append(SchemaItem(cols))
        elif re.fullmatch(r"\{[^{}\s]+\}", line.strip()):
            items.append(BundleItem(line.strip()[1:-1]))
        elif line.startswith("%"):
            items.append(TextItem(line[2:] if line.startswith("% ") else line[1:]))
        else:
            items.append(TextItem(line))
    return Worksheet(name, items)


def dump_worksheet(ws: Worksheet) -> str:
    out = []
    for item in ws.items:
        if isinstance(item, TextItem):
            out.append(f"% {item.text}" if item.text else "%")
        elif isinstance(item, BundleItem):
            out.append(f"{{{item.ref}}}")
        else:
            out.append("%% schema " + " ".join(item.columns))
    return "\n".join(out) + "\n"


def _cell(b: Bundle, col: str) -> str:
    if col == "id":
        value = b.bundle_id[:8]
    elif col == "contents_hash":
        value = (b.contents_hash or "")[:8]
    elif col == "deps":
        value = " ".join(f"{a}:{d[:8]}" for a, d in b.deps)
    elif col == "exit_code":
        value = "" if b.exit_code is None else str(b.exit_code)
    else:
        value = getattr(b, col) or ""
    return str(value).replace("|", "\\|").replace("\n", " ")


def render_worksheet(ws: Worksheet, store: BundleStore) -> str:
    """Markdown: text verbatim, consecutive bundle references as one table."""
    columns = DEFAULT_COLUMNS
    out: list[str] = []
    table_open = False
    for item in ws.items:
        if isinstance(item, BundleItem):
            try:
                b = store.get(item.ref)
            except UnknownBundle:
                raise DanglingReference(f"worksheet {ws.name} refers to unknown bundle {item.ref!r}") from None
            if not table_open:
                out.append("| " + " | ".join(columns) + " |")
                out.append("|" + "|".join("---" for _ in columns) + "|")
                table_open = True
            out.append("| " + " | ".join(_cell(b, c) for c in columns) + " |")
            continue
        table_open = False
        if isinstance(item, SchemaItem):
            columns = item.columns
        else:
            out.append(item.text)
    return "\n".join(out) + "\n"
