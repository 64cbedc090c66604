"""Small filesystem helpers shared by the stores."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

from .errors import IoFailure


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, obj: Any) -> None:
    atomic_write_text(path, dump_json(obj))


def read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def read_tree(root: Path, prefix: str = "") -> dict[str, bytes]:
    """Read every regular file under ``root`` into a ``relpath -> bytes`` map.

    Paths use forward slashes. ``prefix`` is prepended to every key.
    """
    root = Path(root)
    tree: dict[str, bytes] = {}
    try:
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for fn in sorted(filenames):
                full = Path(dirpath) / fn
                rel = full.relative_to(root).as_posix()
                tree[prefix + rel] = full.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read tree {root}: {exc}") from exc
    return tree


def write_tree(root: Path, tree: Mapping[str, bytes]) -> None:
    root = Path(root)
    try:
        for rel, data in tree.items():
            dest = root / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write tree {root}: {exc}") from exc
