"""Random copy-through pipelines for mimic tests."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from ems.bundlegraph import BundleStore


@dataclass
class Pipeline:
    """Node k is an upload when ``parents[k]`` is None, else a run over the parents."""

    parents: list[list[int] | None]
    payload: dict[int, bytes] = field(default_factory=dict)


def random_pipeline(rng: random.Random, max_nodes: int = 12) -> Pipeline:
    n = rng.randint(2, max_nodes)
    n_up = rng.randint(1, min(3, n - 1))
    parents: list[list[int] | None] = [None] * n_up
    for k in range(n_up, n):
        parents.append(sorted(rng.sample(range(k), rng.randint(1, min(3, k)))))
    payload = {k: f"upload{k}-{rng.randrange(10**6)}\n".encode() for k in range(n_up)}
    return Pipeline(parents, payload)


def command(k: int, parents: list[int]) -> str:
    cats = " ".join(f"d{p}/out" for p in parents)
    return f"cat {cats} > out && echo node{k} >> out"


def build(store: BundleStore, pipe: Pipeline, replace: dict[int, bytes] | None = None) -> list[str]:
    """Materialize ``pipe`` in ``store``; ``replace`` swaps upload payloads."""
    ids: list[str] = []
    for k, parents in enumerate(pipe.parents):
        if parents is None:
            data = (replace or {}).get(k, pipe.payload[k])
            ids.append(store.upload_tree({"out": data}, f"u{k}").bundle_id)
        else:
            deps = [(f"d{p}", ids[p]) for p in parents]
            ids.append(store.run(deps, command(k, parents), name=f"r{k}").bundle_id)
    return ids


def expected_out(pipe: Pipeline, k: int, override: dict[int, bytes]) -> bytes:
    """Contents of node k's ``out`` computed without any store."""
    if k in override:
        return override[k]
    parents = pipe.parents[k]
    if parents is None:
        return pipe.payload[k]
    return b"".join(expected_out(pipe, p, override) for p in parents) + f"node{k}\n".encode()


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
