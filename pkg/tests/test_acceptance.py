"""Acceptance gate: one test per criterion, summarized as PASS/FAIL lines."""
import base64
import json
import random
import subprocess
import sys
import time
from pathlib import Path

import pytest

import oracles
from dags import build, expected_out, random_pipeline, snapshot
from ems.backends import BUILTIN_PROFILES, LocalBackend, MapFailure, ServerlessBackend, admit
from ems.backends import emit_batch_script
from ems.bundlegraph import BundleStore
from ems.cli import main
from ems.harvest import reduce
from ems.packaging import ExperimentPackage, compute_pid, derive_seeds, materialize, write_manifest
from ems.provision import setup_time
from ems.resources import ResourceRequest
from ems.scriptgrid import split_jobs
from fixtures import golden_task

GOLDEN = Path(__file__).parent / "golden"


def report(number: int, detail: str) -> None:
    print(f"criterion {number}: {detail}")


# 1 ------------------------------------------------------------------------------

@pytest.mark.criterion(1, "grid split 10x5 -> 50 jobs, 50 done with slots=8, < 30 s")
def test_c1_grid_split(tmp_path):
    script = ("for architecture in range(10):\n"
              "    for dataset in ['d0', 'd1', 'd2', 'd3', 'd4']:\n"
              "        pass\n")
    t0 = time.monotonic()
    pkg = ExperimentPackage(script, {}, {"script_name": "DLexperiment.py"})
    materialize(pkg, tmp_path)
    tasks = split_jobs(pkg, ResourceRequest(), tmp_path)
    assert len(tasks) == 50
    be = LocalBackend()
    for t in tasks:
        be.submit(t)
    records = be.run_local(slots=8)
    elapsed = time.monotonic() - t0
    assert len(records) == 50 and all(r.state == "done" for r in records)
    assert elapsed < 30
    report(1, f"50 TaskSpecs, 50 done in {elapsed:.2f}s")


# 2 ------------------------------------------------------------------------------

def _random_package(rng: random.Random) -> dict:
    script = "".join(rng.choice("ab\n\r= ()x") for _ in range(rng.randint(0, 80)))
    deps = {}
    for _ in range(rng.randint(0, 4)):
        path = "/".join(rng.choice(["a", "b", "data", "bin"]) for _ in range(rng.randint(1, 3))) + ".f"
        deps[path] = bytes(rng.randrange(256) for _ in range(rng.randint(0, 64)))
    meta = {f"k{rng.randrange(5)}": str(rng.randrange(1000)) for _ in range(rng.randint(0, 3))}
    return {"script": script, "deps": deps, "meta": meta}


def _encode(pkgs: list[dict]) -> str:
    return json.dumps([{"script": p["script"], "meta": p["meta"],
                        "deps": {k: base64.b64encode(v).decode() for k, v in p["deps"].items()}}
                       for p in pkgs])


_HASHER = """
import base64, json, sys
from ems.packaging import ExperimentPackage
pkgs = json.load(sys.stdin)
print(json.dumps([ExperimentPackage(p["script"],
    {k: base64.b64decode(v) for k, v in p["deps"].items()}, p["meta"]).pid for p in pkgs]))
"""


def _mutate(rng: random.Random, p: dict) -> dict:
    q = {"script": p["script"], "deps": dict(p["deps"]), "meta": dict(p["meta"])}
    choices = ["script"] + (["dep", "path"] if q["deps"] else []) + (["meta"] if q["meta"] else [])
    what = rng.choice(choices)
    flip = lambda s, i, c: s[:i] + c + s[i + 1:]
    if what == "script":
        spots = [i for i, c in enumerate(q["script"]) if c not in "\r\n"]
        if spots:
            i = rng.choice(spots)
            q["script"] = flip(q["script"], i, "y" if q["script"][i] == "z" else "z")
        else:
            q["script"] += "z"
    elif what == "dep":
        path = rng.choice(sorted(q["deps"]))
        data = bytearray(q["deps"][path] or b"\0")
        i = rng.randrange(len(data))
        data[i] ^= 1 << rng.randrange(8)
        q["deps"][path] = bytes(data) if q["deps"][path] else b"\1"
    elif what == "path":
        path = rng.choice(sorted(q["deps"]))
        new = flip(path, 0, "q" if path[0] != "q" else "r")
        while new in q["deps"]:
            new = "q" + new
        q["deps"][new] = q["deps"].pop(path)
    else:
        key = rng.choice(sorted(q["meta"]))
        q["meta"][key] = flip(q["meta"][key], 0, "x")
    return q


@pytest.mark.criterion(2, "PID determinism across processes, sensitivity, SHA-1 vectors")
def test_c2_pid_determinism():
    assert compute_pid(b"abc") == "a9993e364706816aba3e25717850c26c9cd0d89d" == oracles.sha1(b"abc")
    assert compute_pid(b"") == "da39a3ee5e6b4b0d3255bfef95601890afd80709" == oracles.sha1(b"")
    rng = random.Random(2018)
    pkgs = [_random_package(rng) for _ in range(200)]
    payload = _encode(pkgs)
    runs = [json.loads(subprocess.run([sys.executable, "-c", _HASHER], input=payload, text=True,
                                      capture_output=True, check=True).stdout) for _ in range(2)]
    assert runs[0] == runs[1]
    for p, pid in zip(pkgs, runs[0]):
        assert pid == oracles.sha1(oracles.canonical_stream(p["script"].encode(), p["deps"], p["meta"]))
    mutated = [_mutate(rng, p) for p in pkgs]
    changed = [ExperimentPackage(q["script"], q["deps"], q["meta"]).pid for q in mutated]
    assert all(a != b for a, b in zip(runs[0], changed))
    report(2, "200/200 identical across processes, 200/200 mutations detected")


# 3 ------------------------------------------------------------------------------

EPS = 1e-9
FIELDS = {
    "deployment_mb": lambda p: p.deployment_mb_limit,
    "memory_gb": lambda p: p.memory_gb_limit,
    "disk_gb": lambda p: p.disk_gb_limit,
    "max_runtime_s": lambda p: p.max_runtime_s,
}
SMALL = dict(deployment_mb=1.0, memory_gb=0.1, disk_gb=0.0, max_runtime_s=1)


def _request(field: str, value, profile) -> ResourceRequest:
    fields = dict(SMALL)
    if field == "disk_gb" and profile.disk_counts_against_memory:
        fields["memory_gb"] = 0.5
        value = value - 0.5  # memory plus disk lands exactly on the shared limit
    fields[field] = value
    return ResourceRequest(**fields)


SWEEP = [(name, field) for name in ("lambda", "gcf", "azure") for field in FIELDS]


@pytest.mark.criterion(3, "serverless admission matches the limits table at each boundary")
@pytest.mark.parametrize("name,field", SWEEP, ids=[f"{n}-{f}" for n, f in SWEEP])
def test_c3_admission(name, field):
    profile = BUILTIN_PROFILES[name]
    limit = FIELDS[field](profile)
    if limit is None:  # azure deployment: unlimited
        assert admit(_request(field, 10**6, profile), profile)
        report(3, f"{name} {field}: unlimited, 1e6 accepted")
        return
    step = 1 if field == "max_runtime_s" else EPS
    at, below, above = limit, limit - step, limit + step
    assert admit(_request(field, at, profile), profile), (name, field, at)
    assert admit(_request(field, below, profile), profile), (name, field, below)
    verdict = admit(_request(field, above, profile), profile)
    assert not verdict, (name, field, above)
    report(3, f"{name} {field}: limit {limit} accepted, {above} rejected ({','.join(verdict.reasons)})")


@pytest.mark.criterion(3, "serverless admission matches the limits table at each boundary")
def test_c3_table_values():
    p = BUILTIN_PROFILES
    assert (p["lambda"].deployment_mb_limit, p["lambda"].memory_gb_limit, p["lambda"].disk_gb_limit,
            p["lambda"].max_runtime_s) == (50, 3.0, 0.5, 300)
    assert (p["gcf"].deployment_mb_limit, p["gcf"].memory_gb_limit, p["gcf"].disk_counts_against_memory,
            p["gcf"].max_runtime_s) == (100, 2.0, True, 540)
    assert (p["azure"].deployment_mb_limit, p["azure"].memory_gb_limit, p["azure"].max_runtime_s) == \
        (None, 1.5, 600)
    assert not admit(ResourceRequest(memory_gb=1.5, disk_gb=0.6), p["gcf"])


# 4 ------------------------------------------------------------------------------

@pytest.mark.criterion(4, "map over 1000 values in order, < 60 s, one failure marked in place")
def test_c4_map():
    values = [round(0.1 + i * (100 - 0.1) / 999, 6) for i in range(1000)]
    bad = 613
    template = 'if [ {index} -eq %d ]; then exit 7; fi; echo "{index} {value}"' % bad
    t0 = time.monotonic()
    out = ServerlessBackend(BUILTIN_PROFILES["lambda"]).map(template, values, slots=16)
    elapsed = time.monotonic() - t0
    assert len(out) == 1000 and elapsed < 60
    failures = [i for i, r in enumerate(out) if isinstance(r, MapFailure)]
    assert failures == [bad] and out[bad].exit_code == 7 and out[bad].value == values[bad]
    assert all(out[i] == f"{i} {values[i]}" for i in range(1000) if i != bad)
    report(4, f"1000 results in order in {elapsed:.2f}s, failure at index {bad}")


# 5 ------------------------------------------------------------------------------

@pytest.mark.criterion(5, "setup time (1 + floor((N-1)/10)) * T, +5 for GPU")
def test_c5_setup_time():
    for T in (10, 20):
        for n in range(1, 42):
            expected = (1 + (n - 1) // 10) * T
            assert setup_time(n, False, T) == expected
            assert setup_time(n, True, T) == expected + 5
    cpu, gpu = setup_time(9, False, 20), setup_time(9, True, 20)
    cpu_ok = 15 - 5 <= cpu <= 18 + 5
    gpu_ok = 20 - 5 <= gpu <= 23 + 5
    report(5, f"82 x 2 values exact; informational N<10: {cpu:g} min CPU "
              f"({'within' if cpu_ok else 'outside'} 15-18 +/-5), {gpu:g} min GPU "
              f"({'within' if gpu_ok else 'outside'} 20-23 +/-5)")


# 6 ------------------------------------------------------------------------------

@pytest.mark.criterion(6, "mimic equals reverse reachability and rebuild on 100 random DAGs, < 2 min")
def test_c6_mimic_oracle(tmp_path):
    rng = random.Random(52)
    t0 = time.monotonic()
    executed_total = 0
    for trial in range(100):
        pipe = random_pipeline(rng, 12)
        store = BundleStore(tmp_path / f"s{trial}")
        ids = build(store, pipe)
        old = rng.randrange(len(ids))
        new_payload = f"replacement{trial}\n".encode()
        new = store.upload_tree({"out": new_payload}, "replacement").bundle_id
        before = snapshot(store.bundle_dir)
        res = store.mimic(ids[old], new)
        after = snapshot(store.bundle_dir)
        assert all(after[k] == v for k, v in before.items())
        assert store.verify() == []
        store.check_acyclic()

        edges = {ids[k]: {ids[p] for p in ps} for k, ps in enumerate(pipe.parents) if ps}
        reach = oracles.reverse_reachable(edges, ids[old])
        assert {k for k in res.mapping if k != ids[old]} == reach
        assert set(res.executed) == {res.mapping[r] for r in reach} and not res.failed
        executed_total += len(reach)

        override = {old: new_payload}
        rebuilt = None
        if pipe.parents[old] is None:
            rebuilt = build(BundleStore(tmp_path / f"r{trial}"), pipe, replace={old: new_payload})
            rebuilt_store = BundleStore(tmp_path / f"r{trial}")
        for k, bid in enumerate(ids):
            if bid in reach:
                got = store.contents(res.mapping[bid])
                assert got == {"out": expected_out(pipe, k, override)}
                if rebuilt is not None:
                    assert got == rebuilt_store.contents(rebuilt[k])
    elapsed = time.monotonic() - t0
    assert elapsed < 120
    report(6, f"100 DAGs, {executed_total} re-executions all match, {elapsed:.1f}s")


# 7 ------------------------------------------------------------------------------

@pytest.mark.criterion(7, "SLURM and SGE batch scripts match golden files byte for byte")
def test_c7_golden():
    task = golden_task()
    slurm = emit_batch_script(task, "slurm")
    assert slurm.encode() == (GOLDEN / "slurm.sh").read_bytes()
    assert emit_batch_script(task, "sge").encode() == (GOLDEN / "sge.sh").read_bytes()
    assert slurm.splitlines().count("#SBATCH --gres=gpu:1") == 1
    report(7, "slurm.sh and sge.sh identical; gres line present once")


# 8 ------------------------------------------------------------------------------

def _package(root: Path, n: int, tag: str) -> str:
    pkg = ExperimentPackage(f"# {tag}\n", {}, {"script_name": "s.py"})
    materialize(pkg, root)
    write_manifest(pkg, derive_seeds(pkg.pid, n), root)
    return pkg.pid


@pytest.mark.criterion(8, "reduce: 50 jobs with header -> 51 lines; mixed headers -> plain concat")
def test_c8_reduce(tmp_path):
    rng = random.Random(8)
    for corpus in range(5):
        pid = _package(tmp_path, 50, f"same{corpus}")
        files = []
        for k in range(50):
            data = f"arch,dataset,acc\n{k // 5},{k % 5},{rng.random():.4f}\n".encode()
            files.append(data)
            (tmp_path / pid / "jobs" / str(k)).mkdir(parents=True)
            (tmp_path / pid / "jobs" / str(k) / "results.txt").write_bytes(data)
        rep = reduce(tmp_path, pid, "results.txt")
        out = (tmp_path / pid / "reduce" / "results.txt").read_bytes()
        assert rep.header_deduplicated and len(out.splitlines()) == 51
        assert out == oracles.concat_dedup(files)

        pid = _package(tmp_path, 50, f"mixed{corpus}")
        files = []
        for k in range(50):
            header = "arch,dataset,acc" if rng.random() < 0.8 or k == 0 else "other"
            if k == 49 and all(f.startswith(b"arch") for f in files):
                header = "other"
            data = f"{header}\n{k}\n".encode()
            files.append(data)
            (tmp_path / pid / "jobs" / str(k)).mkdir(parents=True)
            (tmp_path / pid / "jobs" / str(k) / "results.txt").write_bytes(data)
        rep = reduce(tmp_path, pid, "results.txt")
        out = (tmp_path / pid / "reduce" / "results.txt").read_bytes()
        assert not rep.header_deduplicated and out == oracles.concat(files)
    report(8, "5 shared-header corpora (51 lines each) and 5 mixed corpora match oracles")


# 9 ------------------------------------------------------------------------------

TOY = """\
import random
random.seed(EMS_SEED)
for architecture in range(10):
    for dataset in range(5):
        acc = round(random.random(), 6)
        with open('results.txt', 'w') as f:
            f.write('architecture,dataset,accuracy\\n')
            f.write(f'{architecture},{dataset},{acc}\\n')
"""


def _cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.mark.criterion(9, "end-to-end transcript under the simulated clock, reproducible outputs")
def test_c9_transcript(ems_home, workdir, capsys):
    t0 = time.monotonic()
    Path("DLexperiment.py").write_text(TOY)
    Path("bin").mkdir()
    Path("bin/util.txt").write_text("helper\n")
    assert _cli("cluster", "start", "gce", "--nodes", 5, "--gpus", 1) == 0
    assert _cli("cluster", "list-nodes", "gce") == 0
    assert _cli("cluster", "wait", "gce") == 0
    assert _cli("config-update", "gce", "host=35.185.238.124", "--create") == 0
    capsys.readouterr()
    assert _cli("parrun", "DLexperiment.py", "gce", "-dep", "bin/", "-alloc", "--gres:gpu:1",
                "-m", "grid of 10 architectures and 5 datasets", "--json") == 0
    run = json.loads(capsys.readouterr().out)
    pid = run["pid"]
    assert run["n_jobs"] == 50
    assert _cli("status", pid, "--json") == 0
    assert json.loads(capsys.readouterr().out)["progress"] == {"done": 50}
    assert _cli("reduce", "results.txt", pid) == 0
    assert _cli("get", pid, "--dest", "local") == 0
    fetched = Path("local") / pid
    reduced = (fetched / "reduce" / "results.txt").read_text().splitlines()
    assert len(reduced) == 51 and reduced[0] == "architecture,dataset,accuracy"

    jobs = ems_home / "packages" / pid / "jobs"
    first = {k: (jobs / str(k) / "results.txt").read_bytes() for k in range(50)}
    capsys.readouterr()
    assert _cli("parrun", "DLexperiment.py", "gce", "-dep", "bin/", "-alloc", "--gres:gpu:1",
                "-m", "grid of 10 architectures and 5 datasets", "--json") == 0
    again = json.loads(capsys.readouterr().out)
    assert again["pid"] == pid and again["progress"] == {"done": 50}
    second = {k: (jobs / str(k) / "results.txt").read_bytes() for k in range(50)}
    assert first == second
    assert len(set(first.values())) == 50

    assert _cli("cluster", "stop", "gce") == 0
    assert _cli("parrun", "DLexperiment.py", "gce") == 1
    elapsed = time.monotonic() - t0
    assert elapsed < 60
    report(9, f"transcript green in {elapsed:.1f}s; 50/50 per-job outputs byte-identical on re-run")
