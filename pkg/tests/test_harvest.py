import subprocess

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ems.backends import JobRegistry, LocalBackend
from ems.errors import NoSuchResultFile, NotLineOriented, UnknownPackage
from ems.harvest import get, progress, reduce
from ems.packaging import ExperimentPackage, derive_seeds, materialize, write_manifest
from ems.scriptgrid import TaskSpec, split_jobs


def make_package(root, n_jobs, tag="x"):
    pkg = ExperimentPackage(f"# {tag}\nfor i in range({n_jobs}):\n    pass\n", {},
                            {"script_name": "s.py"})
    materialize(pkg, root)
    write_manifest(pkg, derive_seeds(pkg.pid, n_jobs), root)
    return pkg


def put(root, pid, k, name, data: bytes):
    path = root / pid / "jobs" / str(k) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def test_fifty_with_header(tmp_path):
    pkg = make_package(tmp_path, 50)
    files = [b"arch,data,acc\n" + f"{k // 5},{k % 5},{k / 100}\n".encode() for k in range(50)]
    for k, f in enumerate(files):
        put(tmp_path, pkg.pid, k, "results.txt", f)
    rep = reduce(tmp_path, pkg.pid, "results.txt")
    out = (tmp_path / pkg.pid / "reduce" / "results.txt").read_bytes()
    assert rep.header_deduplicated and rep.jobs_included == list(range(50))
    assert len(out.splitlines()) == 51 == rep.lines
    assert out == oracles.concat_dedup(files)
    assert (tmp_path / pkg.pid / "reduce" / "results.txt.report.json").exists()


def test_mixed_headers_plain_concat(tmp_path):
    pkg = make_package(tmp_path, 4)
    paths = [put(tmp_path, pkg.pid, k, "r.txt", f"h{k % 2}\nrow{k}\n".encode()) for k in range(4)]
    rep = reduce(tmp_path, pkg.pid, "r.txt")
    out = (tmp_path / pkg.pid / "reduce" / "r.txt").read_bytes()
    assert not rep.header_deduplicated
    assert out == oracles.concat([p.read_bytes() for p in paths])
    assert out == subprocess.run(["cat", *map(str, paths)], capture_output=True, check=True).stdout


def test_single_job_identical(tmp_path):
    pkg = make_package(tmp_path, 1)
    p = put(tmp_path, pkg.pid, 0, "r.txt", b"head\n1\n")
    rep = reduce(tmp_path, pkg.pid, "r.txt")
    assert not rep.header_deduplicated
    assert (tmp_path / pkg.pid / "reduce" / "r.txt").read_bytes() == p.read_bytes()


def test_missing_reported(tmp_path):
    pkg = make_package(tmp_path, 3)
    put(tmp_path, pkg.pid, 0, "r.txt", b"a\n")
    put(tmp_path, pkg.pid, 2, "r.txt", b"b\n")
    rep = reduce(tmp_path, pkg.pid, "r.txt")
    assert rep.jobs_included == [0, 2] and rep.jobs_missing == [1]
    with pytest.raises(NoSuchResultFile):
        reduce(tmp_path, pkg.pid, "none.txt")


def test_binary_rejected(tmp_path):
    pkg = make_package(tmp_path, 1)
    put(tmp_path, pkg.pid, 0, "r.bin", b"\x00\x01\x02")
    with pytest.raises(NotLineOriented):
        reduce(tmp_path, pkg.pid, "r.bin")


def test_unknown_package(tmp_path):
    with pytest.raises(UnknownPackage):
        reduce(tmp_path, "f" * 40, "r.txt")
    with pytest.raises(UnknownPackage):
        get(tmp_path, "f" * 40, tmp_path / "dest")


lines = st.text(alphabet="abc,0123 ", min_size=0, max_size=8).map(lambda s: s + "\n")


@given(st.lists(st.lists(lines, min_size=1, max_size=4), min_size=1, max_size=8),
       st.booleans())
def test_reduce_length_property(tmp_path_factory, corpus, shared_header):
    root = tmp_path_factory.mktemp("r")
    pkg = make_package(root, len(corpus))
    files = []
    for k, rows in enumerate(corpus):
        data = ("H\n" if shared_header else "") + "".join(rows)
        files.append(data.encode())
        put(root, pkg.pid, k, "r.txt", files[-1])
    rep = reduce(root, pkg.pid, "r.txt")
    out = (root / pkg.pid / "reduce" / "r.txt").read_bytes()
    total = sum(len(f.splitlines()) for f in files)
    if rep.header_deduplicated:
        assert len(out.splitlines()) == total - (len(files) - 1)
        assert out == oracles.concat_dedup(files)
    else:
        assert len(out.splitlines()) == total
        assert out == oracles.concat(files)
    firsts = {f.split(b"\n", 1)[0] for f in files}
    assert rep.header_deduplicated == (len(files) > 1 and len(firsts) == 1)


def test_get_idempotent_and_hashes(tmp_path):
    pkg = make_package(tmp_path, 3)
    for k in range(3):
        put(tmp_path, pkg.pid, k, "r.txt", f"h\n{k}\n".encode())
    reduce(tmp_path, pkg.pid, "r.txt")
    res1 = get(tmp_path, pkg.pid, tmp_path / "dest")
    assert "reduce/r.txt" in res1.files and "manifest.json" in res1.files
    src = tmp_path / pkg.pid
    for rel, digest in res1.files.items():
        assert digest == oracles.sha1((src / rel).read_bytes())
    (tmp_path / "dest" / pkg.pid / "stray").write_text("x")
    res2 = get(tmp_path, pkg.pid, tmp_path / "dest")
    assert res1.files == res2.files


def test_progress_counts(tmp_path):
    script = ("import os\nfor i in range(50):\n"
              "    if i == 17:\n        raise SystemExit(1)\n"
              "    open('r.txt', 'w').write(f'{i}\\n')\n")
    pkg = ExperimentPackage(script, {}, {"script_name": "s.py"})
    materialize(pkg, tmp_path)
    write_manifest(pkg, derive_seeds(pkg.pid, 50), tmp_path)
    reg = JobRegistry(tmp_path / "state")
    assert progress(tmp_path, pkg.pid, reg) == {"unsubmitted": 50}
    be = LocalBackend(reg)
    for t in split_jobs(pkg, root=tmp_path):
        be.submit(t)
    assert progress(tmp_path, pkg.pid, reg) == {"queued": 50}
    be.run_local(16)
    counts = progress(tmp_path, pkg.pid, reg)
    assert counts == {"done": 49, "failed": 1}
    assert sum(counts.values()) == 50
    rep = reduce(tmp_path, pkg.pid, "r.txt", reg)
    assert rep.jobs_missing == [17] and len(rep.jobs_included) == 49


def test_reduce_excludes_running(tmp_path):
    pkg = make_package(tmp_path, 2)
    reg = JobRegistry()
    be = LocalBackend(reg)
    for k in range(2):
        be.submit(TaskSpec(k, [{}], "", 0, pid=pkg.pid, command=["true"]))
    reg.transition("local", "1", "running")
    reg.transition("local", "1", "done", exit_code=0)
    put(tmp_path, pkg.pid, 0, "r.txt", b"a\n")
    put(tmp_path, pkg.pid, 1, "r.txt", b"b\n")
    rep = reduce(tmp_path, pkg.pid, "r.txt", reg)
    assert rep.jobs_included == [0] and rep.jobs_excluded == [1]
