"""Fixed inputs shared by golden-file and acceptance tests."""
from ems.resources import parse_alloc
from ems.scriptgrid import TaskSpec

GOLDEN_PID = "0123456789abcdef0123456789abcdef01234567"


def golden_task() -> TaskSpec:
    return TaskSpec(
        job_index=7,
        assignments=[{"architecture": 3, "dataset": 1}],
        script_text="architecture = 3\ndataset = 1\n",
        seed=12345678901234567890,
        resources=parse_alloc("--gres:gpu:1 --mem=4G --time=02:00:00 --cpus-per-task=2"),
        pid=GOLDEN_PID,
        grid_indices=[7],
        command=["python3", "run_script"],
    )


if __name__ == "__main__":
    # regenerate the golden files (review the diff by hand before committing)
    from pathlib import Path

    from ems.backends import emit_batch_script

    here = Path(__file__).parent / "golden"
    for sched in ("slurm", "sge"):
        (here / f"{sched}.sh").write_text(emit_batch_script(golden_task(), sched))
