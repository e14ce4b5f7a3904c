import csv
import io
import subprocess
import sys

import pytest

from contirq.cli import main


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_pingpong_csv(capsys):
    assert main(["pingpong", "--mode", "continuation", "--sizes", "0,8", "--iters", "50",
                 "--reps", "2"]) == 0
    out = rows(capsys.readouterr().out)
    assert out[0] == ["size", "mean_us", "stddev_us"]
    assert [r[0] for r in out[1:]] == ["0", "8"]
    assert all(float(r[1]) > 0 for r in out[1:])


def test_pingpong_no_engine(capsys):
    assert main(["pingpong", "--mode", "waitpath", "--sizes", "1", "--iters", "20",
                 "--reps", "1", "--no-engine"]) == 0
    assert rows(capsys.readouterr().out)[0] == ["size", "mean_us", "stddev_us"]


def test_latency_mt_csv(capsys):
    assert main(["latency-mt", "--threads", "1,2", "--fibers", "2", "--iters", "5", "--reps", "1"]) == 0
    out = rows(capsys.readouterr().out)
    assert out[0] == ["threads", "fibers", "size", "mean_us", "stddev_us", "messages"]
    assert [(r[0], r[1], r[5]) for r in out[1:]] == [("1", "2", "10"), ("2", "2", "20")]


def test_halo_single_zone(capsys):
    assert main(["halo", "--zones", "1", "--steps", "3", "--mode", "continuation", "--procs", "1"]) == 0
    out = rows(capsys.readouterr().out)
    assert out[0] == ["runtime", "checksum"]
    assert len(out[1][1]) == 16


def test_halo_modes_agree(capsys):
    digests = []
    for mode in ("forkjoin", "continuation"):
        assert main(["halo", "--zones", "4", "--steps", "3", "--mode", mode, "--workers", "2"]) == 0
        digests.append(rows(capsys.readouterr().out)[1][1])
    assert digests[0] == digests[1]


@pytest.mark.parametrize("argv", [
    ["pingpong", "--mode", "bogus"],
    ["halo", "--zones", "1", "--procs", "2", "--mode", "forkjoin"],
    ["deadlock-demo", "--mode", "fibers", "--transport", "tcp"],
    ["pingpong", "--mode", "waitpath", "--sizes", "x"],
    ["halo", "--mode", "forkjoin", "--steps", "-1"],
    ["pingpong", "--mode", "waitpath", "--verify"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as e:
        code = main(argv)
        raise SystemExit(code)
    assert e.value.code == 1


def test_deadlock_demo_exit_codes(capsys):
    assert main(["deadlock-demo", "--mode", "fibers", "--tasks", "3", "--workers", "2", "--grace", "0.2"]) == 0
    assert "Deadlock" in capsys.readouterr().out
    assert main(["deadlock-demo", "--mode", "fibers-cont", "--tasks", "3", "--workers", "2"]) == 0
    assert "Completed" in capsys.readouterr().out


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "contirq", "deadlock-demo", "--mode", "threads",
                        "--tasks", "2", "--workers", "1"], capture_output=True, text=True, timeout=60)
    assert p.returncode == 0, p.stderr
    assert p.stdout.startswith("threads: Completed")
