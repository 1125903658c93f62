import csv
import io
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from conftest import local_servers
from pirlab import cli
from pirlab.core import SchemeParams


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def run(capsys, *argv):
    rc = cli.main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_bounds(capsys):
    rc, out, _ = run(capsys, "bounds", "-N", "2", "-K", "2", "--resolution", "3")
    assert rc == 0
    table = rows(out)
    assert [r["S"] for r in table] == ["0/1", "1/1", "2/1"]
    assert [r["D"] for r in table] == ["3/2", "3/4", "0/1"]
    assert table[-1]["C"] == "inf"


def test_bounds_k3(capsys):
    rc, out, _ = run(capsys, "bounds", "-N", "2", "-K", "3", "--resolution", "2")
    assert [(r["S"], r["D"]) for r in rows(out)] == [("0/1", "7/4"), ("3/1", "0/1")]


def test_sweep(capsys):
    rc, out, _ = run(capsys, "sweep", "-N", "2", "-K", "2", "--cache-den", "2", "--seeds", "2")
    assert rc == 0
    table = rows(out)
    assert {r["measured_cost_norm"] for r in table} == {"3/2", "3/4", "0/1"}
    assert all(r["measured_cost_norm"] == r["theory_cost_norm"] and r["match"] == "true" for r in table)


def test_sweep_single_step(capsys):
    _, out, _ = run(capsys, "sweep", "-N", "3", "-K", "2", "--cache-den", "1", "--seeds", "1")
    assert [(r["S"], r["measured_cost_norm"]) for r in rows(out)] == [("0/1", "4/3"), ("2/1", "0/1")]


def test_sweep_multiplier_invariant(capsys):
    _, one, _ = run(capsys, "sweep", "-N", "2", "-K", "2", "--cache-den", "2", "--seeds", "1")
    _, two, _ = run(capsys, "sweep", "-N", "2", "-K", "2", "--cache-den", "2", "--seeds", "1", "--multiplier", "2")
    a, b = rows(one), rows(two)
    assert [int(r["L"]) * 2 for r in a] == [int(r["L"]) for r in b]
    assert [r["measured_cost_norm"] for r in a] == [r["measured_cost_norm"] for r in b]


def test_sweep_deterministic(capsys, tmp_path):
    outs = []
    for name in ("a.csv", "b.csv"):
        path = tmp_path / name
        assert cli.main(["sweep", "-N", "3", "-K", "3", "--cache-den", "3", "--seeds", "2", "--out", str(path)]) == 0
        outs.append(path.read_text())
    assert outs[0] == outs[1]


def test_audit_privacy(capsys):
    rc, out, _ = run(capsys, "audit", "privacy", "-N", "2", "-K", "2")
    assert rc == 0
    assert {r["value"] for r in rows(out)} == {"0/1"}


def test_audit_han(capsys):
    rc, out, _ = run(capsys, "audit", "han", "-N", "2", "-K", "3", "--trials", "100")
    assert rc == 0
    assert all(r["pass"] == "true" for r in rows(out))


def test_audit_lemma2(capsys):
    rc, out, _ = run(capsys, "audit", "lemma2", "-N", "2", "-K", "2")
    assert rc == 0
    slack = [r for r in rows(out) if r["metric"].startswith("slack")]
    assert slack and all(float(r["value"]) == 0.0 for r in slack)


def test_audit_eq2_and_correctness(capsys):
    assert run(capsys, "audit", "eq2", "-N", "2", "-K", "2", "--cache-num", "1", "--cache-den", "2")[0] == 0
    assert run(capsys, "audit", "correctness", "-N", "3", "-K", "2", "--trials", "10")[0] == 0


def test_bad_instance_is_usage_error(capsys):
    rc, _, err = run(capsys, "bounds", "-N", "0", "-K", "2")
    assert rc == 2 and "error" in err


def test_fetch_requires_servers(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["fetch", "-N", "2", "-K", "2", "--message-index", "1"])
    assert info.value.code == 2


def test_fetch_validates(capsys):
    rc, _, _ = run(capsys, "fetch", "-N", "2", "-K", "2", "--servers", "a:1", "--message-index", "1")
    assert rc == 2
    rc, _, _ = run(capsys, "fetch", "-N", "2", "-K", "2", "--servers", "a:1,b:2", "--message-index", "3")
    assert rc == 2


def test_fetch_full_cache(capsys):
    rc, out, _ = run(capsys, "fetch", "-N", "2", "-K", "2", "--cache-num", "1", "--cache-den", "1",
                     "--servers", "127.0.0.1:1,127.0.0.1:2", "--message-index", "2")
    assert rc == 0 and out.startswith("0 answer bytes")


def test_fetch_in_process(capsys, tmp_path):
    params = SchemeParams(2, 2)
    store = cli.store_from_seed(params, 9)
    target = tmp_path / "msg.bin"
    with local_servers(store, params) as endpoints:
        rc, out, _ = run(capsys, "fetch", "-N", "2", "-K", "2", "--seed", "9",
                         "--servers", ",".join(endpoints), "--message-index", "2", "--out", str(target))
    assert rc == 0
    assert out.startswith("6 answer bytes")
    assert target.read_bytes() == store.data[1].tobytes()


def test_fetch_wrong_instance(capsys):
    store = cli.store_from_seed(SchemeParams(2, 3), 0)
    with local_servers(store, SchemeParams(2, 3)) as endpoints:
        rc, _, err = run(capsys, "fetch", "-N", "2", "-K", "2", "--servers", ",".join(endpoints),
                         "--message-index", "1")
    assert rc == 1 and "different instance" in err


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_subprocess_and_fetch(tmp_path):
    ports = [_free_port(), _free_port()]
    procs = [subprocess.Popen([sys.executable, "-m", "pirlab", "serve", "-N", "2", "-K", "3", "--seed", "3",
                               "--cache-num", "1", "--cache-den", "2", "--port", str(p), "--db-index", str(i + 1)],
                              stdout=subprocess.PIPE, text=True)
             for i, p in enumerate(ports)]
    try:
        for proc in procs:
            assert "database" in proc.stdout.readline()
        target = tmp_path / "m.bin"
        deadline = time.time() + 10
        while True:
            done = subprocess.run([sys.executable, "-m", "pirlab", "fetch", "-N", "2", "-K", "3", "--seed", "3",
                                   "--cache-num", "1", "--cache-den", "2", "--message-index", "3",
                                   "--servers", ",".join(f"127.0.0.1:{p}" for p in ports), "--out", str(target)],
                                  capture_output=True, text=True, env=dict(os.environ))
            if done.returncode == 0 or time.time() > deadline:
                break
            time.sleep(0.2)
        assert done.returncode == 0, done.stderr
        assert done.stdout.startswith("14 answer bytes")
        expected = cli.store_from_seed(SchemeParams(2, 3, 1, 2), 3).data[2].tobytes()
        assert target.read_bytes() == expected
    finally:
        for proc in procs:
            proc.send_signal(signal.SIGTERM)
        for proc in procs:
            assert proc.wait(timeout=10) == 0
