import contextlib

import pytest

from pirlab.core import MessageStore, SchemeParams, SeededRandomness
from pirlab.netsvc import DatabaseServer


def grid_instances(multipliers=(1,)):
    """(N, K, p, q, m) for N in 1..4, K in 1..3, q in 1..4, p in 0..q."""
    out = []
    for n in range(1, 5):
        for k in range(1, 4):
            for q in range(1, 5):
                for p in range(q + 1):
                    for m in multipliers:
                        out.append((n, k, p, q, m))
    return out


@contextlib.contextmanager
def local_servers(store, params):
    servers = [DatabaseServer(store, params, ("127.0.0.1", 0)) for _ in range(params.num_databases)]
    for s in servers:
        s.start_background()
    try:
        yield [s.endpoint for s in servers]
    finally:
        for s in servers:
            s.shutdown()
            s.server_close()


@pytest.fixture
def small_params():
    return SchemeParams(2, 2)


@pytest.fixture
def small_store(small_params):
    return MessageStore.random(small_params, SeededRandomness(11))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
