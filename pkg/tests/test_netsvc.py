import socket
import struct

import numpy as np
import pytest

from conftest import local_servers
from pirlab import netsvc, pir_base
from pirlab.cache_pir import LocalDatabases, RetrievalError, encode_cache, retrieve
from pirlab.core import MessageStore, Query, SchemeParams, SeededRandomness
from pirlab.netsvc import (
    ANSWER,
    CONFIG_REQ,
    CONFIG_RESP,
    ERROR,
    QUERY,
    DatabaseServer,
    Frame,
    decode_config,
    fetch,
    query_wire_decode,
    query_wire_encode,
    read_frame,
    write_frame,
)


@pytest.fixture
def server(small_store, small_params):
    srv = DatabaseServer(small_store, small_params, ("127.0.0.1", 0))
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


def exchange(srv, raw: bytes) -> Frame:
    host, port = srv.server_address[:2]
    with socket.create_connection((host, port), timeout=5) as sock:
        sock.sendall(raw)
        return read_frame(sock)


def test_frame_encoding():
    assert Frame(QUERY, b"\x00\x00").encode() == b"\x02\x00\x00\x00\x01\x00\x00"


def test_config(server, small_params):
    reply = exchange(server, Frame(CONFIG_REQ).encode())
    assert reply.frame_type == CONFIG_RESP
    assert decode_config(reply.payload) == (2, 2, 4, 0, 1)


def test_empty_query(server):
    reply = exchange(server, Frame(QUERY, b"\x00\x00").encode())
    assert reply.frame_type == ANSWER and reply.payload == b""


def test_plan_query_answer(server, small_store):
    plan = pir_base.plan_queries(2, 2, 4, 0, SeededRandomness(1))
    reply = exchange(server, Frame(QUERY, query_wire_encode(plan.queries[0])).encode())
    assert reply.frame_type == ANSWER and len(reply.payload) == 3


def test_malformed_query(server):
    reply = exchange(server, Frame(QUERY, b"\x01\x00\x01").encode())
    assert reply == Frame(ERROR, bytes([netsvc.ERR_MALFORMED]))
    reply = exchange(server, Frame(QUERY, query_wire_encode(Query.from_sums([[(0, 99)]]))).encode())
    assert reply == Frame(ERROR, bytes([netsvc.ERR_MALFORMED]))


def test_unknown_type(server):
    assert exchange(server, Frame(0x42).encode()) == Frame(ERROR, bytes([netsvc.ERR_UNKNOWN_TYPE]))


def test_oversized(server):
    header = struct.pack("<IB", netsvc.MAX_FRAME + 1, QUERY)
    assert exchange(server, header) == Frame(ERROR, bytes([netsvc.ERR_OVERSIZED]))


def test_connection_reuse(server):
    host, port = server.server_address[:2]
    with socket.create_connection((host, port), timeout=5) as sock:
        for _ in range(3):
            write_frame(sock, Frame(QUERY, b"\x00\x00"))
            assert read_frame(sock).frame_type == ANSWER


def test_stateless(server):
    q = Frame(QUERY, query_wire_encode(Query.from_sums([[(0, 1), (1, 2)], [(1, 0)]]))).encode()
    first = exchange(server, q)
    exchange(server, Frame(QUERY, query_wire_encode(Query.from_sums([[(0, 0)]]))).encode())
    assert exchange(server, q) == first


def test_wire_sizes():
    assert query_wire_encode(Query.from_sums([])) == b"\x00\x00"
    assert len(query_wire_encode(Query.from_sums([[(0, 3)]]))) == 9


def test_wire_round_trip_many():
    rng = np.random.default_rng(0)
    for _ in range(10 ** 4):
        sums = []
        for _ in range(rng.integers(0, 6)):
            w = int(rng.integers(1, 5))
            ids = rng.choice(8, size=w, replace=False)
            sums.append([(int(m), int(rng.integers(0, 2 ** 32))) for m in ids])
        q = Query.from_sums(sums)
        assert query_wire_decode(query_wire_encode(q)) == q


@pytest.mark.parametrize("n,k,p,q", [(2, 2, 0, 1), (2, 2, 1, 2), (3, 2, 1, 3)])
def test_fetch_matches_local(n, k, p, q):
    params = SchemeParams(n, k, p, q)
    store = MessageStore.random(params, SeededRandomness(4))
    cache = encode_cache(store, params)
    with local_servers(store, params) as endpoints:
        for theta in range(k):
            rng = SeededRandomness(theta + 10)
            remote, report = fetch(theta, params, cache, endpoints, rng.clone())
            local, cost = retrieve(theta, params, cache, LocalDatabases(store, n), rng.clone())
            assert np.array_equal(remote, local)
            assert np.array_equal(remote, store.data[theta])
            assert report.answer_payload_bytes == cost.downloaded_symbols == report.downloaded_symbols


def test_fetch_reports_six_bytes():
    params = SchemeParams(2, 2)
    store = MessageStore.random(params, SeededRandomness(0))
    with local_servers(store, params) as endpoints:
        _, report = fetch(1, params, encode_cache(store, params), endpoints, SeededRandomness(0))
    assert report.answer_payload_bytes == 6
    assert report.framing_overhead_bytes == 20
    assert report.query_frames == 2


def test_server_down_named():
    params = SchemeParams(2, 2)
    store = MessageStore.random(params, SeededRandomness(0))
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        dead = f"127.0.0.1:{probe.getsockname()[1]}"
    with local_servers(store, params) as endpoints:
        with pytest.raises(RetrievalError) as info:
            fetch(0, params, encode_cache(store, params), [endpoints[0], dead], SeededRandomness(0),
                  connect_timeout=1.0, timeout=1.0)
    assert info.value.database == dead
    assert dead in str(info.value)


def test_endpoint_parsing():
    assert netsvc.parse_endpoint("localhost:7000") == ("localhost", 7000)
    assert netsvc.parse_endpoint(":7000") == ("127.0.0.1", 7000)
    with pytest.raises(ValueError):
        netsvc.parse_endpoint("localhost")


def test_timeout_env(monkeypatch):
    monkeypatch.setenv("PIRLAB_TIMEOUT_MS", "250")
    assert netsvc.request_timeout() == 0.25
