"""Service node integration on loopback: routing, declaration, streams."""

from __future__ import annotations

import json
import random
import socket
import time
import uuid

import pytest

from conftest import free_port, one_square_scene
from faro2.client import Client, ClientConfig, RemoteError, connect
from faro2.errors import BindFailure, KeyHolderUnavailable
from faro2 import phe
from faro2.pipeline import NodeSpec, PipelineMode, PipelineSpec
from faro2.records import (
    EMPTY,
    Generic,
    ReplyStatus,
    Template,
    TemplateList,
)
from faro2.rpc import MessageSocket, RPC_OPTION
from faro2.service import (
    DiscoveryConfig,
    GalleryConfig,
    Service,
    ServiceConfig,
    start_service,
)
from faro2.sources import SyntheticSource
from faro2.wire import serialize_record
from faro2.workers import attach_origin_frame

INTERVAL = 0.12


def make_service(name="svc-a", channel=None, announce=False, galleries=(), port=0):
    disc = DiscoveryConfig(enabled=False)
    if channel is not None:
        group, mport = channel
        disc = DiscoveryConfig(
            enabled=True, interval=INTERVAL, ttl_seconds=2, group=group, port=mport
        )
    config = ServiceConfig(
        service_name=name,
        bind_address=f"127.0.0.1:{port}",
        galleries=list(galleries),
        announce=announce,
        discovery=disc,
    )
    return start_service(config)


def client_for(service: Service, timeout_ms=10_000) -> Client:
    return connect(ClientConfig(endpoint=service.endpoint, timeout_ms=timeout_ms))


@pytest.fixture
def service():
    svc = make_service()
    yield svc
    svc.stop(grace=1.0)


def detect_pipeline_spec(name="detpipe", mode="fifo", threshold="100"):
    return PipelineSpec(
        name=name,
        mode=PipelineMode(mode),
        nodes=(
            NodeSpec("detect", "local", "demo-detect", {"threshold": threshold}),
        ),
        edges=(),
    )


# -- startup ------------------------------------------------------------------


def test_status_answers_with_service_name(service):
    client = client_for(service)
    try:
        doc = client.call_status()
        assert doc["service_name"] == "svc-a"
        assert "demo-detect" in doc["workers"]
    finally:
        client.close()


def test_second_bind_on_same_port_fails(service):
    with pytest.raises(BindFailure):
        make_service(name="svc-b", port=service.endpoint[1])


def test_announcement_observable(mcast_channel):
    from faro2.discovery import Browser

    group, mport = mcast_channel
    browser = Browser(group=group, mcast_port=mport).start()
    svc = make_service(name="svc-ann", channel=mcast_channel, announce=True)
    try:
        ann = browser.wait_for("svc-ann", timeout=INTERVAL * 3)
        assert ann.endpoint == svc.endpoint
        assert "demo-detect" in ann.workers
    finally:
        svc.stop(grace=0.5)
        browser.stop()


# -- routing -------------------------------------------------------------------


def test_route_self_target_equals_direct_worker(service):
    frame = one_square_scene(intensity=210).render(0)
    client = client_for(service)
    try:
        via_self = client.call_generic("self/demo-detect", frame)
        direct = client.call_generic("demo-detect", frame)
        assert via_self.ok and direct.ok
        assert via_self.payload == direct.payload
        # the routed reply picked up a route timing
        assert any(name == "route@svc-a" for name, _ in via_self.stage_timings)
    finally:
        client.close()


def test_unknown_target_error(service):
    client = client_for(service)
    try:
        reply = client.call_generic("self/nosuch", EMPTY)
        assert reply.status is ReplyStatus.ERROR
        assert reply.error.code == "UNKNOWN_TARGET"
    finally:
        client.close()


def test_recursive_call_byte_equal_to_direct(mcast_channel):
    svc_a = make_service(name="svc-a", channel=mcast_channel, announce=True)
    svc_b = make_service(name="svc-b", channel=mcast_channel, announce=True)
    try:
        time.sleep(INTERVAL * 2.5)  # let them see each other
        frame = one_square_scene(intensity=220).render(0)
        ca = client_for(svc_a)
        cb = client_for(svc_b)
        try:
            via_a = ca.call_generic("svc-b/demo-detect", frame)
            direct = cb.call_generic("demo-detect", frame)
            assert via_a.ok, via_a.error
            from faro2.wire import encode_payload_block

            assert encode_payload_block(via_a.payload) == encode_payload_block(
                direct.payload
            )
            # recursion transparency: only stage timings differ; each hop stamps itself
            assert [n for n, _ in via_a.stage_timings if n.startswith("route@")] == [
                "route@svc-b",
                "route@svc-a",
            ]
        finally:
            ca.close()
            cb.close()
    finally:
        svc_a.stop(grace=0.5)
        svc_b.stop(grace=0.5)


def test_forwarding_loop_detected(mcast_channel):
    svc_a = make_service(name="svc-a", channel=mcast_channel, announce=True)
    svc_b = make_service(name="svc-b", channel=mcast_channel, announce=True)
    try:
        time.sleep(INTERVAL * 2.5)
        client = client_for(svc_a)
        try:
            # nobody hosts svc-c: A relays to B, B relays back to A -> loop
            reply = client.call_generic("svc-c/ghost", EMPTY)
            assert reply.status is ReplyStatus.ERROR
            assert reply.error.code == "LOOP_DETECTED"
        finally:
            client.close()
    finally:
        svc_a.stop(grace=0.5)
        svc_b.stop(grace=0.5)


def test_capabilities_local_and_recursive(mcast_channel):
    svc_a = make_service(name="svc-a", channel=mcast_channel, announce=True)
    svc_b = make_service(name="svc-b", channel=mcast_channel, announce=True)
    try:
        time.sleep(INTERVAL * 2.5)
        client = client_for(svc_a)
        try:
            local = client.list_capabilities(recursive=False)
            worker_names = {w["worker_type"] for w in local["workers"]}
            assert {"demo-detect", "demo-extract", "demo-score"} <= worker_names
            assert "peers" not in local

            tree = client.list_capabilities(recursive=True, max_depth=2)
            peer_names = [p.get("service") for p in tree.get("peers", [])]
            assert peer_names.count("svc-b") == 1
            # B's subtree must not recurse back into A (visited set)
            b_tree = tree["peers"][0]
            sub_names = [p.get("service") for p in b_tree.get("peers", [])]
            assert "svc-a" not in sub_names

            depth0 = client.list_capabilities(recursive=True, max_depth=0)
            assert "peers" not in depth0
        finally:
            client.close()
    finally:
        svc_a.stop(grace=0.5)
        svc_b.stop(grace=0.5)


# -- pipeline declaration ----------------------------------------------------------


def test_declare_pipeline_listed(service):
    client = client_for(service)
    try:
        doc = client.declare_pipeline(detect_pipeline_spec())
        assert doc["declared"] == "detpipe"
        caps = client.list_capabilities()
        assert any(p["name"] == "detpipe" for p in caps["pipelines"])
    finally:
        client.close()


def test_declare_cycle_rejected_with_path(service):
    client = client_for(service)
    try:
        bad = {
            "name": "loopy",
            "mode": "fifo",
            "nodes": [
                {"name": "A", "service": "local", "worker": "demo-echo"},
                {"name": "B", "service": "local", "worker": "demo-echo"},
            ],
            "edges": [["A", "B"], ["B", "A"]],
        }
        with pytest.raises(RemoteError) as info:
            client.declare_pipeline(bad)
        assert info.value.code == "VALIDATION_FAILED"
        report = json.loads(info.value.remote_message)
        cycle = next(i for i in report["issues"] if i["kind"] == "cycle")
        assert cycle["path"] in (["A", "B", "A"], ["B", "A", "B"])
    finally:
        client.close()


def test_pipeline_call_through_service(service):
    frame = one_square_scene(intensity=220).render(0)
    client = client_for(service)
    try:
        client.declare_pipeline(detect_pipeline_spec())
        reply = client.call_generic("detpipe", frame)
        assert reply.ok
        assert len(reply.payload.detections) == 1
    finally:
        client.close()


# -- streaming ---------------------------------------------------------------------


def stream_records(client, target, count, scene=None, mode="fifo"):
    scene = scene or one_square_scene(intensity=220)
    source = SyntheticSource(scene, frame_count=count)
    return list(client.stream_source(source, target, mode=mode))


def test_hundred_frame_stream(service):
    client = client_for(service)
    try:
        client.declare_pipeline(detect_pipeline_spec())
        session = client.stream_source(
            SyntheticSource(one_square_scene(intensity=220), frame_count=100),
            "detpipe",
        )
        replies = list(session)
        assert len(replies) == 100
        assert all(r.ok for r in replies)
        assert session.summary.sent == 100
        assert session.summary.ok == 100
        assert session.summary.error == 0
    finally:
        client.close()


def test_fifo_stream_order_preserved(service):
    client = client_for(service)
    try:
        spec = PipelineSpec(
            name="jitterpipe",
            mode=PipelineMode.FIFO,
            nodes=(NodeSpec("d", "local", "demo-delay", {"jitter_ms": "5"}),),
            edges=(),
            max_inflight=8,
        )
        client.declare_pipeline(spec)
        source = SyntheticSource(one_square_scene(intensity=220), frame_count=40)
        sent_ids = []
        original_grab = source.grab

        def grab_tracking():
            record = original_grab()
            if record is not None:
                sent_ids.append(record.record_id)
            return record

        source.grab = grab_tracking  # type: ignore[method-assign]
        replies = list(client.stream_source(source, "jitterpipe", mode="fifo"))
        assert [r.record_id for r in replies] == sent_ids
    finally:
        client.close()


def test_malformed_record_mid_stream_answered_and_stream_continues(service):
    sock = socket.create_connection(service.endpoint, timeout=5.0)
    msock = MessageSocket(sock)
    from faro2.records import new_record

    frame = one_square_scene(intensity=220).render(0)
    ok_record = new_record(frame, target="demo-detect",
                           options={RPC_OPTION: "Call"})
    good = serialize_record(ok_record)
    # same framing, poisoned body: flip a payload tag deep inside
    bad = bytearray(serialize_record(new_record(frame, target="demo-detect",
                                                options={RPC_OPTION: "Call"})))
    idx = bad.index(b"\x06")  # first occurrence of the payload field tag
    # corrupt the body length of a field to break parsing
    bad[-1] ^= 0xFF
    msock.sock.sendall(bytes(bad))
    first = msock.recv()
    assert first.status is ReplyStatus.ERROR
    assert first.error.code == "MALFORMED_RECORD"
    # stream continues: a good record still gets served
    msock.sock.sendall(good)
    second = msock.recv()
    assert second.record_id == ok_record.record_id
    assert second.ok
    msock.close()


def test_disconnect_mid_stream_leaves_no_orphans(service):
    client = client_for(service)
    spec = PipelineSpec(
        name="slowpipe",
        mode=PipelineMode.FIFO,
        nodes=(NodeSpec("d", "local", "demo-delay", {"delay_ms": "30"}),),
        edges=(),
        max_inflight=4,
    )
    client.declare_pipeline(spec)
    source = SyntheticSource(one_square_scene(intensity=220), frame_count=200)
    session = client.stream_source(source, "slowpipe")
    iterator = iter(session)
    next(iterator)  # at least one reply flowed
    client.close()  # abrupt disconnect with work in flight
    deadline = time.monotonic() + 5.0
    while time.monotonic() < deadline:
        if service.inflight_count() == 0:
            break
        time.sleep(0.05)
    assert service.inflight_count() == 0


def test_hot_swap_under_load_zero_errors(service):
    client = client_for(service)
    declarer = client_for(service)
    try:
        client.declare_pipeline(detect_pipeline_spec(name="hot", threshold="100"))
        source = SyntheticSource(one_square_scene(intensity=220), frame_count=200)
        session = client.stream_source(source, "hot", mode="fifo")
        replies = []
        swapped = False
        for reply in session:
            replies.append(reply)
            if len(replies) == 60 and not swapped:
                swapped = True
                declarer.declare_pipeline(
                    detect_pipeline_spec(name="hot", threshold="90")
                )
        assert len(replies) == 200
        assert all(r.ok for r in replies), next(r.error for r in replies if not r.ok)
        assert session.summary.error == 0
    finally:
        client.close()
        declarer.close()


# -- galleries over rpc ---------------------------------------------------------------


def test_gallery_rpc_plaintext_roundtrip(tmp_path):
    svc = make_service(
        name="svc-g",
        galleries=[GalleryConfig(name="people", backend="plain")],
    )
    client = client_for(svc)
    try:
        rnd = random.Random(4)
        templates = {
            f"subj{i}": Template(
                vector=tuple(rnd.uniform(-1, 1) for _ in range(16)),
            )
            for i in range(3)
        }
        for subject, template in templates.items():
            entry_hex = client.call_enroll(template, subject, "people")
            assert uuid.UUID(hex=entry_hex)
        result = client.call_search(templates["subj1"], "people", top_k=3)
        assert result.hits[0].subject_id == "subj1"
        assert result.hits[0].score == pytest.approx(1.0, abs=1e-9)

        listing = client.gallery_list("people")
        assert listing["total"] == 3
        assert client.gallery_delete("people", "subj0") == 1
        assert client.gallery_list("people")["total"] == 2
    finally:
        client.close()
        svc.stop(grace=0.5)


def test_gallery_rpc_phe_two_party_search():
    keypair = phe.keygen(512, rng=random.Random(777))
    svc = make_service(
        name="svc-e",
        galleries=[
            GalleryConfig(name="vault", backend="phe", public_key_n=keypair.public.n)
        ],
    )
    client = client_for(svc)
    try:
        rnd = random.Random(5)
        enrolled = {}
        for i in range(4):
            t = Template(vector=tuple(rnd.uniform(-1, 1) for _ in range(8)))
            client.call_enroll(t, f"p{i}", "vault")
            enrolled[f"p{i}"] = t
        # the service holds only ciphertexts; search without a key fails
        with pytest.raises(KeyHolderUnavailable):
            client.call_search(enrolled["p2"], "vault", top_k=2)
        result = client.call_search(
            enrolled["p2"], "vault", top_k=4, key_holder=keypair
        )
        assert result.hits[0].subject_id == "p2"
        assert result.hits[0].score == 0.0
    finally:
        client.close()
        svc.stop(grace=0.5)


def test_unknown_gallery_not_found(service):
    client = client_for(service)
    try:
        with pytest.raises(RemoteError) as info:
            client.gallery_list("ghost-gallery")
        assert info.value.code == "NOT_FOUND"
    finally:
        client.close()


def test_env_overrides_service_name(monkeypatch):
    monkeypatch.setenv("FARO_SERVICE_NAME", "env-named")
    config = ServiceConfig(service_name="from-config", bind_address="127.0.0.1:0")
    assert config.service_name == "env-named"


def test_service_name_grammar_enforced():
    with pytest.raises(ValueError):
        ServiceConfig(service_name="Has Spaces", bind_address="127.0.0.1:0")
    with pytest.raises(ValueError):
        ServiceConfig(service_name="x" * 70, bind_address="127.0.0.1:0")


def test_config_json_round_trip(tmp_path):
    doc = {
        "service_name": "json-svc",
        "bind_address": "127.0.0.1:0",
        "galleries": [{"name": "g", "backend": "plain"}],
        "announce": False,
        "discovery": {"enabled": False},
    }
    path = tmp_path / "svc.json"
    path.write_text(json.dumps(doc))
    config = ServiceConfig.from_file(path)
    assert config.service_name == "json-svc"
    assert config.galleries[0].name == "g"
    svc = start_service(config)
    try:
        client = client_for(svc)
        try:
            assert client.call_status()["galleries"] == ["g"]
        finally:
            client.close()
    finally:
        svc.stop(grace=0.5)
