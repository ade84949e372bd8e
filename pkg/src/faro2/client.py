"""Per-service client: one dedicated channel, typed calls, source streaming.

A client connects to exactly one service, either by announced name (resolved
through discovery) or by explicit endpoint, optionally over TLS. Typed calls
(status, detect, extract, enroll, search) are thin wrappers that build a
FaroRecord, send it, and unwrap the typed payload from the reply;
call_generic routes a raw record verbatim. Record construction lives in
standalone make_* functions so a typed call and an equivalent generic call
produce byte-identical records.

Recursion happens server side: asking this client for "other-service/worker"
makes its own service forward the record; the client never opens a second
channel.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Union

from . import discovery, phe
from .errors import (
    ConnectFailure,
    FaroError,
    KeyHolderUnavailable,
    MalformedMessage,
    NotFound,
    ResolveFailure,
    TransportError,
)
from .gallery import SearchResult, rank_differences
from .pipeline import PipelineSpec
from .records import (
    EMPTY,
    DetectionList,
    EncryptedTemplateList,
    FaroRecord,
    FaroReply,
    Frame,
    Generic,
    Payload,
    Template,
    TemplateList,
    new_record,
)
from .rpc import (
    METHOD_CALL,
    METHOD_DECLARE_PIPELINE,
    METHOD_GALLERY_DELETE,
    METHOD_GALLERY_ENROLL,
    METHOD_GALLERY_LIST,
    METHOD_GALLERY_SEARCH,
    METHOD_LIST_CAPABILITIES,
    METHOD_STATUS,
    METHOD_STREAM_CALL,
    MessageSocket,
    RPC_OPTION,
)
from .security import SecurityConfig, secure_connect
from .sources import Source
from .workers import ORIGIN_FRAME_OPTION, MicroserviceKind, WorkerInfo, attach_origin_frame

log = logging.getLogger("faro2.client")


@dataclass
class RetryPolicy:
    attempts: int = 0
    backoff_ms: int = 250


@dataclass
class ClientConfig:
    service_name: Optional[str] = None
    endpoint: Optional[tuple[str, int]] = None
    security: SecurityConfig = field(default_factory=SecurityConfig)
    timeout_ms: int = 10_000
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    discovery_group: Optional[str] = None
    discovery_port: Optional[int] = None
    resolve_timeout_s: float = 12.0

    def __post_init__(self):
        if (self.service_name is None) == (self.endpoint is None):
            raise ValueError("configure exactly one of service_name or endpoint")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")


# -- record builders (pure; shared by typed and generic paths) -------------------


def make_generic_record(
    target: str,
    payload: Payload,
    options: Optional[dict[str, str]] = None,
    method: str = METHOD_CALL,
    sequence_no: int = 0,
    record_id: Optional[uuid.UUID] = None,
    timestamp_us: Optional[int] = None,
    source_id: str = "client",
) -> FaroRecord:
    opts = dict(options or {})
    opts[RPC_OPTION] = method
    return new_record(
        payload=payload,
        target=target,
        source_id=source_id,
        sequence_no=sequence_no,
        options=opts,
        record_id=record_id,
        timestamp_us=timestamp_us,
    )


def make_detect_record(frame: Frame, target: str, **kw) -> FaroRecord:
    return make_generic_record(target, frame, **kw)


def make_extract_record(
    frame: Frame, detections: DetectionList, target: str, **kw
) -> FaroRecord:
    record = make_generic_record(target, detections, **kw)
    return attach_origin_frame(record, frame)


def make_status_record(**kw) -> FaroRecord:
    return make_generic_record("", EMPTY, method=METHOD_STATUS, **kw)


class Client:
    """Connection to a single service. Unary calls may overlap; streams own
    the channel for their duration."""

    def __init__(self, config: ClientConfig):
        self.config = config
        self.endpoint: tuple[str, int] = self._resolve_endpoint()
        self._pending: dict[uuid.UUID, "_Waiter"] = {}
        self._pending_lock = threading.Lock()
        self._stream_sink: Optional[callable] = None
        self._seq = 0
        self._seq_lock = threading.Lock()
        self._closed = False
        self._msock = self._open()
        self._reader = threading.Thread(
            target=self._read_loop, name="faro2-client-reader", daemon=True
        )
        self._reader.start()

    # -- connection -------------------------------------------------------

    def _resolve_endpoint(self) -> tuple[str, int]:
        if self.config.endpoint is not None:
            return self.config.endpoint
        browser = discovery.Browser(
            group=self.config.discovery_group, mcast_port=self.config.discovery_port
        ).start()
        try:
            ann = browser.wait_for(
                self.config.service_name, timeout=self.config.resolve_timeout_s
            )
            return ann.endpoint
        except NotFound as exc:
            raise ResolveFailure(str(exc)) from exc
        finally:
            browser.stop()

    def _open(self) -> MessageSocket:
        host, port = self.endpoint
        try:
            sock = socket.create_connection((host, port), timeout=self.config.timeout_ms / 1e3)
        except OSError as exc:
            raise ConnectFailure(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        wrapped = secure_connect(sock, self.config.security, endpoint=f"{host}:{port}")
        return MessageSocket(wrapped)

    def _read_loop(self):
        while not self._closed:
            try:
                msg = self._msock.recv()
            except (MalformedMessage, TransportError, OSError):
                break
            if msg is None:
                break
            if not isinstance(msg, FaroReply):
                continue
            with self._pending_lock:
                waiter = self._pending.pop(msg.record_id, None)
            if waiter is not None:
                waiter.reply = msg
                waiter.event.set()
            elif self._stream_sink is not None:
                self._stream_sink(msg)
        self._fail_pending(TransportError("connection closed"))

    def _fail_pending(self, exc: Exception):
        with self._pending_lock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for w in waiters:
            w.error = exc
            w.event.set()

    def close(self):
        self._closed = True
        self._msock.close()

    def next_seq(self) -> int:
        with self._seq_lock:
            self._seq += 1
            return self._seq

    # -- raw calls ----------------------------------------------------------

    def call_record(self, record: FaroRecord, timeout: Optional[float] = None) -> FaroReply:
        """Send one record and wait for its correlated reply."""
        if RPC_OPTION not in record.options:
            record = record.with_options(**{RPC_OPTION: METHOD_CALL})
        waiter = _Waiter()
        with self._pending_lock:
            self._pending[record.record_id] = waiter
        try:
            self._msock.send_record(record)
        except TransportError:
            with self._pending_lock:
                self._pending.pop(record.record_id, None)
            raise
        timeout = timeout if timeout is not None else self.config.timeout_ms / 1e3
        if not waiter.event.wait(timeout):
            with self._pending_lock:
                self._pending.pop(record.record_id, None)
            raise TransportError(f"call timed out after {timeout}s")
        if waiter.error is not None:
            raise waiter.error
        return waiter.reply

    def send_only(self, record: FaroRecord) -> None:
        self._msock.send_record(record)

    # -- typed calls ----------------------------------------------------------

    def call_status(self) -> dict:
        reply = self.call_record(make_status_record(sequence_no=self.next_seq()))
        _raise_on_error(reply)
        return json.loads(reply.payload.data.decode("utf-8"))

    def call_generic(
        self, target: str, payload: Payload, options: Optional[dict[str, str]] = None
    ) -> FaroReply:
        record = make_generic_record(
            target, payload, options=options, sequence_no=self.next_seq()
        )
        return self.call_record(record)

    def call_detect(self, frame: Frame, target: str = "demo-detect") -> DetectionList:
        reply = self.call_record(
            make_detect_record(frame, target, sequence_no=self.next_seq())
        )
        _raise_on_error(reply)
        return _expect(reply.payload, DetectionList)

    def call_extract(
        self,
        frame: Frame,
        detections: DetectionList,
        target: str = "demo-extract",
    ) -> TemplateList:
        reply = self.call_record(
            make_extract_record(frame, detections, target, sequence_no=self.next_seq())
        )
        _raise_on_error(reply)
        return _expect(reply.payload, TemplateList)

    def call_enroll(
        self,
        template: Template,
        subject_id: str,
        gallery: str,
        meta: Optional[dict[str, str]] = None,
    ) -> str:
        options = {
            RPC_OPTION: METHOD_GALLERY_ENROLL,
            "faro.gallery": gallery,
            "faro.subject": subject_id,
        }
        for k, v in (meta or {}).items():
            options[f"faro.meta.{k}"] = v
        record = new_record(
            payload=TemplateList(templates=(template,)),
            target="",
            source_id="client",
            sequence_no=self.next_seq(),
            options=options,
        )
        reply = self.call_record(record)
        _raise_on_error(reply)
        return json.loads(reply.payload.data.decode("utf-8"))["entry_ids"][0]

    def call_search(
        self,
        probe: Template,
        gallery: str,
        top_k: int = 10,
        key_holder: Optional[phe.PheKeypair] = None,
    ) -> SearchResult:
        """Search a gallery; finishes the two-party protocol for PHE backends.

        A plaintext gallery answers with a ranked result directly. A PHE
        gallery answers with encrypted difference vectors, which are
        decrypted and ranked here by the key holder.
        """
        record = new_record(
            payload=TemplateList(templates=(probe,)),
            target="",
            source_id="client",
            sequence_no=self.next_seq(),
            options={
                RPC_OPTION: METHOD_GALLERY_SEARCH,
                "faro.gallery": gallery,
                "faro.top_k": str(top_k),
            },
        )
        reply = self.call_record(record)
        _raise_on_error(reply)
        if isinstance(reply.payload, Generic):
            doc = json.loads(reply.payload.data.decode("utf-8"))
            return _search_result_from_json(doc)
        if isinstance(reply.payload, EncryptedTemplateList):
            if key_holder is None:
                raise KeyHolderUnavailable(
                    "gallery answered encrypted differences; pass key_holder="
                )
            # each difference vector carries "subject|entry_hex" in subject_id
            diffs = []
            for enc in reply.payload.templates:
                subject, _, entry_hex = (enc.subject_id or "").partition("|")
                diffs.append((subject, uuid.UUID(hex=entry_hex), enc))
            return rank_differences(key_holder, diffs, top_k=top_k)
        raise TransportError(f"unexpected search payload {type(reply.payload).__name__}")

    def gallery_delete(self, gallery: str, selector: Union[str, uuid.UUID]) -> int:
        options = {RPC_OPTION: METHOD_GALLERY_DELETE, "faro.gallery": gallery}
        if isinstance(selector, uuid.UUID):
            options["faro.entry_id"] = selector.hex
        else:
            options["faro.subject"] = selector
        reply = self.call_record(
            new_record(EMPTY, sequence_no=self.next_seq(), options=options)
        )
        _raise_on_error(reply)
        return json.loads(reply.payload.data.decode("utf-8"))["removed"]

    def gallery_list(self, gallery: str, page: int = 0, page_size: int = 50) -> dict:
        reply = self.call_record(
            new_record(
                EMPTY,
                sequence_no=self.next_seq(),
                options={
                    RPC_OPTION: METHOD_GALLERY_LIST,
                    "faro.gallery": gallery,
                    "faro.page": str(page),
                    "faro.page_size": str(page_size),
                },
            )
        )
        _raise_on_error(reply)
        return json.loads(reply.payload.data.decode("utf-8"))

    def declare_pipeline(self, spec: PipelineSpec | dict) -> dict:
        doc = spec.to_json() if isinstance(spec, PipelineSpec) else spec
        reply = self.call_record(
            new_record(
                Generic("application/json", json.dumps(doc).encode("utf-8")),
                sequence_no=self.next_seq(),
                options={RPC_OPTION: METHOD_DECLARE_PIPELINE},
            )
        )
        _raise_on_error(reply)
        return json.loads(reply.payload.data.decode("utf-8"))

    def list_capabilities(
        self,
        recursive: bool = False,
        max_depth: int = 2,
        visited: Optional[set[str]] = None,
    ) -> dict:
        options = {
            RPC_OPTION: METHOD_LIST_CAPABILITIES,
            "faro.recursive": "true" if recursive else "false",
            "faro.max_depth": str(max_depth),
        }
        if visited:
            options["faro.visited"] = ",".join(sorted(visited))
        reply = self.call_record(
            new_record(EMPTY, sequence_no=self.next_seq(), options=options)
        )
        _raise_on_error(reply)
        return json.loads(reply.payload.data.decode("utf-8"))

    def worker_info(self, worker_type: str) -> WorkerInfo:
        """Info for one remote worker or pipeline, from the capability tree."""
        caps = self.list_capabilities(recursive=False)
        for info in caps.get("workers", []):
            if info["worker_type"] == worker_type:
                return _worker_info_from_json(info)
        for pipe in caps.get("pipelines", []):
            if pipe["name"] == worker_type:
                return WorkerInfo(
                    worker_type=worker_type,
                    microservice_kind=MicroserviceKind.GENERIC,
                    resources={},
                    options_schema=(),
                    reentrant=True,
                )
        raise NotFound(f"peer exposes no worker or pipeline {worker_type!r}")

    # -- streaming ------------------------------------------------------------

    def stream_source(
        self,
        source: Source,
        target: str,
        mode: str = "unordered",
    ) -> "StreamSession":
        """Grab every frame from the source and stream it at the target.

        Returns an iterator of replies; .summary is populated once the
        iterator is exhausted. Transport failures trigger reconnect and
        resend of unanswered records per the retry policy, with replies
        deduplicated by record id.
        """
        return StreamSession(self, source, target, mode)


class _Waiter:
    __slots__ = ("event", "reply", "error")

    def __init__(self):
        self.event = threading.Event()
        self.reply: Optional[FaroReply] = None
        self.error: Optional[Exception] = None


@dataclass
class StreamSummary:
    grabbed: int = 0
    sent: int = 0
    ok: int = 0
    error: int = 0
    wall_clock_s: float = 0.0
    mean_latency_s: float = 0.0


class StreamSession:
    """Iterator over stream replies with retry and duplicate suppression."""

    def __init__(self, client: Client, source: Source, target: str, mode: str):
        self.client = client
        self.source = source
        self.target = target
        self.mode = mode
        self.summary = StreamSummary()
        self._sent_records: dict[uuid.UUID, FaroRecord] = {}
        self._answered: set[uuid.UUID] = set()
        self._send_times: dict[uuid.UUID, float] = {}
        self._latencies: list[float] = []

    def __iter__(self) -> Iterator[FaroReply]:
        start = time.monotonic()
        import queue as _queue

        inbox: "_queue.Queue[FaroReply]" = _queue.Queue()
        self.client._stream_sink = inbox.put
        attempts_left = self.client.config.retry.attempts
        transport_dead = False
        try:
            for record in self.source:
                self.summary.grabbed += 1
                if transport_dead:
                    continue  # count the unsent remainder into the summary
                record = record.with_options(
                    **{RPC_OPTION: METHOD_STREAM_CALL, "faro.stream_mode": self.mode}
                )
                record = replace(record, target=self.target)
                while True:
                    try:
                        self.client.send_only(record)
                        break
                    except TransportError:
                        if attempts_left <= 0:
                            transport_dead = True
                            break
                        attempts_left -= 1
                        try:
                            self._reconnect_and_resend()
                        except FaroError:
                            transport_dead = True
                            break
                if transport_dead:
                    continue
                self._sent_records[record.record_id] = record
                self._send_times[record.record_id] = time.monotonic()
                self.summary.sent += 1
                while not inbox.empty():
                    reply = inbox.get_nowait()
                    if self._note(reply):
                        yield reply
            # source exhausted; wait out the unanswered remainder
            deadline = time.monotonic() + self.client.config.timeout_ms / 1e3
            while not transport_dead and len(self._answered) < len(self._sent_records):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    reply = inbox.get(timeout=min(remaining, 0.2))
                except _queue.Empty:
                    continue
                if self._note(reply):
                    deadline = time.monotonic() + self.client.config.timeout_ms / 1e3
                    yield reply
        finally:
            self.client._stream_sink = None
            self.summary.error = self.summary.grabbed - self.summary.ok
            self.summary.wall_clock_s = time.monotonic() - start
            if self._latencies:
                self.summary.mean_latency_s = sum(self._latencies) / len(self._latencies)

    def _note(self, reply: FaroReply) -> bool:
        if reply.record_id in self._answered:
            return False  # duplicate after a resend
        if reply.record_id not in self._sent_records:
            return False
        self._answered.add(reply.record_id)
        sent_at = self._send_times.get(reply.record_id)
        if sent_at is not None:
            self._latencies.append(time.monotonic() - sent_at)
        if reply.ok:
            self.summary.ok += 1
        return True

    def _reconnect_and_resend(self):
        backoff = self.client.config.retry.backoff_ms / 1e3
        time.sleep(backoff)
        self.client._msock.close()
        self.client._msock = self.client._open()
        reader = threading.Thread(
            target=self.client._read_loop, name="faro2-client-reader", daemon=True
        )
        reader.start()
        for rid, record in self._sent_records.items():
            if rid not in self._answered:
                self.client.send_only(record)


def connect(config: ClientConfig) -> Client:
    """Open the dedicated channel and verify it with a status call."""
    client = Client(config)
    try:
        client.call_status()
    except FaroError:
        client.close()
        raise
    return client


def _raise_on_error(reply: FaroReply) -> None:
    if not reply.ok:
        code = reply.error.code if reply.error else "UNKNOWN"
        raise RemoteError(code, reply.error.message if reply.error else "")


class RemoteError(FaroError):
    """The service answered with an ERROR reply."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.remote_message = message


def _expect(payload: Payload, kind: type) -> Payload:
    if not isinstance(payload, kind):
        raise TransportError(
            f"expected {kind.__name__} payload, got {type(payload).__name__}"
        )
    return payload


def _worker_info_from_json(doc: dict) -> WorkerInfo:
    from .workers import OptionSpec

    return WorkerInfo(
        worker_type=doc["worker_type"],
        microservice_kind=MicroserviceKind(doc["microservice_kind"]),
        resources=dict(doc.get("resources", {})),
        options_schema=tuple(
            OptionSpec(o["name"], o["type"], o["default"], o.get("description", ""))
            for o in doc.get("options_schema", [])
        ),
        reentrant=bool(doc.get("reentrant", True)),
    )


def _search_result_from_json(doc: dict) -> SearchResult:
    from .gallery import ScoreKind, SearchHit

    hits = tuple(
        SearchHit(
            subject_id=h["subject_id"],
            entry_id=uuid.UUID(hex=h["entry_id"]),
            score=float(h["score"]),
        )
        for h in doc.get("hits", [])
    )
    return SearchResult(hits=hits, score_kind=ScoreKind(doc.get("score_kind", "cosine")))
