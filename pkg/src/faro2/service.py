"""The service node: an RPC server hosting workers, pipelines, galleries,
and persistent clients to every peer service it can see.

Four cooperating parts live here. Online pipeline declaration builds and
atomically swaps named pipeline instances while in-flight records finish on
the old one. Local workers are constructed from the registry at startup.
The peer table lazily opens one client per visible peer service (reconnect
backoff: base 250 ms, cap 8 s), which is what makes routing recursive: a
record targeting "other-service/worker" is forwarded over that peer client,
and services relay toward peers they cannot see directly, with a hop list
in the record options stopping forwarding loops. Galleries are loaded from
config and exposed through the Gallery* RPC methods.

Streams get per-session contexts with their own FIFO reorder buffers, so
ordering survives pipeline hot-swaps; backpressure propagates by blocking
the session reader while a pipeline is at max_inflight.
"""

from __future__ import annotations

import json
import logging
import os
import re
import socket
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from . import discovery, phe
from .client import Client, ClientConfig
from .errors import (
    BindFailure,
    FaroError,
    LoopDetected,
    NotFound,
    PeerUnavailable,
    TransportError,
    UnknownTarget,
    UnresolvedService,
    ValidationFailed,
)
from .gallery import BaseGallery, PheGallery, PlainGallery, load_gallery
from .pipeline import PipelineInstance, PipelineSpec, RemoteWorkerProxy, instantiate
from .records import (
    EMPTY,
    EncryptedTemplateList,
    FaroRecord,
    FaroReply,
    Generic,
    Template,
    TemplateList,
    error_reply,
    ok_reply,
)
from .rpc import (
    BodyParseError,
    HOPS_OPTION,
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
from .security import SecurityConfig, secure_accept, server_context
from .workers import WorkerRegistry, default_registry

log = logging.getLogger("faro2.service")

SERVICE_NAME_RE = re.compile(r"^[a-z0-9-]{1,63}$")
VERSION = "2.0"
BACKOFF_BASE_S = 0.25
BACKOFF_CAP_S = 8.0


@dataclass
class DiscoveryConfig:
    enabled: bool = False
    interval: float = discovery.DEFAULT_INTERVAL
    ttl_seconds: Optional[int] = None
    group: Optional[str] = None
    port: int = discovery.DEFAULT_PORT
    static_peers: list[dict] = field(default_factory=list)

    @classmethod
    def from_json(cls, doc: Optional[dict]) -> "DiscoveryConfig":
        if not doc:
            return cls()
        return cls(
            enabled=bool(doc.get("enabled", True)),
            interval=float(doc.get("interval", discovery.DEFAULT_INTERVAL)),
            ttl_seconds=doc.get("ttl_seconds"),
            group=doc.get("group"),
            port=int(doc.get("port", discovery.DEFAULT_PORT)),
            static_peers=list(doc.get("static_peers", [])),
        )


@dataclass
class GalleryConfig:
    name: str
    backend: str = "plain"  # "plain" | "phe"
    path: Optional[str] = None
    public_key_path: Optional[str] = None
    public_key_n: Optional[int] = None
    scale: int = phe.DEFAULT_SCALE

    @classmethod
    def from_json(cls, doc: dict) -> "GalleryConfig":
        return cls(
            name=doc["name"],
            backend=doc.get("backend", "plain"),
            path=doc.get("path"),
            public_key_path=doc.get("public_key_path"),
            public_key_n=int(doc["public_key_n"]) if "public_key_n" in doc else None,
            scale=int(doc.get("scale", phe.DEFAULT_SCALE)),
        )


@dataclass
class ServiceConfig:
    service_name: str
    bind_address: str = "127.0.0.1:0"
    worker_types_enabled: Optional[list[str]] = None
    galleries: list[GalleryConfig] = field(default_factory=list)
    security: SecurityConfig = field(default_factory=SecurityConfig)
    announce: bool = False
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)

    def __post_init__(self):
        override = os.environ.get("FARO_SERVICE_NAME")
        if override:
            self.service_name = override
        if not SERVICE_NAME_RE.match(self.service_name):
            raise ValueError(
                f"service name {self.service_name!r} must match [a-z0-9-]{{1,63}}"
            )
        host, port = self.split_bind()
        if not (0 <= port <= 65535):
            raise ValueError(f"port {port} out of range")

    def split_bind(self) -> tuple[str, int]:
        host, _, port = self.bind_address.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def from_json(cls, doc: dict | str | bytes) -> "ServiceConfig":
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        return cls(
            service_name=doc["service_name"],
            bind_address=doc.get("bind_address", "127.0.0.1:0"),
            worker_types_enabled=doc.get("worker_types_enabled"),
            galleries=[GalleryConfig.from_json(g) for g in doc.get("galleries", [])],
            security=SecurityConfig.from_json(doc.get("security")),
            announce=bool(doc.get("announce", False)),
            discovery=DiscoveryConfig.from_json(doc.get("discovery")),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        return cls.from_json(Path(path).read_text())


def _error_code(exc: BaseException) -> str:
    # UnknownTarget -> UNKNOWN_TARGET
    name = type(exc).__name__
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).upper()


class PeerTable:
    """Visible peers and their cached clients, with reconnect backoff."""

    def __init__(self, service: "Service"):
        self._service = service
        self._clients: dict[str, Client] = {}
        self._backoff: dict[str, tuple[int, float]] = {}
        self._lock = threading.Lock()

    def visible(self) -> dict[str, discovery.ServiceAnnouncement]:
        browser = self._service._browser
        if browser is None:
            return {}
        snap = browser.snapshot().services
        snap.pop(self._service.name, None)
        return snap

    def client_for(self, service_name: str) -> Client:
        with self._lock:
            client = self._clients.get(service_name)
        if client is not None:
            return client
        with self._lock:
            fails, not_before = self._backoff.get(service_name, (0, 0.0))
            if time.monotonic() < not_before:
                raise PeerUnavailable(f"{service_name}: reconnect backoff in effect")
        ann = self.visible().get(service_name)
        if ann is None:
            raise PeerUnavailable(f"{service_name}: not in the directory")
        try:
            client = Client(
                ClientConfig(
                    endpoint=ann.endpoint,
                    security=self._service.config.security,
                    timeout_ms=self._service.peer_timeout_ms,
                )
            )
        except FaroError as exc:
            with self._lock:
                delay = min(BACKOFF_BASE_S * (2 ** fails), BACKOFF_CAP_S)
                self._backoff[service_name] = (fails + 1, time.monotonic() + delay)
            raise PeerUnavailable(f"{service_name}: {exc}") from exc
        with self._lock:
            self._backoff.pop(service_name, None)
            existing = self._clients.setdefault(service_name, client)
        if existing is not client:
            client.close()
        return existing

    def drop(self, service_name: str) -> None:
        with self._lock:
            client = self._clients.pop(service_name, None)
        if client is not None:
            client.close()

    def proxy(self, service_name: str, worker_type: str) -> RemoteWorkerProxy:
        """Remote stage handle for pipeline instantiation."""
        if service_name not in self.visible() and service_name not in self._clients:
            raise UnresolvedService(service_name)
        try:
            client = self.client_for(service_name)
        except PeerUnavailable as exc:
            raise UnresolvedService(service_name) from exc
        return RemoteWorkerProxy(service_name, worker_type, client)

    def close(self):
        with self._lock:
            clients = list(self._clients.values())
            self._clients.clear()
        for c in clients:
            c.close()


class Service:
    """A running service node. Use start_service() to construct one."""

    def __init__(self, config: ServiceConfig, registry: Optional[WorkerRegistry] = None):
        self.config = config
        self.name = config.service_name
        self.peer_timeout_ms = 10_000
        self._registry = registry or default_registry()
        self._workers: dict[str, object] = {}
        self._pipelines: dict[str, PipelineInstance] = {}
        self._pipe_lock = threading.Lock()
        self._galleries: dict[str, BaseGallery] = {}
        self._sessions: set["_Session"] = set()
        self._sessions_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix=f"faro2-{self.name}")
        self._stopping = False
        self._browser: Optional[discovery.Browser] = None
        self._announcer: Optional[discovery.Announcer] = None
        self._peers = PeerTable(self)

        enabled = config.worker_types_enabled
        for worker_type in (enabled if enabled is not None else self._registry.types()):
            self._workers[worker_type] = self._registry.construct(worker_type)

        for gc in config.galleries:
            self._galleries[gc.name] = _build_gallery(gc)

        self._tls_ctx = server_context(config.security)
        host, port = config.split_bind()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            self._listener.close()
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._listener.listen(64)
        self.endpoint: tuple[str, int] = self._listener.getsockname()

        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"faro2-accept-{self.name}", daemon=True
        )
        self._accept_thread.start()

        if config.discovery.enabled or config.announce or config.discovery.static_peers:
            self._browser = discovery.Browser(
                group=config.discovery.group,
                mcast_port=config.discovery.port,
                static_peers=config.discovery.static_peers,
            ).start()
        if config.announce:
            self._announcer = discovery.Announcer(
                service_name=self.name,
                host=self.endpoint[0],
                port=self.endpoint[1],
                capabilities_fn=self._announced_capabilities,
                interval=config.discovery.interval,
                ttl_seconds=config.discovery.ttl_seconds,
                group=config.discovery.group,
                mcast_port=config.discovery.port,
                version=VERSION,
            ).start()
        log.info("service %s listening on %s:%d", self.name, *self.endpoint)

    # -- capability plumbing ------------------------------------------------

    def _announced_capabilities(self) -> tuple[list[str], list[str]]:
        with self._pipe_lock:
            pipelines = sorted(self._pipelines)
        return sorted(self._workers), pipelines

    def list_capabilities(
        self, recursive: bool = False, max_depth: int = 2, visited: Optional[set] = None
    ) -> dict:
        """Local capability tree, optionally recursing into visible peers.

        A visited set travels with the recursion so capability walks
        terminate on arbitrary peer graphs, including cycles.
        """
        with self._pipe_lock:
            pipelines = {name: inst.spec for name, inst in self._pipelines.items()}
        tree = {
            "service": self.name,
            "endpoint": f"{self.endpoint[0]}:{self.endpoint[1]}",
            "version": VERSION,
            "workers": [w.info().to_json() for w in self._workers.values()],
            "pipelines": [
                {"name": name, "mode": spec.mode.value,
                 "nodes": [n.name for n in spec.nodes]}
                for name, spec in sorted(pipelines.items())
            ],
            "galleries": [
                {"name": g.name, "backend": g.backend, "dims": g.dim, "entries": len(g)}
                for g in self._galleries.values()
            ],
        }
        if not recursive or max_depth <= 0:
            return tree
        visited = set(visited or ()) | {self.name}
        peers_out = []
        for peer_name in sorted(self._peers.visible()):
            if peer_name in visited:
                continue
            try:
                client = self._peers.client_for(peer_name)
                sub = client.list_capabilities(
                    recursive=True, max_depth=max_depth - 1, visited=visited
                )
                peers_out.append(sub)
            except FaroError as exc:
                peers_out.append({"service": peer_name, "unreachable": str(exc)})
        tree["peers"] = peers_out
        return tree

    def status_doc(self) -> dict:
        workers, pipelines = self._announced_capabilities()
        return {
            "service_name": self.name,
            "endpoint": f"{self.endpoint[0]}:{self.endpoint[1]}",
            "version": VERSION,
            "workers": workers,
            "pipelines": pipelines,
            "galleries": sorted(self._galleries),
        }

    # -- pipeline declaration -------------------------------------------------

    def declare_pipeline(self, spec: PipelineSpec) -> None:
        """Instantiate and publish a pipeline; redeclaring a name hot-swaps.

        The new instance is fully built before the swap; the old instance
        keeps serving records already admitted and is closed after drain.
        """
        with self._pipe_lock:
            local = dict(self._pipelines)
        instance = instantiate(
            spec, self._registry, peers=self._peers, local_pipelines=local
        )
        with self._pipe_lock:
            old = self._pipelines.get(spec.name)
            self._pipelines[spec.name] = instance
        if old is not None:
            threading.Thread(
                target=lambda: old.close(timeout=30.0),
                name=f"faro2-retire-{spec.name}",
                daemon=True,
            ).start()
        log.info("service %s declared pipeline %s (%d nodes)", self.name, spec.name, len(spec.nodes))

    def pipeline(self, name: str) -> Optional[PipelineInstance]:
        with self._pipe_lock:
            return self._pipelines.get(name)

    def inflight_count(self) -> int:
        with self._pipe_lock:
            return sum(p.active_count for p in self._pipelines.values())

    # -- routing ---------------------------------------------------------------

    def route(self, record: FaroRecord) -> FaroReply:
        """Dispatch to a local worker/pipeline or forward via a peer client.

        Forwarding appends this service to the record's hop list; a record
        whose hop list already names this service is refused (LoopDetected).
        Targets of services we cannot see directly are relayed through a
        visible peer, preferring peers not already on the hop path.
        """
        start = time.perf_counter()
        svc, _, name = record.target.partition("/")
        if not name:
            svc, name = self.name, svc
        if svc in (self.name, "self", "local"):
            handler = self._workers.get(name) or self.pipeline(name)
            if handler is None:
                raise UnknownTarget(f"{self.name} hosts no worker or pipeline {name!r}")
            reply = handler.process(record)
        else:
            hops = [h for h in record.options.get(HOPS_OPTION, "").split(",") if h]
            if self.name in hops:
                raise LoopDetected(
                    f"record for {record.target!r} already passed through {self.name}"
                )
            fwd = record.with_options(
                **{HOPS_OPTION: ",".join(hops + [self.name]), RPC_OPTION: METHOD_CALL}
            )
            client = self._peer_route_client(svc, hops)
            try:
                reply = client.call_record(fwd)
            except TransportError as exc:
                self._peers.drop(svc)
                raise PeerUnavailable(f"{svc}: {exc}") from exc
        micros = int((time.perf_counter() - start) * 1e6)
        return reply.with_timing(f"route@{self.name}", micros)

    def _peer_route_client(self, svc: str, hops: list[str]) -> Client:
        visible = self._peers.visible()
        if svc in visible:
            return self._peers.client_for(svc)
        # relay toward someone who might know the target
        candidates = [p for p in sorted(visible) if p not in hops] or sorted(visible)
        for candidate in candidates:
            try:
                return self._peers.client_for(candidate)
            except PeerUnavailable:
                continue
        raise PeerUnavailable(f"{svc}: no visible peer to forward through")

    # -- rpc dispatch -------------------------------------------------------------

    def handle_method(self, method: str, record: FaroRecord) -> FaroReply:
        try:
            if method == METHOD_STATUS:
                return _json_reply(record, self.status_doc())
            if method in (METHOD_CALL, METHOD_STREAM_CALL):
                return self.route(record)
            if method == METHOD_DECLARE_PIPELINE:
                if not isinstance(record.payload, Generic):
                    raise ValueError("DeclarePipeline expects a JSON Generic payload")
                spec = PipelineSpec.from_json(record.payload.data)
                self.declare_pipeline(spec)
                return _json_reply(record, {"declared": spec.name})
            if method == METHOD_LIST_CAPABILITIES:
                recursive = record.options.get("faro.recursive", "false") == "true"
                max_depth = int(record.options.get("faro.max_depth", "2"))
                visited = {
                    v for v in record.options.get("faro.visited", "").split(",") if v
                }
                return _json_reply(
                    record, self.list_capabilities(recursive, max_depth, visited)
                )
            if method == METHOD_GALLERY_ENROLL:
                return self._gallery_enroll(record)
            if method == METHOD_GALLERY_SEARCH:
                return self._gallery_search(record)
            if method == METHOD_GALLERY_DELETE:
                return self._gallery_delete(record)
            if method == METHOD_GALLERY_LIST:
                return self._gallery_list(record)
            return error_reply(record, "UNKNOWN_METHOD", f"no RPC method {method!r}")
        except ValidationFailed as exc:
            return error_reply(
                record, "VALIDATION_FAILED", json.dumps(exc.report.to_json())
            )
        except FaroError as exc:
            return error_reply(record, _error_code(exc), str(exc))
        except Exception as exc:  # noqa: BLE001 - RPC boundary
            log.exception("rpc %s failed", method)
            return error_reply(record, "INTERNAL", repr(exc))

    # -- gallery rpc ---------------------------------------------------------------

    def _gallery(self, record: FaroRecord) -> BaseGallery:
        name = record.options.get("faro.gallery", "")
        gallery = self._galleries.get(name)
        if gallery is None:
            raise NotFound(f"{self.name} hosts no gallery {name!r}")
        return gallery

    def _gallery_enroll(self, record: FaroRecord) -> FaroReply:
        gallery = self._gallery(record)
        subject = record.options.get("faro.subject", "")
        meta = {
            k[len("faro.meta."):]: v
            for k, v in record.options.items()
            if k.startswith("faro.meta.")
        }
        meta.setdefault("source_id", record.source_id)
        if isinstance(record.payload, (TemplateList, EncryptedTemplateList)):
            templates = record.payload.templates
        else:
            raise ValueError("GalleryEnroll expects a TemplateList payload")
        ids = [gallery.enroll(subject, t, meta).hex for t in templates]
        return _json_reply(record, {"entry_ids": ids})

    def _gallery_search(self, record: FaroRecord) -> FaroReply:
        gallery = self._gallery(record)
        top_k = int(record.options.get("faro.top_k", "10"))
        if not isinstance(record.payload, TemplateList) or not record.payload.templates:
            raise ValueError("GallerySearch expects a TemplateList with the probe")
        probe: Template = record.payload.templates[0]
        if isinstance(gallery, PheGallery):
            # two-party protocol, matcher phase: ship encrypted differences
            diffs = gallery.encrypted_differences(probe)
            payload = EncryptedTemplateList(
                templates=tuple(
                    _tag_difference(entry, diff) for entry, diff in diffs
                )
            )
            return ok_reply(record, payload)
        result = gallery.search(probe, top_k=top_k)
        return _json_reply(
            record,
            {
                "score_kind": result.score_kind.value,
                "hits": [
                    {"subject_id": h.subject_id, "entry_id": h.entry_id.hex,
                     "score": h.score}
                    for h in result.hits
                ],
            },
        )

    def _gallery_delete(self, record: FaroRecord) -> FaroReply:
        gallery = self._gallery(record)
        if "faro.entry_id" in record.options:
            selector: Union[str, uuid.UUID] = uuid.UUID(hex=record.options["faro.entry_id"])
        else:
            selector = record.options.get("faro.subject", "")
        return _json_reply(record, {"removed": gallery.delete(selector)})

    def _gallery_list(self, record: FaroRecord) -> FaroReply:
        gallery = self._gallery(record)
        page = int(record.options.get("faro.page", "0"))
        page_size = int(record.options.get("faro.page_size", "50"))
        entries, total = gallery.list_entries(page, page_size)
        return _json_reply(
            record,
            {
                "total": total,
                "entries": [
                    {
                        "entry_id": e.entry_id.hex,
                        "subject_id": e.subject_id,
                        "modality": e.modality,
                        "enrolled_at": e.enrolled_at,
                        "dims": e.dims,
                        "encrypted": not isinstance(e.template, Template),
                    }
                    for e in entries
                ],
            },
        )

    # -- session plumbing ------------------------------------------------------------

    def _accept_loop(self):
        while not self._stopping:
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._start_session,
                args=(conn, addr),
                name=f"faro2-session-{addr[1]}",
                daemon=True,
            ).start()

    def _start_session(self, conn: socket.socket, addr):
        peer = f"{addr[0]}:{addr[1]}"
        try:
            wrapped = secure_accept(conn, self._tls_ctx, peer=peer)
        except FaroError as exc:
            log.info("refused session from %s: %s", peer, exc)
            return
        session = _Session(self, MessageSocket(wrapped), peer)
        with self._sessions_lock:
            self._sessions.add(session)
        try:
            session.run()
        finally:
            with self._sessions_lock:
                self._sessions.discard(session)
            log.debug("session %s torn down", peer)

    def stop(self, grace: float = 5.0) -> None:
        """Stop accepting, drain in-flight work, release every resource."""
        self._stopping = True
        if self._announcer is not None:
            self._announcer.stop()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._sessions_lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.close()
        deadline = time.monotonic() + grace
        with self._pipe_lock:
            pipelines = list(self._pipelines.values())
        for p in pipelines:
            p.drain(timeout=max(0.0, deadline - time.monotonic()))
            p.close(timeout=1.0)
        if self._browser is not None:
            self._browser.stop()
        self._peers.close()
        self._pool.shutdown(wait=False)


def _tag_difference(entry, diff):
    """Stamp subject and entry id on a difference vector for the key holder."""
    from dataclasses import replace as _replace

    return _replace(diff, subject_id=f"{entry.subject_id}|{entry.entry_id.hex}")


def _json_reply(record: FaroRecord, doc: dict) -> FaroReply:
    return ok_reply(
        record, Generic("application/json", json.dumps(doc).encode("utf-8"))
    )


def _build_gallery(gc: GalleryConfig) -> BaseGallery:
    if gc.path and Path(gc.path).exists():
        return load_gallery(gc.path)
    if gc.backend == "plain":
        return PlainGallery(gc.name, path=gc.path)
    if gc.backend == "phe":
        if gc.public_key_path:
            pub = phe.load_public_key(gc.public_key_path)
        elif gc.public_key_n is not None:
            pub = phe.public_key_from_n(gc.public_key_n)
        else:
            raise ValueError(f"gallery {gc.name!r}: phe backend needs a public key")
        return PheGallery(gc.name, pub, scale=gc.scale, path=gc.path)
    raise ValueError(f"gallery {gc.name!r}: unknown backend {gc.backend!r}")


class _StreamContext:
    """Per-session, per-target stream state: intake order and reply emission.

    The reorder buffer lives here rather than in the pipeline instance so
    FIFO order holds even across a pipeline hot-swap mid-stream.
    """

    def __init__(self, session: "_Session", target: str, fifo: bool):
        self.session = session
        self.target = target
        self.fifo = fifo
        self._lock = threading.Lock()
        self._next_in = 0
        self._next_emit = 0
        self._buffer: dict[int, FaroReply] = {}

    def submit(self, record: FaroRecord) -> None:
        with self._lock:
            index = self._next_in
            self._next_in += 1
        service = self.session.service
        svc, _, name = record.target.partition("/")
        if not name:
            svc, name = service.name, svc
        instance = None
        if svc in (service.name, "self", "local"):
            instance = service.pipeline(name)
        if instance is not None:
            # blocking submit: backpressure suspends this session's intake
            instance.submit(record, lambda reply, i=index: self._emit(i, reply))
        else:
            service._pool.submit(self._run_unary, index, record)

    def _run_unary(self, index: int, record: FaroRecord):
        reply = self.session.service.handle_method(METHOD_CALL, record)
        self._emit(index, reply)

    def _emit(self, index: int, reply: FaroReply):
        with self._lock:
            if not self.fifo:
                self.session.send(reply)
                return
            self._buffer[index] = reply
            while self._next_emit in self._buffer:
                self.session.send(self._buffer.pop(self._next_emit))
                self._next_emit += 1


class _Session:
    """One client connection: reads records, dispatches, writes replies."""

    def __init__(self, service: Service, msock: MessageSocket, peer: str):
        self.service = service
        self.msock = msock
        self.peer = peer
        self._streams: dict[tuple[str, str], _StreamContext] = {}
        self._closed = False

    def send(self, reply: FaroReply) -> None:
        if self._closed:
            return
        try:
            self.msock.send_reply(reply)
        except TransportError:
            self._closed = True

    def run(self):
        while not self._closed:
            try:
                msg = self.msock.recv()
            except BodyParseError as exc:
                # framing survived; answer in-stream and keep the session
                self.send(
                    error_reply(_nil_record(), "MALFORMED_RECORD", str(exc))
                )
                continue
            except (FaroError, OSError):
                break
            if msg is None:
                break
            if not isinstance(msg, FaroRecord):
                continue
            method = msg.options.get(RPC_OPTION, METHOD_CALL)
            if method == METHOD_STREAM_CALL:
                self._stream_for(msg).submit(msg)
            else:
                self.service._pool.submit(self._run_unary, method, msg)
        self.close()

    def _stream_for(self, record: FaroRecord) -> _StreamContext:
        mode = record.options.get("faro.stream_mode", "fifo").lower()
        key = (record.target, mode)
        ctx = self._streams.get(key)
        if ctx is None:
            fifo = mode != "unordered"
            service = self.service
            svc, _, name = record.target.partition("/")
            if not name:
                svc, name = service.name, svc
            instance = service.pipeline(name) if svc in (service.name, "self", "local") else None
            if instance is not None:
                from .pipeline import PipelineMode

                fifo = instance.spec.mode is PipelineMode.FIFO
            ctx = _StreamContext(self, record.target, fifo)
            self._streams[key] = ctx
        return ctx

    def _run_unary(self, method: str, record: FaroRecord):
        self.send(self.service.handle_method(method, record))

    def close(self):
        self._closed = True
        self.msock.close()


def _nil_record() -> FaroRecord:
    return FaroRecord(
        record_id=uuid.UUID(int=0),
        sequence_no=0,
        source_id="",
        timestamp_us=0,
        target="",
        payload=EMPTY,
        options={},
    )


def start_service(
    config: ServiceConfig, registry: Optional[WorkerRegistry] = None
) -> Service:
    """Bind, start serving, load galleries, begin announcing if configured."""
    return Service(config, registry=registry)
