"""DAG pipelines of workers with ordered or unordered streaming execution.

A PipelineSpec declares named nodes (each bound to a local or remote worker
type) and directed edges. validate_spec reports every structural problem it
can find; instantiate builds the runnable form. A PipelineInstance itself
satisfies the worker contract (info/process), which is what makes pipelines
nestable as nodes of other pipelines.

Execution model: every node owns a bounded input queue and a small thread
pool; records are admitted under a max_inflight bound (default: the DAG's
parallel width) and flow along edges as stages finish. A node with several
in-edges fires once all its parents have produced output for a record, and
receives those outputs as one bundled payload in edge-declaration order.
The first stage error aborts that record with code "STAGE:<node>:<code>";
other records continue. FIFO ordering is achieved by reordering completed
replies at the collection point, never by serializing execution.

Inter-stage records carry the upstream output as payload; when the original
input was a frame, a reference to it travels in the "origin_frame" option so
detector outputs and the pixels they refer to arrive together at extractors.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Iterator, Optional

from .errors import (
    FaroError,
    UnknownWorkerType,
    UnresolvedService,
    ValidationFailed,
)
from .records import (
    EMPTY,
    FaroRecord,
    FaroReply,
    Frame,
    Payload,
    ReplyStatus,
    error_reply,
)
from .wire import bundle_payloads
from .workers import (
    MicroserviceKind,
    Worker,
    WorkerInfo,
    WorkerRegistry,
    attach_origin_frame,
)

log = logging.getLogger("faro2.pipeline")

LOCAL_SERVICE = "local"
DEFAULT_QUEUE_DEPTH = 32


class PipelineMode(Enum):
    FIFO = "fifo"
    UNORDERED = "unordered"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    service: str  # "local" or a peer service name
    worker: str
    options: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    mode: PipelineMode
    nodes: tuple[NodeSpec, ...]
    edges: tuple[tuple[str, str], ...]
    max_inflight: Optional[int] = None

    @classmethod
    def from_json(cls, doc: dict | str | bytes) -> "PipelineSpec":
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        nodes = tuple(
            NodeSpec(
                name=n["name"],
                service=n.get("service", LOCAL_SERVICE),
                worker=n["worker"],
                options=dict(n.get("options", {})),
            )
            for n in doc.get("nodes", [])
        )
        edges = tuple((a, b) for a, b in doc.get("edges", []))
        return cls(
            name=doc["name"],
            mode=PipelineMode(doc.get("mode", "fifo").lower()),
            nodes=nodes,
            edges=edges,
            max_inflight=doc.get("max_inflight"),
        )

    def to_json(self) -> dict:
        doc = {
            "name": self.name,
            "mode": self.mode.value,
            "nodes": [
                {"name": n.name, "service": n.service, "worker": n.worker,
                 "options": dict(n.options)}
                for n in self.nodes
            ],
            "edges": [[a, b] for a, b in self.edges],
        }
        if self.max_inflight is not None:
            doc["max_inflight"] = self.max_inflight
        return doc

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def sources(self) -> list[str]:
        targets = {b for _, b in self.edges}
        return [n.name for n in self.nodes if n.name not in targets]

    def sinks(self) -> list[str]:
        origins = {a for a, _ in self.edges}
        return [n.name for n in self.nodes if n.name not in origins]


# -- validation -----------------------------------------------------------------

# what each microservice kind consumes and produces; GENERIC matches anything
_KIND_OUT = {
    MicroserviceKind.DETECT: "detections",
    MicroserviceKind.EXTRACT: "templates",
    MicroserviceKind.SCORE: "scores",
    MicroserviceKind.TRANSFORM: "frame",
    MicroserviceKind.ENROLL: "generic",
    MicroserviceKind.SEARCH: "scores",
}
_KIND_IN = {
    MicroserviceKind.DETECT: {"frame"},
    MicroserviceKind.EXTRACT: {"detections"},
    MicroserviceKind.SCORE: {"templates"},
    MicroserviceKind.TRANSFORM: {"frame"},
    MicroserviceKind.ENROLL: {"templates"},
    MicroserviceKind.SEARCH: {"templates"},
}


def kinds_compatible(upstream: MicroserviceKind, downstream: MicroserviceKind) -> bool:
    if MicroserviceKind.GENERIC in (upstream, downstream):
        return True
    return _KIND_OUT[upstream] in _KIND_IN[downstream]


@dataclass(frozen=True)
class ValidationIssue:
    kind: str
    detail: str
    path: tuple[str, ...] = ()

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "detail": self.detail}
        if self.path:
            doc["path"] = list(self.path)
        return doc


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> set[str]:
        return {i.kind for i in self.issues}

    def to_json(self) -> dict:
        return {"ok": self.ok, "issues": [i.to_json() for i in self.issues]}

    def __str__(self) -> str:
        if self.ok:
            return "spec ok"
        return "; ".join(f"{i.kind}: {i.detail}" for i in self.issues)


def validate_spec(
    spec: PipelineSpec,
    registry: Optional[WorkerRegistry] = None,
    local_pipelines: Optional[dict] = None,
) -> ValidationReport:
    """Structural validation; lists every violation found, never raises.

    Kind compatibility between adjacent nodes is checked where worker kinds
    are resolvable (local workers in the registry, local nested pipelines);
    remote nodes are checked at instantiation when their info is fetched.
    """
    issues: list[ValidationIssue] = []
    seen: set[str] = set()
    for node in spec.nodes:
        if node.name in seen:
            issues.append(ValidationIssue("duplicate-node", f"node {node.name!r} declared twice"))
        seen.add(node.name)
    names = {n.name for n in spec.nodes}

    edge_seen = set()
    adj: dict[str, list[str]] = {name: [] for name in names}
    indeg = {name: 0 for name in names}
    for a, b in spec.edges:
        dangling = [x for x in (a, b) if x not in names]
        if dangling:
            issues.append(
                ValidationIssue("dangling-edge", f"edge {a!r}->{b!r} references unknown {dangling}")
            )
            continue
        if (a, b) in edge_seen:
            issues.append(ValidationIssue("duplicate-edge", f"edge {a!r}->{b!r} declared twice"))
            continue
        edge_seen.add((a, b))
        adj[a].append(b)
        indeg[b] += 1

    cycle = _find_cycle(names, adj)
    if cycle:
        issues.append(
            ValidationIssue("cycle", f"cycle through {' -> '.join(cycle)}", path=tuple(cycle))
        )

    sources = [n for n in names if indeg[n] == 0]
    sinks = [n for n in names if not adj[n]]
    if spec.nodes and not sources:
        issues.append(ValidationIssue("no-source", "every node has an in-edge"))
    if spec.nodes and not sinks:
        issues.append(ValidationIssue("no-sink", "every node has an out-edge"))
    if not spec.nodes:
        issues.append(ValidationIssue("empty", "pipeline has no nodes"))

    reachable: set[str] = set()
    frontier = list(sources)
    while frontier:
        n = frontier.pop()
        if n in reachable:
            continue
        reachable.add(n)
        frontier.extend(adj[n])
    for n in sorted(names - reachable):
        if not cycle or n not in cycle:
            issues.append(ValidationIssue("unreachable", f"node {n!r} unreachable from any source"))

    kind_of = _kind_resolver(registry, local_pipelines)
    for a, b in edge_seen:
        ka, kb = kind_of(spec.node(a)), kind_of(spec.node(b))
        if ka is not None and kb is not None and not kinds_compatible(ka, kb):
            issues.append(
                ValidationIssue(
                    "kind-mismatch",
                    f"edge {a!r}->{b!r}: {ka.value} output does not feed {kb.value} input",
                )
            )
    return ValidationReport(issues=tuple(issues))


def _kind_resolver(registry, local_pipelines) -> Callable[[NodeSpec], Optional[MicroserviceKind]]:
    def kind_of(node: NodeSpec) -> Optional[MicroserviceKind]:
        if node.service != LOCAL_SERVICE:
            return None
        if registry is not None and node.worker in registry:
            return registry.kind_of(node.worker)
        if local_pipelines is not None and node.worker in local_pipelines:
            return MicroserviceKind.GENERIC
        return None

    return kind_of


def _find_cycle(names: set[str], adj: dict[str, list[str]]) -> Optional[list[str]]:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in names}
    stack: list[str] = []

    def visit(start: str) -> Optional[list[str]]:
        todo: list[tuple[str, Iterator[str]]] = [(start, iter(adj[start]))]
        color[start] = GRAY
        stack.append(start)
        while todo:
            node, children = todo[-1]
            advanced = False
            for child in children:
                if color[child] == GRAY:
                    i = stack.index(child)
                    return stack[i:] + [child]
                if color[child] == WHITE:
                    color[child] = GRAY
                    stack.append(child)
                    todo.append((child, iter(adj[child])))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
                todo.pop()
        return None

    for n in sorted(names):
        if color[n] == WHITE:
            found = visit(n)
            if found:
                return found
    return None


def _layer_width(spec: PipelineSpec) -> int:
    """Parallel width of the DAG by longest-path layering."""
    names = [n.name for n in spec.nodes]
    parents: dict[str, list[str]] = {n: [] for n in names}
    for a, b in spec.edges:
        parents[b].append(a)
    level: dict[str, int] = {}

    def depth(n: str, seen: frozenset = frozenset()) -> int:
        if n in level:
            return level[n]
        if n in seen:
            return 0  # cycle guard; validation rejects these anyway
        d = 0 if not parents[n] else 1 + max(depth(p, seen | {n}) for p in parents[n])
        level[n] = d
        return d

    counts: dict[int, int] = {}
    for n in names:
        counts[depth(n)] = counts.get(depth(n), 0) + 1
    return max(counts.values(), default=1)


# -- instantiation ----------------------------------------------------------------


class RemoteWorkerProxy:
    """Stage handle for a worker or pipeline hosted on a peer service.

    process() forwards the record over the peer client with a fresh id
    (several in-flight stages may share one logical record id) and restores
    the original id on the reply.
    """

    def __init__(self, service_name: str, worker_type: str, peer_client):
        self.service_name = service_name
        self.worker_type = worker_type
        self._client = peer_client
        self._info: Optional[WorkerInfo] = None

    def info(self) -> WorkerInfo:
        if self._info is None:
            self._info = self._client.worker_info(self.worker_type)
        return self._info

    def process(self, record: FaroRecord) -> FaroReply:
        wire_record = replace(
            record,
            record_id=uuid.uuid4(),
            target=f"{self.service_name}/{self.worker_type}",
        )
        try:
            reply = self._client.call_record(wire_record)
        except FaroError as exc:
            reply = error_reply(wire_record, type(exc).__name__.upper(), str(exc))
        return replace(reply, record_id=record.record_id)

    def close(self):
        pass


class PipelineInstance:
    """Runnable pipeline; satisfies the worker contract and is nestable."""

    def __init__(self, spec: PipelineSpec, workers: dict[str, object]):
        self.spec = spec
        self.workers = workers
        self.in_edges: dict[str, list[str]] = {n.name: [] for n in spec.nodes}
        self.out_edges: dict[str, list[str]] = {n.name: [] for n in spec.nodes}
        for a, b in spec.edges:
            self.out_edges[a].append(b)
            self.in_edges[b].append(a)
        self.source_names = spec.sources()
        self.sink_names = spec.sinks()
        self.max_inflight = spec.max_inflight or _layer_width(spec)
        self._executor: Optional[_Executor] = None
        self._exec_lock = threading.Lock()
        self._active = 0
        self._active_lock = threading.Lock()
        self._idle = threading.Condition(self._active_lock)
        self._closed = False

    # -- worker contract ---------------------------------------------------

    @property
    def worker_type(self) -> str:
        return self.spec.name

    def info(self) -> WorkerInfo:
        import os

        reentrant = all(
            getattr(w, "reentrant", True) or isinstance(w, PipelineInstance)
            for w in self.workers.values()
        )
        return WorkerInfo(
            worker_type=self.spec.name,
            microservice_kind=MicroserviceKind.GENERIC,
            resources={"cpu_threads": str(os.cpu_count() or 1),
                       "nodes": str(len(self.spec.nodes))},
            options_schema=(),
            reentrant=reentrant,
        )

    def process(self, record: FaroRecord) -> FaroReply:
        return self.run(record)

    # -- execution ---------------------------------------------------------

    def run(self, record: FaroRecord) -> FaroReply:
        """Process one record through the DAG and wait for its reply."""
        done = threading.Event()
        box: list[FaroReply] = []

        def cb(reply: FaroReply):
            box.append(reply)
            done.set()

        self.submit(record, cb)
        done.wait()
        return box[0]

    def submit(self, record: FaroRecord, callback: Callable[[FaroReply], None]) -> None:
        """Asynchronously process a record; blocks while the pipeline is full."""
        if self._closed:
            raise FaroError(f"pipeline {self.spec.name!r} is closed")
        with self._active_lock:
            self._active += 1
        self._ensure_executor().submit(record, self._wrap_callback(callback))

    def _wrap_callback(self, callback):
        def fire(reply: FaroReply):
            try:
                callback(reply)
            finally:
                with self._active_lock:
                    self._active -= 1
                    if self._active == 0:
                        self._idle.notify_all()

        return fire

    @property
    def active_count(self) -> int:
        with self._active_lock:
            return self._active

    def drain(self, timeout: Optional[float] = None) -> bool:
        """Wait until no submitted record is still in flight."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._active_lock:
            while self._active > 0:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._idle.wait(remaining)
        return True

    def close(self, timeout: float = 10.0) -> None:
        """Stop accepting records, drain in-flight work, stop node threads."""
        self._closed = True
        self.drain(timeout)
        with self._exec_lock:
            if self._executor is not None:
                self._executor.shutdown()
                self._executor = None
        for worker in self.workers.values():
            close = getattr(worker, "close", None)
            if callable(close):
                close()

    def _ensure_executor(self) -> "_Executor":
        with self._exec_lock:
            if self._executor is None:
                self._executor = _Executor(self)
            return self._executor


class _Ticket:
    __slots__ = (
        "record", "callback", "lock", "timings", "sink_outputs", "failed", "done", "index",
    )

    def __init__(self, record: FaroRecord, callback):
        self.record = record
        self.callback = callback
        self.lock = threading.Lock()
        self.timings: list[tuple[str, int]] = []
        self.sink_outputs: dict[str, Payload] = {}
        self.failed: Optional[FaroReply] = None
        self.done = False
        self.index = -1


class _NodeRunner:
    def __init__(self, name: str, worker, pool_size: int, queue_depth: int):
        self.name = name
        self.worker = worker
        self.queue: "queue.Queue" = queue.Queue(maxsize=queue_depth)
        self.join_lock = threading.Lock()
        self.joins: dict[int, dict[str, Payload]] = {}
        self.threads = [
            threading.Thread(target=self._loop, name=f"faro2-node-{name}-{i}", daemon=True)
            for i in range(pool_size)
        ]

    def start(self, executor: "_Executor"):
        self._executor = executor
        for t in self.threads:
            t.start()

    def _loop(self):
        while True:
            item = self.queue.get()
            if item is None:
                self.queue.put(None)  # let sibling pool threads exit too
                return
            ticket, payload = item
            self._executor.run_stage(self, ticket, payload)


class _Executor:
    """Per-node queues and pools wired along the spec's edges."""

    def __init__(self, instance: PipelineInstance):
        self.instance = instance
        self.admission = threading.Semaphore(instance.max_inflight)
        self.nodes: dict[str, _NodeRunner] = {}
        self._tickets: dict[int, _Ticket] = {}
        self._ticket_lock = threading.Lock()
        self._next_index = 0
        for node_spec in instance.spec.nodes:
            worker = instance.workers[node_spec.name]
            reentrant = getattr(worker, "reentrant", True) or isinstance(
                worker, PipelineInstance
            )
            pool = instance.max_inflight if reentrant else 1
            self.nodes[node_spec.name] = _NodeRunner(
                node_spec.name, worker, pool, DEFAULT_QUEUE_DEPTH
            )
        for runner in self.nodes.values():
            runner.start(self)

    def submit(self, record: FaroRecord, callback) -> None:
        self.admission.acquire()
        if isinstance(record.payload, Frame):
            record = attach_origin_frame(record, record.payload)
        ticket = _Ticket(record, callback)
        with self._ticket_lock:
            index = self._next_index
            self._next_index += 1
            self._tickets[index] = ticket
        ticket.index = index
        for name in self.instance.source_names:
            self._deliver(name, index, ticket, parent=None, payload=record.payload)

    def _deliver(self, node_name: str, index: int, ticket: _Ticket, parent, payload):
        runner = self.nodes[node_name]
        parents = self.instance.in_edges[node_name]
        if len(parents) <= 1:
            runner.queue.put((ticket, payload))
            return
        with runner.join_lock:
            if ticket.failed is not None:
                runner.joins.pop(index, None)
                return
            parts = runner.joins.setdefault(index, {})
            parts[parent] = payload
            if len(parts) < len(parents):
                return
            runner.joins.pop(index)
        bundle = bundle_payloads([(p, parts[p]) for p in parents])
        runner.queue.put((ticket, bundle))

    def run_stage(self, runner: _NodeRunner, ticket: _Ticket, payload: Payload):
        if ticket.failed is not None:
            return
        stage_record = replace(ticket.record, payload=payload)
        reply = runner.worker.process(stage_record)
        with ticket.lock:
            ticket.timings.extend(reply.stage_timings)
        if reply.status is not ReplyStatus.OK:
            code = reply.error.code if reply.error else "UNKNOWN"
            message = reply.error.message if reply.error else ""
            failure = error_reply(
                ticket.record, f"STAGE:{runner.name}:{code}", message
            )
            self._complete(ticket, failure)
            return
        children = self.instance.out_edges[runner.name]
        if not children:
            with ticket.lock:
                ticket.sink_outputs[runner.name] = reply.payload
                ready = len(ticket.sink_outputs) == len(self.instance.sink_names)
            if ready:
                self._complete(ticket, None)
            return
        for child in children:
            self._deliver(child, ticket.index, ticket, parent=runner.name, payload=reply.payload)

    def _complete(self, ticket: _Ticket, failure: Optional[FaroReply]):
        with ticket.lock:
            if ticket.done:
                return
            ticket.done = True
            if failure is not None:
                ticket.failed = failure
            timings = tuple(ticket.timings)
        if failure is not None:
            final = replace(failure, stage_timings=timings)
        else:
            sinks = self.instance.sink_names
            if len(sinks) == 1:
                payload = ticket.sink_outputs[sinks[0]]
            else:
                payload = bundle_payloads([(s, ticket.sink_outputs[s]) for s in sinks])
            final = FaroReply(
                record_id=ticket.record.record_id,
                status=ReplyStatus.OK,
                stage_timings=timings,
                payload=payload,
            )
        with self._ticket_lock:
            self._tickets.pop(ticket.index, None)
        if failure is not None:
            for runner in self.nodes.values():
                if self.instance.in_edges[runner.name]:
                    with runner.join_lock:
                        runner.joins.pop(ticket.index, None)
        try:
            ticket.callback(final)
        finally:
            self.admission.release()

    def shutdown(self):
        for runner in self.nodes.values():
            runner.queue.put(None)
        for runner in self.nodes.values():
            for t in runner.threads:
                t.join(timeout=5.0)


def instantiate(
    spec: PipelineSpec,
    registry: WorkerRegistry,
    peers=None,
    local_pipelines: Optional[dict[str, PipelineInstance]] = None,
) -> PipelineInstance:
    """Build a runnable pipeline: construct local workers, resolve remote refs.

    peers, when given, must expose proxy(service_name, worker_type) returning
    a worker-contract object, raising UnresolvedService for unknown peers.
    """
    report = validate_spec(spec, registry=registry, local_pipelines=local_pipelines)
    if not report.ok:
        raise ValidationFailed(report)
    workers: dict[str, object] = {}
    for node in spec.nodes:
        if node.service == LOCAL_SERVICE:
            if node.worker in registry:
                workers[node.name] = registry.construct(node.worker, node.options)
            elif local_pipelines and node.worker in local_pipelines:
                workers[node.name] = local_pipelines[node.worker]
            else:
                raise UnknownWorkerType(
                    f"node {node.name!r}: no local worker or pipeline {node.worker!r}"
                )
        else:
            if peers is None:
                raise UnresolvedService(node.service)
            workers[node.name] = peers.proxy(node.service, node.worker)
    return PipelineInstance(spec, workers)


def run_stream(
    instance: PipelineInstance,
    records: Iterable[FaroRecord],
    mode: Optional[PipelineMode] = None,
) -> Iterator[FaroReply]:
    """Stream records through a pipeline.

    FIFO mode emits replies in input order via a reorder buffer; UNORDERED
    emits them as records complete. Per-record errors appear in-stream as
    ERROR replies and the stream continues.
    """
    mode = mode or instance.spec.mode
    out: "queue.Queue" = queue.Queue()
    total = [None]
    stop = threading.Event()

    def feeder():
        count = 0
        try:
            for record in records:
                if stop.is_set():
                    break
                index = count
                count += 1
                instance.submit(record, lambda reply, i=index: out.put((i, reply)))
        finally:
            total[0] = count
            out.put(("fed", None))

    thread = threading.Thread(target=feeder, name="faro2-stream-feeder", daemon=True)
    thread.start()

    emitted = 0
    buffer: dict[int, FaroReply] = {}
    next_emit = 0
    try:
        while True:
            if total[0] is not None and emitted >= total[0]:
                return
            index, reply = out.get()
            if index == "fed":
                continue
            if mode is PipelineMode.FIFO:
                buffer[index] = reply
                while next_emit in buffer:
                    yield buffer.pop(next_emit)
                    next_emit += 1
                    emitted += 1
            else:
                yield reply
                emitted += 1
    finally:
        stop.set()
