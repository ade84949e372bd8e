"""Zero-configuration service discovery over UDP multicast.

Services broadcast a small JSON datagram ("FARO-ZC1") on group
239.255.42.99 port 5354 every interval; browsers fold the packets into a
name -> announcement directory, expiring entries whose announce_time + ttl
has passed and resolving duplicate names by the latest announce_time, so a
service that moves hosts wins with its newest packet. Datagrams are capped
at 1400 bytes; oversize capability lists are truncated and flagged.

The FARO_MCAST_GROUP / FARO_MCAST_PORT environment variables override the
group and port (test isolation). Networks that block multicast can still
populate the directory through static peer entries, which never expire.
"""

from __future__ import annotations

import json
import logging
import os
import re
import socket
import struct
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .errors import NotFound, SocketUnavailable

log = logging.getLogger("faro2.discovery")

MAGIC = "FARO-ZC1"
DEFAULT_GROUP = "239.255.42.99"
DEFAULT_PORT = 5354
DEFAULT_INTERVAL = 5.0
DEFAULT_TTL = 15
MAX_DATAGRAM = 1400
PROTOCOL_VERSION = "2.0"

SERVICE_NAME_RE = re.compile(r"^[a-z0-9-]{1,63}$")


def multicast_group() -> str:
    return os.environ.get("FARO_MCAST_GROUP", DEFAULT_GROUP)


def multicast_port() -> int:
    return int(os.environ.get("FARO_MCAST_PORT", DEFAULT_PORT))


@dataclass(frozen=True)
class ServiceAnnouncement:
    service_name: str
    host: str
    port: int
    version: str
    workers: tuple[str, ...]
    pipelines: tuple[str, ...]
    ttl_seconds: int
    announce_time: float
    truncated: bool = False

    @property
    def endpoint(self) -> tuple[str, int]:
        return (self.host, self.port)

    def expired(self, now: Optional[float] = None) -> bool:
        if self.ttl_seconds <= 0:
            return False  # static entries never expire
        return self.announce_time + self.ttl_seconds < (now or time.time())

    def to_datagram(self) -> bytes:
        """Encode to JSON, truncating capability lists to fit 1400 bytes."""
        workers = list(self.workers)
        pipelines = list(self.pipelines)
        truncated = self.truncated
        while True:
            doc = {
                "magic": MAGIC,
                "service_name": self.service_name,
                "host": self.host,
                "port": self.port,
                "version": self.version,
                "workers": workers,
                "pipelines": pipelines,
                "ttl_seconds": self.ttl_seconds,
                "announce_time": self.announce_time,
            }
            if truncated:
                doc["truncated"] = True
            data = json.dumps(doc, separators=(",", ":")).encode("utf-8")
            if len(data) <= MAX_DATAGRAM:
                return data
            truncated = True
            if pipelines:
                pipelines.pop()
            elif workers:
                workers.pop()
            else:
                raise ValueError("announcement too large even when empty")

    @classmethod
    def from_datagram(cls, data: bytes) -> "ServiceAnnouncement":
        doc = json.loads(data.decode("utf-8"))
        if doc.get("magic") != MAGIC:
            raise ValueError(f"bad magic {doc.get('magic')!r}")
        name = doc["service_name"]
        if not SERVICE_NAME_RE.match(name):
            raise ValueError(f"bad service name {name!r}")
        port = int(doc["port"])
        if not (1 <= port <= 65535):
            raise ValueError(f"bad port {port}")
        return cls(
            service_name=name,
            host=str(doc["host"]),
            port=port,
            version=str(doc.get("version", "")),
            workers=tuple(str(w) for w in doc.get("workers", [])),
            pipelines=tuple(str(p) for p in doc.get("pipelines", [])),
            ttl_seconds=int(doc["ttl_seconds"]),
            announce_time=float(doc["announce_time"]),
            truncated=bool(doc.get("truncated", False)),
        )


@dataclass(frozen=True)
class DirectorySnapshot:
    services: dict[str, ServiceAnnouncement]

    def resolve(self, service_name: str) -> tuple[str, int]:
        ann = self.services.get(service_name)
        if ann is None:
            raise NotFound(f"no unexpired announcement for {service_name!r}")
        return ann.endpoint

    def names(self) -> list[str]:
        return sorted(self.services)


def resolve(directory: DirectorySnapshot, service_name: str) -> tuple[str, int]:
    """host:port of the named service; raises NotFound when absent/expired."""
    return directory.resolve(service_name)


def _open_send_socket(group: str) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
    try:
        sock.setsockopt(
            socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton("127.0.0.1")
        )
    except OSError:
        pass
    return sock


class Announcer:
    """Broadcasts a service's presence immediately and then every interval.

    capabilities_fn is polled before each packet so newly declared pipelines
    appear in the next announcement without restarts.
    """

    def __init__(
        self,
        service_name: str,
        host: str,
        port: int,
        capabilities_fn: Callable[[], tuple[list[str], list[str]]],
        interval: float = DEFAULT_INTERVAL,
        ttl_seconds: Optional[int] = None,
        version: str = PROTOCOL_VERSION,
        group: Optional[str] = None,
        mcast_port: Optional[int] = None,
    ):
        self.service_name = service_name
        self.host = host
        self.port = port
        self.capabilities_fn = capabilities_fn
        self.interval = interval
        self.ttl_seconds = ttl_seconds if ttl_seconds is not None else max(
            DEFAULT_TTL, int(3 * interval)
        )
        if self.ttl_seconds < 2 * interval:
            raise ValueError("ttl_seconds must be at least twice the announce interval")
        if not SERVICE_NAME_RE.match(service_name):
            raise ValueError(f"service name {service_name!r} fails the name grammar")
        self.version = version
        self.group = group or multicast_group()
        self.mcast_port = mcast_port if mcast_port is not None else multicast_port()
        self._stop = threading.Event()
        try:
            self._sock = _open_send_socket(self.group)
        except OSError as exc:
            raise SocketUnavailable(f"cannot open multicast sender: {exc}") from exc
        self._thread = threading.Thread(
            target=self._loop, name=f"faro2-announce-{service_name}", daemon=True
        )

    def start(self) -> "Announcer":
        self._send_once()
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.wait(self.interval):
            self._send_once()

    def _send_once(self):
        workers, pipelines = self.capabilities_fn()
        ann = ServiceAnnouncement(
            service_name=self.service_name,
            host=self.host,
            port=self.port,
            version=self.version,
            workers=tuple(workers),
            pipelines=tuple(pipelines),
            ttl_seconds=self.ttl_seconds,
            announce_time=time.time(),
        )
        try:
            self._sock.sendto(ann.to_datagram(), (self.group, self.mcast_port))
        except OSError as exc:
            log.warning("announcement send failed: %s", exc)

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=2.0)
        self._sock.close()


class Browser:
    """Listens for announcements and serves lock-free directory snapshots."""

    def __init__(
        self,
        group: Optional[str] = None,
        mcast_port: Optional[int] = None,
        static_peers: Optional[list[dict]] = None,
    ):
        self.group = group or multicast_group()
        self.mcast_port = mcast_port if mcast_port is not None else multicast_port()
        self._lock = threading.Lock()
        self._directory: dict[str, ServiceAnnouncement] = {}
        self._static: dict[str, ServiceAnnouncement] = {}
        for peer in static_peers or []:
            ann = ServiceAnnouncement(
                service_name=peer["service_name"],
                host=peer["host"],
                port=int(peer["port"]),
                version="static",
                workers=(),
                pipelines=(),
                ttl_seconds=0,
                announce_time=0.0,
            )
            self._static[ann.service_name] = ann
        self._stop = threading.Event()
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "Browser":
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                # binding to the group address filters foreign groups on Linux
                sock.bind((self.group, self.mcast_port))
            except OSError:
                sock.bind(("", self.mcast_port))
            mreq = struct.pack(
                "4s4s", socket.inet_aton(self.group), socket.inet_aton("127.0.0.1")
            )
            try:
                sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
            except OSError:
                mreq = struct.pack("4sl", socket.inet_aton(self.group), socket.INADDR_ANY)
                sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
            sock.settimeout(0.2)
        except OSError as exc:
            raise SocketUnavailable(f"cannot open multicast listener: {exc}") from exc
        self._sock = sock
        self._thread = threading.Thread(
            target=self._loop, name="faro2-browse", daemon=True
        )
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            try:
                data, _addr = self._sock.recvfrom(65536)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                ann = ServiceAnnouncement.from_datagram(data)
            except (ValueError, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
                log.debug("dropping malformed announcement: %s", exc)
                continue
            with self._lock:
                current = self._directory.get(ann.service_name)
                if current is None or ann.announce_time >= current.announce_time:
                    self._directory[ann.service_name] = ann

    def snapshot(self) -> DirectorySnapshot:
        """Current directory: static peers overlaid with unexpired announcements."""
        now = time.time()
        with self._lock:
            live = {
                name: ann
                for name, ann in self._directory.items()
                if not ann.expired(now)
            }
        merged = dict(self._static)
        merged.update(live)
        return DirectorySnapshot(services=merged)

    def wait_for(self, service_name: str, timeout: float = 10.0) -> ServiceAnnouncement:
        """Block until the named service appears (or raise NotFound)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            snap = self.snapshot()
            if service_name in snap.services:
                return snap.services[service_name]
            time.sleep(0.05)
        raise NotFound(f"service {service_name!r} not announced within {timeout}s")

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        if self._sock is not None:
            self._sock.close()


def browse(
    duration: float,
    group: Optional[str] = None,
    mcast_port: Optional[int] = None,
    static_peers: Optional[list[dict]] = None,
) -> DirectorySnapshot:
    """Listen for a fixed window and return the resulting snapshot."""
    browser = Browser(group=group, mcast_port=mcast_port, static_peers=static_peers).start()
    try:
        time.sleep(duration)
        return browser.snapshot()
    finally:
        browser.stop()
