"""Socket framing for the record/reply RPC transport.

The transport is a plain bidirectional byte stream (TCP, optionally TLS
wrapped) carrying canonical wire messages back to back; messages are
self-delimiting, so framing is just reading the fixed header and then the
declared body. The RPC method name travels in the record option "faro.rpc"
and replies correlate by record id, which lets one connection multiplex
unary calls and streams.

Method names: Status, Call, StreamCall, DeclarePipeline, ListCapabilities,
GalleryEnroll, GallerySearch, GalleryDelete, GalleryList.
"""

from __future__ import annotations

import socket
import struct
import threading
from typing import Optional, Union

from .errors import MalformedMessage, TransportError
from .records import FaroRecord, FaroReply
from .wire import KIND_RECORD, KIND_REPLY, MAGIC, read_message, serialize_record, serialize_reply

HEADER_LEN = 9  # magic(4) + kind(1) + body length(4)
MAX_MESSAGE = 64 * 1024 * 1024

RPC_OPTION = "faro.rpc"
STREAM_OPTION = "faro.stream"
HOPS_OPTION = "faro.hops"

METHOD_STATUS = "Status"
METHOD_CALL = "Call"
METHOD_STREAM_CALL = "StreamCall"
METHOD_DECLARE_PIPELINE = "DeclarePipeline"
METHOD_LIST_CAPABILITIES = "ListCapabilities"
METHOD_GALLERY_ENROLL = "GalleryEnroll"
METHOD_GALLERY_SEARCH = "GallerySearch"
METHOD_GALLERY_DELETE = "GalleryDelete"
METHOD_GALLERY_LIST = "GalleryList"

KNOWN_METHODS = {
    METHOD_STATUS,
    METHOD_CALL,
    METHOD_STREAM_CALL,
    METHOD_DECLARE_PIPELINE,
    METHOD_LIST_CAPABILITIES,
    METHOD_GALLERY_ENROLL,
    METHOD_GALLERY_SEARCH,
    METHOD_GALLERY_DELETE,
    METHOD_GALLERY_LIST,
}


class BodyParseError(MalformedMessage):
    """Frame header was sound but the body failed to parse.

    The byte stream is still aligned on message boundaries, so a session can
    answer with an ERROR reply and keep going.
    """


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> Optional[Union[FaroRecord, FaroReply]]:
    """Read one message; returns None on clean EOF at a message boundary."""
    try:
        first = sock.recv(1)
    except (ConnectionError, OSError):
        return None
    if not first:
        return None
    header = first + recv_exact(sock, HEADER_LEN - 1)
    if header[:4] != MAGIC:
        raise MalformedMessage(f"bad frame magic {header[:4]!r}")
    kind = header[4]
    if kind not in (KIND_RECORD, KIND_REPLY):
        raise MalformedMessage(f"unknown message kind {kind}")
    (body_len,) = struct.unpack("<I", header[5:9])
    if body_len > MAX_MESSAGE:
        raise MalformedMessage(f"message of {body_len} bytes exceeds limit")
    body = recv_exact(sock, body_len)
    try:
        msg, _ = read_message(header + body)
    except MalformedMessage as exc:
        raise BodyParseError(str(exc)) from exc
    return msg


class MessageSocket:
    """A socket plus a write lock so concurrent senders do not interleave."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._write_lock = threading.Lock()

    def send_record(self, record: FaroRecord) -> None:
        self._send(serialize_record(record))

    def send_reply(self, reply: FaroReply) -> None:
        self._send(serialize_reply(reply))

    def _send(self, data: bytes) -> None:
        with self._write_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def recv(self) -> Optional[Union[FaroRecord, FaroReply]]:
        return recv_message(self.sock)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
