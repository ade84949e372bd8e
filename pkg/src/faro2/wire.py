"""Canonical binary serialization for records and replies.

Every message opens with the 4-byte magic "FAR2", a one-byte message kind,
and a little-endian uint32 body length, which makes concatenated messages
self-delimiting. The body is a sequence of fields, each encoded as one tag
byte, a uint32 little-endian length, and the value bytes. Fields are always
written, in fixed tag order, and option keys are written sorted, so equal
records produce byte-identical encodings.

The format is deliberately schema-compiler free: it can be tested
bit-exactly and carried over any byte transport. deserialize_* are strict
and raise MalformedMessage on truncation, unknown tags, or length
inconsistencies.
"""

from __future__ import annotations

import struct
import uuid
from typing import Iterator, Union

from .errors import InvariantViolation, MalformedMessage
from .records import (
    Detection,
    DetectionList,
    EMPTY,
    Empty,
    EncryptedTemplate,
    EncryptedTemplateList,
    FaroRecord,
    FaroReply,
    Frame,
    Generic,
    Payload,
    PheCiphertext,
    PixelFormat,
    ReplyError,
    ReplyStatus,
    ScoreMatrix,
    Template,
    TemplateList,
)

MAGIC = b"FAR2"
KIND_RECORD = 0x01
KIND_REPLY = 0x02

# record body field tags
_R_ID = 0x01
_R_SEQ = 0x02
_R_SOURCE = 0x03
_R_TS = 0x04
_R_TARGET = 0x05
_R_PAYLOAD = 0x06
_R_OPTIONS = 0x07
_RECORD_TAGS = (_R_ID, _R_SEQ, _R_SOURCE, _R_TS, _R_TARGET, _R_PAYLOAD, _R_OPTIONS)

# reply body field tags
_P_ID = 0x01
_P_STATUS = 0x02
_P_TIMINGS = 0x03
_P_PAYLOAD = 0x04
_P_ERROR = 0x05
_REPLY_TAGS = (_P_ID, _P_STATUS, _P_TIMINGS, _P_PAYLOAD, _P_ERROR)

# payload variant tags
PT_EMPTY = 0x00
PT_FRAME = 0x01
PT_DETECTIONS = 0x02
PT_TEMPLATES = 0x03
PT_ENC_TEMPLATES = 0x04
PT_SCORES = 0x05
PT_GENERIC = 0x06

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_I32 = struct.Struct("<i")
_F64 = struct.Struct("<d")


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int):
        self.parts.append(bytes((v,)))

    def u32(self, v: int):
        self.parts.append(_U32.pack(v))

    def u64(self, v: int):
        self.parts.append(_U64.pack(v))

    def i64(self, v: int):
        self.parts.append(_I64.pack(v))

    def i32(self, v: int):
        self.parts.append(_I32.pack(v))

    def f64(self, v: float):
        self.parts.append(_F64.pack(v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def lp_bytes(self, b: bytes):
        self.u32(len(b))
        self.raw(b)

    def string(self, s: str):
        self.lp_bytes(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def _take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MalformedMessage(
                f"truncated message: wanted {n} bytes at offset {self.pos}"
            )
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def i32(self) -> int:
        return _I32.unpack(self._take(4))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def lp_bytes(self) -> bytes:
        return self._take(self.u32())

    def string(self) -> str:
        try:
            return self.lp_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessage(f"invalid utf-8 string: {exc}") from exc

    @property
    def exhausted(self) -> bool:
        return self.pos >= self.end


def _encode_payload(payload: Payload) -> bytes:
    w = _Writer()
    if isinstance(payload, Empty):
        w.u8(PT_EMPTY)
    elif isinstance(payload, Frame):
        w.u8(PT_FRAME)
        w.u32(payload.width)
        w.u32(payload.height)
        w.u8(payload.pixel_format.value)
        w.lp_bytes(payload.data)
    elif isinstance(payload, DetectionList):
        w.u8(PT_DETECTIONS)
        w.u32(len(payload.detections))
        for d in payload.detections:
            w.i32(d.x)
            w.i32(d.y)
            w.u32(d.w)
            w.u32(d.h)
            w.f64(d.score)
            w.string(d.label)
            w.u64(d.detection_id)
    elif isinstance(payload, TemplateList):
        w.u8(PT_TEMPLATES)
        w.u32(len(payload.templates))
        for t in payload.templates:
            _encode_template(w, t)
    elif isinstance(payload, EncryptedTemplateList):
        w.u8(PT_ENC_TEMPLATES)
        w.u32(len(payload.templates))
        for t in payload.templates:
            _encode_enc_template(w, t)
    elif isinstance(payload, ScoreMatrix):
        w.u8(PT_SCORES)
        w.u32(len(payload.rows))
        w.u32(len(payload.cols))
        for r in payload.rows:
            w.string(r)
        for c in payload.cols:
            w.string(c)
        for s in payload.scores:
            w.f64(s)
    elif isinstance(payload, Generic):
        w.u8(PT_GENERIC)
        w.string(payload.content_type)
        w.lp_bytes(payload.data)
    else:
        raise InvariantViolation(f"unserializable payload type {type(payload)!r}")
    return w.getvalue()


def _encode_template(w: _Writer, t: Template):
    w.u32(len(t.vector))
    for v in t.vector:
        w.f64(v)
    w.string(t.modality)
    _encode_opt_string(w, t.subject_id)


def _encode_enc_template(w: _Writer, t: EncryptedTemplate):
    w.lp_bytes(t.key_id)
    w.u64(t.scale)
    w.string(t.modality)
    _encode_opt_string(w, t.subject_id)
    w.u32(len(t.ciphertexts))
    for ct in t.ciphertexts:
        # big-endian magnitude, minimal length
        nbytes = (ct.value.bit_length() + 7) // 8
        w.lp_bytes(ct.value.to_bytes(nbytes, "big"))


def _encode_opt_string(w: _Writer, s: str | None):
    if s is None:
        w.u8(0)
    else:
        w.u8(1)
        w.string(s)


def _decode_opt_string(r: _Reader) -> str | None:
    flag = r.u8()
    if flag == 0:
        return None
    if flag == 1:
        return r.string()
    raise MalformedMessage(f"bad optional-string flag {flag}")


def _decode_payload(data: bytes) -> Payload:
    r = _Reader(data)
    tag = r.u8()
    if tag == PT_EMPTY:
        payload: Payload = EMPTY
    elif tag == PT_FRAME:
        width = r.u32()
        height = r.u32()
        fmt_v = r.u8()
        try:
            fmt = PixelFormat(fmt_v)
        except ValueError:
            raise MalformedMessage(f"unknown pixel format {fmt_v}") from None
        frame_data = r.lp_bytes()
        try:
            payload = Frame(width=width, height=height, pixel_format=fmt, data=frame_data)
        except InvariantViolation as exc:
            raise MalformedMessage(str(exc)) from exc
    elif tag == PT_DETECTIONS:
        count = r.u32()
        dets = []
        for _ in range(count):
            x, y = r.i32(), r.i32()
            w_, h_ = r.u32(), r.u32()
            score = r.f64()
            label = r.string()
            det_id = r.u64()
            try:
                dets.append(
                    Detection(x=x, y=y, w=w_, h=h_, score=score, label=label, detection_id=det_id)
                )
            except InvariantViolation as exc:
                raise MalformedMessage(str(exc)) from exc
        payload = DetectionList(detections=tuple(dets))
    elif tag == PT_TEMPLATES:
        count = r.u32()
        payload = TemplateList(templates=tuple(_decode_template(r) for _ in range(count)))
    elif tag == PT_ENC_TEMPLATES:
        count = r.u32()
        payload = EncryptedTemplateList(
            templates=tuple(_decode_enc_template(r) for _ in range(count))
        )
    elif tag == PT_SCORES:
        nrows, ncols = r.u32(), r.u32()
        rows = tuple(r.string() for _ in range(nrows))
        cols = tuple(r.string() for _ in range(ncols))
        scores = tuple(r.f64() for _ in range(nrows * ncols))
        payload = ScoreMatrix(rows=rows, cols=cols, scores=scores)
    elif tag == PT_GENERIC:
        payload = Generic(content_type=r.string(), data=r.lp_bytes())
    else:
        raise MalformedMessage(f"unknown payload tag {tag}")
    if not r.exhausted:
        raise MalformedMessage(
            f"{r.end - r.pos} trailing bytes after payload variant {tag}"
        )
    return payload


def _decode_template(r: _Reader) -> Template:
    dims = r.u32()
    vector = tuple(r.f64() for _ in range(dims))
    modality = r.string()
    subject = _decode_opt_string(r)
    try:
        return Template(vector=vector, modality=modality, subject_id=subject)
    except InvariantViolation as exc:
        raise MalformedMessage(str(exc)) from exc


def _decode_enc_template(r: _Reader) -> EncryptedTemplate:
    key_id = r.lp_bytes()
    scale = r.u64()
    modality = r.string()
    subject = _decode_opt_string(r)
    dims = r.u32()
    cts = tuple(
        PheCiphertext(value=int.from_bytes(r.lp_bytes(), "big"), key_id=key_id, scale=scale)
        for _ in range(dims)
    )
    try:
        return EncryptedTemplate(
            ciphertexts=cts, key_id=key_id, scale=scale, modality=modality, subject_id=subject
        )
    except InvariantViolation as exc:
        raise MalformedMessage(str(exc)) from exc


def _encode_options(options: dict[str, str]) -> bytes:
    w = _Writer()
    w.u32(len(options))
    for k in sorted(options):
        w.string(k)
        w.string(options[k])
    return w.getvalue()


def _decode_options(data: bytes) -> dict[str, str]:
    r = _Reader(data)
    count = r.u32()
    options: dict[str, str] = {}
    for _ in range(count):
        k = r.string()
        v = r.string()
        if k in options:
            raise MalformedMessage(f"duplicate option key {k!r}")
        options[k] = v
    if not r.exhausted:
        raise MalformedMessage("trailing bytes after options")
    return options


def _frame_message(kind: int, fields: list[tuple[int, bytes]]) -> bytes:
    body = _Writer()
    for tag, value in fields:
        body.u8(tag)
        body.u32(len(value))
        body.raw(value)
    body_bytes = body.getvalue()
    head = _Writer()
    head.raw(MAGIC)
    head.u8(kind)
    head.u32(len(body_bytes))
    head.raw(body_bytes)
    return head.getvalue()


def serialize_record(record: FaroRecord) -> bytes:
    """Encode a record to canonical bytes (deterministic for equal records)."""
    fields = [
        (_R_ID, record.record_id.bytes),
        (_R_SEQ, _U64.pack(record.sequence_no)),
        (_R_SOURCE, record.source_id.encode("utf-8")),
        (_R_TS, _I64.pack(record.timestamp_us)),
        (_R_TARGET, record.target.encode("utf-8")),
        (_R_PAYLOAD, _encode_payload(record.payload)),
        (_R_OPTIONS, _encode_options(record.options)),
    ]
    return _frame_message(KIND_RECORD, fields)


def serialize_reply(reply: FaroReply) -> bytes:
    timings = _Writer()
    timings.u32(len(reply.stage_timings))
    for name, micros in reply.stage_timings:
        timings.string(name)
        timings.u64(micros)
    err = _Writer()
    if reply.error is None:
        err.u8(0)
    else:
        err.u8(1)
        err.string(reply.error.code)
        err.string(reply.error.message)
    fields = [
        (_P_ID, reply.record_id.bytes),
        (_P_STATUS, bytes((reply.status.value,))),
        (_P_TIMINGS, timings.getvalue()),
        (_P_PAYLOAD, _encode_payload(reply.payload)),
        (_P_ERROR, err.getvalue()),
    ]
    return _frame_message(KIND_REPLY, fields)


def _parse_fields(r: _Reader, allowed: tuple[int, ...]) -> dict[int, bytes]:
    fields: dict[int, bytes] = {}
    while not r.exhausted:
        tag = r.u8()
        if tag not in allowed:
            raise MalformedMessage(f"unknown field tag {tag}")
        if tag in fields:
            raise MalformedMessage(f"duplicate field tag {tag}")
        fields[tag] = r.lp_bytes()
    missing = [t for t in allowed if t not in fields]
    if missing:
        raise MalformedMessage(f"missing field tags {missing}")
    return fields


def _uuid_from(b: bytes) -> uuid.UUID:
    if len(b) != 16:
        raise MalformedMessage(f"record id has {len(b)} bytes, expected 16")
    return uuid.UUID(bytes=b)


def read_message(data: bytes, offset: int = 0) -> tuple[Union[FaroRecord, FaroReply], int]:
    """Parse one message starting at offset; returns (message, next offset)."""
    r = _Reader(data, pos=offset)
    magic = r._take(4)
    if magic != MAGIC:
        raise MalformedMessage(f"bad magic {magic!r}")
    kind = r.u8()
    body_len = r.u32()
    body_end = r.pos + body_len
    if body_end > len(data):
        raise MalformedMessage(
            f"truncated message: body wants {body_len} bytes, {len(data) - r.pos} left"
        )
    body = _Reader(data, pos=r.pos, end=body_end)
    if kind == KIND_RECORD:
        fields = _parse_fields(body, _RECORD_TAGS)
        seq_raw = fields[_R_SEQ]
        ts_raw = fields[_R_TS]
        if len(seq_raw) != 8 or len(ts_raw) != 8:
            raise MalformedMessage("bad fixed-width field length")
        try:
            record = FaroRecord(
                record_id=_uuid_from(fields[_R_ID]),
                sequence_no=_U64.unpack(seq_raw)[0],
                source_id=fields[_R_SOURCE].decode("utf-8"),
                timestamp_us=_I64.unpack(ts_raw)[0],
                target=fields[_R_TARGET].decode("utf-8"),
                payload=_decode_payload(fields[_R_PAYLOAD]),
                options=_decode_options(fields[_R_OPTIONS]),
            )
        except (InvariantViolation, UnicodeDecodeError) as exc:
            raise MalformedMessage(str(exc)) from exc
        return record, body_end
    if kind == KIND_REPLY:
        fields = _parse_fields(body, _REPLY_TAGS)
        status_raw = fields[_P_STATUS]
        if len(status_raw) != 1:
            raise MalformedMessage("bad status field length")
        try:
            status = ReplyStatus(status_raw[0])
        except ValueError:
            raise MalformedMessage(f"unknown reply status {status_raw[0]}") from None
        tr = _Reader(fields[_P_TIMINGS])
        timings = tuple((tr.string(), tr.u64()) for _ in range(tr.u32()))
        if not tr.exhausted:
            raise MalformedMessage("trailing bytes after stage timings")
        er = _Reader(fields[_P_ERROR])
        flag = er.u8()
        error = None
        if flag == 1:
            error = ReplyError(code=er.string(), message=er.string())
        elif flag != 0:
            raise MalformedMessage(f"bad error presence flag {flag}")
        try:
            reply = FaroReply(
                record_id=_uuid_from(fields[_P_ID]),
                status=status,
                stage_timings=timings,
                payload=_decode_payload(fields[_P_PAYLOAD]),
                error=error,
            )
        except InvariantViolation as exc:
            raise MalformedMessage(str(exc)) from exc
        return reply, body_end
    raise MalformedMessage(f"unknown message kind {kind}")


def deserialize_record(data: bytes) -> FaroRecord:
    """Decode exactly one record; trailing bytes are an error."""
    msg, end = read_message(data)
    if not isinstance(msg, FaroRecord):
        raise MalformedMessage("message is a reply, expected a record")
    if end != len(data):
        raise MalformedMessage(f"{len(data) - end} trailing bytes after record")
    return msg


def deserialize_reply(data: bytes) -> FaroReply:
    """Decode exactly one reply; trailing bytes are an error."""
    msg, end = read_message(data)
    if not isinstance(msg, FaroReply):
        raise MalformedMessage("message is a record, expected a reply")
    if end != len(data):
        raise MalformedMessage(f"{len(data) - end} trailing bytes after reply")
    return msg


def iter_messages(data: bytes) -> Iterator[Union[FaroRecord, FaroReply]]:
    """Decode a concatenation of messages one by one."""
    offset = 0
    while offset < len(data):
        msg, offset = read_message(data, offset)
        yield msg


def encode_payload_block(payload: Payload) -> bytes:
    """Standalone payload encoding, used for references and bundles."""
    return _encode_payload(payload)


def decode_payload_block(data: bytes) -> Payload:
    return _decode_payload(data)


def bundle_payloads(named: list[tuple[str, Payload]]) -> Generic:
    """Pack several named payloads into one Generic payload.

    Used for multi-sink pipeline output and fan-in stage input; order is
    preserved and significant for byte determinism.
    """
    w = _Writer()
    w.u32(len(named))
    for name, payload in named:
        w.string(name)
        w.lp_bytes(_encode_payload(payload))
    return Generic(content_type="application/x-faro-bundle", data=w.getvalue())


def unbundle_payloads(generic: Generic) -> list[tuple[str, Payload]]:
    if generic.content_type != "application/x-faro-bundle":
        raise MalformedMessage(f"not a payload bundle: {generic.content_type}")
    r = _Reader(generic.data)
    out = []
    for _ in range(r.u32()):
        name = r.string()
        out.append((name, _decode_payload(r.lp_bytes())))
    if not r.exhausted:
        raise MalformedMessage("trailing bytes after bundle")
    return out
