"""Universal record/reply envelopes and their payload variants.

FaroRecord and FaroReply are the one language every client, service, worker,
and pipeline speaks. A record carries a payload (frame, detections,
templates, scores, opaque bytes, or nothing) plus routing metadata; a reply
echoes the record id and carries the result payload with per-stage timings.

All types here are immutable after construction and safe to hand between
threads. Construction validates the documented invariants and raises
InvariantViolation on inconsistency.
"""

from __future__ import annotations

import math
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import InvariantViolation


class PixelFormat(Enum):
    GRAY8 = 0
    RGB24 = 1


BYTES_PER_PIXEL = {PixelFormat.GRAY8: 1, PixelFormat.RGB24: 3}


@dataclass(frozen=True)
class Frame:
    """Raw raster image, row-major, no padding."""

    width: int
    height: int
    pixel_format: PixelFormat
    data: bytes

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvariantViolation(f"bad frame dims {self.width}x{self.height}")
        expect = self.width * self.height * BYTES_PER_PIXEL[self.pixel_format]
        if len(self.data) != expect:
            raise InvariantViolation(
                f"frame data length {len(self.data)} != {expect} "
                f"({self.width}x{self.height} {self.pixel_format.name})"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Frame":
        """Build a frame from a HxW (GRAY8) or HxWx3 (RGB24) uint8 array."""
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            fmt = PixelFormat.GRAY8
        elif arr.ndim == 3 and arr.shape[2] == 3:
            fmt = PixelFormat.RGB24
        else:
            raise InvariantViolation(f"unsupported array shape {arr.shape}")
        h, w = arr.shape[:2]
        return cls(width=w, height=h, pixel_format=fmt, data=arr.tobytes())

    def to_array(self) -> np.ndarray:
        """View pixel data as an HxW or HxWx3 uint8 array (copy)."""
        flat = np.frombuffer(self.data, dtype=np.uint8)
        if self.pixel_format is PixelFormat.GRAY8:
            return flat.reshape(self.height, self.width).copy()
        return flat.reshape(self.height, self.width, 3).copy()

    def to_gray_array(self) -> np.ndarray:
        """HxW uint8 view; RGB is reduced by integer channel mean."""
        arr = self.to_array()
        if self.pixel_format is PixelFormat.RGB24:
            arr = (arr.astype(np.uint16).sum(axis=2) // 3).astype(np.uint8)
        return arr


@dataclass(frozen=True)
class Detection:
    """Axis-aligned box in pixel coordinates with a confidence score."""

    x: int
    y: int
    w: int
    h: int
    score: float
    label: str = ""
    detection_id: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InvariantViolation(f"detection box {self.w}x{self.h} not positive")
        if not (0.0 <= self.score <= 1.0):
            raise InvariantViolation(f"detection score {self.score} outside [0,1]")


@dataclass(frozen=True)
class DetectionList:
    detections: tuple[Detection, ...] = ()


@dataclass(frozen=True)
class Template:
    """Fixed-dimension real embedding describing one sample."""

    vector: tuple[float, ...]
    modality: str = "generic"
    subject_id: Optional[str] = None

    def __post_init__(self):
        if len(self.vector) < 1:
            raise InvariantViolation("template has zero dimensions")
        if not all(math.isfinite(v) for v in self.vector):
            raise InvariantViolation("template contains non-finite entries")

    @property
    def dims(self) -> int:
        return len(self.vector)


@dataclass(frozen=True)
class TemplateList:
    templates: tuple[Template, ...] = ()


@dataclass(frozen=True)
class PheCiphertext:
    """One Paillier ciphertext with its key digest and fixed-point scale."""

    value: int
    key_id: bytes
    scale: int = 1

    def __post_init__(self):
        if self.value < 0:
            raise InvariantViolation("ciphertext value negative")
        if self.scale < 1:
            raise InvariantViolation("ciphertext scale must be >= 1")


@dataclass(frozen=True)
class EncryptedTemplate:
    """Template whose entries are Paillier ciphertexts under one key."""

    ciphertexts: tuple[PheCiphertext, ...]
    key_id: bytes
    scale: int
    modality: str = "generic"
    subject_id: Optional[str] = None

    def __post_init__(self):
        if len(self.ciphertexts) < 1:
            raise InvariantViolation("encrypted template has zero dimensions")
        for ct in self.ciphertexts:
            if ct.key_id != self.key_id or ct.scale != self.scale:
                raise InvariantViolation("ciphertexts disagree on key or scale")

    @property
    def dims(self) -> int:
        return len(self.ciphertexts)


@dataclass(frozen=True)
class EncryptedTemplateList:
    templates: tuple[EncryptedTemplate, ...] = ()


@dataclass(frozen=True)
class ScoreMatrix:
    """Dense probe x gallery score block, row-major."""

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.scores) != len(self.rows) * len(self.cols):
            raise InvariantViolation(
                f"score count {len(self.scores)} != {len(self.rows)}x{len(self.cols)}"
            )

    def at(self, r: int, c: int) -> float:
        return self.scores[r * len(self.cols) + c]


@dataclass(frozen=True)
class Generic:
    """Opaque payload escape hatch, tagged with a content type."""

    content_type: str
    data: bytes


@dataclass(frozen=True)
class Empty:
    pass


EMPTY = Empty()

Payload = Union[
    Frame,
    DetectionList,
    TemplateList,
    EncryptedTemplateList,
    ScoreMatrix,
    Generic,
    Empty,
]


class ReplyStatus(Enum):
    OK = 0
    ERROR = 1
    PARTIAL = 2


@dataclass(frozen=True)
class ReplyError:
    code: str
    message: str = ""


@dataclass(frozen=True)
class FaroRecord:
    """Request envelope routed among clients, services, workers, pipelines.

    target is a path "service/pipeline-or-worker" (or a bare local name);
    options is a string map used for auxiliary data and protocol headers.
    Option keys serialize in sorted order so equal records encode to
    identical bytes.
    """

    record_id: uuid.UUID
    sequence_no: int
    source_id: str
    timestamp_us: int
    target: str
    payload: Payload
    options: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.sequence_no < 0:
            raise InvariantViolation("sequence_no negative")
        for k, v in self.options.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise InvariantViolation("options must map str to str")

    def with_options(self, **extra: str) -> "FaroRecord":
        merged = dict(self.options)
        merged.update(extra)
        return replace(self, options=merged)


@dataclass(frozen=True)
class FaroReply:
    """Response envelope: echoes the request id, carries result payload."""

    record_id: uuid.UUID
    status: ReplyStatus
    stage_timings: tuple[tuple[str, int], ...] = ()
    payload: Payload = EMPTY
    error: Optional[ReplyError] = None

    def __post_init__(self):
        if self.status is ReplyStatus.ERROR and self.error is None:
            raise InvariantViolation("ERROR reply must carry an error")
        if self.status is ReplyStatus.OK and self.error is not None:
            raise InvariantViolation("OK reply must not carry an error")

    @property
    def ok(self) -> bool:
        return self.status is ReplyStatus.OK

    def with_timing(self, stage: str, micros: int) -> "FaroReply":
        return replace(self, stage_timings=self.stage_timings + ((stage, micros),))


def now_us() -> int:
    """Current UTC time in microseconds since the epoch."""
    return time.time_ns() // 1_000


def new_record(
    payload: Payload,
    target: str = "",
    source_id: str = "",
    sequence_no: int = 0,
    options: Optional[dict[str, str]] = None,
    record_id: Optional[uuid.UUID] = None,
    timestamp_us: Optional[int] = None,
) -> FaroRecord:
    """Build a record with a fresh id and current timestamp by default."""
    return FaroRecord(
        record_id=record_id if record_id is not None else uuid.uuid4(),
        sequence_no=sequence_no,
        source_id=source_id,
        timestamp_us=timestamp_us if timestamp_us is not None else now_us(),
        target=target,
        payload=payload,
        options=dict(options or {}),
    )


def ok_reply(
    record: FaroRecord,
    payload: Payload = EMPTY,
    stage_timings: tuple[tuple[str, int], ...] = (),
) -> FaroReply:
    return FaroReply(
        record_id=record.record_id,
        status=ReplyStatus.OK,
        stage_timings=stage_timings,
        payload=payload,
    )


def error_reply(
    record: FaroRecord,
    code: str,
    message: str = "",
    stage_timings: tuple[tuple[str, int], ...] = (),
) -> FaroReply:
    return FaroReply(
        record_id=record.record_id,
        status=ReplyStatus.ERROR,
        stage_timings=stage_timings,
        payload=EMPTY,
        error=ReplyError(code=code, message=message),
    )


@dataclass(frozen=True)
class PairingReport:
    """Outcome of matching a reply stream against the records that were sent.

    in_order is true when the replies that do match arrive in the same
    relative order the records were sent (the FIFO property).
    """

    in_order: bool
    unmatched_sent: tuple[uuid.UUID, ...]
    unmatched_received: tuple[uuid.UUID, ...]

    @property
    def complete(self) -> bool:
        return not self.unmatched_sent and not self.unmatched_received


def validate_reply_pairing(
    sent: list[FaroRecord], received: list[FaroReply]
) -> PairingReport:
    """Match replies to sent records by id and check ordering."""
    sent_pos: dict[uuid.UUID, int] = {}
    for i, rec in enumerate(sent):
        sent_pos.setdefault(rec.record_id, i)
    sent_ids = set(sent_pos)

    matched_positions = []
    unmatched_received = []
    seen = set()
    for rep in received:
        if rep.record_id in sent_ids:
            matched_positions.append(sent_pos[rep.record_id])
            seen.add(rep.record_id)
        else:
            unmatched_received.append(rep.record_id)

    unmatched_sent = tuple(
        rec.record_id
        for rec in sent
        if rec.record_id not in seen and rec.record_id in sent_ids
    )
    in_order = all(
        a <= b for a, b in zip(matched_positions, matched_positions[1:])
    )
    return PairingReport(
        in_order=in_order,
        unmatched_sent=tuple(dict.fromkeys(unmatched_sent)),
        unmatched_received=tuple(unmatched_received),
    )
