"""Worker contract, type registry, and the built-in demo workers.

A worker is a single-task compute unit that consumes FaroRecords and
produces FaroReplies. Concrete workers subclass Worker and implement
handle(); the base class wraps execution so that every failure, including
unexpected exceptions, surfaces as an ERROR reply rather than escaping the
host, and stamps one stage timing named after the worker.

Demo workers are deterministic so their outputs can be recomputed by
independent oracles:

* demo-detect   grayscale threshold + 4-connected component labeling;
  components of at least min_area pixels become detections scored by mean
  intensity / 255, ordered by (min-y, min-x).
* demo-extract  crops each detection box, block-mean resamples to
  sqrt(dims) x sqrt(dims), flattens row-major, L2-normalizes.
* demo-score    pairwise cosine similarity over the input templates.

demo-echo, demo-delay, and demo-brightness are small generic/transform
workers used to build exercise pipelines.
"""

from __future__ import annotations

import base64
import os
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import (
    FaroError,
    IncompatibleInput,
    InvalidOptions,
    UnknownWorkerType,
)
from .records import (
    Detection,
    DetectionList,
    FaroRecord,
    FaroReply,
    Frame,
    Payload,
    ScoreMatrix,
    Template,
    TemplateList,
    error_reply,
    ok_reply,
)
from . import wire

ORIGIN_FRAME_OPTION = "origin_frame"


class MicroserviceKind(Enum):
    DETECT = "detect"
    EXTRACT = "extract"
    SCORE = "score"
    ENROLL = "enroll"
    SEARCH = "search"
    TRANSFORM = "transform"
    GENERIC = "generic"


@dataclass(frozen=True)
class OptionSpec:
    name: str
    type: str  # "int" | "float" | "str" | "bool"
    default: str
    description: str = ""


@dataclass(frozen=True)
class WorkerInfo:
    worker_type: str
    microservice_kind: MicroserviceKind
    resources: dict[str, str]
    options_schema: tuple[OptionSpec, ...]
    reentrant: bool

    def to_json(self) -> dict:
        return {
            "worker_type": self.worker_type,
            "microservice_kind": self.microservice_kind.value,
            "resources": dict(self.resources),
            "options_schema": [
                {"name": o.name, "type": o.type, "default": o.default,
                 "description": o.description}
                for o in self.options_schema
            ],
            "reentrant": self.reentrant,
        }


_PARSERS: dict[str, Callable[[str], object]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"true": True, "1": True, "false": False, "0": False}[s.lower()],
}


def validate_options(
    schema: tuple[OptionSpec, ...], options: dict[str, str]
) -> dict[str, object]:
    """Merge options over schema defaults, rejecting unknown keys and bad values."""
    by_name = {o.name: o for o in schema}
    for key in options:
        if key not in by_name:
            raise InvalidOptions(f"unknown option {key!r}")
    parsed: dict[str, object] = {}
    for spec in schema:
        raw = options.get(spec.name, spec.default)
        try:
            parsed[spec.name] = _PARSERS[spec.type](raw)
        except (ValueError, KeyError):
            raise InvalidOptions(
                f"option {spec.name!r}: {raw!r} is not a valid {spec.type}"
            ) from None
    return parsed


class Worker:
    """Base worker. Subclasses define class attributes and handle()."""

    worker_type: str = "worker"
    kind: MicroserviceKind = MicroserviceKind.GENERIC
    options_schema: tuple[OptionSpec, ...] = ()
    reentrant: bool = True

    def __init__(self, options: Optional[dict[str, str]] = None):
        self.raw_options = dict(options or {})
        self.options = validate_options(self.options_schema, self.raw_options)
        self._serial_lock = None if self.reentrant else threading.Lock()

    # -- contract --------------------------------------------------------

    def info(self) -> WorkerInfo:
        """Self-description; option defaults reflect this instance's config."""
        schema = tuple(
            replace(o, default=str(self.options[o.name])) for o in self.options_schema
        )
        return WorkerInfo(
            worker_type=self.worker_type,
            microservice_kind=self.kind,
            resources=self.resources(),
            options_schema=schema,
            reentrant=self.reentrant,
        )

    def resources(self) -> dict[str, str]:
        return {"cpu_threads": str(os.cpu_count() or 1)}

    def process(self, record: FaroRecord) -> FaroReply:
        """Run handle() under the contract: never raises, always times."""
        start = time.perf_counter()
        try:
            if self._serial_lock is not None:
                with self._serial_lock:
                    payload = self.handle(record)
            else:
                payload = self.handle(record)
            micros = int((time.perf_counter() - start) * 1e6)
            return ok_reply(record, payload, ((self.worker_type, micros),))
        except IncompatibleInput as exc:
            micros = int((time.perf_counter() - start) * 1e6)
            return error_reply(record, exc.code, str(exc), ((self.worker_type, micros),))
        except FaroError as exc:
            micros = int((time.perf_counter() - start) * 1e6)
            return error_reply(
                record, type(exc).__name__.upper(), str(exc), ((self.worker_type, micros),)
            )
        except Exception as exc:  # noqa: BLE001 - contract: failures become replies
            micros = int((time.perf_counter() - start) * 1e6)
            return error_reply(record, "INTERNAL", repr(exc), ((self.worker_type, micros),))

    def handle(self, record: FaroRecord) -> Payload:
        raise NotImplementedError

    def close(self):
        pass

    # -- input helpers -----------------------------------------------------

    def _require_frame(self, record: FaroRecord) -> Frame:
        if isinstance(record.payload, Frame):
            return record.payload
        raise IncompatibleInput(
            f"{self.worker_type} needs a Frame payload, got "
            f"{type(record.payload).__name__}"
        )


def origin_frame_of(record: FaroRecord) -> Optional[Frame]:
    """Recover the original frame referenced in a record's options."""
    raw = record.options.get(ORIGIN_FRAME_OPTION)
    if raw is None:
        return None
    payload = wire.decode_payload_block(base64.b64decode(raw))
    return payload if isinstance(payload, Frame) else None


def attach_origin_frame(record: FaroRecord, frame: Frame) -> FaroRecord:
    encoded = base64.b64encode(wire.encode_payload_block(frame)).decode("ascii")
    return record.with_options(**{ORIGIN_FRAME_OPTION: encoded})


# -- demo workers --------------------------------------------------------------


class DemoDetect(Worker):
    worker_type = "demo-detect"
    kind = MicroserviceKind.DETECT
    options_schema = (
        OptionSpec("threshold", "int", "128", "minimum grayscale value for foreground"),
        OptionSpec("min_area", "int", "25", "minimum component size in pixels"),
    )

    def handle(self, record: FaroRecord) -> Payload:
        frame = self._require_frame(record)
        gray = frame.to_gray_array()
        mask = gray >= self.options["threshold"]
        # default scipy structure is the 4-connected cross
        labels, count = ndimage.label(mask)
        detections = []
        for comp in range(1, count + 1):
            ys, xs = np.nonzero(labels == comp)
            if ys.size < self.options["min_area"]:
                continue
            y0, y1 = int(ys.min()), int(ys.max())
            x0, x1 = int(xs.min()), int(xs.max())
            mean_val = float(gray[ys, xs].mean())
            detections.append(
                (y0, x0, Detection(
                    x=x0, y=y0, w=x1 - x0 + 1, h=y1 - y0 + 1,
                    score=mean_val / 255.0, label="blob",
                ))
            )
        detections.sort(key=lambda t: (t[0], t[1]))
        final = tuple(
            replace(d, detection_id=i + 1) for i, (_, _, d) in enumerate(detections)
        )
        return DetectionList(detections=final)


def block_mean_resample(patch: np.ndarray, side: int) -> np.ndarray:
    """Resample a 2D patch to side x side by block means.

    Block (i, j) covers rows [floor(i*h/side), max(that+1, floor((i+1)*h/side)))
    and the analogous columns; the +1 floor keeps blocks non-empty when the
    patch is smaller than the target grid.
    """
    h, w = patch.shape
    out = np.empty((side, side), dtype=np.float64)
    src = patch.astype(np.float64)
    for i in range(side):
        r0 = (i * h) // side
        r1 = max(r0 + 1, ((i + 1) * h) // side)
        for j in range(side):
            c0 = (j * w) // side
            c1 = max(c0 + 1, ((j + 1) * w) // side)
            out[i, j] = src[r0:r1, c0:c1].mean()
    return out


class DemoExtract(Worker):
    worker_type = "demo-extract"
    kind = MicroserviceKind.EXTRACT
    options_schema = (
        OptionSpec("dims", "int", "64", "template length; must be a perfect square"),
        OptionSpec("modality", "str", "demo", "modality tag stamped on templates"),
    )

    def __init__(self, options=None):
        super().__init__(options)
        dims = self.options["dims"]
        side = int(round(dims ** 0.5))
        if side * side != dims or dims < 1:
            raise InvalidOptions(f"dims={dims} is not a perfect square")
        self._side = side

    def handle(self, record: FaroRecord) -> Payload:
        if not isinstance(record.payload, DetectionList):
            raise IncompatibleInput(
                f"{self.worker_type} needs a DetectionList payload, got "
                f"{type(record.payload).__name__}"
            )
        frame = origin_frame_of(record)
        if frame is None:
            raise IncompatibleInput(
                f"{self.worker_type} needs the origin frame alongside detections"
            )
        gray = frame.to_gray_array()
        templates = []
        for det in record.payload.detections:
            x0 = max(det.x, 0)
            y0 = max(det.y, 0)
            x1 = min(det.x + det.w, frame.width)
            y1 = min(det.y + det.h, frame.height)
            if x1 <= x0 or y1 <= y0:
                continue
            patch = gray[y0:y1, x0:x1]
            vec = block_mean_resample(patch, self._side).reshape(-1)
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                vec = vec / norm
            templates.append(
                Template(vector=tuple(float(v) for v in vec),
                         modality=self.options["modality"])
            )
        return TemplateList(templates=tuple(templates))


class DemoScore(Worker):
    worker_type = "demo-score"
    kind = MicroserviceKind.SCORE
    options_schema = ()

    def handle(self, record: FaroRecord) -> Payload:
        if not isinstance(record.payload, TemplateList):
            raise IncompatibleInput(
                f"{self.worker_type} needs a TemplateList payload, got "
                f"{type(record.payload).__name__}"
            )
        templates = record.payload.templates
        ids = tuple(
            t.subject_id if t.subject_id is not None else f"t{i}"
            for i, t in enumerate(templates)
        )
        mat = np.array([t.vector for t in templates], dtype=np.float64)
        scores: tuple[float, ...] = ()
        if len(templates):
            norms = np.linalg.norm(mat, axis=1)
            norms[norms == 0] = 1.0
            unit = mat / norms[:, None]
            scores = tuple(float(s) for s in (unit @ unit.T).reshape(-1))
        return ScoreMatrix(rows=ids, cols=ids, scores=scores)


class DemoEcho(Worker):
    worker_type = "demo-echo"
    kind = MicroserviceKind.GENERIC
    options_schema = ()

    def handle(self, record: FaroRecord) -> Payload:
        return record.payload


class DemoDelay(Worker):
    """Passes the payload through after a configurable sleep; load stand-in."""

    worker_type = "demo-delay"
    kind = MicroserviceKind.GENERIC
    options_schema = (
        OptionSpec("delay_ms", "float", "0", "fixed sleep before answering"),
        OptionSpec("jitter_ms", "float", "0", "extra uniform random sleep"),
    )

    def handle(self, record: FaroRecord) -> Payload:
        delay = self.options["delay_ms"] / 1e3
        jitter = self.options["jitter_ms"] / 1e3
        if jitter > 0:
            import random

            delay += random.uniform(0, jitter)
        if delay > 0:
            time.sleep(delay)
        return record.payload


class DemoBrightness(Worker):
    worker_type = "demo-brightness"
    kind = MicroserviceKind.TRANSFORM
    options_schema = (
        OptionSpec("delta", "int", "0", "added to every pixel, clipped to 0..255"),
    )

    def handle(self, record: FaroRecord) -> Payload:
        frame = self._require_frame(record)
        arr = frame.to_array().astype(np.int16) + self.options["delta"]
        return Frame.from_array(np.clip(arr, 0, 255).astype(np.uint8))


# -- registry ------------------------------------------------------------------


class WorkerRegistry:
    """Maps worker type names to constructible worker classes."""

    def __init__(self):
        self._types: dict[str, type[Worker]] = {}

    def register(self, cls: type[Worker]) -> None:
        self._types[cls.worker_type] = cls

    def types(self) -> list[str]:
        return sorted(self._types)

    def __contains__(self, worker_type: str) -> bool:
        return worker_type in self._types

    def construct(self, worker_type: str, options: Optional[dict[str, str]] = None) -> Worker:
        cls = self._types.get(worker_type)
        if cls is None:
            raise UnknownWorkerType(f"no worker type {worker_type!r} registered")
        return cls(options)

    def info_for(self, worker_type: str) -> WorkerInfo:
        cls = self._types.get(worker_type)
        if cls is None:
            raise UnknownWorkerType(f"no worker type {worker_type!r} registered")
        return WorkerInfo(
            worker_type=cls.worker_type,
            microservice_kind=cls.kind,
            resources={"cpu_threads": str(os.cpu_count() or 1)},
            options_schema=cls.options_schema,
            reentrant=cls.reentrant,
        )

    def kind_of(self, worker_type: str) -> Optional[MicroserviceKind]:
        cls = self._types.get(worker_type)
        return cls.kind if cls else None


DEMO_WORKERS = (DemoDetect, DemoExtract, DemoScore, DemoEcho, DemoDelay, DemoBrightness)


def default_registry() -> WorkerRegistry:
    registry = WorkerRegistry()
    for cls in DEMO_WORKERS:
        registry.register(cls)
    return registry


def construct_worker(
    worker_type: str,
    options: Optional[dict[str, str]] = None,
    registry: Optional[WorkerRegistry] = None,
) -> Worker:
    """Construct a registered worker; uses the demo registry by default."""
    return (registry or default_registry()).construct(worker_type, options)
