"""Frame sources: finite or indefinite iterators that grab the next frame.

Two source kinds are built in. IMAGE_SEQUENCE walks a directory of binary
PGM (P5) / PPM (P6) files in lexicographic filename order. SYNTHETIC renders
a deterministic scene of moving bright squares, which gives the demo
detector a fully predictable stimulus. Other ingest paths (cameras, codecs,
network streams) are integrated by subclassing Source.

A source is single-owner: exactly one consumer calls grab(). Every grabbed
frame is wrapped in a FaroRecord whose sequence_no increases strictly for
the lifetime of the source, including across loop wraps.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DecodeError, InvariantViolation, SourceNotFound, UnsupportedFormat
from .records import FaroRecord, Frame, PixelFormat, new_record

log = logging.getLogger("faro2.sources")

FRAME_SUFFIXES = (".pgm", ".ppm")


class SourceKind(Enum):
    IMAGE_SEQUENCE = "image_sequence"
    SYNTHETIC = "synthetic"


@dataclass
class SourceConfig:
    kind: SourceKind
    path_or_seed: str
    fps_limit: Optional[float] = None
    loop: bool = False
    frame_count: Optional[int] = None

    def __post_init__(self):
        if self.fps_limit is not None and self.fps_limit <= 0:
            raise InvariantViolation("fps_limit must be positive")
        if self.frame_count is not None and self.frame_count < 1:
            raise InvariantViolation("frame_count must be >= 1")


# -- raster file io ----------------------------------------------------------


def read_image(path: str | Path) -> Frame:
    """Read a binary PGM (P5, GRAY8) or PPM (P6, RGB24) file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise SourceNotFound(f"no such image: {path}") from None
    return decode_image(raw, name=str(path))


def decode_image(raw: bytes, name: str = "<bytes>") -> Frame:
    if raw[:2] == b"P5":
        fmt = PixelFormat.GRAY8
    elif raw[:2] == b"P6":
        fmt = PixelFormat.RGB24
    else:
        raise UnsupportedFormat(f"{name}: not a binary PGM/PPM file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token:
            raise DecodeError(f"{name}: truncated header")
        try:
            fields.append(int(token))
        except ValueError:
            raise DecodeError(f"{name}: bad header token {token!r}") from None
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormat(f"{name}: maxval {maxval} unsupported (only 255)")
    expect = width * height * (1 if fmt is PixelFormat.GRAY8 else 3)
    data = raw[pos : pos + expect]
    if len(data) != expect:
        raise DecodeError(f"{name}: pixel data truncated ({len(data)}/{expect} bytes)")
    return Frame(width=width, height=height, pixel_format=fmt, data=data)


def write_image(path: str | Path, frame: Frame) -> None:
    """Write a frame as binary PGM or PPM depending on its pixel format."""
    magic = b"P5" if frame.pixel_format is PixelFormat.GRAY8 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, frame.width, frame.height)
    Path(path).write_bytes(header + frame.data)


# -- synthetic scenes ----------------------------------------------------------


@dataclass(frozen=True)
class MovingSquare:
    """A bright square translating with integer per-frame velocity.

    texture selects an optional deterministic intra-square pattern (cycle
    length and depth derived from the value) so different squares produce
    distinguishable normalized templates; 0 means uniform fill.
    """

    x: int
    y: int
    side: int
    intensity: int
    vx: int = 0
    vy: int = 0
    texture: int = 0


@dataclass(frozen=True)
class SyntheticScene:
    width: int
    height: int
    squares: tuple[MovingSquare, ...]
    background_intensity: int = 16

    def __post_init__(self):
        for sq in self.squares:
            if sq.side < 1:
                raise InvariantViolation("square side must be >= 1")
            if not (0 <= sq.x and sq.x + sq.side <= self.width):
                raise InvariantViolation(f"square at x={sq.x} leaves the frame")
            if not (0 <= sq.y and sq.y + sq.side <= self.height):
                raise InvariantViolation(f"square at y={sq.y} leaves the frame")
            if sq.intensity <= self.background_intensity + 50:
                raise InvariantViolation(
                    "square intensity must exceed background by more than 50"
                )
            if sq.texture and sq.intensity - _texture_depth(sq.texture) <= self.background_intensity + 50:
                raise InvariantViolation("texture dips below the detectability margin")

    def render(self, frame_index: int) -> Frame:
        """Render the scene at a frame index; pure function of its inputs."""
        arr = np.full((self.height, self.width), self.background_intensity, dtype=np.uint8)
        for sq in self.squares:
            px = _clamp(sq.x + sq.vx * frame_index, 0, self.width - sq.side)
            py = _clamp(sq.y + sq.vy * frame_index, 0, self.height - sq.side)
            patch = self._square_patch(sq)
            arr[py : py + sq.side, px : px + sq.side] = patch
        return Frame.from_array(arr)

    def _square_patch(self, sq: MovingSquare) -> np.ndarray:
        if not sq.texture:
            return np.full((sq.side, sq.side), sq.intensity, dtype=np.uint8)
        # pattern in square-local coordinates so it travels with the square
        yy, xx = np.mgrid[0 : sq.side, 0 : sq.side]
        period = 2 + (sq.texture % 5)
        depth = _texture_depth(sq.texture)
        dip = ((xx * (1 + sq.texture % 3) + yy) % period) * (depth // max(period - 1, 1))
        return (sq.intensity - dip).astype(np.uint8)


def _texture_depth(texture: int) -> int:
    return 20 + (texture % 4) * 10


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(v, hi))


def scene_from_seed(
    seed: str,
    width: int = 160,
    height: int = 120,
    n_squares: int = 3,
    background_intensity: int = 16,
) -> SyntheticScene:
    """Derive a deterministic scene from a seed string.

    Each square lives in its own horizontal band and only moves
    horizontally, so detections keep a stable top-to-bottom order in every
    frame (the demo detector sorts components by min-y, min-x).
    """
    rng = random.Random(seed)
    band = height // n_squares
    squares = []
    for i in range(n_squares):
        side = rng.randrange(max(8, band // 3), max(10, band - 10))
        y = i * band + rng.randrange(2, max(3, band - side - 2))
        x = rng.randrange(0, width - side)
        intensity = rng.randrange(190, 256)
        vx = rng.choice([-3, -2, -1, 1, 2, 3])
        squares.append(
            MovingSquare(
                x=x, y=y, side=side, intensity=intensity, vx=vx, vy=0,
                texture=1 + rng.randrange(97) + i,
            )
        )
    return SyntheticScene(
        width=width,
        height=height,
        squares=tuple(squares),
        background_intensity=background_intensity,
    )


# -- sources -------------------------------------------------------------------


class Source:
    """Base frame iterator. Subclasses implement _next_frame()."""

    def __init__(self, source_id: str, fps_limit: Optional[float] = None):
        self.source_id = source_id
        self.fps_limit = fps_limit
        self.sequence_no = 0
        self.skipped: list[tuple[str, str]] = []
        self._last_grab: Optional[float] = None
        self._closed = False

    def _next_frame(self) -> Optional[tuple[Frame, int]]:
        raise NotImplementedError

    def grab(self) -> Optional[FaroRecord]:
        """Return the next frame as a record, or None at end of stream."""
        if self._closed:
            return None
        item = self._next_frame()
        if item is None:
            return None
        if self.fps_limit:
            min_interval = 1.0 / self.fps_limit
            now = time.monotonic()
            if self._last_grab is not None:
                wait = self._last_grab + min_interval - now
                if wait > 0:
                    time.sleep(wait)
            self._last_grab = time.monotonic()
        frame, frame_index = item
        self.sequence_no += 1
        return new_record(
            payload=frame,
            source_id=self.source_id,
            sequence_no=self.sequence_no,
            options={"faro.frame_index": str(frame_index)},
        )

    def __iter__(self):
        while True:
            rec = self.grab()
            if rec is None:
                return
            yield rec

    def close(self):
        self._closed = True


class ImageSequenceSource(Source):
    def __init__(self, directory: Path, loop: bool, fps_limit: Optional[float]):
        super().__init__(source_id=str(directory), fps_limit=fps_limit)
        self.files = sorted(
            p for p in directory.iterdir()
            if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES
        )
        self.loop = loop
        self._cursor = 0
        if not self.files:
            raise SourceNotFound(f"{directory}: no frame files (*.pgm, *.ppm)")
        # require at least one decodable frame up front
        for p in self.files:
            try:
                read_image(p)
                break
            except DecodeError:
                continue
        else:
            raise SourceNotFound(f"{directory}: no readable frame files")

    def _next_frame(self) -> Optional[tuple[Frame, int]]:
        while True:
            if self._cursor >= len(self.files):
                if not self.loop:
                    return None
                self._cursor = 0
            index = self._cursor
            path = self.files[index]
            self._cursor += 1
            try:
                return read_image(path), index
            except (DecodeError, UnsupportedFormat) as exc:
                # corrupt frame: skip it, keep the source usable
                self.skipped.append((str(path), str(exc)))
                log.warning("skipping corrupt frame %s: %s", path, exc)
                if self.loop and all(
                    str(p) in {s for s, _ in self.skipped} for p in self.files
                ):
                    return None


class SyntheticSource(Source):
    def __init__(
        self,
        scene: SyntheticScene,
        frame_count: Optional[int],
        loop: bool = False,
        fps_limit: Optional[float] = None,
        source_id: str = "synthetic",
    ):
        super().__init__(source_id=source_id, fps_limit=fps_limit)
        self.scene = scene
        self.frame_count = frame_count
        self.loop = loop
        self._index = 0

    def _next_frame(self) -> Optional[tuple[Frame, int]]:
        if self.frame_count is not None and self._index >= self.frame_count:
            if not self.loop:
                return None
            self._index = 0
        index = self._index
        self._index += 1
        return self.scene.render(index), index


def open_source(config: SourceConfig) -> Source:
    """Open a source positioned before its first frame."""
    if config.kind is SourceKind.IMAGE_SEQUENCE:
        directory = Path(config.path_or_seed)
        if not directory.is_dir():
            raise SourceNotFound(f"no such directory: {directory}")
        return ImageSequenceSource(directory, loop=config.loop, fps_limit=config.fps_limit)
    if config.kind is SourceKind.SYNTHETIC:
        scene = scene_from_seed(config.path_or_seed)
        return SyntheticSource(
            scene,
            frame_count=config.frame_count,
            loop=config.loop,
            fps_limit=config.fps_limit,
            source_id=f"synthetic:{config.path_or_seed}",
        )
    raise UnsupportedFormat(f"unknown source kind {config.kind}")
