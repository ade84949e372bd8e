from __future__ import annotations

import itertools
import os
import random
import socket
import uuid

import numpy as np
import pytest

from faro2.records import (
    Detection,
    DetectionList,
    EMPTY,
    EncryptedTemplate,
    EncryptedTemplateList,
    Frame,
    Generic,
    PheCiphertext,
    PixelFormat,
    ScoreMatrix,
    Template,
    TemplateList,
    new_record,
)
from faro2.sources import MovingSquare, SyntheticScene

# every test that opens a discovery channel gets its own (group, port) pair
_mcast_counter = itertools.count(0)


@pytest.fixture
def mcast_channel():
    i = next(_mcast_counter)
    group = f"239.255.{40 + (i // 200)}.{(i % 200) + 1}"
    port = 29000 + (os.getpid() + i * 7) % 20000
    return group, port


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def rng():
    return random.Random(0xFA402)


def gray_frame(arr) -> Frame:
    return Frame.from_array(np.asarray(arr, dtype=np.uint8))


def one_square_scene(
    x=5, y=5, side=20, intensity=200, vx=0, vy=0, width=64, height=48, background=16
) -> SyntheticScene:
    return SyntheticScene(
        width=width,
        height=height,
        squares=(MovingSquare(x=x, y=y, side=side, intensity=intensity, vx=vx, vy=vy),),
        background_intensity=background,
    )


def random_payload(rnd: random.Random):
    """Randomized payload generator: the oracle space for round-trip tests."""
    kind = rnd.randrange(7)
    if kind == 0:
        return EMPTY
    if kind == 1:
        fmt = rnd.choice([PixelFormat.GRAY8, PixelFormat.RGB24])
        w, h = rnd.randrange(1, 9), rnd.randrange(1, 9)
        n = w * h * (1 if fmt is PixelFormat.GRAY8 else 3)
        return Frame(w, h, fmt, bytes(rnd.randrange(256) for _ in range(n)))
    if kind == 2:
        return DetectionList(
            detections=tuple(
                Detection(
                    x=rnd.randrange(-5, 100),
                    y=rnd.randrange(-5, 100),
                    w=rnd.randrange(1, 40),
                    h=rnd.randrange(1, 40),
                    score=rnd.random(),
                    label=rnd.choice(["", "blob", "face", "体"]),
                    detection_id=rnd.randrange(2**32),
                )
                for _ in range(rnd.randrange(4))
            )
        )
    if kind == 3:
        return TemplateList(
            templates=tuple(
                Template(
                    vector=tuple(rnd.uniform(-2, 2) for _ in range(rnd.randrange(1, 9))),
                    modality=rnd.choice(["face", "gait", "demo"]),
                    subject_id=rnd.choice([None, "s1", "субъект"]),
                )
                for _ in range(rnd.randrange(3))
            )
        )
    if kind == 4:
        key_id = bytes(rnd.randrange(256) for _ in range(32))
        scale = rnd.choice([1, 1 << 16])
        return EncryptedTemplateList(
            templates=tuple(
                EncryptedTemplate(
                    ciphertexts=tuple(
                        PheCiphertext(
                            value=rnd.randrange(1, 2**64), key_id=key_id, scale=scale
                        )
                        for _ in range(rnd.randrange(1, 5))
                    ),
                    key_id=key_id,
                    scale=scale,
                    subject_id=rnd.choice([None, "enc"]),
                )
                for _ in range(rnd.randrange(2))
            )
        )
    if kind == 5:
        nr, nc = rnd.randrange(3), rnd.randrange(3)
        return ScoreMatrix(
            rows=tuple(f"p{i}" for i in range(nr)),
            cols=tuple(f"g{i}" for i in range(nc)),
            scores=tuple(rnd.uniform(-1, 1) for _ in range(nr * nc)),
        )
    return Generic(
        content_type=rnd.choice(["application/json", "x/void"]),
        data=bytes(rnd.randrange(256) for _ in range(rnd.randrange(64))),
    )


def random_record(rnd: random.Random):
    return new_record(
        payload=random_payload(rnd),
        target=rnd.choice(["", "svc/worker", "detect"]),
        source_id=rnd.choice(["", "cam0", "synthetic:x"]),
        sequence_no=rnd.randrange(2**31),
        options={f"k{i}": f"v{rnd.randrange(10)}" for i in range(rnd.randrange(4))},
        record_id=uuid.UUID(int=rnd.getrandbits(128)),
        timestamp_us=rnd.randrange(2**60),
    )
