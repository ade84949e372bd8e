"""Persistent template galleries: enrollment, deletion, search.

Two backends share one contract. PlainGallery stores raw templates and
scores probes by cosine similarity. PheGallery stores only Paillier
ciphertexts: plaintext templates are encrypted at ingress with the gallery's
public key and discarded, so the hosting service can never leak them.

Encrypted search is a two-party protocol. The matcher (this module, holding
only the public key) computes an element-wise encrypted difference between
every stored template and the plaintext probe, batching all the ciphertext
inversions for the probe into a single extended-Euclidean call. The
private-key holder (the searching client, or any designated key-holder)
decrypts the difference vectors, sums absolute values into an L1 distance,
and ranks by negative L1. A probe identical to an enrolled template scores
exactly 0 because the arithmetic is integer-exact.

Persistence is an append-only record log (".fgal"): every record carries an
8-byte digest trailer, loads replay the log, and snapshot writes are atomic
(write-temp then rename).
"""

from __future__ import annotations

import math
import struct
import threading
import uuid
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import phe
from .errors import (
    CorruptStore,
    DimensionMismatch,
    KeyHolderUnavailable,
    KeyMismatch,
    ScaleMismatch,
    StorageError,
)
from .records import EncryptedTemplate, EncryptedTemplateList, Template, TemplateList, now_us
from .wire import decode_payload_block, encode_payload_block
from ._hashing import record_digest

STORE_MAGIC = b"FGAL1"
_REC_HEADER = 1
_REC_ENTRY = 2
_REC_TOMBSTONE = 3
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")


class ScoreKind(Enum):
    COSINE = "cosine"
    NEG_L1 = "neg_l1"
    DOT = "dot"


@dataclass(frozen=True)
class GalleryEntry:
    entry_id: uuid.UUID
    subject_id: str
    template: Union[Template, EncryptedTemplate]
    modality: str
    enrolled_at: int  # microseconds since epoch
    source_meta: dict[str, str]

    @property
    def dims(self) -> int:
        return self.template.dims


@dataclass(frozen=True)
class SearchHit:
    subject_id: str
    entry_id: uuid.UUID
    score: float


@dataclass(frozen=True)
class SearchResult:
    hits: tuple[SearchHit, ...]
    score_kind: ScoreKind


def _ranked(scored: list[tuple[float, GalleryEntry]], top_k: int, kind: ScoreKind) -> SearchResult:
    # descending score; equal scores ordered by entry_id ascending
    scored.sort(key=lambda t: (-t[0], t[1].entry_id.bytes))
    hits = tuple(
        SearchHit(subject_id=e.subject_id, entry_id=e.entry_id, score=s)
        for s, e in scored[: max(top_k, 0)]
    )
    return SearchResult(hits=hits, score_kind=kind)


class BaseGallery:
    """Shared bookkeeping: entries, dimension pinning, log persistence."""

    backend = "plain"

    def __init__(self, name: str, path: Optional[str | Path] = None):
        self.name = name
        self.path = Path(path) if path else None
        self.dim: Optional[int] = None
        self._entries: list[GalleryEntry] = []
        self._lock = threading.RLock()
        if self.path is not None and not self.path.exists():
            self._write_snapshot(self.path)

    # -- mutation ---------------------------------------------------------

    def enroll(
        self,
        subject_id: str,
        template: Union[Template, EncryptedTemplate],
        meta: Optional[dict[str, str]] = None,
    ) -> uuid.UUID:
        template = self._ingest(template)
        with self._lock:
            if self.dim is None:
                self.dim = template.dims
            elif template.dims != self.dim:
                raise DimensionMismatch(
                    f"gallery {self.name!r} holds {self.dim}-dim templates, "
                    f"got {template.dims}"
                )
            entry = GalleryEntry(
                entry_id=uuid.uuid4(),
                subject_id=subject_id,
                template=template,
                modality=template.modality,
                enrolled_at=now_us(),
                source_meta=dict(meta or {}),
            )
            self._entries.append(entry)
            if self.path is not None:
                self._append_record(_REC_ENTRY, _encode_entry(entry))
            return entry.entry_id

    def delete(self, selector: Union[uuid.UUID, str]) -> int:
        with self._lock:
            if isinstance(selector, uuid.UUID):
                keep = [e for e in self._entries if e.entry_id != selector]
            else:
                keep = [e for e in self._entries if e.subject_id != selector]
            removed = len(self._entries) - len(keep)
            if removed:
                self._entries = keep
                if self.path is not None:
                    self._append_record(_REC_TOMBSTONE, _encode_tombstone(selector))
            return removed

    def _ingest(self, template):
        raise NotImplementedError

    # -- queries ----------------------------------------------------------

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def entries_snapshot(self) -> list[GalleryEntry]:
        with self._lock:
            return list(self._entries)

    def list_entries(self, page: int = 0, page_size: int = 50) -> tuple[list[GalleryEntry], int]:
        if page < 0 or page_size < 1:
            raise ValueError("page must be >= 0 and page_size >= 1")
        ordered = sorted(
            self.entries_snapshot(), key=lambda e: (e.enrolled_at, e.entry_id.bytes)
        )
        start = page * page_size
        return ordered[start : start + page_size], len(ordered)

    def _check_probe(self, probe: Template) -> None:
        if self.dim is not None and probe.dims != self.dim:
            raise DimensionMismatch(
                f"probe has {probe.dims} dims, gallery holds {self.dim}"
            )

    # -- persistence ------------------------------------------------------

    def _header_body(self) -> bytes:
        body = bytes([0 if self.backend == "plain" else 1])
        body += _lp(self.name.encode("utf-8"))
        body += self._header_extra()
        return body

    def _header_extra(self) -> bytes:
        return b""

    def _append_record(self, rec_type: int, body: bytes) -> None:
        try:
            with open(self.path, "ab") as fh:
                fh.write(_frame_record(rec_type, body))
        except OSError as exc:
            raise StorageError(f"cannot append to {self.path}: {exc}") from exc

    def _write_snapshot(self, path: Path) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(STORE_MAGIC)
                fh.write(_frame_record(_REC_HEADER, self._header_body()))
                for entry in self._entries:
                    fh.write(_frame_record(_REC_ENTRY, _encode_entry(entry)))
            tmp.replace(path)
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc

    def persist(self, path: Optional[str | Path] = None) -> Path:
        """Write an atomic snapshot; defaults to the bound path."""
        target = Path(path) if path else self.path
        if target is None:
            raise StorageError("gallery has no backing path; pass one to persist()")
        with self._lock:
            self._write_snapshot(target)
        return target


class PlainGallery(BaseGallery):
    backend = "plain"

    def _ingest(self, template):
        if not isinstance(template, Template):
            raise StorageError("plaintext gallery only stores plaintext templates")
        return template

    def search(self, probe: Template, top_k: int = 10) -> SearchResult:
        """Cosine similarity ranking over all enrolled templates."""
        self._check_probe(probe)
        p = np.asarray(probe.vector, dtype=np.float64)
        p_norm = float(np.linalg.norm(p))
        scored = []
        for entry in self.entries_snapshot():
            g = np.asarray(entry.template.vector, dtype=np.float64)
            denom = p_norm * float(np.linalg.norm(g))
            score = float(p @ g) / denom if denom > 0 else 0.0
            scored.append((score, entry))
        return _ranked(scored, top_k, ScoreKind.COSINE)


class PheGallery(BaseGallery):
    """Gallery whose entries exist only as Paillier ciphertexts."""

    backend = "phe"

    def __init__(
        self,
        name: str,
        public_key: phe.PhePublicKey,
        scale: int = phe.DEFAULT_SCALE,
        path: Optional[str | Path] = None,
    ):
        self.public_key = public_key
        self.scale = scale
        super().__init__(name, path)

    def _header_extra(self) -> bytes:
        n = self.public_key.n
        return _lp(str(n).encode("ascii")) + struct.pack("<Q", self.scale)

    def _ingest(self, template):
        if isinstance(template, Template):
            # plaintext encrypted at ingress; the plaintext is not retained
            return phe.encrypt_template(self.public_key, template, scale=self.scale)
        if isinstance(template, EncryptedTemplate):
            if template.key_id != self.public_key.key_id:
                raise KeyMismatch("template encrypted under a different key")
            if template.scale != self.scale:
                raise ScaleMismatch(
                    f"template scale {template.scale} != gallery scale {self.scale}"
                )
            return template
        raise StorageError(f"cannot enroll {type(template).__name__}")

    def encrypted_differences(
        self, probe: Template
    ) -> list[tuple[GalleryEntry, EncryptedTemplate]]:
        """Matcher phase: encrypted (gallery - probe) per entry.

        One batched inversion covers the probe factors for the whole scan.
        """
        self._check_probe(probe)
        entries = self.entries_snapshot()
        if not entries:
            return []
        inv = phe.probe_difference_factors(self.public_key, self.scale, probe, dims=self.dim)
        return [
            (e, phe.apply_difference_factors(self.public_key, e.template, inv))
            for e in entries
        ]

    def search(
        self,
        probe: Template,
        top_k: int = 10,
        key_holder: Optional[phe.PheKeypair] = None,
    ) -> SearchResult:
        """Two-party search run in-process; key_holder finishes the L1 sums."""
        if key_holder is None:
            raise KeyHolderUnavailable(
                "encrypted search needs a private-key holder; pass key_holder="
            )
        diffs = self.encrypted_differences(probe)
        scored = [
            (neg_l1_score(key_holder, diff), entry) for entry, diff in diffs
        ]
        return _ranked(scored, top_k, ScoreKind.NEG_L1)


def neg_l1_score(keypair: phe.PheKeypair, diff: EncryptedTemplate) -> float:
    """Key-holder phase: decrypt a difference vector into a negative L1 score."""
    l1 = 0
    for ct in diff.ciphertexts:
        l1 += abs(phe.decode_mantissa(phe.decrypt(keypair, ct), keypair))
    return -l1 / diff.scale if l1 else 0.0


def rank_differences(
    keypair: phe.PheKeypair,
    diffs: list[tuple[str, uuid.UUID, EncryptedTemplate]],
    top_k: int = 10,
) -> SearchResult:
    """Rank (subject, entry, encrypted difference) triples by negative L1."""
    scored = []
    for subject_id, entry_id, diff in diffs:
        placeholder = GalleryEntry(
            entry_id=entry_id,
            subject_id=subject_id,
            template=diff,
            modality=diff.modality,
            enrolled_at=0,
            source_meta={},
        )
        scored.append((neg_l1_score(keypair, diff), placeholder))
    return _ranked(scored, top_k, ScoreKind.NEG_L1)


# -- log encoding ---------------------------------------------------------------


def _lp(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


def _frame_record(rec_type: int, body: bytes) -> bytes:
    head = bytes([rec_type]) + _U32.pack(len(body))
    return head + body + record_digest(head + body)


def _encode_entry(entry: GalleryEntry) -> bytes:
    if isinstance(entry.template, Template):
        payload = TemplateList(templates=(entry.template,))
        enc_flag = 0
    else:
        payload = EncryptedTemplateList(templates=(entry.template,))
        enc_flag = 1
    body = entry.entry_id.bytes
    body += _lp(entry.subject_id.encode("utf-8"))
    body += _lp(entry.modality.encode("utf-8"))
    body += _I64.pack(entry.enrolled_at)
    body += _U32.pack(len(entry.source_meta))
    for k in sorted(entry.source_meta):
        body += _lp(k.encode("utf-8")) + _lp(entry.source_meta[k].encode("utf-8"))
    body += bytes([enc_flag])
    body += _lp(encode_payload_block(payload))
    return body


def _encode_tombstone(selector: Union[uuid.UUID, str]) -> bytes:
    if isinstance(selector, uuid.UUID):
        return bytes([0]) + selector.bytes
    return bytes([1]) + _lp(selector.encode("utf-8"))


class _LogReader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptStore(f"{self.path}: truncated at offset {self.pos}")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def _decode_entry(body: bytes, path: str) -> GalleryEntry:
    r = _LogReader(body, path)
    entry_id = uuid.UUID(bytes=r.take(16))
    subject = r.lp().decode("utf-8")
    modality = r.lp().decode("utf-8")
    enrolled_at = _I64.unpack(r.take(8))[0]
    meta = {}
    for _ in range(r.u32()):
        k = r.lp().decode("utf-8")
        meta[k] = r.lp().decode("utf-8")
    enc_flag = r.take(1)[0]
    payload = decode_payload_block(r.lp())
    if enc_flag == 0:
        template: Union[Template, EncryptedTemplate] = payload.templates[0]
    else:
        template = payload.templates[0]
    return GalleryEntry(
        entry_id=entry_id,
        subject_id=subject,
        template=template,
        modality=modality,
        enrolled_at=enrolled_at,
        source_meta=meta,
    )


def load_gallery(path: str | Path) -> Union[PlainGallery, PheGallery]:
    """Replay a gallery log; raises CorruptStore on any integrity failure."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if data[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise CorruptStore(f"{path}: bad store magic")
    pos = len(STORE_MAGIC)
    gallery: Optional[Union[PlainGallery, PheGallery]] = None
    while pos < len(data):
        if pos + 5 > len(data):
            raise CorruptStore(f"{path}: truncated record header")
        rec_type = data[pos]
        (body_len,) = _U32.unpack(data[pos + 1 : pos + 5])
        end = pos + 5 + body_len + 8
        if end > len(data):
            raise CorruptStore(f"{path}: truncated record body")
        framed = data[pos : pos + 5 + body_len]
        digest = data[pos + 5 + body_len : end]
        if record_digest(framed) != digest:
            raise CorruptStore(f"{path}: record digest mismatch at offset {pos}")
        body = framed[5:]
        if rec_type == _REC_HEADER:
            gallery = _gallery_from_header(body, str(path))
        elif gallery is None:
            raise CorruptStore(f"{path}: record before header")
        elif rec_type == _REC_ENTRY:
            entry = _decode_entry(body, str(path))
            gallery._entries.append(entry)
            if gallery.dim is None:
                gallery.dim = entry.dims
        elif rec_type == _REC_TOMBSTONE:
            _apply_tombstone(gallery, body, str(path))
        else:
            raise CorruptStore(f"{path}: unknown record type {rec_type}")
        pos = end
    if gallery is None:
        raise CorruptStore(f"{path}: empty store (no header record)")
    gallery.path = path
    return gallery


def _gallery_from_header(body: bytes, path: str) -> Union[PlainGallery, PheGallery]:
    r = _LogReader(body, path)
    backend = r.take(1)[0]
    name = r.lp().decode("utf-8")
    if backend == 0:
        return PlainGallery(name)
    n = int(r.lp().decode("ascii"))
    (scale,) = struct.unpack("<Q", r.take(8))
    return PheGallery(name, phe.public_key_from_n(n), scale=scale)


def _apply_tombstone(gallery: BaseGallery, body: bytes, path: str) -> None:
    r = _LogReader(body, path)
    kind = r.take(1)[0]
    if kind == 0:
        target = uuid.UUID(bytes=r.take(16))
        gallery._entries = [e for e in gallery._entries if e.entry_id != target]
    elif kind == 1:
        subject = r.lp().decode("utf-8")
        gallery._entries = [e for e in gallery._entries if e.subject_id != subject]
    else:
        raise CorruptStore(f"{path}: unknown tombstone kind {kind}")
