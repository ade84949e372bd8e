"""The `faro` command line.

Operator-facing front end over the client library: serve a node, discover
peers, run detect/extract/enroll/search against a service, declare and list
pipelines, stream sources, export annotated frames (the watch command), and
generate PHE/TLS key material.

Exit codes: 0 success, 1 usage, 2 transport failure, 3 the service answered
an ERROR reply, 4 local validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import discovery, phe, sources
from .client import Client, ClientConfig, RemoteError, RetryPolicy, connect
from .errors import (
    ConnectFailure,
    FaroError,
    HandshakeFailure,
    ResolveFailure,
    SocketUnavailable,
    TransportError,
    ValidationFailed,
)
from .gallery import SearchResult
from .pipeline import PipelineSpec, validate_spec
from .records import DetectionList, Frame, Generic, ScoreMatrix, Template, TemplateList
from .security import KeyAlgo, SecurityConfig, generate_identity
from .service import ServiceConfig, start_service
from .sources import SourceConfig, SourceKind, open_source, read_image, write_image
from .workers import default_registry

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TRANSPORT = 2
EXIT_REMOTE = 3
EXIT_VALIDATION = 4

_TRANSPORT_ERRORS = (
    ResolveFailure,
    ConnectFailure,
    TransportError,
    HandshakeFailure,
    SocketUnavailable,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faro",
        description="distributed inference pipelines with encrypted template storage",
    )
    parser.add_argument("--service", help="target service name (resolved via discovery)")
    parser.add_argument("--endpoint", help="target host:port (bypasses discovery)")
    parser.add_argument("--timeout", type=float, default=10.0, help="call timeout seconds")
    parser.add_argument("--tls", action="store_true", help="encrypt the channel")
    parser.add_argument("--cert", help="client certificate (PEM)")
    parser.add_argument("--key", help="client private key (PEM)")
    parser.add_argument("--trust-root", help="peer trust root certificate (PEM)")
    parser.add_argument("--mtls", action="store_true", help="require mutual authentication")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("serve", help="run a service node")
    p.add_argument("--config", required=True, help="service config JSON file")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("status", help="query the target service")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("discover", help="browse service announcements")
    p.add_argument("--wait", type=float, default=6.0, help="listen window in seconds")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("detect", help="run detection on one image")
    p.add_argument("image", help="PGM/PPM file")
    p.add_argument("--target", default="demo-detect")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("extract", help="detect then extract templates from one image")
    p.add_argument("image")
    p.add_argument("--detect-target", default="demo-detect")
    p.add_argument("--target", default="demo-extract")
    p.add_argument("--out", help="write templates as CSV instead of stdout")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("enroll", help="enroll an image or template CSV")
    p.add_argument("input", help="PGM/PPM image or template CSV")
    p.add_argument("--subject", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--detect-target", default="demo-detect")
    p.add_argument("--extract-target", default="demo-extract")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("search", help="search a gallery with an image or template CSV")
    p.add_argument("input")
    p.add_argument("--gallery", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--phe-key", help="private key JSON for encrypted galleries")
    p.add_argument("--detect-target", default="demo-detect")
    p.add_argument("--extract-target", default="demo-extract")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gallery", help="gallery maintenance")
    gsub = p.add_subparsers(dest="gallery_cmd", required=True)
    gl = gsub.add_parser("list")
    gl.add_argument("--gallery", required=True)
    gl.add_argument("--page", type=int, default=0)
    gl.add_argument("--page-size", type=int, default=50)
    gl.set_defaults(func=cmd_gallery_list)
    gd = gsub.add_parser("delete")
    gd.add_argument("--gallery", required=True)
    group = gd.add_mutually_exclusive_group(required=True)
    group.add_argument("--subject")
    group.add_argument("--entry-id")
    gd.set_defaults(func=cmd_gallery_delete)

    p = sub.add_parser("pdeclare", help="declare a pipeline from a spec file")
    p.add_argument("spec", help="pipeline spec JSON file")
    p.set_defaults(func=cmd_pdeclare)

    p = sub.add_parser("plist", help="list pipelines on the target service")
    p.set_defaults(func=cmd_plist)

    p = sub.add_parser("call", help="generalized worker call")
    p.add_argument("--target", required=True, help="svc/name or local name")
    p.add_argument("--input", required=True, help="payload file (.pgm/.ppm/.json/other)")
    p.add_argument("--option", action="append", default=[], metavar="K=V")
    p.set_defaults(func=cmd_call)

    p = sub.add_parser("stream", help="stream a source at a target")
    _add_source_args(p)
    p.add_argument("--target", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--fifo", action="store_true")
    mode.add_argument("--unordered", action="store_true")
    p.add_argument("--retries", type=int, default=0)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("watch", help="stream and export annotated frames + scores CSV")
    _add_source_args(p)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser("keygen-phe", help="generate a Paillier keypair")
    p.add_argument("--bits", type=int, default=phe.DEFAULT_KEY_BITS)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--name", default="phe")
    p.set_defaults(func=cmd_keygen_phe)

    p = sub.add_parser("keygen-tls", help="generate a self-signed TLS identity")
    p.add_argument("--algo", choices=[a.value for a in KeyAlgo], default="ed25519")
    p.add_argument("--name", required=True, help="certificate common name")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_keygen_tls)

    p = sub.add_parser("bench-phe", help="encryption/inversion timing sweep")
    p.add_argument("--dims", default="1..1024", help="doubling sweep A..B or comma list")
    p.add_argument("--bits", type=int, default=phe.DEFAULT_KEY_BITS)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--skip-naive", action="store_true")
    p.set_defaults(func=cmd_bench_phe)

    return parser


def _add_source_args(p: argparse.ArgumentParser):
    p.add_argument("--source", required=True,
                   help="frame directory, or synthetic[:seed]")
    p.add_argument("--frames", type=int, default=100, help="synthetic frame count")
    p.add_argument("--fps", type=float, help="frame pacing limit")
    p.add_argument("--loop", action="store_true")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "cmd", None) is None:
        parser.print_usage()
        return EXIT_USAGE
    try:
        return args.func(args)
    except _TRANSPORT_ERRORS as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except RemoteError as exc:
        print(f"remote error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except ValidationFailed as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FaroError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_OK


# -- plumbing ---------------------------------------------------------------


def _security_from_args(args) -> SecurityConfig:
    return SecurityConfig(
        enabled=bool(args.tls),
        cert_path=args.cert,
        key_path=args.key,
        trust_root_path=args.trust_root,
        require_client_auth=bool(args.mtls),
    )


def _client(args, retries: int = 0) -> Client:
    service = args.service or os.environ.get("FARO_SERVICE")
    endpoint_raw = args.endpoint or os.environ.get("FARO_ENDPOINT")
    endpoint = None
    if endpoint_raw:
        host, _, port = endpoint_raw.rpartition(":")
        endpoint = (host, int(port))
    if service and endpoint:
        endpoint = None  # explicit name wins; recursion reaches the rest
    if not service and not endpoint:
        raise ValueError("pass --service or --endpoint (or FARO_SERVICE/FARO_ENDPOINT)")
    config = ClientConfig(
        service_name=service if not endpoint else None,
        endpoint=endpoint,
        security=_security_from_args(args),
        timeout_ms=int(args.timeout * 1000),
        retry=RetryPolicy(attempts=retries),
    )
    return connect(config)


def _load_template_csv(path: Path) -> Template:
    line = path.read_text().strip().splitlines()[0]
    return Template(vector=tuple(float(v) for v in line.split(",")))


def _probe_from_input(args, client: Client) -> Template:
    path = Path(args.input)
    if path.suffix.lower() in (".pgm", ".ppm"):
        frame = read_image(path)
        detections = client.call_detect(frame, target=args.detect_target)
        if not detections.detections:
            raise FaroError(f"{path}: no detections to extract a template from")
        templates = client.call_extract(frame, detections, target=args.extract_target)
        return templates.templates[0]
    return _load_template_csv(path)


def _build_source(args) -> sources.Source:
    spec = args.source
    if spec.startswith("synthetic"):
        _, _, seed = spec.partition(":")
        config = SourceConfig(
            kind=SourceKind.SYNTHETIC,
            path_or_seed=seed or "default",
            fps_limit=args.fps,
            loop=args.loop,
            frame_count=args.frames,
        )
    else:
        config = SourceConfig(
            kind=SourceKind.IMAGE_SEQUENCE,
            path_or_seed=spec,
            fps_limit=args.fps,
            loop=args.loop,
        )
    return open_source(config)


# -- commands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    config = ServiceConfig.from_file(args.config)
    service = start_service(config, registry=default_registry())
    print(f"service {service.name} on {service.endpoint[0]}:{service.endpoint[1]}")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return EXIT_OK


def cmd_status(args) -> int:
    client = _client(args)
    try:
        print(json.dumps(client.call_status(), indent=2))
    finally:
        client.close()
    return EXIT_OK


def cmd_discover(args) -> int:
    snap = discovery.browse(args.wait)
    for name in snap.names():
        ann = snap.services[name]
        print(
            f"{name}\t{ann.host}:{ann.port}\tv{ann.version}\t"
            f"workers={','.join(ann.workers)}\tpipelines={','.join(ann.pipelines)}"
        )
    return EXIT_OK


def cmd_detect(args) -> int:
    client = _client(args)
    try:
        detections = client.call_detect(read_image(args.image), target=args.target)
        for d in detections.detections:
            print(json.dumps({
                "box": [d.x, d.y, d.w, d.h], "score": round(d.score, 6),
                "label": d.label, "id": d.detection_id,
            }))
    finally:
        client.close()
    return EXIT_OK


def cmd_extract(args) -> int:
    client = _client(args)
    try:
        frame = read_image(args.image)
        detections = client.call_detect(frame, target=args.detect_target)
        templates = client.call_extract(frame, detections, target=args.target)
        lines = [",".join(f"{v:.12g}" for v in t.vector) for t in templates.templates]
        if args.out:
            Path(args.out).write_text("\n".join(lines) + "\n")
        else:
            for line in lines:
                print(line)
    finally:
        client.close()
    return EXIT_OK


def cmd_enroll(args) -> int:
    client = _client(args)
    try:
        args.input = args.input  # probe builder reads args.input
        template = _probe_from_input(args, client)
        entry_id = client.call_enroll(template, args.subject, args.gallery)
        print(entry_id)
    finally:
        client.close()
    return EXIT_OK


def cmd_search(args) -> int:
    client = _client(args)
    try:
        probe = _probe_from_input(args, client)
        key_holder = phe.load_keypair(args.phe_key) if args.phe_key else None
        result: SearchResult = client.call_search(
            probe, args.gallery, top_k=args.top_k, key_holder=key_holder
        )
        for rank, hit in enumerate(result.hits, start=1):
            print(f"{rank}\t{hit.subject_id}\t{hit.score:.6f}\t{hit.entry_id.hex}")
    finally:
        client.close()
    return EXIT_OK


def cmd_gallery_list(args) -> int:
    client = _client(args)
    try:
        doc = client.gallery_list(args.gallery, page=args.page, page_size=args.page_size)
        print(json.dumps(doc, indent=2))
    finally:
        client.close()
    return EXIT_OK


def cmd_gallery_delete(args) -> int:
    import uuid as _uuid

    client = _client(args)
    try:
        selector = _uuid.UUID(hex=args.entry_id) if args.entry_id else args.subject
        removed = client.gallery_delete(args.gallery, selector)
        print(f"removed {removed}")
    finally:
        client.close()
    return EXIT_OK


def cmd_pdeclare(args) -> int:
    spec = PipelineSpec.from_json(Path(args.spec).read_text())
    report = validate_spec(spec)
    if not report.ok:
        raise ValidationFailed(report)
    client = _client(args)
    try:
        doc = client.declare_pipeline(spec)
        print(f"declared {doc['declared']}")
    finally:
        client.close()
    return EXIT_OK


def cmd_plist(args) -> int:
    client = _client(args)
    try:
        caps = client.list_capabilities()
        for pipe in caps.get("pipelines", []):
            print(f"{pipe['name']}\t{pipe['mode']}\tnodes={','.join(pipe['nodes'])}")
    finally:
        client.close()
    return EXIT_OK


def cmd_call(args) -> int:
    path = Path(args.input)
    if path.suffix.lower() in (".pgm", ".ppm"):
        payload = read_image(path)
    elif path.suffix.lower() == ".json":
        payload = Generic("application/json", path.read_bytes())
    else:
        payload = Generic("application/octet-stream", path.read_bytes())
    options = {}
    for item in args.option:
        k, _, v = item.partition("=")
        options[k] = v
    client = _client(args)
    try:
        reply = client.call_generic(args.target, payload, options)
        if not reply.ok:
            raise RemoteError(reply.error.code, reply.error.message)
        print(_summarize_payload(reply.payload))
    finally:
        client.close()
    return EXIT_OK


def _summarize_payload(payload) -> str:
    if isinstance(payload, Generic):
        if payload.content_type == "application/json":
            return payload.data.decode("utf-8")
        return f"Generic[{payload.content_type}] {len(payload.data)} bytes"
    if isinstance(payload, DetectionList):
        return json.dumps([[d.x, d.y, d.w, d.h, round(d.score, 4)] for d in payload.detections])
    if isinstance(payload, TemplateList):
        return json.dumps([len(t.vector) for t in payload.templates])
    if isinstance(payload, Frame):
        return f"Frame {payload.width}x{payload.height} {payload.pixel_format.name}"
    if isinstance(payload, ScoreMatrix):
        return json.dumps({"rows": payload.rows, "cols": payload.cols,
                           "scores": [round(s, 6) for s in payload.scores]})
    return type(payload).__name__


def cmd_stream(args) -> int:
    mode = "fifo" if args.fifo else "unordered"
    source = _build_source(args)
    client = _client(args, retries=args.retries)
    errors = 0
    try:
        session = client.stream_source(source, args.target, mode=mode)
        for reply in session:
            if not reply.ok:
                errors += 1
        s = session.summary
        print(
            f"sent={s.sent} ok={s.ok} error={s.error} "
            f"wall={s.wall_clock_s:.3f}s mean_latency={s.mean_latency_s * 1e3:.1f}ms"
        )
    finally:
        client.close()
    if errors:
        return EXIT_REMOTE
    return EXIT_OK


def cmd_watch(args) -> int:
    """File-based watch: annotated PPM frames plus a scores CSV."""
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = _build_source(args)
    client = _client(args)
    frames_by_id = {}
    rows = []
    try:
        session = client.stream_source(source, args.target, mode="fifo")

        def remember(record):
            frames_by_id[record.record_id] = record
            return record

        # wrap the source so sent frames stay addressable for annotation
        original_grab = source.grab

        def grab_and_remember():
            record = original_grab()
            if record is not None:
                remember(record)
            return record

        source.grab = grab_and_remember  # type: ignore[method-assign]

        for reply in session:
            record = frames_by_id.pop(reply.record_id, None)
            if record is None or not isinstance(record.payload, Frame):
                continue
            seq = record.sequence_no
            annotated = record.payload
            if isinstance(reply.payload, DetectionList):
                annotated = _annotate(record.payload, reply.payload)
                for d in reply.payload.detections:
                    rows.append((seq, d.label or "", d.score))
            elif isinstance(reply.payload, ScoreMatrix) and reply.payload.cols:
                m = reply.payload
                for r, row_id in enumerate(m.rows):
                    best = max(range(len(m.cols)), key=lambda c: m.at(r, c))
                    rows.append((seq, m.cols[best], m.at(r, best)))
            write_image(out_dir / f"frame_{seq:06d}.ppm", _to_rgb(annotated))
        with open(out_dir / "scores.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_seq", "subject_id", "score"])
            writer.writerows(rows)
        print(f"wrote {len(rows)} score rows to {out_dir / 'scores.csv'}")
    finally:
        client.close()
    return EXIT_OK


def _to_rgb(frame: Frame) -> Frame:
    arr = frame.to_array()
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=2)
    return Frame.from_array(arr)


def _annotate(frame: Frame, detections: DetectionList) -> Frame:
    arr = _to_rgb(frame).to_array()
    for d in detections.detections:
        x0, y0 = max(d.x, 0), max(d.y, 0)
        x1 = min(d.x + d.w - 1, frame.width - 1)
        y1 = min(d.y + d.h - 1, frame.height - 1)
        arr[y0, x0 : x1 + 1] = (255, 32, 32)
        arr[y1, x0 : x1 + 1] = (255, 32, 32)
        arr[y0 : y1 + 1, x0] = (255, 32, 32)
        arr[y0 : y1 + 1, x1] = (255, 32, 32)
    return Frame.from_array(arr)


def cmd_keygen_phe(args) -> int:
    keypair = phe.keygen(args.bits)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pub_path = out / f"{args.name}.pub.json"
    key_path = out / f"{args.name}.key.json"
    phe.save_public_key(keypair.public, pub_path)
    phe.save_keypair(keypair, key_path)
    print(f"{pub_path}\n{key_path}")
    return EXIT_OK


def cmd_keygen_tls(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cert_path, key_path = generate_identity(args.name, KeyAlgo(args.algo), out)
    print(f"{cert_path}\n{key_path}")
    return EXIT_OK


def _parse_dims(spec: str) -> list[int]:
    if ".." in spec:
        lo, _, hi = spec.partition("..")
        lo_i, hi_i = int(lo), int(hi)
        dims = []
        d = max(lo_i, 1)
        while d <= hi_i:
            dims.append(d)
            d *= 2
        return dims
    return [int(x) for x in spec.split(",")]


def cmd_bench_phe(args) -> int:
    dims = _parse_dims(args.dims)
    rows = bench_phe_sweep(dims, bits=args.bits, include_naive=not args.skip_naive)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(rows[0].keys())
        for row in rows:
            writer.writerow(row.values())
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def bench_phe_sweep(dims: list[int], bits: int, include_naive: bool = True) -> list[dict]:
    """Template encryption and modular-inversion timings per dimension.

    Columns compare the batched inversion path against per-element optimized
    inversion and (optionally) the schoolbook recursive baseline.
    """
    import math
    import secrets as _secrets

    keypair = phe.keygen(bits)
    pub = keypair.public
    rng = np.random.default_rng(2024)
    rows = []
    # warm up once so the first row is not paying import costs
    phe.encrypt_template(pub, Template(vector=(0.5,)), scale=phe.DEFAULT_SCALE)
    sysrand = _secrets.SystemRandom()
    for d in dims:
        template = Template(vector=tuple(float(x) for x in rng.uniform(-1, 1, size=d)))
        t0 = time.perf_counter()
        phe.encrypt_template(pub, template, scale=phe.DEFAULT_SCALE)
        encrypt_s = time.perf_counter() - t0

        values = []
        while len(values) < d:
            v = sysrand.randrange(1, pub.n_squared)
            if math.gcd(v, pub.n_squared) == 1:
                values.append(v)
        t0 = time.perf_counter()
        batch = phe.batch_mod_inverse(values, pub.n_squared)
        batch_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        loop = [phe.mod_inverse(v, pub.n_squared) for v in values]
        loop_s = time.perf_counter() - t0
        assert batch == loop
        row = {
            "dims": d,
            "bits": bits,
            "encrypt_seconds": round(encrypt_s, 6),
            "per_element_ms": round(encrypt_s / d * 1e3, 6),
            "batch_inverse_seconds": round(batch_s, 6),
            "loop_inverse_seconds": round(loop_s, 6),
        }
        if include_naive:
            t0 = time.perf_counter()
            for v in values:
                phe.naive_mod_inverse(v, pub.n_squared)
            row["naive_inverse_seconds"] = round(time.perf_counter() - t0, 6)
        rows.append(row)
    return rows


if __name__ == "__main__":
    sys.exit(main())
