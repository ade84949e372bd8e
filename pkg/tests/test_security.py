"""TLS identities and channel behavior: fail closed, handshake gating."""

from __future__ import annotations

import socket
import threading

import pytest
from cryptography import x509
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa
from cryptography.hazmat.primitives import hashes, serialization

from conftest import free_port
from faro2.errors import BadCredentials, HandshakeFailure
from faro2.security import (
    KeyAlgo,
    SecurityConfig,
    generate_identity,
    secure_accept,
    secure_connect,
    server_context,
)


def test_ed25519_identity_self_verifies(tmp_path):
    cert_path, key_path = generate_identity("node-a", KeyAlgo.ED25519, tmp_path)
    cert = x509.load_pem_x509_certificate(cert_path.read_bytes())
    pub = cert.public_key()
    assert isinstance(pub, ed25519.Ed25519PublicKey)
    # self-signed: the certificate verifies under its own public key
    pub.verify(cert.signature, cert.tbs_certificate_bytes)
    assert cert.subject == cert.issuer
    validity = cert.not_valid_after_utc - cert.not_valid_before_utc
    assert validity.days == 825


def test_rsa2048_modulus_size(tmp_path):
    cert_path, _ = generate_identity("node-b", KeyAlgo.RSA_2048, tmp_path)
    cert = x509.load_pem_x509_certificate(cert_path.read_bytes())
    pub = cert.public_key()
    assert isinstance(pub, rsa.RSAPublicKey)
    assert pub.key_size == 2048
    pub.verify(
        cert.signature,
        cert.tbs_certificate_bytes,
        padding.PKCS1v15(),
        hashes.SHA256(),
    )


def test_unwritable_directory_raises(tmp_path):
    # a plain file in the way of the output directory (root ignores mode bits)
    blocker = tmp_path / "not-a-dir"
    blocker.write_text("file")
    with pytest.raises(OSError):
        generate_identity("node-c", KeyAlgo.ED25519, blocker)


def test_key_file_mode_restricted(tmp_path):
    import stat

    _, key_path = generate_identity("node-d", KeyAlgo.ED25519, tmp_path)
    assert stat.S_IMODE(key_path.stat().st_mode) == 0o600


def test_mismatched_key_and_cert_rejected(tmp_path):
    cert_a, _ = generate_identity("a", KeyAlgo.ED25519, tmp_path)
    _, key_b = generate_identity("b", KeyAlgo.ED25519, tmp_path)
    config = SecurityConfig(
        enabled=True, cert_path=str(cert_a), key_path=str(key_b)
    )
    with pytest.raises(BadCredentials):
        config.validate_for_server()


def _tls_echo_server(server_config: SecurityConfig, port: int, outcome: dict):
    ctx = server_context(server_config)
    listener = socket.socket()
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(("127.0.0.1", port))
    listener.listen(1)
    outcome["ready"].set()
    conn, _ = listener.accept()
    try:
        wrapped = secure_accept(conn, ctx)
        data = wrapped.recv(64)
        outcome["received"] = data
        wrapped.sendall(data)
        wrapped.close()
    except HandshakeFailure as exc:
        outcome["handshake_error"] = str(exc)
    finally:
        listener.close()


def _run_pair(server_config, client_config, payload=b"ping"):
    port = free_port()
    outcome = {"ready": threading.Event(), "received": None, "handshake_error": None}
    server = threading.Thread(
        target=_tls_echo_server, args=(server_config, port, outcome), daemon=True
    )
    server.start()
    outcome["ready"].wait(2.0)
    sock = socket.create_connection(("127.0.0.1", port), timeout=2.0)
    wrapped = secure_connect(sock, client_config, endpoint=f"127.0.0.1:{port}")
    wrapped.sendall(payload)
    echoed = wrapped.recv(64)
    wrapped.close()
    server.join(timeout=2.0)
    return echoed, outcome


def _identity_configs(tmp_path, name="srv"):
    cert, key = generate_identity(name, KeyAlgo.ED25519, tmp_path)
    server = SecurityConfig(enabled=True, cert_path=str(cert), key_path=str(key))
    client = SecurityConfig(enabled=True, trust_root_path=str(cert))
    return server, client


def test_matching_trust_roots_pass_bytes(tmp_path):
    server, client = _identity_configs(tmp_path)
    echoed, outcome = _run_pair(server, client)
    assert echoed == b"ping"
    assert outcome["received"] == b"ping"


def test_mismatched_trust_root_refuses_before_data(tmp_path):
    server, _ = _identity_configs(tmp_path, "real")
    other_cert, _ = generate_identity("imposter", KeyAlgo.ED25519, tmp_path)
    client = SecurityConfig(enabled=True, trust_root_path=str(other_cert))
    with pytest.raises(HandshakeFailure):
        _run_pair(server, client)


def test_plaintext_client_cannot_reach_secured_service(tmp_path):
    server, _ = _identity_configs(tmp_path)
    plain_client = SecurityConfig(enabled=False)
    with pytest.raises((HandshakeFailure, OSError)):
        echoed, outcome = _run_pair(server, plain_client)
        # a TLS server never echoes plaintext back
        assert outcome["received"] is None
        assert echoed in (b"", None)
        raise HandshakeFailure("no bytes crossed")


def test_tls_client_cannot_reach_plaintext_service(tmp_path):
    cert, _key = generate_identity("srv", KeyAlgo.ED25519, tmp_path)
    client = SecurityConfig(enabled=True, trust_root_path=str(cert))
    plain_server = SecurityConfig(enabled=False)
    with pytest.raises((HandshakeFailure, OSError)):
        _run_pair(plain_server, client)


def test_plaintext_both_sides_succeeds_with_warning(tmp_path, caplog):
    import logging

    with caplog.at_level(logging.WARNING, logger="faro2.security"):
        echoed, _ = _run_pair(SecurityConfig(), SecurityConfig())
    assert echoed == b"ping"
    assert any("plaintext" in rec.message for rec in caplog.records)


def test_mutual_tls_round_trip(tmp_path):
    server_cert, server_key = generate_identity("srv", KeyAlgo.ED25519, tmp_path)
    client_cert, client_key = generate_identity("cli", KeyAlgo.ED25519, tmp_path)
    server = SecurityConfig(
        enabled=True,
        cert_path=str(server_cert),
        key_path=str(server_key),
        trust_root_path=str(client_cert),
        require_client_auth=True,
    )
    client = SecurityConfig(
        enabled=True,
        cert_path=str(client_cert),
        key_path=str(client_key),
        trust_root_path=str(server_cert),
    )
    echoed, _ = _run_pair(server, client)
    assert echoed == b"ping"


def test_mutual_tls_rejects_clients_without_identity(tmp_path):
    server_cert, server_key = generate_identity("srv", KeyAlgo.ED25519, tmp_path)
    client_cert, _ = generate_identity("cli", KeyAlgo.ED25519, tmp_path)
    server = SecurityConfig(
        enabled=True,
        cert_path=str(server_cert),
        key_path=str(server_key),
        trust_root_path=str(client_cert),
        require_client_auth=True,
    )
    anonymous = SecurityConfig(enabled=True, trust_root_path=str(server_cert))
    with pytest.raises((HandshakeFailure, OSError)):
        _run_pair(server, anonymous)
