"""Channel security: identity generation and TLS socket wrapping.

Identities are self-signed X.509 certificates over RSA-2048/4096 or Ed25519
keys, valid for 825 days, written as PEM with the private key file mode
restricted. Connections are protected with standard TLS (modern defaults,
1.3 preferred): confidentiality, integrity, and server authentication
against a pinned trust root, plus client authentication when
require_client_auth is set. A failed handshake refuses the connection
before any record bytes flow.

Security is off by default for loopback experiments; establishing a
plaintext session logs a warning so the opt-out stays visible.
"""

from __future__ import annotations

import datetime
import logging
import socket
import ssl
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, rsa
from cryptography.x509.oid import NameOID

from .errors import BadCredentials, HandshakeFailure

log = logging.getLogger("faro2.security")

CERT_VALIDITY_DAYS = 825


class KeyAlgo(Enum):
    RSA_2048 = "rsa-2048"
    RSA_4096 = "rsa-4096"
    ED25519 = "ed25519"


@dataclass
class SecurityConfig:
    enabled: bool = False
    key_algo: KeyAlgo = KeyAlgo.ED25519
    cert_path: Optional[str] = None
    key_path: Optional[str] = None
    trust_root_path: Optional[str] = None
    require_client_auth: bool = False

    @classmethod
    def from_json(cls, doc: Optional[dict]) -> "SecurityConfig":
        if not doc:
            return cls()
        return cls(
            enabled=bool(doc.get("enabled", False)),
            key_algo=KeyAlgo(doc.get("key_algo", "ed25519")),
            cert_path=doc.get("cert_path"),
            key_path=doc.get("key_path"),
            trust_root_path=doc.get("trust_root_path"),
            require_client_auth=bool(doc.get("require_client_auth", False)),
        )

    def validate_for_server(self) -> None:
        if not self.enabled:
            return
        for label, path in (("cert", self.cert_path), ("key", self.key_path)):
            if not path or not Path(path).is_file():
                raise BadCredentials(f"security enabled but {label}_path is unreadable: {path}")
        if self.require_client_auth and not (
            self.trust_root_path and Path(self.trust_root_path).is_file()
        ):
            raise BadCredentials("client auth requires a readable trust_root_path")
        _check_key_matches_cert(self.cert_path, self.key_path)


def _check_key_matches_cert(cert_path: str, key_path: str) -> None:
    cert = x509.load_pem_x509_certificate(Path(cert_path).read_bytes())
    key = serialization.load_pem_private_key(Path(key_path).read_bytes(), password=None)
    cert_pub = cert.public_key().public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    key_pub = key.public_key().public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    if cert_pub != key_pub:
        raise BadCredentials(f"{key_path} does not match certificate {cert_path}")


def generate_identity(
    name: str, key_algo: KeyAlgo, out_dir: str | Path
) -> tuple[Path, Path]:
    """Write <name>.crt and <name>.key PEM files; returns their paths."""
    out_dir = Path(out_dir)
    if key_algo is KeyAlgo.ED25519:
        key = ed25519.Ed25519PrivateKey.generate()
        sign_hash = None
    else:
        bits = 2048 if key_algo is KeyAlgo.RSA_2048 else 4096
        key = rsa.generate_private_key(public_exponent=65537, key_size=bits)
        sign_hash = hashes.SHA256()

    subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, name)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=CERT_VALIDITY_DAYS))
        .add_extension(x509.SubjectAlternativeName([x509.DNSName(name)]), critical=False)
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(key, sign_hash)
    )

    cert_path = out_dir / f"{name}.crt"
    key_path = out_dir / f"{name}.key"
    try:
        cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        key_path.write_bytes(
            key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )
        key_path.chmod(0o600)
    except OSError as exc:
        raise OSError(f"cannot write identity files under {out_dir}: {exc}") from exc
    return cert_path, key_path


def server_context(config: SecurityConfig) -> Optional[ssl.SSLContext]:
    if not config.enabled:
        return None
    config.validate_for_server()
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    try:
        ctx.load_cert_chain(config.cert_path, config.key_path)
    except ssl.SSLError as exc:
        raise BadCredentials(f"cannot load identity: {exc}") from exc
    if config.require_client_auth:
        ctx.verify_mode = ssl.CERT_REQUIRED
        ctx.load_verify_locations(config.trust_root_path)
    return ctx


def client_context(config: SecurityConfig) -> Optional[ssl.SSLContext]:
    if not config.enabled:
        return None
    if not config.trust_root_path or not Path(config.trust_root_path).is_file():
        raise BadCredentials(f"trust_root_path unreadable: {config.trust_root_path}")
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    # the trust root itself pins the peer identity; endpoints are addressed
    # by discovered ip:port, so hostname checking is off while chain
    # verification stays mandatory
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_REQUIRED
    ctx.load_verify_locations(config.trust_root_path)
    if config.cert_path and config.key_path:
        try:
            ctx.load_cert_chain(config.cert_path, config.key_path)
        except ssl.SSLError as exc:
            raise BadCredentials(f"cannot load client identity: {exc}") from exc
    return ctx


def secure_connect(
    sock: socket.socket, config: SecurityConfig, endpoint: str = ""
) -> socket.socket:
    """Wrap a connected client socket per config; plaintext logs a warning."""
    ctx = client_context(config)
    if ctx is None:
        log.warning("plaintext session to %s (security disabled)", endpoint or "peer")
        return sock
    try:
        return ctx.wrap_socket(sock)
    except (ssl.SSLError, ssl.CertificateError, OSError) as exc:
        sock.close()
        raise HandshakeFailure(f"TLS handshake with {endpoint or 'peer'} failed: {exc}") from exc


def secure_accept(
    conn: socket.socket, ctx: Optional[ssl.SSLContext], peer: str = ""
) -> socket.socket:
    """Wrap an accepted server-side socket; raises HandshakeFailure on refusal."""
    if ctx is None:
        log.warning("plaintext session from %s (security disabled)", peer or "peer")
        return conn
    try:
        return ctx.wrap_socket(conn, server_side=True)
    except (ssl.SSLError, ssl.CertificateError, OSError) as exc:
        conn.close()
        raise HandshakeFailure(f"TLS handshake from {peer or 'peer'} failed: {exc}") from exc
