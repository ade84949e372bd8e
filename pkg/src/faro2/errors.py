"""Exception hierarchy shared by every faro2 subsystem.

All library errors derive from FaroError so callers can catch the whole
family at an RPC or CLI boundary and convert it into an ERROR reply or an
exit code. Workers never let these escape process(); they become replies.
"""

from __future__ import annotations


class FaroError(Exception):
    """Base class for all faro2 errors."""


# -- message core ------------------------------------------------------------

class InvariantViolation(FaroError):
    """A domain type was constructed with inconsistent fields."""


class MalformedMessage(FaroError):
    """Wire bytes could not be decoded into a record or reply."""


# -- media sources -----------------------------------------------------------

class SourceNotFound(FaroError):
    """The configured source path does not exist or holds no frames."""


class UnsupportedFormat(FaroError):
    """A frame file is not one of the supported raster formats."""


class DecodeError(FaroError):
    """A frame file exists but its pixel data is corrupt or truncated."""


# -- workers -----------------------------------------------------------------

class UnknownWorkerType(FaroError):
    """Requested worker type is not registered."""


class InvalidOptions(FaroError):
    """Worker options contain unknown keys or unparseable values."""


class IncompatibleInput(FaroError):
    """A record's payload is not the kind this worker consumes."""

    code = "INPUT_KIND"


# -- pipelines ---------------------------------------------------------------

class ValidationFailed(FaroError):
    """A pipeline spec failed validation; carries the full report."""

    def __init__(self, report):
        super().__init__(str(report))
        self.report = report


class UnresolvedService(FaroError):
    """A node references a peer service that is not visible."""

    def __init__(self, service_name: str):
        super().__init__(f"service not resolvable: {service_name}")
        self.service_name = service_name


# -- services and routing ----------------------------------------------------

class BindFailure(FaroError):
    """The service could not bind its listen address."""


class BadCredentials(FaroError):
    """Security was enabled but the identity material is unusable."""


class UnknownTarget(FaroError):
    """No local worker or pipeline answers to the routed name."""


class PeerUnavailable(FaroError):
    """The target service is not in the peer table or not reachable."""


class LoopDetected(FaroError):
    """A forwarded record arrived back at a service already in its hop list."""


# -- discovery ---------------------------------------------------------------

class SocketUnavailable(FaroError):
    """The multicast socket could not be opened."""


class NotFound(FaroError):
    """Directory lookup failed: no unexpired announcement for the name."""


# -- secure channel ----------------------------------------------------------

class HandshakeFailure(FaroError):
    """TLS negotiation failed before any record bytes were exchanged."""


# -- partially homomorphic encryption ----------------------------------------

class BadBlinding(FaroError):
    """Supplied blinding value shares a factor with the modulus."""


class KeyMismatch(FaroError):
    """Ciphertext key digest does not match the supplied key."""


class ScaleMismatch(FaroError):
    """Operands were encoded at different fixed-point scales."""


class NotInvertible(FaroError):
    """Value has no modular inverse; carries gcd for diagnostics."""

    def __init__(self, value_gcd: int, index: int | None = None):
        at = "" if index is None else f" at index {index}"
        super().__init__(f"not invertible{at} (gcd={value_gcd})")
        self.gcd = value_gcd
        self.index = index


class Overflow(FaroError):
    """Encoded magnitude left the representable plaintext range."""


class DimensionMismatch(FaroError):
    """Vector operands have different lengths."""


# -- galleries ---------------------------------------------------------------

class StorageError(FaroError):
    """The gallery store could not be written."""


class CorruptStore(FaroError):
    """A persisted gallery failed its integrity checks."""


class KeyHolderUnavailable(FaroError):
    """Encrypted search was requested but no private-key holder is wired in."""


# -- clients -----------------------------------------------------------------

class ResolveFailure(FaroError):
    """Service name did not resolve through discovery."""


class ConnectFailure(FaroError):
    """TCP connection to the service endpoint failed."""


class TransportError(FaroError):
    """The connection dropped or timed out mid-call."""
