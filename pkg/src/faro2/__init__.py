"""faro2: distributed real-time inference pipelines with encrypted storage.

Single-task workers chain into DAG pipelines hosted by network services
that discover each other automatically and route records recursively.
Biometric templates at rest are protected by Paillier partially homomorphic
encryption; channels in motion by TLS.

The subpackages map to the moving parts:

  records / wire      the universal record and reply envelopes and their
                      canonical binary encoding
  sources             frame iterators (image sequences, synthetic scenes)
  workers             the microservice contract, registry, demo workers
  pipeline            DAG validation and ordered/unordered streaming runs
  service / client    the RPC server and the per-service client
  discovery           zero-configuration announce and browse
  security            TLS identities and socket wrapping
  phe                 Paillier keys, homomorphic ops, batch inversion
  gallery             template stores and the two-party encrypted search
  cli                 the `faro` command-line front end
"""

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
    PheCiphertext,
    PixelFormat,
    ReplyStatus,
    ScoreMatrix,
    Template,
    TemplateList,
    new_record,
    validate_reply_pairing,
)
from .wire import deserialize_record, deserialize_reply, serialize_record, serialize_reply

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "DetectionList",
    "EMPTY",
    "Empty",
    "EncryptedTemplate",
    "EncryptedTemplateList",
    "FaroRecord",
    "FaroReply",
    "Frame",
    "Generic",
    "PheCiphertext",
    "PixelFormat",
    "ReplyStatus",
    "ScoreMatrix",
    "Template",
    "TemplateList",
    "new_record",
    "validate_reply_pairing",
    "serialize_record",
    "serialize_reply",
    "deserialize_record",
    "deserialize_reply",
    "__version__",
]
