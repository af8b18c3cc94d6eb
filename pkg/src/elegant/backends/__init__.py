"""Model capability clients, wire protocol, and deterministic mock playback."""

from .protocol import (
    BackendConfig,
    BackendExchange,
    EmbeddingVector,
    Role,
    VqaAnswer,
    build_complete_request,
    build_detect_request,
    build_embed_image_request,
    build_embed_text_request,
    build_vqa_request,
    canonical_json,
    load_schema,
    request_sha256,
    validate_payload,
)
from .roles import (
    BackendSet,
    EmbedderClient,
    ObserverClient,
    ThinkerClient,
    VerifierClient,
    build_backends,
)
from .transport import (
    FixtureEntry,
    FixtureStore,
    LiveTransport,
    MockTransport,
    RecordingTransport,
    dump_fixtures,
)

__all__ = [
    "BackendConfig",
    "BackendExchange",
    "BackendSet",
    "EmbedderClient",
    "EmbeddingVector",
    "FixtureEntry",
    "FixtureStore",
    "LiveTransport",
    "MockTransport",
    "ObserverClient",
    "RecordingTransport",
    "Role",
    "ThinkerClient",
    "VerifierClient",
    "VqaAnswer",
    "build_backends",
    "build_complete_request",
    "build_detect_request",
    "build_embed_image_request",
    "build_embed_text_request",
    "build_vqa_request",
    "canonical_json",
    "dump_fixtures",
    "load_schema",
    "request_sha256",
    "validate_payload",
]
