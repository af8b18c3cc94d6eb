"""Wire protocol for the four model roles: payload builders, validation, types.

Every request/response travels as a JSON object over HTTP POST. The schemas
shipped under ``elegant/schemas`` are the single source of truth; live
adapters validate against the same files. Mock playback keys requests by the
SHA-256 of their canonical JSON rendering.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

import jsonschema

from ..errors import EmptyResponseError, ProtocolError, ValidationError
from ..raster import ImageRef
from ..scene import BBox, Entity, EntitySource, normalize_label


class Role(enum.Enum):
    OBSERVER = "observer"
    THINKER = "thinker"
    VERIFIER = "verifier"
    EMBEDDER = "embedder"

    @property
    def endpoint_path(self) -> str:
        return _ENDPOINTS[self]

    @property
    def token_env(self) -> str:
        return f"ELEGANT_{self.value.upper()}_TOKEN"


_ENDPOINTS = {
    Role.OBSERVER: "/v1/detect",
    Role.THINKER: "/v1/complete",
    Role.VERIFIER: "/v1/vqa",
    Role.EMBEDDER: "/v1/embed",
}

SCHEMA_NAMES = (
    "detect_request",
    "detect_response",
    "complete_request",
    "complete_response",
    "vqa_request",
    "vqa_response",
    "embed_request",
    "embed_response",
)


def canonical_json(payload: Any) -> str:
    """Key-sorted, compact, ASCII-only JSON; the basis for request hashing."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def request_sha256(payload: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict[str, Any]:
    if name not in SCHEMA_NAMES:
        raise ValidationError(f"unknown schema {name!r}")
    text = resources.files("elegant").joinpath(f"schemas/{name}.json").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _validator(name: str) -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(load_schema(name))


def validate_payload(schema_name: str, payload: Any) -> None:
    """Raise ProtocolError when the payload does not match the named schema."""
    error = jsonschema.exceptions.best_match(_validator(schema_name).iter_errors(payload))
    if error is not None:
        raise ProtocolError(f"{schema_name} payload invalid: {error.message}")


@dataclass(frozen=True)
class BackendConfig:
    """How to reach one model role: live HTTP endpoint or mock playback."""

    mode: str = "mock"
    endpoint: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    backoff_base: float = 0.05
    token_env: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("live", "mock"):
            raise ValidationError(f"backend mode must be live or mock, got {self.mode!r}")
        if self.timeout <= 0:
            raise ValidationError("backend timeout must be > 0")
        if self.max_retries < 0:
            raise ValidationError("backend max_retries must be >= 0")
        if self.mode == "live" and not self.endpoint:
            raise ValidationError("live backend requires an endpoint URL")

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "BackendConfig":
        return cls(
            mode=str(data.get("mode", "mock")),
            endpoint=data.get("endpoint"),
            timeout=float(data.get("timeout", 30.0)),
            max_retries=int(data.get("max_retries", 2)),
            backoff_base=float(data.get("backoff_base", 0.05)),
            token_env=data.get("token_env"),
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "endpoint": self.endpoint,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "backoff_base": self.backoff_base,
            "token_env": self.token_env,
        }


@dataclass(frozen=True)
class BackendExchange:
    """One request/response over the wire, as observed by a role client."""

    role: Role
    request: dict[str, Any]
    response: dict[str, Any]
    latency: float
    attempts: int


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-dimension embedding with finite entries."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValidationError("embedding must have dimension > 0")
        if not all(math.isfinite(v) for v in values):
            raise ValidationError("embedding entries must be finite")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class VqaAnswer:
    """Verifier output: free text plus an optional token-level yes probability."""

    text: str
    yes_probability: float | None = None


# ---------------------------------------------------------------------------
# Request builders. These are the only payload shapes the engine emits, and
# fixture tooling reuses them so mock keys always line up.


def build_detect_request(image: ImageRef, grounding_text: str | None = None) -> dict[str, Any]:
    request: dict[str, Any] = dict(image.request_fields())
    if grounding_text:
        request["grounding_text"] = grounding_text
    validate_payload("detect_request", request)
    return request


def build_complete_request(prompt: str) -> dict[str, Any]:
    if not prompt:
        raise ValidationError("prompt must be nonempty")
    request = {"prompt": prompt}
    validate_payload("complete_request", request)
    return request


def build_vqa_request(image: ImageRef, question: str) -> dict[str, Any]:
    if not question:
        raise ValidationError("question must be nonempty")
    request: dict[str, Any] = dict(image.request_fields())
    request["question"] = question
    validate_payload("vqa_request", request)
    return request


def build_embed_text_request(text: str) -> dict[str, Any]:
    if not text:
        raise ValidationError("embed text must be nonempty")
    request = {"kind": "text", "text": text}
    validate_payload("embed_request", request)
    return request


def build_embed_image_request(payload_b64: str) -> dict[str, Any]:
    if not payload_b64:
        raise ValidationError("embed payload must be nonempty")
    request = {"kind": "image", "payload_b64": payload_b64}
    validate_payload("embed_request", request)
    return request


# ---------------------------------------------------------------------------
# Response parsers. Both live and mock responses pass through these, so no
# malformed payload reaches the pipeline.


def parse_detect_response(payload: Any, image: ImageRef) -> list[Entity]:
    validate_payload("detect_response", payload)
    entities: list[Entity] = []
    for index, item in enumerate(payload["entities"]):
        label = normalize_label(item["label"])
        if not label:
            raise ProtocolError(f"detected entity {index} label empty after normalization")
        coords = item["bbox"]
        try:
            bbox = BBox(
                x_min=float(coords[0]),
                y_min=float(coords[1]),
                x_max=float(coords[2]),
                y_max=float(coords[3]),
            )
        except ValidationError as exc:
            raise ProtocolError(f"detected entity {index} bbox invalid: {exc}") from exc
        if not bbox.within_bounds(image.width, image.height):
            raise ProtocolError(
                f"detected entity {index} bbox {coords} outside image "
                f"{image.width}x{image.height}"
            )
        entities.append(
            Entity(
                id=f"d{index:03d}",
                label=label,
                bbox=bbox,
                confidence=float(item["confidence"]),
                source=EntitySource.DETECTED,
            )
        )
    return entities


def parse_complete_response(payload: Any) -> str:
    validate_payload("complete_response", payload)
    text = payload["text"]
    if not text.strip():
        raise EmptyResponseError("completion backend returned empty text")
    return text


def parse_vqa_response(payload: Any) -> VqaAnswer:
    validate_payload("vqa_response", payload)
    probability = payload.get("yes_probability")
    return VqaAnswer(
        text=payload["text"],
        yes_probability=None if probability is None else float(probability),
    )


def parse_embed_response(payload: Any) -> EmbeddingVector:
    validate_payload("embed_response", payload)
    try:
        return EmbeddingVector(values=tuple(payload["vector"]))
    except ValidationError as exc:
        raise ProtocolError(f"embed response invalid: {exc}") from exc


@dataclass
class ExchangeLog:
    """Thread-safe append-only exchange log shared by the role clients."""

    _entries: list[BackendExchange] = field(default_factory=list)

    def __post_init__(self) -> None:
        import threading

        self._lock = threading.Lock()

    def append(self, exchange: BackendExchange) -> None:
        with self._lock:
            self._entries.append(exchange)

    def entries(self) -> tuple[BackendExchange, ...]:
        with self._lock:
            return tuple(self._entries)
