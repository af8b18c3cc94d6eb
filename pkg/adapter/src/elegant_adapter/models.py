"""Model implementations behind the four wire endpoints.

The builtin models are lightweight and fully deterministic: they derive their
outputs from content hashes, so recorded sessions replay bit-identically.
Heavier open-source checkpoints plug in through ``register_model``; the
roster in AdapterConfig selects by identifier (e.g. ``builtin:hash-vqa``).
"""

from __future__ import annotations

import base64
import hashlib
import re
from dataclasses import dataclass
from typing import Any, Callable, Protocol

import numpy as np

from elegant.raster import from_payload_b64, resolve_pixels


class ModelLoadError(RuntimeError):
    pass


class DetectorModel(Protocol):
    def detect(self, image: "ImagePayload", grounding_text: str | None) -> list[dict[str, Any]]: ...


class CompletionModel(Protocol):
    def complete(self, prompt: str) -> str: ...


class VqaModel(Protocol):
    def answer(self, image: "ImagePayload", question: str) -> tuple[str, float | None]: ...


class EmbeddingModel(Protocol):
    def embed_text(self, text: str) -> list[float]: ...

    def embed_image(self, payload: bytes) -> list[float]: ...


@dataclass(frozen=True)
class ImagePayload:
    """A request's image: id plus either inline canonical bytes or a uri."""

    image_id: str
    image_b64: str | None = None
    image_uri: str | None = None

    def pixels(self) -> np.ndarray:
        if self.image_b64 is not None:
            return from_payload_b64(self.image_b64)
        if self.image_uri is not None:
            return resolve_pixels(self.image_uri)
        raise ValueError(f"image {self.image_id!r} carries neither bytes nor uri")

    def content_key(self) -> bytes:
        if self.image_b64 is not None:
            return base64.b64decode(self.image_b64.encode("ascii"))
        return (self.image_uri or self.image_id).encode("utf-8")


def _digest_ints(*parts: bytes, count: int) -> list[int]:
    """Deterministic unsigned 32-bit stream from the SHA-256 of the parts."""
    values: list[int] = []
    counter = 0
    while len(values) < count:
        block = hashlib.sha256(b"|".join(parts) + counter.to_bytes(4, "little")).digest()
        for offset in range(0, 32, 4):
            values.append(int.from_bytes(block[offset : offset + 4], "little"))
        counter += 1
    return values[:count]


class HashDetector:
    """Deterministic stand-in for a grounded open-vocabulary detector."""

    labels = ("man", "woman", "dog", "chair", "cup", "tree", "balloon", "table")

    def detect(self, image: ImagePayload, grounding_text: str | None) -> list[dict[str, Any]]:
        pixels = image.pixels()
        height, width = int(pixels.shape[0]), int(pixels.shape[1])
        seed = [image.content_key()]
        if grounding_text:
            seed.append(grounding_text.encode("utf-8"))
        stream = _digest_ints(*seed, count=64)
        count = 2 + stream[0] % 3
        entities = []
        for index in range(count):
            chunk = stream[1 + index * 5 : 6 + index * 5]
            x0 = (chunk[0] % max(1, int(width * 0.6) * 100)) / 100.0
            y0 = (chunk[1] % max(1, int(height * 0.6) * 100)) / 100.0
            x1 = min(width, x0 + 1.0 + (chunk[2] % int(width * 0.5 * 100)) / 100.0)
            y1 = min(height, y0 + 1.0 + (chunk[3] % int(height * 0.5 * 100)) / 100.0)
            entities.append(
                {
                    "label": self.labels[chunk[4] % len(self.labels)],
                    "bbox": [round(x0, 2), round(y0, 2), round(x1, 2), round(y1, 2)],
                    "confidence": round(0.3 + (chunk[4] % 700) / 1000.0, 3),
                }
            )
        return entities


_SUBJECT_RE = re.compile(r"^Subject:\s*(.+)$", re.MULTILINE)
_ENTITIES_RE = re.compile(r"^Entities:\s*(.*)$", re.MULTILINE)


class EchoReasoner:
    """Rule-based reasoner: proposes one relation per listed entity.

    Prompts ending with a "Triplets:" cue get triplet proposals; anything
    else (verification or inference questions) gets a deterministic yes/no.
    """

    def complete(self, prompt: str) -> str:
        if prompt.rstrip().endswith("Triplets:"):
            subject_match = _SUBJECT_RE.search(prompt)
            entities_match = _ENTITIES_RE.search(prompt)
            if not subject_match or not entities_match:
                return "(none)"
            subject = subject_match.group(1).strip()
            entities = [e.strip() for e in entities_match.group(1).split(",") if e.strip()]
            if not entities:
                return "(none)"
            fragments = [f"({subject}, next to, {entity})" for entity in entities]
            return ", ".join(fragments)
        verdict = _digest_ints(prompt.encode("utf-8"), count=1)[0]
        return "Yes" if verdict % 2 == 0 else "No"


class HashVqa:
    """Deterministic yes/no VQA stand-in with a derived token probability."""

    def answer(self, image: ImagePayload, question: str) -> tuple[str, float | None]:
        stream = _digest_ints(image.content_key(), question.encode("utf-8"), count=2)
        if question.startswith("Question: is the"):
            yes = stream[0] % 2 == 0
            probability = round((stream[1] % 1000) / 999.0, 6)
            if yes:
                probability = round(0.5 + probability / 2.0, 6)
            else:
                probability = round(probability / 2.0, 6)
            return ("yes" if yes else "no"), probability
        nouns = re.findall(r"between (.+) and (.+)\.", question)
        if nouns:
            return f"the {nouns[0][0]} is close to {nouns[0][1]}", None
        return ("Yes" if stream[0] % 2 == 0 else "No"), None


class HashEmbedder:
    """Fixed-dimension embedding derived from the payload's SHA-256."""

    def __init__(self, dim: int = 16) -> None:
        self.dim = dim

    def _vector(self, payload: bytes) -> list[float]:
        stream = _digest_ints(payload, count=self.dim)
        return [round((value % 2_000_001) / 1_000_000.0 - 1.0, 9) for value in stream]

    def embed_text(self, text: str) -> list[float]:
        return self._vector(b"text:" + text.encode("utf-8"))

    def embed_image(self, payload: bytes) -> list[float]:
        return self._vector(b"image:" + payload)


@dataclass
class ModelSet:
    observer: DetectorModel
    thinker: CompletionModel
    verifier: VqaModel
    embedder: EmbeddingModel


_REGISTRY: dict[str, Callable[..., Any]] = {
    "builtin:hash-detector": lambda config: HashDetector(),
    "builtin:echo-reasoner": lambda config: EchoReasoner(),
    "builtin:hash-vqa": lambda config: HashVqa(),
    "builtin:hash-embedder": lambda config: HashEmbedder(dim=config.embed_dim),
}


def register_model(identifier: str, loader: Callable[..., Any]) -> None:
    """Expose an additional model implementation to the roster."""
    _REGISTRY[identifier] = loader


def load_models(config) -> ModelSet:
    """Instantiate the roster; any unloadable model aborts startup."""
    loaded = {}
    for role in ("observer", "thinker", "verifier", "embedder"):
        identifier = config.models[role]
        loader = _REGISTRY.get(identifier)
        if loader is None:
            raise ModelLoadError(
                f"no loader for {role} model {identifier!r}; "
                f"known: {sorted(_REGISTRY)} (extend via register_model)"
            )
        try:
            loaded[role] = loader(config)
        except Exception as exc:
            raise ModelLoadError(f"loading {role} model {identifier!r} failed: {exc}") from exc
    return ModelSet(
        observer=loaded["observer"],
        thinker=loaded["thinker"],
        verifier=loaded["verifier"],
        embedder=loaded["embedder"],
    )
