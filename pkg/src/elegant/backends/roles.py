"""Role clients: observer (detect), thinker (complete), verifier (vqa), embedder.

Clients are safe for concurrent calls; the pipeline fans verification and
embedding requests out across threads. Each call is logged as a
BackendExchange.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Any, Mapping

from ..errors import ProtocolError, ValidationError
from ..raster import ImageRef
from ..scene import Entity
from .protocol import (
    BackendConfig,
    BackendExchange,
    EmbeddingVector,
    ExchangeLog,
    Role,
    VqaAnswer,
    build_complete_request,
    build_detect_request,
    build_embed_image_request,
    build_embed_text_request,
    build_vqa_request,
    parse_complete_response,
    parse_detect_response,
    parse_embed_response,
    parse_vqa_response,
)
from .transport import FixtureStore, LiveTransport, MockTransport, Transport


class _RoleClient:
    role: Role

    def __init__(self, transport: Transport, log: ExchangeLog | None = None) -> None:
        self.transport = transport
        self.log = log if log is not None else ExchangeLog()

    def _post(self, request: dict[str, Any]) -> dict[str, Any]:
        start = time.monotonic()
        response, attempts = self.transport.post(request)
        latency = 0.0 if isinstance(self.transport, MockTransport) else time.monotonic() - start
        self.log.append(
            BackendExchange(
                role=self.role,
                request=request,
                response=response,
                latency=latency,
                attempts=attempts,
            )
        )
        return response


class ObserverClient(_RoleClient):
    role = Role.OBSERVER

    def detect(self, image: ImageRef, grounding_text: str | None = None) -> list[Entity]:
        request = build_detect_request(image, grounding_text)
        return parse_detect_response(self._post(request), image)


class ThinkerClient(_RoleClient):
    role = Role.THINKER

    def complete(self, prompt: str) -> str:
        request = build_complete_request(prompt)
        return parse_complete_response(self._post(request))


class VerifierClient(_RoleClient):
    role = Role.VERIFIER

    def answer(self, image: ImageRef, question: str) -> VqaAnswer:
        request = build_vqa_request(image, question)
        return parse_vqa_response(self._post(request))


class EmbedderClient(_RoleClient):
    """Embedding client that enforces one consistent dimension per instance."""

    role = Role.EMBEDDER

    def __init__(self, transport: Transport, log: ExchangeLog | None = None) -> None:
        super().__init__(transport, log)
        self._dim: int | None = None
        import threading

        self._dim_lock = threading.Lock()

    def _check_dim(self, vector: EmbeddingVector) -> EmbeddingVector:
        with self._dim_lock:
            if self._dim is None:
                self._dim = vector.dim
            elif vector.dim != self._dim:
                raise ProtocolError(
                    f"embedder dimension changed from {self._dim} to {vector.dim}"
                )
        return vector

    def embed_text(self, text: str) -> EmbeddingVector:
        request = build_embed_text_request(text)
        return self._check_dim(parse_embed_response(self._post(request)))

    def embed_image(self, payload_b64: str) -> EmbeddingVector:
        request = build_embed_image_request(payload_b64)
        return self._check_dim(parse_embed_response(self._post(request)))


@dataclass
class BackendSet:
    """The four role clients the pipeline runs against."""

    observer: ObserverClient
    thinker: ThinkerClient
    verifier: VerifierClient
    embedder: EmbedderClient

    def exchanges(self) -> tuple[BackendExchange, ...]:
        merged: list[BackendExchange] = []
        for client in (self.observer, self.thinker, self.verifier, self.embedder):
            merged.extend(client.log.entries())
        return tuple(merged)


def _transport_for(role: Role, config: BackendConfig, fixtures: FixtureStore | None,
                   env: Mapping[str, str]) -> Transport:
    if config.mode == "mock":
        if fixtures is None:
            raise ValidationError(f"{role.value} backend is mock but no fixtures were given")
        return MockTransport(role, fixtures)
    token_env = config.token_env or role.token_env
    return LiveTransport(role, config, token=env.get(token_env))


def build_backends(
    configs: Mapping[str, BackendConfig],
    fixtures: FixtureStore | None = None,
    env: Mapping[str, str] | None = None,
) -> BackendSet:
    """Instantiate the four role clients from per-role configs."""
    env = os.environ if env is None else env
    clients: dict[str, _RoleClient] = {}
    for role in Role:
        config = configs.get(role.value, BackendConfig())
        transport = _transport_for(role, config, fixtures, env)
        client_cls = {
            Role.OBSERVER: ObserverClient,
            Role.THINKER: ThinkerClient,
            Role.VERIFIER: VerifierClient,
            Role.EMBEDDER: EmbedderClient,
        }[role]
        clients[role.value] = client_cls(transport)
    return BackendSet(
        observer=clients["observer"],
        thinker=clients["thinker"],
        verifier=clients["verifier"],
        embedder=clients["embedder"],
    )
