"""HTTP service implementing the engine wire protocol over loaded models.

Every request and response is validated against the schema files shipped by
the engine package itself, so the contract cannot drift. Inference per model
is serialized behind a lock; the threading server provides the queue.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from elegant.backends import validate_payload
from elegant.errors import ProtocolError

from .config import AdapterConfig
from .models import ImagePayload, ModelSet, load_models

_ROLE_FOR_PATH = {
    "/v1/detect": "observer",
    "/v1/complete": "thinker",
    "/v1/vqa": "verifier",
    "/v1/embed": "embedder",
}

_SCHEMA_FOR_PATH = {
    "/v1/detect": ("detect_request", "detect_response"),
    "/v1/complete": ("complete_request", "complete_response"),
    "/v1/vqa": ("vqa_request", "vqa_response"),
    "/v1/embed": ("embed_request", "embed_response"),
}


@dataclass
class _State:
    config: AdapterConfig
    models: ModelSet
    locks: dict[str, threading.Lock]


def _image_payload(request: dict[str, Any]) -> ImagePayload:
    return ImagePayload(
        image_id=request["image_id"],
        image_b64=request.get("image_b64"),
        image_uri=request.get("image_uri"),
    )


def _dispatch(state: _State, path: str, request: dict[str, Any]) -> dict[str, Any]:
    role = _ROLE_FOR_PATH[path]
    with state.locks[role]:
        if path == "/v1/detect":
            entities = state.models.observer.detect(
                _image_payload(request), request.get("grounding_text")
            )
            return {"entities": entities}
        if path == "/v1/complete":
            return {"text": state.models.thinker.complete(request["prompt"])}
        if path == "/v1/vqa":
            text, probability = state.models.verifier.answer(
                _image_payload(request), request["question"]
            )
            response: dict[str, Any] = {"text": text}
            if probability is not None:
                response["yes_probability"] = probability
            return response
        if request["kind"] == "text":
            vector = state.models.embedder.embed_text(request["text"])
        else:
            payload = base64.b64decode(request["payload_b64"].encode("ascii"))
            vector = state.models.embedder.embed_image(payload)
        return {"vector": vector}


class _Handler(BaseHTTPRequestHandler):
    state: _State

    def log_message(self, *args: Any) -> None:
        pass

    def _send(self, status: int, payload: dict[str, Any]) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path != "/healthz":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        self._send(200, {role: True for role in ("observer", "thinker", "verifier", "embedder")})

    def do_POST(self) -> None:
        state = type(self).state
        if self.path not in _ROLE_FOR_PATH:
            self._send(404, {"error": f"unknown endpoint {self.path}"})
            return
        if state.config.expected_token is not None:
            header = self.headers.get("Authorization", "")
            if header != f"Bearer {state.config.expected_token}":
                self._send(401, {"error": "missing or invalid bearer token"})
                return
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "body is not valid JSON"})
            return
        request_schema, response_schema = _SCHEMA_FOR_PATH[self.path]
        try:
            validate_payload(request_schema, request)
        except ProtocolError as exc:
            self._send(400, {"error": str(exc)})
            return
        try:
            response = _dispatch(state, self.path, request)
            validate_payload(response_schema, response)
        except Exception as exc:
            self._send(500, {"error": f"{type(exc).__name__}: {exc}"})
            return
        self._send(200, response)


class AdapterServer:
    """A running adapter; models are loaded before the socket opens."""

    def __init__(self, config: AdapterConfig) -> None:
        models = load_models(config)
        state = _State(
            config=config,
            models=models,
            locks={role: threading.Lock() for role in _ROLE_FOR_PATH.values()},
        )

        class Handler(_Handler):
            pass

        Handler.state = state
        self._server = ThreadingHTTPServer((config.host, config.port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "AdapterServer":
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._thread.start()
        self._thread.join()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "AdapterServer":
        return self.start()

    def __exit__(self, *_exc: Any) -> None:
        self.close()


def serve(config: AdapterConfig) -> AdapterServer:
    """Load the model roster and start serving; aborts if any model fails."""
    return AdapterServer(config).start()
