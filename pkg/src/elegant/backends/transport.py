"""Transports: live HTTP with retries, deterministic mock playback, recording.

Mock fixtures are a JSON array of ``{role, request_sha256 | sequence_index,
response}``. Hash-keyed entries replay as a pure function of the request;
sequence entries serve order-scripted scenarios. Recording wraps a live
transport and emits entries in exactly that fixture format.
"""

from __future__ import annotations

import copy
import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..errors import (
    MissingFixtureError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from .protocol import BackendConfig, Role, canonical_json, request_sha256


class Transport:
    """One role's request channel; post() returns (response, attempts)."""

    role: Role

    def post(self, request: Mapping[str, Any]) -> tuple[dict[str, Any], int]:
        raise NotImplementedError


class LiveTransport(Transport):
    """HTTP POST with bearer auth and exponential backoff on transport failures.

    Schema-level failures (HTTP 4xx, non-JSON bodies) never retry: those are
    bugs, not flakes.
    """

    def __init__(self, role: Role, config: BackendConfig, token: str | None = None) -> None:
        if config.mode != "live":
            raise ValidationError("LiveTransport requires a live-mode config")
        self.role = role
        self.config = config
        self.token = token
        assert config.endpoint is not None
        self.url = config.endpoint.rstrip("/") + role.endpoint_path

    def post(self, request: Mapping[str, Any]) -> tuple[dict[str, Any], int]:
        body = canonical_json(request).encode("utf-8")
        headers = {"Content-Type": "application/json; charset=utf-8"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        attempts = 0
        last_error: Exception | None = None
        while attempts <= self.config.max_retries:
            attempts += 1
            try:
                req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    raw = resp.read()
                try:
                    return json.loads(raw.decode("utf-8")), attempts
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise ProtocolError(
                        f"{self.role.value} backend returned a non-JSON body"
                    ) from exc
            except urllib.error.HTTPError as exc:
                if exc.code >= 500:
                    last_error = exc
                else:
                    raise ProtocolError(
                        f"{self.role.value} backend rejected request: HTTP {exc.code}"
                    ) from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last_error = exc
            if attempts <= self.config.max_retries:
                time.sleep(self.config.backoff_base * (2 ** (attempts - 1)))
        raise TransportError(
            f"{self.role.value} backend unreachable after {attempts} attempts: {last_error}"
        )


@dataclass(frozen=True)
class FixtureEntry:
    role: Role
    response: dict[str, Any]
    request_sha256: str | None = None
    sequence_index: int | None = None


class FixtureStore:
    """Parsed fixture set: hash-keyed map plus per-role sequential queues."""

    def __init__(self, entries: Iterable[FixtureEntry]) -> None:
        self._by_hash: dict[tuple[Role, str], dict[str, Any]] = {}
        self._cursors: dict[Role, int] = {}
        self._lock = threading.Lock()
        ordered: dict[Role, list[tuple[int, dict[str, Any]]]] = {}
        for entry in entries:
            if entry.request_sha256 is not None:
                key = (entry.role, entry.request_sha256)
                if key in self._by_hash:
                    raise ValidationError(
                        f"duplicate fixture for {entry.role.value} sha {entry.request_sha256}"
                    )
                self._by_hash[key] = entry.response
            elif entry.sequence_index is not None:
                ordered.setdefault(entry.role, []).append((entry.sequence_index, entry.response))
            else:
                raise ValidationError("fixture entry needs request_sha256 or sequence_index")
        self._sequential: dict[Role, list[dict[str, Any]]] = {
            role: [response for _, response in sorted(seq, key=lambda pair: pair[0])]
            for role, seq in ordered.items()
        }
        for role in self._sequential:
            self._cursors[role] = 0

    @classmethod
    def from_obj(cls, data: Any) -> "FixtureStore":
        if not isinstance(data, list):
            raise ValidationError("fixture file must hold a JSON array")
        entries = []
        for index, item in enumerate(data):
            if not isinstance(item, dict) or "role" not in item or "response" not in item:
                raise ValidationError(f"fixture entry {index} needs role and response")
            try:
                role = Role(item["role"])
            except ValueError as exc:
                raise ValidationError(f"fixture entry {index} has unknown role") from exc
            entries.append(
                FixtureEntry(
                    role=role,
                    response=item["response"],
                    request_sha256=item.get("request_sha256"),
                    sequence_index=item.get("sequence_index"),
                )
            )
        return cls(entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureStore":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))

    def lookup(self, role: Role, request: Mapping[str, Any]) -> dict[str, Any]:
        sha = request_sha256(request)
        hit = self._by_hash.get((role, sha))
        if hit is not None:
            return copy.deepcopy(hit)
        with self._lock:
            queue = self._sequential.get(role)
            if queue is not None and self._cursors[role] < len(queue):
                response = queue[self._cursors[role]]
                self._cursors[role] += 1
                return copy.deepcopy(response)
        raise MissingFixtureError(
            f"no fixture for {role.value} request sha {sha} "
            f"(request: {canonical_json(request)[:160]})"
        )


class MockTransport(Transport):
    """Pure playback: a function of (fixture set, request payload) only."""

    def __init__(self, role: Role, fixtures: FixtureStore) -> None:
        self.role = role
        self.fixtures = fixtures

    def post(self, request: Mapping[str, Any]) -> tuple[dict[str, Any], int]:
        return self.fixtures.lookup(self.role, request), 1


class RecordingTransport(Transport):
    """Wrap another transport and collect replayable fixture entries."""

    def __init__(self, inner: Transport) -> None:
        self.inner = inner
        self.role = inner.role
        self._entries: list[dict[str, Any]] = []
        self._seen: dict[str, str] = {}
        self._lock = threading.Lock()

    def post(self, request: Mapping[str, Any]) -> tuple[dict[str, Any], int]:
        response, attempts = self.inner.post(request)
        sha = request_sha256(request)
        with self._lock:
            previous = self._seen.get(sha)
            rendered = canonical_json(response)
            if previous is None:
                self._seen[sha] = rendered
                self._entries.append(
                    {
                        "role": self.role.value,
                        "request_sha256": sha,
                        "response": copy.deepcopy(response),
                    }
                )
            elif previous != rendered:
                raise ProtocolError(
                    f"{self.role.value} backend is nondeterministic: request {sha} "
                    "produced two different responses"
                )
        return response, attempts

    def entries(self) -> list[dict[str, Any]]:
        with self._lock:
            return copy.deepcopy(self._entries)


def dump_fixtures(entries: Iterable[dict[str, Any]], path: str | Path) -> None:
    """Write recorded entries as a replayable fixture file."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(list(entries), fh, indent=2, sort_keys=True)
        fh.write("\n")
