"""Dataset and result persistence: canonical annotations, run outputs.

Annotations use one canonical JSON schema (an array of image records);
converters from native dataset formats live outside the engine. Run outputs
are JSON-lines for graphs and traces, single JSON for reports, all written
atomically with the run index last.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .closedset import GroundTruthTriplet
from .errors import SchemaError, ValidationError
from .scene import BBox, Entity, EntitySource, LocalSceneGraph

GRAPHS_FILE = "graphs.jsonl"
TRACES_FILE = "traces.jsonl"
RUN_FILE = "run.json"
LOCK_FILE = ".run.lock"


@dataclass(frozen=True)
class AnnotatedImage:
    """One annotated image: dimensions, pixel source, entities, GT triplets."""

    image_id: str
    width: int
    height: int
    uri: str | None
    entities: tuple[Entity, ...]
    gt_triplets: tuple[GroundTruthTriplet, ...]

    def entity_map(self) -> dict[str, Entity]:
        return {e.id: e for e in self.entities}


def _require(record: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in record:
        raise SchemaError(f"{where}: missing field {key!r}")
    return record[key]


def _parse_annotation(record: Mapping[str, Any], index: int) -> AnnotatedImage:
    where = f"images[{index}]"
    image_id = str(_require(record, "image_id", where))
    where = f"images[{index}] ({image_id})"
    width = _require(record, "width", where)
    height = _require(record, "height", where)
    if not isinstance(width, int) or not isinstance(height, int) or width <= 0 or height <= 0:
        raise SchemaError(f"{where}: width/height must be positive integers")

    entities: list[Entity] = []
    seen_ids: set[str] = set()
    for j, item in enumerate(_require(record, "entities", where)):
        spot = f"{where}.entities[{j}]"
        entity_id = str(_require(item, "id", spot))
        if entity_id in seen_ids:
            raise SchemaError(f"{spot}: duplicate entity id {entity_id!r}")
        seen_ids.add(entity_id)
        try:
            bbox = BBox.from_json_dict(_require(item, "bbox", spot))
        except ValidationError as exc:
            raise SchemaError(f"{spot}.bbox: {exc}") from exc
        if not bbox.within_bounds(width, height):
            raise SchemaError(f"{spot}.bbox: outside image {width}x{height}")
        try:
            entities.append(
                Entity(
                    id=entity_id,
                    label=str(_require(item, "label", spot)),
                    bbox=bbox,
                    confidence=float(item.get("confidence", 1.0)),
                    source=EntitySource.GROUND_TRUTH,
                )
            )
        except ValidationError as exc:
            raise SchemaError(f"{spot}: {exc}") from exc

    by_id = {e.id: e for e in entities}
    triplets: list[GroundTruthTriplet] = []
    for j, item in enumerate(record.get("triplets", [])):
        spot = f"{where}.triplets[{j}]"
        subject_id = str(_require(item, "subject_id", spot))
        object_id = str(_require(item, "object_id", spot))
        for ref in (subject_id, object_id):
            if ref not in by_id:
                raise SchemaError(f"{spot}: dangling entity reference {ref!r}")
        try:
            triplets.append(
                GroundTruthTriplet(
                    subject=by_id[subject_id],
                    predicate=str(_require(item, "predicate", spot)),
                    object=by_id[object_id],
                )
            )
        except ValidationError as exc:
            raise SchemaError(f"{spot}: {exc}") from exc

    return AnnotatedImage(
        image_id=image_id,
        width=width,
        height=height,
        uri=record.get("uri"),
        entities=tuple(entities),
        gt_triplets=tuple(triplets),
    )


def load_annotations(path: str | Path) -> list[AnnotatedImage]:
    """Load and validate a canonical annotation file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"annotation file {path}: invalid JSON ({exc})") from exc
    if isinstance(data, Mapping) and "images" in data:
        data = data["images"]
    if not isinstance(data, list):
        raise SchemaError(f"annotation file {path}: expected an array of image records")
    images = [_parse_annotation(record, index) for index, record in enumerate(data)]
    seen: set[str] = set()
    for image in images:
        if image.image_id in seen:
            raise SchemaError(f"duplicate image_id {image.image_id!r}")
        seen.add(image.image_id)
    return images


# ---------------------------------------------------------------------------
# Run persistence


def canonical_dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def manifest_sha256(manifest_bytes: bytes) -> str:
    return hashlib.sha256(manifest_bytes).hexdigest()


@dataclass(frozen=True)
class RunRecord:
    """Index of one run directory; written last, only for complete runs."""

    run_id: str
    manifest_sha256: str | None
    files: Mapping[str, str]
    config: Mapping[str, Any] = field(default_factory=dict)
    created_at: str = ""
    completed_at: str = ""

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "manifest_sha256": self.manifest_sha256,
            "files": dict(self.files),
            "config": dict(self.config),
            "created_at": self.created_at,
            "completed_at": self.completed_at,
        }


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> None:
    _atomic_write(path, "".join(canonical_dumps(row) + "\n" for row in rows))


def write_json(path: Path, obj: Any) -> None:
    _atomic_write(path, canonical_dumps(obj) + "\n")


def read_graphs(path: str | Path) -> list[LocalSceneGraph]:
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                graphs.append(LocalSceneGraph.from_json_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
    return graphs


class run_lock:
    """One writer per run directory, enforced by an O_EXCL lock file."""

    def __init__(self, run_dir: Path) -> None:
        self.path = run_dir / LOCK_FILE

    def __enter__(self) -> "run_lock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ValidationError(
                f"run directory is locked by another writer: {self.path}"
            ) from exc
        os.close(fd)
        return self

    def __exit__(self, *_exc: Any) -> None:
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def persist_results(
    graph_rows: Sequence[Mapping[str, Any]],
    trace_rows: Sequence[Mapping[str, Any]],
    reports: Mapping[str, Any],
    run_dir: str | Path,
    *,
    manifest_bytes: bytes | None = None,
    config: Mapping[str, Any] | None = None,
    run_id: str | None = None,
    complete: bool = True,
) -> RunRecord:
    """Write run artifacts atomically; the run index lands only when all else did.

    Pass complete=False to persist the partial artifacts of an aborted run:
    the data files are written but no index, so the run never looks finished.
    """
    directory = Path(run_dir)
    directory.mkdir(parents=True, exist_ok=True)
    created = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    with run_lock(directory):
        files: dict[str, str] = {}
        write_jsonl(directory / GRAPHS_FILE, graph_rows)
        files["graphs"] = GRAPHS_FILE
        write_jsonl(directory / TRACES_FILE, trace_rows)
        files["traces"] = TRACES_FILE
        for name, obj in reports.items():
            write_json(directory / name, obj)
            files[name] = name
        if manifest_bytes is not None:
            _atomic_write(directory / "manifest.json", manifest_bytes.decode("utf-8"))
            files["manifest"] = "manifest.json"
        record = RunRecord(
            run_id=run_id or uuid.uuid4().hex,
            manifest_sha256=manifest_sha256(manifest_bytes) if manifest_bytes else None,
            files=files,
            config=config or {},
            created_at=created,
            completed_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        )
        if complete:
            write_json(directory / RUN_FILE, record.to_json_dict())
    return record
