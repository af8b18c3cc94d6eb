"""Immutable domain types for entities, triplets, and local/global scene graphs.

All types are frozen dataclasses validated on construction, safe to share
across threads. Canonical JSON serialization keeps the field names used here;
enums serialize as lowercase strings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import ConflictError, SchemaError, ValidationError


def normalize_label(text: str) -> str:
    """Trim and lowercase a label or predicate."""
    return text.strip().lower()


class EntitySource(enum.Enum):
    DETECTED = "detected"
    GROUND_TRUTH = "ground_truth"


class TripletStatus(enum.Enum):
    CANDIDATE = "candidate"
    VERIFIED_DIRECT = "verified_direct"
    VERIFIED_COCA = "verified_coca"
    REJECTED = "rejected"


VERIFIED_STATUSES = frozenset({TripletStatus.VERIFIED_DIRECT, TripletStatus.VERIFIED_COCA})


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous image coordinates, x_min/y_min inclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value != value:
                raise ValidationError(f"bbox {name} must be a finite number, got {value!r}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValidationError(f"bbox coordinates must be >= 0: {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate bbox (min must be < max): {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def within_bounds(self, width: float, height: float) -> bool:
        return self.x_max <= width and self.y_max <= height

    def to_json_dict(self) -> dict[str, float]:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "BBox":
        try:
            return cls(
                x_min=float(data["x_min"]),
                y_min=float(data["y_min"]),
                x_max=float(data["x_max"]),
                y_max=float(data["y_max"]),
            )
        except KeyError as exc:
            raise SchemaError(f"bbox missing field {exc.args[0]!r}") from exc


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint or edge-touching."""
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class Entity:
    """A detected or ground-truth region. Labels are normalized on construction."""

    id: str
    label: str
    bbox: BBox
    confidence: float
    source: EntitySource

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("entity id must be nonempty")
        normalized = normalize_label(self.label)
        if not normalized:
            raise ValidationError(f"entity {self.id!r} label empty after normalization")
        object.__setattr__(self, "label", normalized)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"entity {self.id!r} confidence {self.confidence} outside [0, 1]"
            )
        if not isinstance(self.source, EntitySource):
            raise ValidationError(f"entity {self.id!r} source must be an EntitySource")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "label": self.label,
            "bbox": self.bbox.to_json_dict(),
            "confidence": self.confidence,
            "source": self.source.value,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "Entity":
        try:
            return cls(
                id=str(data["id"]),
                label=str(data["label"]),
                bbox=BBox.from_json_dict(data["bbox"]),
                confidence=float(data["confidence"]),
                source=EntitySource(data["source"]),
            )
        except KeyError as exc:
            raise SchemaError(f"entity missing field {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise SchemaError(f"entity field invalid: {exc}") from exc


@dataclass(frozen=True)
class Triplet:
    """A (subject, predicate, object) statement between two distinct entity instances."""

    subject_id: str
    predicate: str
    object_id: str
    status: TripletStatus = TripletStatus.CANDIDATE
    confidence: float | None = None

    def __post_init__(self) -> None:
        if self.subject_id == self.object_id:
            raise ValidationError(
                f"triplet subject and object must be distinct instances, got {self.subject_id!r}"
            )
        normalized = normalize_label(self.predicate)
        if not normalized:
            raise ValidationError("triplet predicate empty after normalization")
        object.__setattr__(self, "predicate", normalized)
        if not isinstance(self.status, TripletStatus):
            raise ValidationError("triplet status must be a TripletStatus")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"triplet confidence {self.confidence} outside [0, 1]")

    def with_status(self, status: TripletStatus, confidence: float | None = None) -> "Triplet":
        return Triplet(
            subject_id=self.subject_id,
            predicate=self.predicate,
            object_id=self.object_id,
            status=status,
            confidence=confidence,
        )

    def key(self) -> tuple[str, str, str]:
        return (self.subject_id, self.predicate, self.object_id)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "predicate": self.predicate,
            "object_id": self.object_id,
            "status": self.status.value,
            "confidence": self.confidence,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "Triplet":
        try:
            return cls(
                subject_id=str(data["subject_id"]),
                predicate=str(data["predicate"]),
                object_id=str(data["object_id"]),
                status=TripletStatus(data["status"]),
                confidence=None if data.get("confidence") is None else float(data["confidence"]),
            )
        except KeyError as exc:
            raise SchemaError(f"triplet missing field {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise SchemaError(f"triplet field invalid: {exc}") from exc


@dataclass(frozen=True)
class LocalSceneGraph:
    """One subject, the objects related to it, and the verified relations between them."""

    image_id: str
    subject: Entity
    objects: tuple[Entity, ...]
    relations: tuple[Triplet, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "relations", tuple(self.relations))
        object_ids = {o.id for o in self.objects}
        if len(object_ids) != len(self.objects):
            raise ValidationError(f"duplicate object ids in local graph for {self.subject.id!r}")
        if self.subject.id in object_ids:
            raise ValidationError("subject may not appear among its own objects")
        for rel in self.relations:
            if rel.subject_id != self.subject.id:
                raise ValidationError(
                    f"relation subject {rel.subject_id!r} does not match graph subject "
                    f"{self.subject.id!r}"
                )
            if rel.object_id not in object_ids:
                raise ValidationError(f"relation object {rel.object_id!r} not among graph objects")
            if rel.status not in VERIFIED_STATUSES:
                raise ValidationError(
                    f"local graphs hold only verified relations, got status {rel.status.value}"
                )

    def entity_map(self) -> dict[str, Entity]:
        mapping = {self.subject.id: self.subject}
        mapping.update({o.id: o for o in self.objects})
        return mapping

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "subject": self.subject.to_json_dict(),
            "objects": [o.to_json_dict() for o in self.objects],
            "relations": [r.to_json_dict() for r in self.relations],
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "LocalSceneGraph":
        try:
            return cls(
                image_id=str(data["image_id"]),
                subject=Entity.from_json_dict(data["subject"]),
                objects=tuple(Entity.from_json_dict(o) for o in data["objects"]),
                relations=tuple(Triplet.from_json_dict(r) for r in data["relations"]),
            )
        except KeyError as exc:
            raise SchemaError(f"local graph missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class GlobalSceneGraph:
    """Union of local graphs over the subjects of one image, at most one per subject."""

    image_id: str
    locals: tuple[LocalSceneGraph, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "locals", tuple(self.locals))
        seen: set[str] = set()
        for local in self.locals:
            if local.subject.id in seen:
                raise ConflictError(f"duplicate local graph for subject {local.subject.id!r}")
            seen.add(local.subject.id)
            if local.image_id != self.image_id:
                raise ValidationError(
                    f"local graph image {local.image_id!r} does not match {self.image_id!r}"
                )

    @property
    def triplet_count(self) -> int:
        return sum(len(local.relations) for local in self.locals)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "locals": [local.to_json_dict() for local in self.locals],
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "GlobalSceneGraph":
        try:
            return cls(
                image_id=str(data["image_id"]),
                locals=tuple(LocalSceneGraph.from_json_dict(g) for g in data["locals"]),
            )
        except KeyError as exc:
            raise SchemaError(f"global graph missing field {exc.args[0]!r}") from exc


def merge_global(
    locals_: Iterable[LocalSceneGraph], *, image_id: str | None = None
) -> GlobalSceneGraph:
    """Merge local graphs of one image into a global graph.

    Duplicate subjects raise ConflictError, mixed image ids ValidationError.
    An empty input yields an empty graph (image_id falls back to "").
    """
    graphs = tuple(locals_)
    if not graphs:
        return GlobalSceneGraph(image_id=image_id if image_id is not None else "", locals=())
    inferred = graphs[0].image_id
    if image_id is not None and image_id != inferred:
        raise ValidationError(f"image id {inferred!r} does not match requested {image_id!r}")
    return GlobalSceneGraph(image_id=inferred, locals=graphs)
