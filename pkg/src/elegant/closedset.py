"""Closed-set evaluation: vocabularies, triplet matching, Recall@K, diversity.

Recall follows the standard protocol: predictions are ranked by confidence,
matched one-to-one against ground truths greedily in rank order, and reported
in percent. Under exact-identity matching the greedy assignment is optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

from .errors import UndefinedMetricError, ValidationError
from .scene import (
    Entity,
    EntitySource,
    Triplet,
    TripletStatus,
    iou,
    normalize_label,
)

VOCAB_IDS = ("visualds20", "recode24")

_STATUS_RANK = {TripletStatus.VERIFIED_DIRECT: 0, TripletStatus.VERIFIED_COCA: 1}
_DEFAULT_CONFIDENCE = {TripletStatus.VERIFIED_DIRECT: 1.0, TripletStatus.VERIFIED_COCA: 0.5}


@dataclass(frozen=True)
class RelationVocab:
    """An ordered set of normalized predicates."""

    id: str
    predicates: tuple[str, ...]

    def __post_init__(self) -> None:
        normalized = tuple(normalize_label(p) for p in self.predicates)
        if not normalized or any(not p for p in normalized):
            raise ValidationError(f"vocab {self.id!r} must hold nonempty predicates")
        if len(set(normalized)) != len(normalized):
            raise ValidationError(f"vocab {self.id!r} has duplicate predicates")
        object.__setattr__(self, "predicates", normalized)

    def __contains__(self, predicate: str) -> bool:
        return normalize_label(predicate) in set(self.predicates)


@lru_cache(maxsize=None)
def load_vocab(vocab_id: str) -> RelationVocab:
    if vocab_id not in VOCAB_IDS:
        raise ValidationError(f"unknown vocab {vocab_id!r}; known: {VOCAB_IDS}")
    text = resources.files("elegant").joinpath(f"vocabs/{vocab_id}.txt").read_text("utf-8")
    predicates = tuple(line.strip() for line in text.splitlines() if line.strip())
    return RelationVocab(id=vocab_id, predicates=predicates)


@dataclass(frozen=True)
class GroundTruthTriplet:
    """An annotated relation between two ground-truth entities."""

    subject: Entity
    predicate: str
    object: Entity

    def __post_init__(self) -> None:
        for end in (self.subject, self.object):
            if end.source is not EntitySource.GROUND_TRUTH:
                raise ValidationError(
                    f"ground-truth triplet references non-ground-truth entity {end.id!r}"
                )
        normalized = normalize_label(self.predicate)
        if not normalized:
            raise ValidationError("ground-truth predicate empty after normalization")
        object.__setattr__(self, "predicate", normalized)
        if self.subject.id == self.object.id:
            raise ValidationError("ground-truth subject and object must be distinct")


@dataclass(frozen=True)
class MatchMode:
    """gt_boxes matches by entity identity; detected matches labels + IoU."""

    kind: str = "gt_boxes"
    iou_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("gt_boxes", "detected"):
            raise ValidationError(f"unknown match mode {self.kind!r}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError("iou threshold must be in (0, 1]")


def effective_confidence(triplet: Triplet) -> float:
    if triplet.status not in _STATUS_RANK:
        raise ValidationError(f"cannot rank unverified triplet (status {triplet.status.value})")
    if triplet.confidence is not None:
        return triplet.confidence
    return _DEFAULT_CONFIDENCE[triplet.status]


def rank_predictions(triplets: Iterable[Triplet]) -> list[Triplet]:
    """Descending confidence; ties: direct before coca, then lexicographic ids."""
    return sorted(
        triplets,
        key=lambda t: (
            -effective_confidence(t),
            _STATUS_RANK[t.status],
            t.subject_id,
            t.predicate,
            t.object_id,
        ),
    )


def match(
    pred: Triplet,
    gt: GroundTruthTriplet,
    mode: MatchMode,
    entities: Mapping[str, Entity] | None = None,
) -> bool:
    """Does a predicted triplet hit a ground truth under the given protocol?"""
    if pred.predicate != gt.predicate:
        return False
    if mode.kind == "gt_boxes":
        return pred.subject_id == gt.subject.id and pred.object_id == gt.object.id
    if entities is None:
        raise ValidationError("detected-mode matching needs the prediction entity map")
    try:
        pred_subject = entities[pred.subject_id]
        pred_object = entities[pred.object_id]
    except KeyError as exc:
        raise ValidationError(f"prediction references unknown entity {exc.args[0]!r}") from exc
    return (
        pred_subject.label == gt.subject.label
        and pred_object.label == gt.object.label
        and iou(pred_subject.bbox, gt.subject.bbox) >= mode.iou_threshold
        and iou(pred_object.bbox, gt.object.bbox) >= mode.iou_threshold
    )


def _greedy_assignment(
    ranked: Sequence[Triplet],
    gts: Sequence[GroundTruthTriplet],
    k: int,
    mode: MatchMode,
    entities: Mapping[str, Entity] | None,
) -> list[int]:
    """Indices of ground truths matched one-to-one by the top-K predictions."""
    taken: set[int] = set()
    for pred in ranked[:k]:
        for index, gt in enumerate(gts):
            if index in taken:
                continue
            if match(pred, gt, mode, entities):
                taken.add(index)
                break
    return sorted(taken)


def recall_at_k(
    ranked: Sequence[Triplet],
    gts: Sequence[GroundTruthTriplet],
    k: int,
    mode: MatchMode = MatchMode(),
    entities: Mapping[str, Entity] | None = None,
) -> float:
    """Percent of ground truths recovered among the top-K predictions."""
    if k < 1:
        raise ValidationError("K must be >= 1")
    if not gts:
        raise UndefinedMetricError("recall undefined without ground truths")
    matched = _greedy_assignment(ranked, gts, k, mode, entities)
    return 100.0 * len(matched) / len(gts)


def mean_recall_at_k(
    ranked: Sequence[Triplet],
    gts: Sequence[GroundTruthTriplet],
    k: int,
    vocab: RelationVocab,
    mode: MatchMode = MatchMode(),
    entities: Mapping[str, Entity] | None = None,
) -> float:
    """Recall averaged over predicate categories that have ground truths."""
    if not gts:
        raise UndefinedMetricError("mean recall undefined without ground truths")
    matched = set(_greedy_assignment(ranked, gts, k, mode, entities))
    per_category: dict[str, list[int]] = {}
    for index, gt in enumerate(gts):
        per_category.setdefault(gt.predicate, []).append(index)
    recalls = []
    for predicate in vocab.predicates:
        indices = per_category.get(predicate)
        if not indices:
            continue
        hit = sum(1 for i in indices if i in matched)
        recalls.append(100.0 * hit / len(indices))
    if not recalls:
        raise UndefinedMetricError("no vocabulary category has ground truths")
    return math.fsum(recalls) / len(recalls)


@dataclass(frozen=True)
class DiversityStats:
    entity_categories: int
    relation_categories: int
    triplet_categories: int

    def to_json_dict(self) -> dict[str, int]:
        return {
            "entity_categories": self.entity_categories,
            "relation_categories": self.relation_categories,
            "triplet_categories": self.triplet_categories,
        }


def diversity_stats(label_triples: Iterable[tuple[str, str, str]]) -> DiversityStats:
    """Distinct entity labels, predicates, and label triples across predictions."""
    entity_labels: set[str] = set()
    predicates: set[str] = set()
    triples: set[tuple[str, str, str]] = set()
    for subject_label, predicate, object_label in label_triples:
        triple = (
            normalize_label(subject_label),
            normalize_label(predicate),
            normalize_label(object_label),
        )
        entity_labels.add(triple[0])
        entity_labels.add(triple[2])
        predicates.add(triple[1])
        triples.add(triple)
    return DiversityStats(
        entity_categories=len(entity_labels),
        relation_categories=len(predicates),
        triplet_categories=len(triples),
    )


@dataclass(frozen=True)
class EvalInstance:
    """One evaluation unit: an image's predictions, entity map, and ground truths."""

    image_id: str
    predictions: tuple[Triplet, ...]
    entities: Mapping[str, Entity]
    gts: tuple[GroundTruthTriplet, ...]


def evaluate_closed_set(
    instances: Sequence[EvalInstance],
    ks: Sequence[int],
    vocab: RelationVocab,
    mode: MatchMode = MatchMode(),
) -> dict[str, Any]:
    """Dataset-level R@K and mR@K plus diversity statistics.

    Ground truths outside the vocabulary are excluded up front (closed-set
    runs assume a vocabulary-restricted label space). R@K averages per-image
    recall over images that still have ground truths; mR@K averages
    per-category recall over images where the category occurs, then over
    categories.
    """
    vocab_set = set(vocab.predicates)
    excluded_gts = 0
    per_image: list[tuple[EvalInstance, list[Triplet], list[GroundTruthTriplet]]] = []
    for instance in instances:
        kept = [gt for gt in instance.gts if gt.predicate in vocab_set]
        excluded_gts += len(instance.gts) - len(kept)
        per_image.append((instance, rank_predictions(instance.predictions), kept))

    recall_table: dict[str, float] = {}
    mean_recall_table: dict[str, float] = {}
    for k in ks:
        image_recalls: list[float] = []
        category_recalls: dict[str, list[float]] = {}
        for instance, ranked, gts in per_image:
            if not gts:
                continue
            matched = set(_greedy_assignment(ranked, gts, k, mode, instance.entities))
            image_recalls.append(100.0 * len(matched) / len(gts))
            by_category: dict[str, list[int]] = {}
            for index, gt in enumerate(gts):
                by_category.setdefault(gt.predicate, []).append(index)
            for predicate, indices in by_category.items():
                hit = sum(1 for i in indices if i in matched)
                category_recalls.setdefault(predicate, []).append(
                    100.0 * hit / len(indices)
                )
        key = str(k)
        recall_table[key] = (
            round(math.fsum(image_recalls) / len(image_recalls), 2) if image_recalls else None
        )
        if category_recalls:
            per_category = [
                math.fsum(values) / len(values)
                for _, values in sorted(category_recalls.items())
            ]
            mean_recall_table[key] = round(math.fsum(per_category) / len(per_category), 2)
        else:
            mean_recall_table[key] = None

    triples = []
    for instance, ranked, _ in per_image:
        for pred in ranked:
            triples.append(
                (
                    instance.entities[pred.subject_id].label,
                    pred.predicate,
                    instance.entities[pred.object_id].label,
                )
            )
    return {
        "vocab": vocab.id,
        "match_mode": mode.kind,
        "iou_threshold": mode.iou_threshold if mode.kind == "detected" else None,
        "recall": recall_table,
        "mean_recall": mean_recall_table,
        "excluded_ground_truths": excluded_gts,
        "diversity": diversity_stats(triples).to_json_dict(),
    }
