"""Orchestration: subject selection, overlap gating, proposal, verification
with the co-calibration rescue path, and graph assembly.

A candidate triplet is kept when the verifier answers yes directly, or when
the verifier's own rationale lets the reasoner infer the triplet (the rescue
path). Everything else is rejected. Output ordering is deterministic no
matter how verification calls interleave.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .backends.roles import BackendSet
from .closedset import RelationVocab
from .errors import ElegantError, SubjectNotFoundError, ValidationError
from .prompts import (
    YesNo,
    parse_triplets,
    parse_yes_no,
    render_calibration,
    render_rationale,
    render_thinker_closed,
    render_thinker_open,
    render_verify,
    render_vqa,
)
from .raster import ImageRef
from .scene import (
    BBox,
    Entity,
    GlobalSceneGraph,
    LocalSceneGraph,
    Triplet,
    TripletStatus,
    iou,
    merge_global,
)


@dataclass(frozen=True)
class SubjectSpec:
    """Human control signal picking the subject: a label, a box, or a point."""

    kind: str
    value: Any

    def __post_init__(self) -> None:
        if self.kind == "label":
            if not isinstance(self.value, str) or not self.value.strip():
                raise ValidationError("label subject spec needs a nonempty string")
        elif self.kind == "box":
            if not isinstance(self.value, BBox):
                raise ValidationError("box subject spec needs a BBox value")
        elif self.kind == "point":
            value = self.value
            if (
                not isinstance(value, (tuple, list))
                or len(value) != 2
                or not all(isinstance(c, (int, float)) for c in value)
            ):
                raise ValidationError("point subject spec needs an (x, y) pair")
            object.__setattr__(self, "value", (float(value[0]), float(value[1])))
        else:
            raise ValidationError(f"unknown subject spec kind {self.kind!r}")

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "SubjectSpec":
        kind = data.get("kind")
        value = data.get("value")
        if kind == "box" and isinstance(value, Mapping):
            value = BBox.from_json_dict(value)
        if kind == "point" and isinstance(value, list):
            value = tuple(value)
        return cls(kind=str(kind), value=value)


@dataclass(frozen=True)
class ProposalMode:
    """Open-vocabulary proposal, or closed proposal restricted to a vocab."""

    kind: str = "open"
    vocab: RelationVocab | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("open", "closed"):
            raise ValidationError(f"unknown proposal mode {self.kind!r}")
        if self.kind == "closed" and self.vocab is None:
            raise ValidationError("closed proposal mode requires a vocabulary")


@dataclass(frozen=True)
class VerificationTrace:
    """Full record of one candidate's verification outcome."""

    triplet: Triplet
    verify_answer: str
    rationale: str | None
    calibration_answer: str | None
    coca_applied: bool = True

    def __post_init__(self) -> None:
        verdict = parse_yes_no(self.verify_answer)
        status = self.triplet.status
        if verdict is YesNo.YES:
            if status is not TripletStatus.VERIFIED_DIRECT:
                raise ValidationError("yes answers must yield verified_direct")
            if self.rationale is not None or self.calibration_answer is not None:
                raise ValidationError("direct verifications carry no rescue fields")
        elif self.coca_applied:
            if self.rationale is None or self.calibration_answer is None:
                raise ValidationError("rescued verifications must record rationale and answer")
            expected = (
                TripletStatus.VERIFIED_COCA
                if parse_yes_no(self.calibration_answer) is YesNo.YES
                else TripletStatus.REJECTED
            )
            if status is not expected:
                raise ValidationError(
                    f"status {status.value} inconsistent with calibration answer"
                )
        else:
            if self.rationale is not None or self.calibration_answer is not None:
                raise ValidationError("rescue fields present although rescue was disabled")
            if status is not TripletStatus.REJECTED:
                raise ValidationError("negative answers reject when rescue is disabled")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "triplet": self.triplet.to_json_dict(),
            "verify_answer": self.verify_answer,
            "rationale": self.rationale,
            "calibration_answer": self.calibration_answer,
            "status": self.triplet.status.value,
            "coca_applied": self.coca_applied,
        }


class GenerationAbort(ElegantError):
    """A backend failure stopped a run partway; completed traces ride along."""

    def __init__(self, cause: Exception, partial_traces: Sequence[VerificationTrace]):
        super().__init__(str(cause))
        self.cause = cause
        self.partial_traces = tuple(partial_traces)


@dataclass(frozen=True)
class LocalResult:
    graph: LocalSceneGraph
    traces: tuple[VerificationTrace, ...]


@dataclass(frozen=True)
class SubjectFailure:
    subject_id: str
    error_type: str
    message: str

    def to_json_dict(self) -> dict[str, str]:
        return {
            "subject_id": self.subject_id,
            "error_type": self.error_type,
            "message": self.message,
        }


@dataclass(frozen=True)
class GlobalResult:
    graph: GlobalSceneGraph
    locals: tuple[LocalResult, ...]
    failures: tuple[SubjectFailure, ...]


def select_subject(entities: Sequence[Entity], spec: SubjectSpec) -> Entity:
    """Resolve a control signal to one detected entity."""
    if not entities:
        raise SubjectNotFoundError("no entities to select a subject from")
    if spec.kind == "label":
        wanted = spec.value.strip().lower()
        matches = [e for e in entities if e.label == wanted]
        if not matches:
            raise SubjectNotFoundError(f"no entity labeled {wanted!r}")
        return max(matches, key=lambda e: e.confidence)
    if spec.kind == "box":
        best = max(
            range(len(entities)),
            key=lambda i: (iou(entities[i].bbox, spec.value), entities[i].confidence, -i),
        )
        if iou(entities[best].bbox, spec.value) <= 0.0:
            raise SubjectNotFoundError("no entity overlaps the requested box")
        return entities[best]
    x, y = spec.value
    containing = [e for e in entities if e.bbox.contains_point(x, y)]
    if not containing:
        raise SubjectNotFoundError(f"no entity box contains point ({x}, {y})")
    return min(containing, key=lambda e: (e.bbox.area, -e.confidence))


def candidate_objects(subject: Entity, entities: Sequence[Entity]) -> list[Entity]:
    """Entities overlapping the subject (IoU strictly positive), order preserved."""
    return [
        e
        for e in entities
        if e.id != subject.id and iou(subject.bbox, e.bbox) > 0.0
    ]


def build_vqa_prompt(question: str, graphs: Sequence[LocalSceneGraph]) -> str:
    """Render graphs as one-sentence-per-triplet context for a VQA query.

    The template supplies the period closing the context block, so the final
    sentence's own period is dropped; an empty context renders "Context: .".
    """
    sentences = []
    for graph in graphs:
        entity_map = graph.entity_map()
        for relation in graph.relations:
            obj = entity_map[relation.object_id]
            sentences.append(f"A {graph.subject.label} is {relation.predicate} a {obj.label}.")
    context = " ".join(sentences)
    return render_vqa(context.removesuffix("."), question)


class Pipeline:
    """Drives the observer/thinker/verifier roles for one proposal mode."""

    def __init__(
        self,
        backends: BackendSet,
        mode: ProposalMode = ProposalMode(),
        *,
        coca_enabled: bool = True,
        calibration_route: str = "thinker",
        coca_confidence: float = 0.5,
        parallelism: int = 4,
    ) -> None:
        if calibration_route not in ("thinker", "verifier"):
            raise ValidationError(f"unknown calibration route {calibration_route!r}")
        if not 0.0 <= coca_confidence <= 1.0:
            raise ValidationError("coca confidence must be in [0, 1]")
        if parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        self.backends = backends
        self.mode = mode
        self.coca_enabled = coca_enabled
        self.calibration_route = calibration_route
        self.coca_confidence = coca_confidence
        self.parallelism = parallelism

    # -- proposal -----------------------------------------------------------

    def propose(self, subject: Entity, objects: Sequence[Entity]) -> list[Triplet]:
        """Ask the reasoner for candidate triplets between subject and objects."""
        if not objects:
            raise ValidationError("propose requires at least one candidate object")
        labels = [o.label for o in objects]
        if self.mode.kind == "open":
            prompt = render_thinker_open(subject.label, labels)
        else:
            assert self.mode.vocab is not None
            prompt = render_thinker_closed(subject.label, labels, self.mode.vocab.predicates)
        completion = self.backends.thinker.complete(prompt)
        report = parse_triplets(completion, subject, objects)
        candidates = report.accepted
        if self.mode.kind == "closed":
            vocab_set = set(self.mode.vocab.predicates)
            candidates = tuple(c for c in candidates if c.predicate in vocab_set)
        seen: set[tuple[str, str, str]] = set()
        unique: list[Triplet] = []
        for candidate in candidates:
            if candidate.key() in seen:
                continue
            seen.add(candidate.key())
            unique.append(candidate)
        return unique

    # -- verification -------------------------------------------------------

    def verify_with_coca(
        self, triplet: Triplet, image: ImageRef, entities: Mapping[str, Entity]
    ) -> VerificationTrace:
        """Verify one candidate; on a negative answer, attempt the rescue path."""
        if triplet.status is not TripletStatus.CANDIDATE:
            raise ValidationError("verification expects a candidate triplet")
        subject_label = entities[triplet.subject_id].label
        object_label = entities[triplet.object_id].label
        question = render_verify(subject_label, triplet.predicate, object_label)
        answer = self.backends.verifier.answer(image, question)
        if parse_yes_no(answer.text) is YesNo.YES:
            confidence = 1.0 if answer.yes_probability is None else answer.yes_probability
            return VerificationTrace(
                triplet=triplet.with_status(TripletStatus.VERIFIED_DIRECT, confidence),
                verify_answer=answer.text,
                rationale=None,
                calibration_answer=None,
                coca_applied=self.coca_enabled,
            )
        if not self.coca_enabled:
            return VerificationTrace(
                triplet=triplet.with_status(TripletStatus.REJECTED),
                verify_answer=answer.text,
                rationale=None,
                calibration_answer=None,
                coca_applied=False,
            )
        rationale_q = render_rationale(subject_label, object_label)
        rationale = self.backends.verifier.answer(image, rationale_q).text
        calibration_q = render_calibration(
            rationale, subject_label, triplet.predicate, object_label
        )
        if self.calibration_route == "thinker":
            calibration_answer = self.backends.thinker.complete(calibration_q)
        else:
            calibration_answer = self.backends.verifier.answer(image, calibration_q).text
        if parse_yes_no(calibration_answer) is YesNo.YES:
            final = triplet.with_status(TripletStatus.VERIFIED_COCA, self.coca_confidence)
        else:
            final = triplet.with_status(TripletStatus.REJECTED)
        return VerificationTrace(
            triplet=final,
            verify_answer=answer.text,
            rationale=rationale,
            calibration_answer=calibration_answer,
            coca_applied=True,
        )

    def _verify_all(
        self,
        candidates: Sequence[Triplet],
        image: ImageRef,
        entities: Mapping[str, Entity],
    ) -> list[VerificationTrace]:
        if not candidates:
            return []
        if self.parallelism == 1 or len(candidates) == 1:
            outcomes = []
            for candidate in candidates:
                try:
                    outcomes.append(self.verify_with_coca(candidate, image, entities))
                except ElegantError as exc:
                    raise GenerationAbort(exc, outcomes) from exc
            return outcomes
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            futures = [
                pool.submit(self.verify_with_coca, c, image, entities) for c in candidates
            ]
            completed: list[VerificationTrace] = []
            failure: Exception | None = None
            for future in futures:
                try:
                    completed.append(future.result())
                except ElegantError as exc:
                    failure = failure or exc
            if failure is not None:
                raise GenerationAbort(failure, completed) from failure
            return completed

    # -- graph assembly -----------------------------------------------------

    def _assemble(
        self,
        image: ImageRef,
        subject: Entity,
        objects: Sequence[Entity],
        traces: Sequence[VerificationTrace],
    ) -> LocalResult:
        verified = [
            t.triplet
            for t in traces
            if t.triplet.status in (TripletStatus.VERIFIED_DIRECT, TripletStatus.VERIFIED_COCA)
        ]
        verified.sort(key=lambda t: (t.object_id, t.predicate))
        referenced = {t.object_id for t in verified}
        kept_objects = tuple(sorted(
            (o for o in objects if o.id in referenced), key=lambda o: o.id
        ))
        graph = LocalSceneGraph(
            image_id=image.image_id,
            subject=subject,
            objects=kept_objects,
            relations=tuple(verified),
        )
        return LocalResult(graph=graph, traces=tuple(traces))

    def _generate_for_subject(
        self, image: ImageRef, subject: Entity, entities: Sequence[Entity]
    ) -> LocalResult:
        objects = candidate_objects(subject, entities)
        if not objects:
            return self._assemble(image, subject, (), ())
        candidates = self.propose(subject, objects)
        entity_map = {subject.id: subject}
        entity_map.update({o.id: o for o in objects})
        traces = self._verify_all(candidates, image, entity_map)
        return self._assemble(image, subject, objects, traces)

    def generate_local(
        self,
        image: ImageRef,
        spec: SubjectSpec,
        *,
        entities: Sequence[Entity] | None = None,
    ) -> LocalResult:
        """Full run for one subject; pass entities to bypass detection."""
        if entities is None:
            entities = self.backends.observer.detect(image)
        subject = select_subject(entities, spec)
        return self._generate_for_subject(image, subject, entities)

    def generate_global(
        self,
        image: ImageRef,
        *,
        entities: Sequence[Entity] | None = None,
    ) -> GlobalResult:
        """Take every entity as subject in turn and merge the local graphs."""
        if entities is None:
            entities = self.backends.observer.detect(image)
        results: list[LocalResult] = []
        failures: list[SubjectFailure] = []
        for subject in entities:
            try:
                results.append(self._generate_for_subject(image, subject, entities))
            except ElegantError as exc:
                failures.append(
                    SubjectFailure(
                        subject_id=subject.id,
                        error_type=type(exc).__name__,
                        message=str(exc),
                    )
                )
        graph = merge_global([r.graph for r in results], image_id=image.image_id)
        return GlobalResult(graph=graph, locals=tuple(results), failures=tuple(failures))
