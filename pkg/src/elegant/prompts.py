"""Prompt templates with slot filling, plus parsers for triplet lists and yes/no.

Templates live as text assets under ``elegant/templates`` and are loaded
byte-for-byte; rendering replaces ``{slot}`` markers in a single pass, so
slot-like text inside filled values is never re-expanded. The triplet parser
is total: every balanced parenthesized fragment of a completion is either
accepted as a candidate or reported as skipped with a reason.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

from .errors import ValidationError
from .scene import Entity, Triplet, TripletStatus, normalize_label

TEMPLATE_NAMES = (
    "thinker_open",
    "thinker_closed_20",
    "thinker_closed_24",
    "verify",
    "rationale",
    "calibration",
    "vqa_context",
)

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """A template body with named slots; render() fills all of them at once."""

    name: str
    body: str
    required_slots: frozenset[str]

    def render(self, **values: str) -> str:
        missing = self.required_slots - values.keys()
        if missing:
            raise ValidationError(f"template {self.name} missing slots: {sorted(missing)}")
        extra = values.keys() - self.required_slots
        if extra:
            raise ValidationError(f"template {self.name} got unknown slots: {sorted(extra)}")
        return _SLOT_RE.sub(lambda match: values[match.group(1)], self.body)


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise ValidationError(f"unknown template {name!r}")
    body = resources.files("elegant").joinpath(f"templates/{name}.txt").read_text("utf-8")
    slots = frozenset(_SLOT_RE.findall(body))
    return PromptTemplate(name=name, body=body, required_slots=slots)


def _candidate_list_literal(body: str) -> str:
    marker = "relationship candidates: "
    start = body.index(marker) + len(marker)
    end = body.index(".\n", start)
    return body[start:end]


def template_vocab(name: str) -> tuple[str, ...]:
    """The relation list enumerated by a closed-set template, in template order."""
    literal = _candidate_list_literal(load_template(name).body)
    return tuple(normalize_label(part) for part in literal.replace("\n", " ").split(","))


@lru_cache(maxsize=None)
def _generic_closed_template() -> PromptTemplate:
    base = load_template("thinker_closed_20")
    literal = _candidate_list_literal(base.body)
    body = base.body.replace(literal, "{candidates}")
    return PromptTemplate(
        name="thinker_closed_generic",
        body=body,
        required_slots=frozenset(_SLOT_RE.findall(body)),
    )


def _require_label(value: str, what: str) -> str:
    normalized = normalize_label(value)
    if not normalized:
        raise ValidationError(f"{what} must be nonempty")
    return normalized


def render_thinker_open(subject_label: str, entity_labels: Iterable[str]) -> str:
    subject = _require_label(subject_label, "subject label")
    entities = ", ".join(entity_labels)
    return load_template("thinker_open").render(subject=subject, entities=entities)


def render_thinker_closed(
    subject_label: str, entity_labels: Iterable[str], relation_vocab: Sequence[str]
) -> str:
    subject = _require_label(subject_label, "subject label")
    vocab = [normalize_label(p) for p in relation_vocab]
    if not vocab:
        raise ValidationError("relation vocabulary must be nonempty")
    entities = ", ".join(entity_labels)
    for name in ("thinker_closed_20", "thinker_closed_24"):
        if tuple(vocab) == template_vocab(name):
            return load_template(name).render(subject=subject, entities=entities)
    return _generic_closed_template().render(
        subject=subject, entities=entities, candidates=", ".join(vocab)
    )


def render_verify(subject_label: str, predicate: str, object_label: str) -> str:
    return load_template("verify").render(
        subject=_require_label(subject_label, "subject label"),
        relationship=_require_label(predicate, "predicate"),
        object=_require_label(object_label, "object label"),
    )


def render_rationale(subject_label: str, object_label: str) -> str:
    return load_template("rationale").render(
        subject=_require_label(subject_label, "subject label"),
        object=_require_label(object_label, "object label"),
    )


def render_calibration(
    rationale: str, subject_label: str, predicate: str, object_label: str
) -> str:
    if not rationale.strip():
        raise ValidationError("rationale must be nonempty")
    return load_template("calibration").render(
        rationale=rationale,
        subject=_require_label(subject_label, "subject label"),
        relationship=_require_label(predicate, "predicate"),
        object=_require_label(object_label, "object label"),
    )


def render_vqa(context: str, question: str) -> str:
    if not question.strip():
        raise ValidationError("question must be nonempty")
    return load_template("vqa_context").render(context=context, question=question)


# ---------------------------------------------------------------------------
# Parsers


class YesNo(enum.Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


_LEADING_WORD_RE = re.compile(r"[a-z]+")


def parse_yes_no(answer_text: str) -> YesNo:
    """Classify an answer by its leading word token after trim/lowercase."""
    match = _LEADING_WORD_RE.match(answer_text.strip().lower())
    if match is None:
        return YesNo.UNKNOWN
    token = match.group(0)
    if token == "yes":
        return YesNo.YES
    if token == "no":
        return YesNo.NO
    return YesNo.UNKNOWN


@dataclass(frozen=True)
class SkippedFragment:
    fragment: str
    reason: str


@dataclass(frozen=True)
class ParseReport:
    """Accepted candidates plus skipped fragments; jointly total over the input."""

    accepted: tuple[Triplet, ...]
    skipped: tuple[SkippedFragment, ...]


def balanced_fragments(text: str) -> list[str]:
    """Top-level balanced ``(...)`` spans, including the parentheses."""
    fragments: list[str] = []
    depth = 0
    start = -1
    for index, char in enumerate(text):
        if char == "(":
            if depth == 0:
                start = index
            depth += 1
        elif char == ")" and depth > 0:
            depth -= 1
            if depth == 0:
                fragments.append(text[start : index + 1])
    return fragments


def parse_triplets(
    completion: str, subject: Entity, allowed_objects: Sequence[Entity]
) -> ParseReport:
    """Extract (subject, predicate, object) candidates from a completion.

    A fragment is accepted only when it has exactly three comma-separated
    parts, the first matches the subject's label, and the third matches an
    allowed object's label (normalized exact match). Repeated object labels
    resolve to the not-yet-used instance with the highest detection
    confidence; hallucinated objects are skipped, never guessed.
    """
    used_ids: set[str] = set()
    accepted: list[Triplet] = []
    skipped: list[SkippedFragment] = []
    for fragment in balanced_fragments(completion):
        parts = fragment[1:-1].split(",")
        if len(parts) != 3:
            skipped.append(SkippedFragment(fragment, "arity-mismatch"))
            continue
        subject_label = normalize_label(parts[0])
        predicate = normalize_label(parts[1])
        object_label = normalize_label(parts[2])
        if not predicate:
            skipped.append(SkippedFragment(fragment, "empty-predicate"))
            continue
        if subject_label != subject.label:
            skipped.append(SkippedFragment(fragment, "subject-mismatch"))
            continue
        pool = [e for e in allowed_objects if e.label == object_label]
        if not pool:
            skipped.append(SkippedFragment(fragment, "unknown-object"))
            continue
        available = [e for e in pool if e.id not in used_ids]
        if not available:
            skipped.append(SkippedFragment(fragment, "object-instances-exhausted"))
            continue
        chosen = max(available, key=lambda e: e.confidence)
        used_ids.add(chosen.id)
        accepted.append(
            Triplet(
                subject_id=subject.id,
                predicate=predicate,
                object_id=chosen.id,
                status=TripletStatus.CANDIDATE,
            )
        )
    return ParseReport(accepted=tuple(accepted), skipped=tuple(skipped))
