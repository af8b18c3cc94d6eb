"""Shared test helpers: entity/image builders and mock fixture authoring."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import pytest

from elegant.backends import (
    BackendSet,
    FixtureStore,
    build_backends,
    build_complete_request,
    build_detect_request,
    build_embed_image_request,
    build_embed_text_request,
    build_vqa_request,
    request_sha256,
)
from elegant.backends.protocol import canonical_json
from elegant.raster import ImageRef, synthetic_image
from elegant.scene import BBox, Entity, EntitySource


def make_bbox(x0: float, y0: float, x1: float, y1: float) -> BBox:
    return BBox(x_min=x0, y_min=y0, x_max=x1, y_max=y1)


def make_entity(
    entity_id: str,
    label: str,
    box: tuple[float, float, float, float],
    confidence: float = 0.9,
    source: EntitySource = EntitySource.DETECTED,
) -> Entity:
    return Entity(
        id=entity_id,
        label=label,
        bbox=make_bbox(*box),
        confidence=confidence,
        source=source,
    )


def make_image(image_id: str = "img0", seed: int = 7, width: int = 64, height: int = 64) -> ImageRef:
    return synthetic_image(image_id, seed, width, height)


class FixtureBuilder:
    """Author mock fixtures keyed exactly how the clients key requests."""

    def __init__(self) -> None:
        self.entries: list[dict[str, Any]] = []
        self._seen: dict[tuple[str, str], str] = {}

    def _add(self, role: str, request: dict[str, Any], response: dict[str, Any]) -> None:
        sha = request_sha256(request)
        key = (role, sha)
        rendered = canonical_json(response)
        if key in self._seen:
            if self._seen[key] != rendered:
                raise AssertionError(f"conflicting fixture for {role} {sha}")
            return
        self._seen[key] = rendered
        self.entries.append({"role": role, "request_sha256": sha, "response": response})

    def detect(
        self,
        image: ImageRef,
        detections: Sequence[tuple[str, tuple[float, float, float, float], float]],
        grounding_text: str | None = None,
    ) -> None:
        request = build_detect_request(image, grounding_text)
        response = {
            "entities": [
                {"label": label, "bbox": list(box), "confidence": confidence}
                for label, box, confidence in detections
            ]
        }
        self._add("observer", request, response)

    def complete(self, prompt: str, text: str) -> None:
        self._add("thinker", build_complete_request(prompt), {"text": text})

    def vqa(
        self, image: ImageRef, question: str, text: str, yes_probability: float | None = None
    ) -> None:
        response: dict[str, Any] = {"text": text}
        if yes_probability is not None:
            response["yes_probability"] = yes_probability
        self._add("verifier", build_vqa_request(image, question), response)

    def embed_text(self, text: str, vector: Sequence[float]) -> None:
        self._add("embedder", build_embed_text_request(text), {"vector": list(vector)})

    def embed_image_payload(self, payload_b64: str, vector: Sequence[float]) -> None:
        self._add("embedder", build_embed_image_request(payload_b64), {"vector": list(vector)})

    def raw(self, role: str, request: dict[str, Any], response: dict[str, Any]) -> None:
        self._add(role, request, response)

    def store(self) -> FixtureStore:
        return FixtureStore.from_obj(json.loads(json.dumps(self.entries)))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.entries, indent=2), encoding="utf-8")
        return path

    def backends(self) -> BackendSet:
        return build_backends({}, self.store(), env={})


@pytest.fixture
def fixture_builder() -> FixtureBuilder:
    return FixtureBuilder()


def coca_scenario() -> tuple[ImageRef, FixtureBuilder, dict[str, Any]]:
    """Scripted scene with six candidates: 2 direct yes, 2 rescued, 2 rejected.

    Detection ids follow response order: subject man=d000, then woman=d001,
    balloon=d002, tree=d003, dog=d004, chair=d005, table=d006.
    """
    from elegant.prompts import (
        render_calibration,
        render_rationale,
        render_thinker_open,
        render_verify,
    )

    image = make_image("scene0", seed=7, width=64, height=64)
    builder = FixtureBuilder()
    detections = [
        ("man", (0.0, 0.0, 40.0, 40.0), 0.95),
        ("woman", (10.0, 10.0, 50.0, 50.0), 0.9),
        ("balloon", (5.0, 5.0, 20.0, 20.0), 0.85),
        ("tree", (30.0, 30.0, 60.0, 60.0), 0.8),
        ("dog", (0.0, 20.0, 15.0, 35.0), 0.75),
        ("chair", (20.0, 0.0, 45.0, 15.0), 0.7),
        ("table", (15.0, 15.0, 35.0, 35.0), 0.65),
    ]
    builder.detect(image, detections)
    object_labels = [label for label, _, _ in detections[1:]]
    completion = (
        "Triplets: (man, watching, woman), (man, carrying, balloon), "
        "(man, near, tree), (man, holding, dog), (man, sitting on, chair), "
        "(man, using, table)"
    )
    builder.complete(render_thinker_open("man", object_labels), completion)

    # (predicate, object label, verify answer, yes_prob, rationale, calibration answer)
    script = [
        ("watching", "woman", "yes", 0.9, None, None),
        ("carrying", "balloon", "Yes, he is.", 0.8, None, None),
        ("near", "tree", "no", None, "the man stands beside the tree", "Yes"),
        ("holding", "dog", "No.", None, "the dog sits in the man's arms", "yes, clearly"),
        ("sitting on", "chair", "no", None, "the chair is behind the man", "No"),
        ("using", "table", "unclear", None, "the table holds a cup", "It is unclear."),
    ]
    for predicate, obj, answer, prob, rationale, calibration in script:
        builder.vqa(image, render_verify("man", predicate, obj), answer, prob)
        if rationale is not None:
            builder.vqa(image, render_rationale("man", obj), rationale)
            builder.complete(
                render_calibration(rationale, "man", predicate, obj), calibration
            )
    expectations = {
        "direct": [("watching", "d001", 0.9), ("carrying", "d002", 0.8)],
        "rescued": [("near", "d003"), ("holding", "d004")],
        "rejected": [("sitting on", "d005"), ("using", "d006")],
        "subject_id": "d000",
        "candidate_count": 6,
    }
    return image, builder, expectations


def e2e_scenario(root: Path) -> dict[str, Any]:
    """Three-image closed-vocabulary run with a fully scripted mock set.

    Writes annotations.json, fixtures.json, and manifest.json under ``root``
    and returns oracle data: expected graph sizes in output order, the
    (image vector, text vector) pairs backing every surviving relation, and
    hand-computed recall values.
    """
    from elegant.closedset import load_vocab
    from elegant.eclipse import mask_image
    from elegant.prompts import (
        render_calibration,
        render_rationale,
        render_thinker_closed,
        render_verify,
    )
    from elegant.raster import to_payload_b64

    vocab = load_vocab("visualds20").predicates
    builder = FixtureBuilder()

    images = {
        "imgA": make_image("imgA", seed=11, width=64, height=64),
        "imgB": make_image("imgB", seed=22, width=48, height=48),
        "imgC": make_image("imgC", seed=33, width=32, height=32),
    }
    boxes = {
        "a0": (0.0, 0.0, 30.0, 30.0),
        "a1": (10.0, 10.0, 40.0, 40.0),
        "a2": (20.0, 20.0, 50.0, 50.0),
        "b0": (0.0, 0.0, 10.0, 10.0),
        "b1": (5.0, 5.0, 20.0, 20.0),
        "b2": (30.0, 30.0, 45.0, 45.0),
        "c0": (0.0, 0.0, 20.0, 20.0),
        "c1": (5.0, 5.0, 15.0, 15.0),
        "c2": (10.0, 10.0, 25.0, 25.0),
        "c3": (15.0, 0.0, 30.0, 12.0),
    }
    labels = {
        "a0": "man", "a1": "chair", "a2": "dog",
        "b0": "cup", "b1": "shelf", "b2": "tree",
        "c0": "woman", "c1": "balloon", "c2": "balloon", "c3": "tree",
    }
    annotations = [
        {
            "image_id": "imgA",
            "width": 64,
            "height": 64,
            "uri": "synthetic:11:64x64",
            "entities": [_ann_entity(e, labels, boxes) for e in ("a0", "a1", "a2")],
            "triplets": [
                {"subject_id": "a0", "predicate": "sitting on", "object_id": "a1"},
                {"subject_id": "a2", "predicate": "watching", "object_id": "a0"},
                {"subject_id": "a0", "predicate": "playing", "object_id": "a2"},
            ],
        },
        {
            "image_id": "imgB",
            "width": 48,
            "height": 48,
            "uri": "synthetic:22:48x48",
            "entities": [_ann_entity(e, labels, boxes) for e in ("b0", "b1", "b2")],
            "triplets": [
                {"subject_id": "b0", "predicate": "mounted on", "object_id": "b1"},
            ],
        },
        {
            "image_id": "imgC",
            "width": 32,
            "height": 32,
            "uri": "synthetic:33:32x32",
            "entities": [_ann_entity(e, labels, boxes) for e in ("c0", "c1", "c2", "c3")],
            "triplets": [
                {"subject_id": "c0", "predicate": "carrying", "object_id": "c1"},
                {"subject_id": "c2", "predicate": "hanging from", "object_id": "c0"},
                {"subject_id": "c0", "predicate": "standing on", "object_id": "c3"},
            ],
        },
    ]

    # (image, subject, object labels, completion, [(pred, obj_label, answer, prob, rationale, calibration)])
    script = [
        ("imgA", "man", ["chair", "dog"],
         "(man, sitting on, chair), (man, watching, dog)",
         [("sitting on", "chair", "yes", 0.9, None, None),
          ("watching", "dog", "no", None, "the man looks toward the dog", "Yes")]),
        ("imgA", "chair", ["man", "dog"],
         "(chair, covered in, dog)",
         [("covered in", "dog", "no", None, "the dog sits near the chair", "No")]),
        ("imgA", "dog", ["man", "chair"],
         "(dog, watching, man), (dog, lying on, chair)",
         [("watching", "man", "yes", 0.8, None, None),
          ("lying on", "chair", "no", None, "the dog rests on the chair", "Yes")]),
        ("imgB", "cup", ["shelf"],
         "(cup, mounted on, shelf)",
         [("mounted on", "shelf", "yes", 0.95, None, None)]),
        ("imgB", "shelf", ["cup"],
         "(shelf, hanging from, cup)",
         [("hanging from", "cup", "no", None, "the cup rests on the shelf", "no")]),
        ("imgC", "woman", ["balloon", "balloon", "tree"],
         "(woman, carrying, balloon), (woman, watching, balloon), "
         "(woman, standing on, tree), (woman, watching, tree)",
         [("carrying", "balloon", "yes", 0.9, None, None),
          ("watching", "balloon", "no", None, "the balloon floats beside the woman", "Yes."),
          ("standing on", "tree", "no", None, "the tree shades the woman", "no")]),
        ("imgC", "balloon", ["woman", "balloon"],
         "(balloon, hanging from, woman)",
         [("hanging from", "woman", "yes", 0.7, None, None)]),
        ("imgC", "balloon2", ["woman", "balloon", "tree"],
         "(balloon, covering, tree), (balloon, hanging from, woman)",
         [("covering", "tree", "no", None, "the balloon drifts over the tree", "yes"),
          ("hanging from", "woman", "yes", 0.7, None, None)]),
        ("imgC", "tree", ["woman", "balloon"],
         "(tree, growing on, woman)",
         [("growing on", "woman", "no", None, "the woman stands by the tree", "unknown")]),
    ]
    for image_id, subject_label, object_labels, completion, candidates in script:
        image = images[image_id]
        real_subject = "balloon" if subject_label == "balloon2" else subject_label
        builder.complete(
            render_thinker_closed(real_subject, object_labels, vocab), completion
        )
        for predicate, obj_label, answer, prob, rationale, calibration in candidates:
            builder.vqa(image, render_verify(real_subject, predicate, obj_label), answer, prob)
            if rationale is not None:
                builder.vqa(image, render_rationale(real_subject, obj_label), rationale)
                builder.complete(
                    render_calibration(rationale, real_subject, predicate, obj_label),
                    calibration,
                )

    # Embedding fixtures: one image vector per unordered box pair, one text
    # vector per caption. All entries positive so no clamping occurs.
    pair_vectors = {
        ("a0", "a1"): [3, 1, 0, 2],
        ("a0", "a2"): [1, 2, 2, 0],
        ("a1", "a2"): [2, 0, 1, 1],
        ("b0", "b1"): [1, 1, 1, 1],
        ("c0", "c1"): [4, 1, 0, 1],
        ("c0", "c2"): [1, 3, 1, 0],
        ("c2", "c3"): [2, 2, 1, 0],
    }
    caption_vectors = {
        "The man is sitting on the chair.": [2, 1, 1, 1],
        "The man is watching the dog.": [1, 1, 0, 1],
        "The dog is watching the man.": [0, 1, 2, 1],
        "The dog is lying on the chair.": [1, 0, 1, 2],
        "The cup is mounted on the shelf.": [2, 2, 1, 1],
        "The woman is carrying the balloon.": [3, 1, 1, 0],
        "The woman is watching the balloon.": [1, 2, 0, 1],
        "The balloon is hanging from the woman.": [1, 1, 2, 1],
        "The balloon is covering the tree.": [2, 1, 2, 1],
    }
    image_of = lambda eid: images["img" + eid[0].upper()]

    def _box(eid: str) -> BBox:
        return make_bbox(*boxes[eid])

    for (first, second), vector in pair_vectors.items():
        pixels = image_of(first).pixels
        masked = mask_image(pixels, _box(first), _box(second))
        builder.embed_image_payload(to_payload_b64(masked), vector)
    for caption, vector in caption_vectors.items():
        builder.embed_text(caption, vector)

    # Surviving relations per local graph, in graphs.jsonl output order
    # (relations sorted by object id then predicate within each graph).
    relation_table = [
        ("imgA", "a0", [(("a0", "a1"), "The man is sitting on the chair."),
                        (("a0", "a2"), "The man is watching the dog.")]),
        ("imgA", "a1", []),
        ("imgA", "a2", [(("a0", "a2"), "The dog is watching the man."),
                        (("a1", "a2"), "The dog is lying on the chair.")]),
        ("imgB", "b0", [(("b0", "b1"), "The cup is mounted on the shelf.")]),
        ("imgB", "b1", []),
        ("imgB", "b2", []),
        ("imgC", "c0", [(("c0", "c1"), "The woman is carrying the balloon."),
                        (("c0", "c2"), "The woman is watching the balloon.")]),
        ("imgC", "c1", [(("c0", "c1"), "The balloon is hanging from the woman.")]),
        ("imgC", "c2", [(("c0", "c2"), "The balloon is hanging from the woman."),
                        (("c2", "c3"), "The balloon is covering the tree.")]),
        ("imgC", "c3", []),
    ]

    root.mkdir(parents=True, exist_ok=True)
    annotations_path = root / "annotations.json"
    annotations_path.write_text(json.dumps(annotations, indent=2), encoding="utf-8")
    fixtures_path = builder.write(root / "fixtures.json")
    manifest = {
        "mode": "closed:visualds20",
        "parallelism": 2,
        "subjects": "all",
        "annotations": str(annotations_path),
        "mock_fixtures": str(fixtures_path),
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    return {
        "manifest": manifest_path,
        "annotations": annotations_path,
        "fixtures": fixtures_path,
        "pair_vectors": pair_vectors,
        "caption_vectors": caption_vectors,
        "relation_table": relation_table,
        "expected_recall": 77.78,
        "expected_mean_recall": 71.43,
        "expected_diversity": {"entity_categories": 8, "relation_categories": 7,
                               "triplet_categories": 9},
    }


def _ann_entity(entity_id: str, labels: dict[str, str], boxes: dict[str, Any]) -> dict[str, Any]:
    x0, y0, x1, y1 = boxes[entity_id]
    return {
        "id": entity_id,
        "label": labels[entity_id],
        "bbox": {"x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1},
    }
