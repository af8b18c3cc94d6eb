"""Open-ended scoring: masked-image CLIPScore per triplet, graph aggregation,
and the log-barrier length penalty.

The penalty is centered at the dataset mean prediction length m* and uses the
natural logarithm throughout; its continuous extension at length 1 is 0. All
means use math.fsum, so aggregation is invariant to evaluation order.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .backends.roles import EmbedderClient
from .errors import (
    CannotCalibrateError,
    EmptyGraphError,
    UndefinedCosineError,
    ValidationError,
)
from .raster import ImageRef, content_sha256, to_payload_b64
from .scene import BBox, LocalSceneGraph, Triplet, normalize_label

GraphKey = tuple[str, str]


@dataclass(frozen=True)
class PenaltyParams:
    """Length-penalty parameters: center m* (> 1) and strength alpha (> 0)."""

    m_star: float
    alpha: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.m_star) and self.m_star > 1.0):
            raise ValidationError(f"m_star must be > 1, got {self.m_star}")
        if not (math.isfinite(self.alpha) and self.alpha > 0.0):
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")


def penalty(x: float, params: PenaltyParams) -> float:
    """Length penalty in [0, 1], equal to 1 exactly at x = m*.

    For x > 1: exp(-alpha * (x + (m*-1) * ln((m*-1)/(x-1)) - m*)).
    At x = 1 the barrier diverges; we use the continuous-extension limit 0.
    """
    if not math.isfinite(x) or x < 1.0:
        raise ValidationError(f"prediction length must be >= 1, got {x}")
    if x == 1.0:
        return 0.0
    mu = params.m_star - 1.0
    shifted = x + mu * math.log(mu / (x - 1.0)) - params.m_star
    return math.exp(-params.alpha * shifted)


def penalty_curve(
    params: PenaltyParams, x_min: float, x_max: float, steps: int
) -> list[tuple[float, float]]:
    """Sample (x, P(x)) on an even grid; used for the CSV export."""
    if steps < 2 or x_min < 1.0 or x_max <= x_min:
        raise ValidationError("penalty curve needs x_max > x_min >= 1 and steps >= 2")
    span = x_max - x_min
    grid = [x_min + span * i / (steps - 1) for i in range(steps)]
    return [(x, penalty(x, params)) for x in grid]


def _as_vector(values: Any) -> np.ndarray:
    raw = getattr(values, "values", values)
    vector = np.asarray(raw, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise ValidationError("embedding must be a nonempty 1-D vector")
    return vector


def clip_score(image_embedding: Any, text_embedding: Any) -> float:
    """max(100 * cosine(image, text), 0)."""
    img = _as_vector(image_embedding)
    txt = _as_vector(text_embedding)
    if img.shape != txt.shape:
        raise ValidationError(f"embedding dimensions differ: {img.size} vs {txt.size}")
    norm_img = float(np.linalg.norm(img))
    norm_txt = float(np.linalg.norm(txt))
    if norm_img == 0.0 or norm_txt == 0.0:
        raise UndefinedCosineError("cosine undefined for zero vectors")
    cosine = float(np.dot(img, txt)) / (norm_img * norm_txt)
    return max(100.0 * cosine, 0.0)


def graph_clip_score(scores: Sequence[float]) -> float:
    """Arithmetic mean of per-triplet scores; empty graphs signal EmptyGraphError."""
    if not scores:
        raise EmptyGraphError("graph has no relations to average")
    return math.fsum(scores) / len(scores)


def mean_prediction_length(graphs: Iterable[LocalSceneGraph]) -> float:
    """Mean relation count over graphs with at least one relation."""
    sizes = [len(g.relations) for g in graphs if g.relations]
    if not sizes:
        raise CannotCalibrateError("all graphs are empty; mean prediction length undefined")
    return math.fsum(sizes) / len(sizes)


def mask_image(pixels: np.ndarray, box_a: BBox, box_b: BBox) -> np.ndarray:
    """Zero out every pixel outside the union of the two boxes.

    A pixel belongs to a box when its center (col + 0.5, row + 0.5) lies in
    the half-open region [x_min, x_max) x [y_min, y_max).
    """
    arr = np.asarray(pixels)
    if arr.ndim not in (2, 3):
        raise ValidationError(f"expected 2-D or 3-D pixel array, got shape {arr.shape}")
    height, width = int(arr.shape[0]), int(arr.shape[1])
    for box in (box_a, box_b):
        if not box.within_bounds(width, height):
            raise ValidationError(f"box {box} outside image {width}x{height}")
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5

    def member(box: BBox) -> np.ndarray:
        cols = (xs >= box.x_min) & (xs < box.x_max)
        rows = (ys >= box.y_min) & (ys < box.y_max)
        return np.outer(rows, cols)

    keep = member(box_a) | member(box_b)
    out = np.zeros_like(arr)
    out[keep] = arr[keep]
    return out


def triplet_caption(subject_label: str, predicate: str, object_label: str) -> str:
    parts = []
    for value, what in (
        (subject_label, "subject label"),
        (predicate, "predicate"),
        (object_label, "object label"),
    ):
        normalized = normalize_label(value)
        if not normalized:
            raise ValidationError(f"{what} must be nonempty")
        parts.append(normalized)
    return f"The {parts[0]} is {parts[1]} the {parts[2]}."


@dataclass(frozen=True)
class TripletScore:
    triplet: Triplet
    clip_score: float
    caption: str
    masked_sha256: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.clip_score <= 100.0:
            raise ValidationError(f"clip score {self.clip_score} outside [0, 100]")


@dataclass(frozen=True)
class GraphScore:
    """Per-graph aggregation: eclipse = penalty * mean clip score."""

    image_id: str
    subject_id: str
    size: int
    mean_clip: float
    penalty: float
    eclipse: float
    scores: tuple[float, ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "subject_id": self.subject_id,
            "size": self.size,
            "mean_clip": self.mean_clip,
            "penalty": self.penalty,
            "eclipse": self.eclipse,
        }


def eclipse(graph: LocalSceneGraph, scores: Sequence[float], params: PenaltyParams) -> GraphScore:
    """Score one local graph; an empty graph scores 0 by definition."""
    if len(scores) != len(graph.relations):
        raise ValidationError(
            f"got {len(scores)} scores for {len(graph.relations)} relations"
        )
    if not graph.relations:
        return GraphScore(
            image_id=graph.image_id,
            subject_id=graph.subject.id,
            size=0,
            mean_clip=0.0,
            penalty=0.0,
            eclipse=0.0,
            scores=(),
        )
    mean_clip = graph_clip_score(scores)
    factor = penalty(float(len(scores)), params)
    return GraphScore(
        image_id=graph.image_id,
        subject_id=graph.subject.id,
        size=len(scores),
        mean_clip=mean_clip,
        penalty=factor,
        eclipse=factor * mean_clip,
        scores=tuple(scores),
    )


@dataclass(frozen=True)
class DatasetEclipse:
    m_star: float
    alpha: float
    graph_scores: tuple[GraphScore, ...]
    dataset_eclipse: float


def dataset_eclipse(
    graphs: Sequence[LocalSceneGraph],
    scores_by_graph: Mapping[GraphKey, Sequence[float]],
    alpha: float,
    granularity: str = "local",
) -> DatasetEclipse:
    """Two-pass dataset scoring: calibrate m*, then score and average.

    Empty graphs are excluded from the m* calibration but count as 0 in the
    final average. Granularity "local" averages over local graphs (the unit
    of prediction); "image" first averages per image.
    """
    if granularity not in ("local", "image"):
        raise ValidationError(f"unknown granularity {granularity!r}")
    m_star = mean_prediction_length(graphs)
    params = PenaltyParams(m_star=m_star, alpha=alpha)
    graph_scores = []
    for graph in graphs:
        key = (graph.image_id, graph.subject.id)
        scores = scores_by_graph.get(key, ())
        graph_scores.append(eclipse(graph, scores, params))
    if granularity == "local":
        overall = math.fsum(g.eclipse for g in graph_scores) / len(graph_scores)
    else:
        by_image: dict[str, list[float]] = {}
        for score in graph_scores:
            by_image.setdefault(score.image_id, []).append(score.eclipse)
        per_image = [math.fsum(vals) / len(vals) for _, vals in sorted(by_image.items())]
        overall = math.fsum(per_image) / len(per_image)
    return DatasetEclipse(
        m_star=m_star,
        alpha=alpha,
        graph_scores=tuple(graph_scores),
        dataset_eclipse=overall,
    )


class _EmbedCache:
    """Content-hash cache so identical payloads embed once."""

    def __init__(self, embed: Callable[[str], Any]) -> None:
        self._embed = embed
        self._store: dict[str, Any] = {}
        self._lock = threading.Lock()

    def get(self, key: str, payload: str) -> Any:
        with self._lock:
            if key in self._store:
                return self._store[key]
        vector = self._embed(payload)
        with self._lock:
            self._store.setdefault(key, vector)
            return self._store[key]


def score_local_graph(
    graph: LocalSceneGraph,
    image: ImageRef,
    embedder: EmbedderClient,
    image_cache: _EmbedCache | None = None,
    text_cache: _EmbedCache | None = None,
) -> list[TripletScore]:
    """Masked-image CLIPScore for every relation of one local graph."""
    if graph.image_id != image.image_id:
        raise ValidationError(
            f"graph {graph.image_id!r} scored against image {image.image_id!r}"
        )
    image_cache = image_cache or _EmbedCache(embedder.embed_image)
    text_cache = text_cache or _EmbedCache(embedder.embed_text)
    pixels = image.load_pixels()
    entity_map = graph.entity_map()
    results: list[TripletScore] = []
    for relation in graph.relations:
        obj = entity_map[relation.object_id]
        masked = mask_image(pixels, graph.subject.bbox, obj.bbox)
        masked_sha = content_sha256(masked)
        image_vec = image_cache.get(masked_sha, to_payload_b64(masked))
        caption = triplet_caption(graph.subject.label, relation.predicate, obj.label)
        text_vec = text_cache.get(caption, caption)
        results.append(
            TripletScore(
                triplet=relation,
                clip_score=clip_score(image_vec, text_vec),
                caption=caption,
                masked_sha256=masked_sha,
            )
        )
    return results


def score_graphs(
    graphs: Sequence[LocalSceneGraph],
    images_by_id: Mapping[str, ImageRef],
    embedder: EmbedderClient,
    parallelism: int = 4,
) -> dict[GraphKey, list[TripletScore]]:
    """Score many graphs, fanning embedding calls out across threads."""
    image_cache = _EmbedCache(embedder.embed_image)
    text_cache = _EmbedCache(embedder.embed_text)

    def work(graph: LocalSceneGraph) -> list[TripletScore]:
        image = images_by_id.get(graph.image_id)
        if image is None:
            raise ValidationError(f"no image source for {graph.image_id!r}")
        return score_local_graph(graph, image, embedder, image_cache, text_cache)

    if parallelism <= 1 or len(graphs) <= 1:
        scored = [work(g) for g in graphs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            scored = list(pool.map(work, graphs))
    return {(g.image_id, g.subject.id): s for g, s in zip(graphs, scored)}


def eclipse_report(
    graphs: Sequence[LocalSceneGraph],
    scores_by_graph: Mapping[GraphKey, Sequence[float]],
    alphas: Sequence[float],
    granularity: str = "local",
) -> list[dict[str, Any]]:
    """One report object per alpha, in the given order."""
    reports = []
    for alpha in alphas:
        result = dataset_eclipse(graphs, scores_by_graph, alpha, granularity)
        reports.append(
            {
                "alpha": result.alpha,
                "m_star": result.m_star,
                "per_graph": [g.to_json_dict() for g in result.graph_scores],
                "dataset_eclipse": result.dataset_eclipse,
            }
        )
    return reports
