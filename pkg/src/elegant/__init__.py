"""Local scene graph generation engine.

Generates a scene graph around one chosen subject by orchestrating three
model capabilities (observer, thinker, verifier) over an HTTP/JSON wire
protocol, with a rescue pass that re-examines rejected candidates against the
verifier's own rationale. Results are scored open-endedly (masked-image
CLIPScore with a log-barrier length penalty) or against closed-set ground
truth (Recall@K / Mean Recall@K).
"""

__version__ = "0.1.0"

from .scene import (
    BBox,
    Entity,
    EntitySource,
    GlobalSceneGraph,
    LocalSceneGraph,
    Triplet,
    TripletStatus,
    iou,
    merge_global,
)

__all__ = [
    "BBox",
    "Entity",
    "EntitySource",
    "GlobalSceneGraph",
    "LocalSceneGraph",
    "Triplet",
    "TripletStatus",
    "iou",
    "merge_global",
    "__version__",
]
