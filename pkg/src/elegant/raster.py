"""Minimal raster abstraction: synthetic images, .npy loading, canonical bytes.

The engine does not decode image formats. Pixel sources are numpy arrays,
``.npy`` files, or deterministic synthetic rasters addressed as
``synthetic:<seed>:<width>x<height>``. Canonical bytes give every raster a
stable content identity for hashing and wire payloads.
"""

from __future__ import annotations

import base64
import hashlib
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

_SYNTHETIC_RE = re.compile(r"^synthetic:(\d+):(\d+)x(\d+)$")
_MAGIC = b"RAST"


def canonical_bytes(pixels: np.ndarray) -> bytes:
    """Serialize pixels to a stable uncompressed binary form."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValidationError(f"expected (h, w, c) pixels, got shape {arr.shape}")
    height, width, channels = arr.shape
    header = _MAGIC + struct.pack("<III", width, height, channels)
    return header + arr.tobytes()


def content_sha256(pixels: np.ndarray) -> str:
    return hashlib.sha256(canonical_bytes(pixels)).hexdigest()


def to_payload_b64(pixels: np.ndarray) -> str:
    return base64.b64encode(canonical_bytes(pixels)).decode("ascii")


def from_payload_b64(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    if raw[:4] != _MAGIC or len(raw) < 16:
        raise ValidationError("payload is not a canonical raster")
    width, height, channels = struct.unpack("<III", raw[4:16])
    body = np.frombuffer(raw[16:], dtype=np.uint8)
    if body.size != width * height * channels:
        raise ValidationError("canonical raster payload truncated")
    return body.reshape(height, width, channels)


@dataclass(frozen=True)
class ImageRef:
    """An image with identity and dimensions; pixels are optional.

    Generation only needs (id, dimensions, uri) to address the image over the
    wire; masking and embedding need pixels, loaded lazily from the uri when
    not attached.
    """

    image_id: str
    width: int
    height: int
    uri: str | None = None
    pixels: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValidationError("image_id must be nonempty")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.image_id!r} dimensions must be positive")
        if self.pixels is not None:
            arr = np.asarray(self.pixels)
            if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
                raise ValidationError(
                    f"image {self.image_id!r} pixels must be uint8 (h, w, 3), "
                    f"got {arr.dtype} {arr.shape}"
                )
            if arr.shape[0] != self.height or arr.shape[1] != self.width:
                raise ValidationError(
                    f"image {self.image_id!r} pixel shape {arr.shape[:2]} does not match "
                    f"declared {self.height}x{self.width}"
                )
            object.__setattr__(self, "pixels", arr)

    def request_fields(self) -> dict[str, str]:
        """Wire addressing for this image: a uri when known, else inline bytes."""
        if self.uri:
            return {"image_id": self.image_id, "image_uri": self.uri}
        if self.pixels is not None:
            return {"image_id": self.image_id, "image_b64": to_payload_b64(self.pixels)}
        raise ValidationError(f"image {self.image_id!r} has neither uri nor pixels")

    def load_pixels(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if not self.uri:
            raise ValidationError(f"image {self.image_id!r} has no pixel source")
        return resolve_pixels(self.uri)

    def with_pixels(self) -> "ImageRef":
        if self.pixels is not None:
            return self
        return ImageRef(
            image_id=self.image_id,
            width=self.width,
            height=self.height,
            uri=self.uri,
            pixels=self.load_pixels(),
        )


def synthetic_pixels(seed: int, width: int, height: int) -> np.ndarray:
    """Deterministic pseudo-random pixels; RandomState keeps them stable across runs."""
    rng = np.random.RandomState(seed)
    return rng.randint(0, 256, size=(height, width, 3)).astype(np.uint8)


def synthetic_image(image_id: str, seed: int, width: int, height: int) -> ImageRef:
    return ImageRef(
        image_id=image_id,
        width=width,
        height=height,
        uri=f"synthetic:{seed}:{width}x{height}",
        pixels=synthetic_pixels(seed, width, height),
    )


def resolve_pixels(uri: str) -> np.ndarray:
    """Resolve a pixel source URI: synthetic:<seed>:<w>x<h>, npy:<path>, or a .npy path."""
    match = _SYNTHETIC_RE.match(uri)
    if match:
        seed, width, height = (int(g) for g in match.groups())
        return synthetic_pixels(seed, width, height)
    path = Path(uri[4:]) if uri.startswith("npy:") else Path(uri)
    if path.suffix != ".npy":
        raise ValidationError(f"unsupported raster uri {uri!r} (expected synthetic:* or *.npy)")
    return np.asarray(np.load(path), dtype=np.uint8)


def load_image(image_id: str, uri: str, width: int | None = None, height: int | None = None) -> ImageRef:
    pixels = resolve_pixels(uri)
    h, w = int(pixels.shape[0]), int(pixels.shape[1])
    if width is not None and width != w or height is not None and height != h:
        raise ValidationError(
            f"image {image_id!r} declared {width}x{height} but source is {w}x{h}"
        )
    return ImageRef(image_id=image_id, width=w, height=h, uri=uri, pixels=pixels)
