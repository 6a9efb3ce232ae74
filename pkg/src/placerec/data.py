"""Dataset manifests and image preprocessing.

One line-delimited manifest schema serves real place datasets and the
synthetic world: a header line with the schema version, then one JSON
record per image with place id, path, UTM position, heading and kind.
"""

import json
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .sampling import PanoRecord

MANIFEST_SCHEMA = "placerec-manifest"
MANIFEST_VERSION = 1
GROUPED_MIN_IMAGES = 4

# Large-corpus channel statistics; stored in configs/checkpoints rather
# than assumed, so trained models are self-describing.
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageEntry:
    path: str
    easting: float
    northing: float
    heading_offset: float = 0.0
    kind: str = "egocentric"  # "pano" | "egocentric"
    width: int = 0
    height: int = 0


@dataclass
class PlaceRecord:
    place_id: str
    images: list = field(default_factory=list)  # of ImageEntry


def write_manifest(places: list, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": MANIFEST_SCHEMA,
                             "version": MANIFEST_VERSION}) + "\n")
        for place in places:
            for img in place.images:
                fh.write(json.dumps({
                    "place_id": place.place_id, "image_path": img.path,
                    "easting": img.easting, "northing": img.northing,
                    "heading_offset": img.heading_offset, "kind": img.kind,
                    "width": img.width, "height": img.height,
                }) + "\n")


def load_manifest(path: str) -> list:
    """Parse a manifest into PlaceRecords (order of first appearance).

    Malformed lines raise ManifestError with their line number. Missing
    image files surface on first access, not here.
    """
    places: dict = {}
    with open(path) as fh:
        header = fh.readline()
        try:
            meta = json.loads(header)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line 1: bad header: {exc}") from exc
        if meta.get("schema") != MANIFEST_SCHEMA:
            raise ManifestError(f"unrecognized manifest schema: {meta.get('schema')!r}")
        if meta.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {meta.get('version')}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = ImageEntry(
                    path=rec["image_path"], easting=float(rec["easting"]),
                    northing=float(rec["northing"]),
                    heading_offset=float(rec.get("heading_offset", 0.0)),
                    kind=rec.get("kind", "egocentric"),
                    width=int(rec.get("width", 0)), height=int(rec.get("height", 0)))
                pid = str(rec["place_id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
            places.setdefault(pid, PlaceRecord(place_id=pid)).images.append(entry)
    return list(places.values())


def filter_grouped(places: list, min_images: int = GROUPED_MIN_IMAGES
                   ) -> tuple[list, int]:
    """Drop places too small for grouped pair sampling; returns the count."""
    kept = [p for p in places if len(p.images) >= min_images]
    return kept, len(places) - len(kept)


def pano_records(places: list, root: str = "") -> list:
    """Flatten panorama entries into sampler records, resolving paths."""
    out = []
    for place in places:
        for img in place.images:
            if img.kind != "pano":
                continue
            out.append(PanoRecord(
                image_ref=os.path.join(root, img.path), easting=img.easting,
                northing=img.northing, pano_width=img.width,
                pano_height=img.height, heading_offset=img.heading_offset))
    return out


def load_image(path: str) -> np.ndarray:
    """Decode an image file to (3, H, W) uint8 RGB."""
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot decode image: {path}")
    return np.ascontiguousarray(bgr[:, :, ::-1].transpose(2, 0, 1))


def preprocess(image: np.ndarray, size: int,
               mean=DEFAULT_MEAN, std=DEFAULT_STD) -> torch.Tensor:
    """Resize to a square, scale to [0,1], standardize per channel.

    Accepts (3, H, W) or (H, W, 3) uint8/float arrays; returns a float32
    (3, size, size) tensor.
    """
    if image.ndim != 3:
        raise ValueError("expected a 3-channel image")
    if image.shape[0] == 3 and image.shape[-1] != 3:
        image = image.transpose(1, 2, 0)
    resized = cv2.resize(image.astype(np.float32), (size, size),
                         interpolation=cv2.INTER_LINEAR)
    resized = resized / 255.0
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    out = (resized - mean) / std
    return torch.from_numpy(out.transpose(2, 0, 1).copy())
