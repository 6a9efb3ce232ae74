"""Place-aware pair generation from panorama geometry.

Street-view-style datasets are partitioned into square UTM cells; each
cell gets a mean coordinate and a principal direction from SVD. Pairs are
formed by sampling a focal point near the cell mean, cropping each
panorama toward it, and accepting the pair only when the two viewing
angles differ by a moderate amount. Grouped datasets (landmark-style)
just draw two distinct images per place.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

FOCAL_DIST_MIN = 10.0  # meters
FOCAL_DIST_MAX = 20.0
THETA_MIN = 3.0  # degrees, crop-angle difference acceptance band
THETA_MAX = 50.0
DEFAULT_CELL_SIZE = 15.0  # meters, desk-scale default
DEFAULT_MAX_ATTEMPTS = 32


@dataclass(frozen=True)
class PanoRecord:
    image_ref: str
    easting: float
    northing: float
    pano_width: int
    pano_height: int
    heading_offset: float = 0.0  # bearing (deg) of pixel column 0

    def __post_init__(self):
        if self.pano_width < self.pano_height:
            raise ValueError("panorama must be wider than tall")
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise ValueError("non-finite UTM coordinates")


@dataclass
class Cell:
    cell_id: tuple
    members: list  # of PanoRecord
    mean_utm: np.ndarray  # (2,) easting, northing
    principal_dir: np.ndarray  # (2,) unit vector


@dataclass
class FocalPoint:
    point: np.ndarray  # (2,) UTM meters
    observation_angle: float  # degrees in [0, 360)
    focal_length: float  # meters in [10, 20]


@dataclass
class CropSpec:
    """A deferred panorama crop: which image, looking where."""
    image_ref: str
    bearing: float  # degrees
    heading_offset: float


@dataclass
class PairSample:
    image_a: object  # array, CropSpec, or image ref
    image_b: object
    place_id: object
    theta: Optional[float] = None  # crop-angle difference, cell pairs only
    source: str = "grouped"  # "focal" | "grouped"


def partition_cells(records: list, cell_size: float) -> list:
    """Assign records to square cells and compute per-cell SVD geometry.

    Cells with fewer than two members, or whose coordinates all coincide,
    are discarded. The principal direction's sign is fixed (easting >= 0,
    ties broken by northing >= 0) so results do not depend on the SVD
    implementation.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    buckets: dict = {}
    for rec in records:
        key = (math.floor(rec.easting / cell_size),
               math.floor(rec.northing / cell_size))
        buckets.setdefault(key, []).append(rec)

    cells = []
    for key, members in sorted(buckets.items()):
        if len(members) < 2:
            continue
        coords = np.array([[r.easting, r.northing] for r in members])
        mean = coords.mean(axis=0)
        centered = coords - mean
        if not centered.any():
            continue  # all coordinates coincide: no direction to speak of
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        v0 = vt[0]
        if v0[0] < 0 or (v0[0] == 0 and v0[1] < 0):
            v0 = -v0
        cells.append(Cell(cell_id=key, members=members, mean_utm=mean,
                          principal_dir=v0 / np.linalg.norm(v0)))
    return cells


def sample_focal_point(cell: Cell, rng: np.random.Generator) -> FocalPoint:
    """Random observation target: rotate the principal direction by a
    uniform angle and step 10-20 m out from the cell mean."""
    obs = float(rng.uniform(0.0, 360.0))
    dist = float(rng.uniform(FOCAL_DIST_MIN, FOCAL_DIST_MAX))
    rad = math.radians(obs)
    rot = np.array([[math.cos(rad), -math.sin(rad)],
                    [math.sin(rad), math.cos(rad)]])
    point = cell.mean_utm + dist * (rot @ cell.principal_dir)
    return FocalPoint(point=point, observation_angle=obs, focal_length=dist)


def viewing_angle(pano: PanoRecord, focal: FocalPoint) -> float:
    """Compass bearing (deg, 0 = north, clockwise) from a panorama's
    position to the focal point. Full-quadrant via atan2."""
    de = focal.point[0] - pano.easting
    dn = focal.point[1] - pano.northing
    if de == 0.0 and dn == 0.0:
        raise ValueError("panorama coincides with focal point: bearing undefined")
    return math.degrees(math.atan2(de, dn)) % 360.0


def angle_difference(a1: float, a2: float) -> float:
    """Minimal circular difference between two bearings, in [0, 180]."""
    d = abs(a1 - a2) % 360.0
    return min(d, 360.0 - d)


def crop_panorama(image: np.ndarray, bearing: float, crop: int,
                  heading_offset: float = 0.0) -> np.ndarray:
    """Extract a square window from an equirectangular strip.

    The window is centered on the column that corresponds to `bearing`
    (wrapping across the seam) and vertically center-cropped. Flat column
    extraction, no reprojection.
    """
    c, h, w = image.shape
    if crop > h:
        raise ValueError(f"crop {crop} exceeds panorama height {h}")
    center = ((bearing - heading_offset) % 360.0) / 360.0 * w
    cols = (np.arange(crop) - crop // 2 + int(round(center))) % w
    top = (h - crop) // 2
    return image[:, top:top + crop, :][:, :, cols]


def sample_focal_pair(cell: Cell, rng: np.random.Generator,
                     max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                     crop: int | None = None,
                     loader: Optional[Callable[[str], np.ndarray]] = None
                     ) -> Optional[PairSample]:
    """Sample one accepted crop pair from a cell, or None if the angle
    acceptance band cannot be hit within max_attempts (caller skips cell).

    With a `loader` the crops are materialized; otherwise the sample holds
    CropSpecs for deferred rendering.
    """
    if len(cell.members) < 2:
        raise ValueError("cell needs at least two panoramas")
    for _ in range(max_attempts):
        i, j = rng.choice(len(cell.members), size=2, replace=False)
        pano_a, pano_b = cell.members[i], cell.members[j]
        focal = sample_focal_point(cell, rng)
        try:
            alpha_a = viewing_angle(pano_a, focal)
            alpha_b = viewing_angle(pano_b, focal)
        except ValueError:
            continue  # pano sits exactly on the focal point; resample
        theta = angle_difference(alpha_a, alpha_b)
        if THETA_MIN <= theta <= THETA_MAX:
            spec_a = CropSpec(pano_a.image_ref, alpha_a, pano_a.heading_offset)
            spec_b = CropSpec(pano_b.image_ref, alpha_b, pano_b.heading_offset)
            if loader is not None:
                size = crop if crop is not None else pano_a.pano_height
                img_a = crop_panorama(loader(pano_a.image_ref), alpha_a,
                                      size, pano_a.heading_offset)
                img_b = crop_panorama(loader(pano_b.image_ref), alpha_b,
                                      size, pano_b.heading_offset)
                return PairSample(img_a, img_b, cell.cell_id, theta, "focal")
            return PairSample(spec_a, spec_b, cell.cell_id, theta, "focal")
    return None


def sample_grouped_pair(place, rng: np.random.Generator) -> PairSample:
    """Two distinct images drawn uniformly from a place with >= 4 images."""
    images = place.images
    if len(images) < 4:
        raise ValueError("grouped sampling requires places with >= 4 images")
    i, j = rng.choice(len(images), size=2, replace=False)
    return PairSample(images[i], images[j], place.place_id, None, "grouped")
