"""Procedural place-world for desk-scale experiments.

Each place renders as an equirectangular panorama strip (6.5:1, the
street-view crop geometry at reduced size) plus a few square egocentric
views. Places sit on a jittered grid with true metric coordinates, so
cell partitioning, focal-point sampling and distance-based ground truth
all exercise the real arithmetic.

Places come in small *families* that share one panoramic texture; each
family member rotates that texture by its own bearing shift. Members of
a family therefore alias each other — a summary descriptor struggles to
tell them apart, while direct comparison of two views can check whether
their windows onto the shared texture actually line up. This is the
perceptual-aliasing regime that motivates pairwise re-ranking.
"""

import math
import os
from dataclasses import dataclass

import cv2
import numpy as np

from .data import ImageEntry, PlaceRecord, write_manifest

APPEARANCE_LEVELS = {"none": 0.0, "mild": 0.05, "strong": 0.25}


@dataclass(frozen=True)
class SynthWorldConfig:
    num_places: int = 50
    panos_per_place: int = 4
    ego_per_place: int = 4
    city_extent: float = 400.0  # meters
    pano_width: int = 2080
    pano_height: int = 320
    texture_seed: int = 0
    appearance_variation: str = "mild"
    viewpoint_jitter_m: float = 2.0
    viewpoint_jitter_deg: float = 2.0
    # Egocentric views spread around the place's base bearing. Wide enough
    # that revisits see a shifted (but overlapping) slice of the scene --
    # the regime where local-feature comparison pays off over a pooled
    # descriptor -- while staying well inside the field of view.
    ego_bearing_spread_deg: float = 12.0
    # Optional per-view re-mix of the texture's wave amplitudes (see
    # _render). Off by default: the desk-scale world keeps appearance
    # change to bearing shifts plus pixel noise.
    ego_wave_jitter: float = 0.0
    pano_wave_jitter: float = 0.0
    places_per_family: int = 2

    def __post_init__(self):
        if self.num_places < 2:
            raise ValueError("need at least two places")
        if self.appearance_variation not in APPEARANCE_LEVELS:
            raise ValueError(f"unknown appearance level {self.appearance_variation!r}")
        if self.places_per_family < 1:
            raise ValueError("places_per_family must be >= 1")


def _place_texture_params(seed: int, place: int,
                          places_per_family: int = 1) -> dict:
    family = place // places_per_family
    rng = np.random.default_rng([seed, family])
    n_waves = 5
    params = {
        "base": rng.uniform(0.25, 0.75, size=3),
        "freq_theta": rng.integers(1, 4, size=n_waves),
        "freq_row": rng.integers(0, 5, size=n_waves),
        "phase": rng.uniform(0, 2 * math.pi, size=n_waves),
        "amp": rng.uniform(0.08, 0.22, size=n_waves),
        "chan": rng.uniform(-1.0, 1.0, size=(n_waves, 3)),
    }
    # Distinct bearing shift per family member: same texture, rotated just
    # far enough that members' viewing windows never overlap. Small
    # spacing keeps members' coarse appearance close (hard for a summary
    # descriptor) while direct comparison can still check window overlap.
    member = place % places_per_family
    shift_rng = np.random.default_rng([seed, 0x510F7, place])
    params["theta_shift"] = float(
        (member * 80.0 + shift_rng.uniform(-8.0, 8.0)) % 360.0)
    return params


def _render(params: dict, theta_deg: np.ndarray, height: int,
            gains: np.ndarray, noise_rng: np.random.Generator,
            wave_jitter: float = 0.0) -> np.ndarray:
    """Render a texture window, (3, height, len(theta_deg)) uint8.

    wave_jitter rescales each wave's amplitude per rendered view. Unlike a
    global gain or a crop, re-mixing the wave amplitudes cannot be
    reproduced by augmenting a single view, so it is only learnable as an
    invariance from genuine multi-view pairs.
    """
    rows = np.linspace(0.0, 1.0, height, endpoint=False)[:, None]
    theta = (theta_deg[None, :] + params.get("theta_shift", 0.0)) / 360.0
    img = np.empty((3, height, theta_deg.shape[0]), dtype=np.float64)
    field_sum = np.zeros((3, height, theta_deg.shape[0]))
    if wave_jitter:
        amp_scale = 1.0 + noise_rng.uniform(-wave_jitter, wave_jitter,
                                            size=len(params["amp"]))
    else:
        amp_scale = np.ones(len(params["amp"]))
    for f_t, f_r, ph, amp, scale, chan in zip(
            params["freq_theta"], params["freq_row"], params["phase"],
            params["amp"], amp_scale, params["chan"]):
        wave = amp * scale * np.sin(2 * math.pi * (f_t * theta + f_r * rows) + ph)
        field_sum += chan[:, None, None] * wave[None]
    img = params["base"][:, None, None] + field_sum
    img = img * gains[:, None, None]
    img += noise_rng.normal(0.0, 0.003, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _gains(level: float, rng: np.random.Generator) -> np.ndarray:
    if level == 0.0:
        return np.ones(3)
    return 1.0 + rng.uniform(-level, level, size=3)


def _write_png(path: str, image_chw: np.ndarray) -> None:
    bgr = image_chw.transpose(1, 2, 0)[:, :, ::-1]
    if not cv2.imwrite(path, bgr):
        raise IOError(f"failed to write {path}")


def render_place_view(cfg: SynthWorldConfig, place: int, bearing: float,
                      crop: int, view_rng: np.random.Generator) -> np.ndarray:
    """One square egocentric-style view of a place texture at a bearing."""
    params = _place_texture_params(cfg.texture_seed, place,
                                   cfg.places_per_family)
    fov = 360.0 * crop / cfg.pano_width
    theta = bearing - fov / 2 + fov * np.arange(crop) / crop
    gains = _gains(APPEARANCE_LEVELS[cfg.appearance_variation], view_rng)
    return _render(params, theta % 360.0, crop, gains, view_rng,
                   cfg.ego_wave_jitter)


def generate_synth_world(cfg: SynthWorldConfig, out_dir: str) -> str:
    """Render the world and write its manifest; returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    side = math.ceil(math.sqrt(cfg.num_places))
    spacing = cfg.city_extent / side
    level = APPEARANCE_LEVELS[cfg.appearance_variation]

    places = []
    for p in range(cfg.num_places):
        rng = np.random.default_rng([cfg.texture_seed, 1, p])
        params = _place_texture_params(cfg.texture_seed, p,
                                       cfg.places_per_family)
        gx, gy = p % side, p // side
        center = np.array([
            (gx + 0.5) * spacing + rng.uniform(-0.1, 0.1) * spacing,
            (gy + 0.5) * spacing + rng.uniform(-0.1, 0.1) * spacing,
        ])
        record = PlaceRecord(place_id=f"place_{p:04d}")

        for k in range(cfg.panos_per_place):
            pos = center + rng.uniform(-cfg.viewpoint_jitter_m,
                                       cfg.viewpoint_jitter_m, size=2)
            heading = float(rng.uniform(0.0, 360.0))
            theta = (heading + 360.0 * np.arange(cfg.pano_width)
                     / cfg.pano_width) % 360.0
            gains = _gains(level, rng)
            img = _render(params, theta, cfg.pano_height, gains, rng,
                          cfg.pano_wave_jitter)
            name = f"{record.place_id}_pano_{k}.png"
            _write_png(os.path.join(img_dir, name), img)
            record.images.append(ImageEntry(
                path=os.path.join("images", name), easting=float(pos[0]),
                northing=float(pos[1]), heading_offset=heading, kind="pano",
                width=cfg.pano_width, height=cfg.pano_height))

        crop = cfg.pano_height
        fov = 360.0 * crop / cfg.pano_width
        # Egocentric views of a place cluster around a shared base bearing,
        # so same-place views keep a large field-of-view overlap (like
        # forward-facing captures revisiting the same street segment).
        base_bearing = float(rng.uniform(0.0, 360.0))
        for k in range(cfg.ego_per_place):
            pos = center + rng.uniform(-cfg.viewpoint_jitter_m,
                                       cfg.viewpoint_jitter_m, size=2)
            bearing = base_bearing + float(rng.uniform(
                -cfg.ego_bearing_spread_deg, cfg.ego_bearing_spread_deg))
            bearing += float(rng.uniform(-cfg.viewpoint_jitter_deg,
                                         cfg.viewpoint_jitter_deg))
            bearing %= 360.0
            theta = (bearing - fov / 2 + fov * np.arange(crop) / crop) % 360.0
            gains = _gains(level, rng)
            img = _render(params, theta, crop, gains, rng,
                          cfg.ego_wave_jitter)
            name = f"{record.place_id}_ego_{k}.png"
            _write_png(os.path.join(img_dir, name), img)
            record.images.append(ImageEntry(
                path=os.path.join("images", name), easting=float(pos[0]),
                northing=float(pos[1]), heading_offset=bearing,
                kind="egocentric", width=crop, height=crop))
        places.append(record)

    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(places, manifest)
    return manifest
