"""Synthetic sink-deformation anomalies with exact ground-truth masks.

Displacement law (version 1): a pixel at distance ``d < radius`` from the
center samples the input at a point pushed radially outward by
``strength * (1 - d / radius) * radius``, via bilinear interpolation.
Content is therefore pulled toward the center.  The ground-truth mask is
the set of pixels displaced by at least half a pixel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .exceptions import PlacementError, RangeError

__all__ = ["SinkSpec", "sample_sink_spec", "apply_sink", "sink_displacement",
           "SINK_LAW_VERSION", "RADIUS_RANGE", "STRENGTH_RANGE"]

SINK_LAW_VERSION = 1
RADIUS_RANGE = (8.0, 24.0)
STRENGTH_RANGE = (0.3, 0.9)
MASK_MIN_DISPLACEMENT = 0.5


@dataclass(frozen=True)
class SinkSpec:
    center: tuple[float, float]
    radius: float
    strength: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.strength <= 1:
            raise RangeError(f"strength must be in (0, 1], got {self.strength}")
        if not self.radius > 0:
            raise RangeError(f"radius must be positive, got {self.radius}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SinkSpec":
        d = json.loads(text)
        d["center"] = tuple(d["center"])
        return cls(**d)


def sample_sink_spec(image, foreground, rng_seed: int,
                     radius_range=RADIUS_RANGE, strength_range=STRENGTH_RANGE) -> SinkSpec:
    """Draw a sink whose whole disk lies inside ``foreground``.

    The radius is uniform on ``radius_range``; if no center can host it, the
    radius is redrawn uniformly below the largest radius the foreground can
    host.  The center is uniform over admissible pixels.
    """
    fg = np.asarray(foreground, dtype=bool)
    if fg.shape != np.shape(image):
        raise RangeError("image and foreground shapes differ")
    rng = np.random.default_rng(rng_seed)
    # distance to the nearest background pixel, image border counted as background
    dist = ndimage.distance_transform_edt(np.pad(fg, 1))[1:-1, 1:-1]
    r_min, r_max = radius_range
    radius = rng.uniform(r_min, r_max)
    if not (dist > radius).any():
        capacity = float(dist.max())
        # largest radius strictly below capacity
        hi = min(r_max, np.nextafter(capacity, 0.0))
        if hi < r_min:
            raise PlacementError(
                f"foreground cannot host a disk of radius {r_min} (max {capacity:.2f})")
        radius = rng.uniform(r_min, hi)
    rows, cols = np.nonzero(dist > radius)
    k = rng.integers(len(rows))
    strength = rng.uniform(*strength_range)
    return SinkSpec(center=(float(rows[k]), float(cols[k])), radius=float(radius),
                    strength=float(strength), seed=int(rng_seed))


def sink_displacement(shape, spec: SinkSpec):
    """Return (distance, displacement magnitude, unit row offset, unit col offset)."""
    rr, cc = np.indices(shape, dtype=np.float64)
    dr = rr - spec.center[0]
    dc = cc - spec.center[1]
    d = np.hypot(dr, dc)
    mag = np.where(d < spec.radius, spec.strength * (1.0 - d / spec.radius) * spec.radius, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ur = np.where(d > 0, dr / d, 0.0)
        uc = np.where(d > 0, dc / d, 0.0)
    return d, mag, ur, uc


def apply_sink(image, spec: SinkSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deform ``image`` with a sink; returns (deformed image, boolean mask)."""
    img = np.asarray(image)
    h, w = img.shape
    r0, c0 = spec.center
    if r0 - spec.radius < -0.5 or c0 - spec.radius < -0.5 or \
            r0 + spec.radius > h - 0.5 or c0 + spec.radius > w - 0.5:
        raise RangeError("sink disk exits the image bounds")
    d, mag, ur, uc = sink_displacement(img.shape, spec)
    inside = d < spec.radius
    # at the exact center the direction is undefined; any direction is
    # admissible since the sample point lies on the circle of radius strength*radius
    ur = np.where(d > 0, ur, 1.0)
    src_r = np.arange(h)[:, None] + ur * mag
    src_c = np.arange(w)[None, :] + uc * mag
    out = img.copy()
    vals = ndimage.map_coordinates(img.astype(np.float64), [src_r[inside], src_c[inside]],
                                   order=1, mode="nearest")
    # bilinear weights are convex; the clip only removes rounding excursions
    vals = np.clip(vals, img.min(), img.max())
    out[inside] = vals.astype(img.dtype, copy=False)
    mask = inside & (mag >= MASK_MIN_DISPLACEMENT)
    return out, mask
