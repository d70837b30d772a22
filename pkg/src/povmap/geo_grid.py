"""Cluster neighborhood geometry: tile grid, chip windows, overlap test."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METERS_PER_DEGREE = 111_320.0


@dataclass(frozen=True)
class GridSpec:
    tiles_per_side: int = 34
    tile_px: int = 1000
    meters_per_px: float = 0.3
    chip_px: int = 416
    chip_overlap_px: int = 124
    channels: int = 3

    @property
    def num_tiles(self) -> int:
        return self.tiles_per_side**2

    @property
    def chip_stride(self) -> int:
        return self.chip_px - self.chip_overlap_px

    @property
    def neighborhood_m(self) -> float:
        """Side length of the square neighborhood around a cluster, in meters."""
        return self.tiles_per_side * self.tile_px * self.meters_per_px

    def validate(self):
        if self.tiles_per_side <= 0 or self.tile_px <= 0 or self.meters_per_px <= 0:
            raise ValueError("grid dimensions must be positive")
        if not 0 <= self.chip_overlap_px < self.chip_px <= self.tile_px:
            raise ValueError("need 0 <= chip_overlap_px < chip_px <= tile_px")
        if (self.tile_px - self.chip_px) % self.chip_stride != 0:
            raise ValueError(
                f"chip stride {self.chip_stride} does not tile a {self.tile_px} px tile "
                f"exactly with {self.chip_px} px chips"
            )


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"invalid coordinate ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class TileIndex:
    row: int
    col: int

    def flat(self, tiles_per_side: int = 34) -> int:
        return flatten(self.row, self.col, tiles_per_side)


@dataclass(frozen=True)
class BoundingBox:
    """Center-size box ``(x_c, y_c, w, h)`` in pixels."""

    x_c: float
    y_c: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self):
        return (
            self.x_c - self.w / 2,
            self.y_c - self.h / 2,
            self.x_c + self.w / 2,
            self.y_c + self.h / 2,
        )


def flatten(row: int, col: int, tiles_per_side: int = 34) -> int:
    if not (0 <= row < tiles_per_side and 0 <= col < tiles_per_side):
        raise ValueError(f"tile ({row}, {col}) outside a {tiles_per_side}x{tiles_per_side} grid")
    return row * tiles_per_side + col


def unflatten(index: int, tiles_per_side: int = 34) -> tuple[int, int]:
    if not 0 <= index < tiles_per_side**2:
        raise ValueError(f"flat tile index {index} out of range")
    return divmod(index, tiles_per_side)


def chip_layout(spec: GridSpec = GridSpec()) -> list[tuple[int, int]]:
    """Row-major ``(x0, y0)`` origins of the detector chips covering one tile."""
    spec.validate()
    origins = list(range(0, spec.tile_px - spec.chip_px + 1, spec.chip_stride))
    return [(x0, y0) for y0 in origins for x0 in origins]


def clamp_box(box: BoundingBox, frame_px: float) -> BoundingBox | None:
    """Shrink ``box`` about its center so it lies inside ``[0, frame_px]^2``.

    Returns None when the center sits outside the frame or the result has zero area.
    """
    out = []
    for c, s in ((box.x_c, box.w), (box.y_c, box.h)):
        if not 0.0 <= c < frame_px:
            return None
        half = min(s / 2.0, c, frame_px - c)
        out.append(2.0 * half)
    w, h = out
    if w <= 0.0 or h <= 0.0:
        return None
    return BoundingBox(box.x_c, box.y_c, w, h)


def chip_to_tile(box: BoundingBox, origin: tuple[int, int], spec: GridSpec = GridSpec()):
    """Translate a chip-frame box into the tile frame, clamped to the tile."""
    x0, y0 = origin
    moved = BoundingBox(box.x_c + x0, box.y_c + y0, box.w, box.h)
    return clamp_box(moved, spec.tile_px)


def offsets_m(a: GeoPoint, b: GeoPoint) -> tuple[float, float]:
    """(north, east) displacement from ``a`` to ``b`` in meters, equirectangular."""
    mean_lat = math.radians((a.lat + b.lat) / 2.0)
    north = METERS_PER_DEGREE * (b.lat - a.lat)
    east = METERS_PER_DEGREE * math.cos(mean_lat) * (b.lon - a.lon)
    return north, east


def neighborhoods_overlap(a: GeoPoint, b: GeoPoint, spec: GridSpec = GridSpec()) -> bool:
    """True when the square neighborhoods centered at ``a`` and ``b`` intersect."""
    north, east = offsets_m(a, b)
    side = spec.neighborhood_m
    return abs(north) < side and abs(east) < side


def overlap_matrix(lat, lon, spec: GridSpec = GridSpec()) -> np.ndarray:
    """Pairwise :func:`neighborhoods_overlap` for arrays of coordinates."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    mean_lat = np.radians((lat[:, None] + lat[None, :]) / 2.0)
    north = METERS_PER_DEGREE * (lat[None, :] - lat[:, None])
    east = METERS_PER_DEGREE * np.cos(mean_lat) * (lon[None, :] - lon[:, None])
    side = spec.neighborhood_m
    return (np.abs(north) < side) & (np.abs(east) < side)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, labels, iou_threshold: float = 0.5) -> list[int]:
    """Greedy per-label non-maximum suppression.

    Returns the kept indices in input order. Ties in score keep the earlier box.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(
            labels[k] != labels[i] or iou(boxes[k], boxes[i]) <= iou_threshold for k in kept
        ):
            kept.append(i)
    return sorted(kept)
