"""Synthetic detection/survey datasets with a known target relation.

Clusters sit on a lattice (default spacing 0.3 degrees, about 33 km) so no
two neighborhoods overlap unless a pair is planted deliberately. Per-class
detection counts are Poisson with a per-cluster rate drawn uniformly around
the configured intensity, so counts vary widely across clusters. Poverty is a
deterministic function of the *true* per-parent-class counts plus Gaussian
noise, floored at zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_io import (
    DetectionRecord,
    DetectionSet,
    SurveyRecord,
    save_detections,
    save_survey,
)
from .geo_grid import METERS_PER_DEGREE, BoundingBox, GeoPoint, GridSpec, TileIndex
from .taxonomy import EXCLUDED_PARENT, ClassHierarchy, default_hierarchy

MIN_SEPARATION_M = 25_000.0

DEFAULT_INTENSITIES = {
    "Fixed-Wing Aircraft": 1.0,
    "Passenger-Vehicle": 60.0,
    "Truck": 30.0,
    "Railway Vehicle": 2.0,
    "Maritime Vessel": 5.0,
    "Engineering Vehicle": 8.0,
    "Building": 150.0,
    "Helipad": 0.5,
    "Construction Site": 1.0,
    "Vehicle Lot": 2.0,
}

DEFAULT_RELATION = {
    "kind": "linear",
    "weights": {"Truck": 0.05, "Passenger-Vehicle": 0.005, "Building": 0.001},
    "intercept": 0.5,
}


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_clusters: int = 320
    class_intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    score_range: dict = field(default_factory=dict)  # class -> [lo, hi]
    default_score_range: tuple = (0.3, 1.0)
    box_size_range: dict = field(default_factory=dict)  # class -> [lo, hi] px
    default_box_size_range: tuple = (4.0, 40.0)
    relation: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_RELATION)))
    noise_sigma: float = 0.05  # fraction of the noiseless target range
    rate_spread: float = 1.0  # per-cluster rate multiplier ~ U(1 - spread, 1 + spread)
    seed: int = 0
    cluster_spacing: float = 0.3  # degrees
    origin: tuple = (-1.0, 29.6)  # (lat, lon) of the lattice corner
    overlap_pairs: list = field(default_factory=list)
    overlap_offset: float = 0.03  # degrees north between planted partners

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SynthError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("default_score_range", "default_box_size_range", "origin"):
            if key in d:
                d[key] = tuple(d[key])
        if "overlap_pairs" in d:
            d["overlap_pairs"] = [tuple(p) for p in d["overlap_pairs"]]
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overlap_pairs"] = [list(p) for p in self.overlap_pairs]
        return d

    def validate(self, hierarchy: ClassHierarchy):
        if self.n_clusters < 1:
            raise SynthError("n_clusters must be >= 1")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be >= 0")
        if not 0.0 <= self.rate_spread <= 1.0:
            raise SynthError("rate_spread must lie in [0, 1]")
        known = set(hierarchy.parents) | {EXCLUDED_PARENT}
        for c, v in self.class_intensities.items():
            if c not in known:
                raise SynthError(f"unknown class {c!r} in class_intensities")
            if v < 0:
                raise SynthError(f"negative intensity for {c!r}")
        for table in (self.score_range, self.box_size_range):
            for c in table:
                if c not in known:
                    raise SynthError(f"unknown class {c!r}")
        for c in relation_classes(self.relation):
            if c not in hierarchy.parents:
                raise SynthError(f"relation references unknown class {c!r}")


@dataclass
class GroundTruth:
    relation: dict
    class_names: list[str]
    counts: np.ndarray  # (N, n_parents) true per-parent detection counts
    latent: np.ndarray  # noiseless targets
    poverty: np.ndarray
    cluster_ids: list[str]

    def to_dict(self) -> dict:
        return {
            "relation": self.relation,
            "class_names": self.class_names,
            "cluster_ids": self.cluster_ids,
            "counts": self.counts.astype(int).tolist(),
            "latent": self.latent.tolist(),
            "poverty": self.poverty.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            relation=d["relation"],
            class_names=d["class_names"],
            counts=np.asarray(d["counts"], dtype=float),
            latent=np.asarray(d["latent"], dtype=float),
            poverty=np.asarray(d["poverty"], dtype=float),
            cluster_ids=d["cluster_ids"],
        )


def relation_classes(relation: dict) -> list[str]:
    kind = relation.get("kind")
    if kind == "linear":
        return list(relation.get("weights", {}))
    if kind == "ratio":
        return [relation["numerator"], relation["denominator"]]
    if kind == "threshold":
        return [relation["class"]]
    raise SynthError(f"unknown relation kind {kind!r}")


def apply_relation(relation: dict, counts: np.ndarray, names: list[str]) -> np.ndarray:
    """Noiseless target for an ``(N, n_parents)`` count matrix."""
    col = {c: i for i, c in enumerate(names)}
    kind = relation["kind"]
    if kind == "linear":
        y = np.full(len(counts), float(relation.get("intercept", 0.0)))
        for c, w in relation["weights"].items():
            y = y + float(w) * counts[:, col[c]]
        return y
    if kind == "ratio":
        a = counts[:, col[relation["numerator"]]]
        b = counts[:, col[relation["denominator"]]]
        return float(relation.get("intercept", 0.0)) + float(relation.get("scale", 1.0)) * a / (1.0 + b)
    if kind == "threshold":
        c = counts[:, col[relation["class"]]]
        return np.where(c > float(relation["cutpoint"]), float(relation.get("high", 1.0)),
                        float(relation.get("low", 0.0)))
    raise SynthError(f"unknown relation kind {kind!r}")


def _lattice(config: SynthConfig):
    side = math.ceil(math.sqrt(config.n_clusters))
    lat0, lon0 = config.origin
    pts = []
    for i in range(config.n_clusters):
        r, c = divmod(i, side)
        pts.append([lat0 + r * config.cluster_spacing, lon0 + c * config.cluster_spacing])
    return pts


def _pair_index(ref, n, ids):
    if isinstance(ref, str):
        if ref not in ids:
            raise SynthError(f"unknown cluster {ref!r} in overlap pair")
        return ids.index(ref)
    if not 0 <= int(ref) < n:
        raise SynthError(f"cluster index {ref} out of range")
    return int(ref)


def cluster_ids(n: int) -> list[str]:
    width = max(4, len(str(n)))
    return [f"c{i:0{width}d}" for i in range(n)]


def plant_overlaps(config: SynthConfig, pairs=None, grid: GridSpec = GridSpec()):
    """Cluster coordinates with each listed pair placed inside overlap range.

    The second member of a pair is moved ``overlap_offset`` degrees north of
    the first. All other clusters stay on the lattice, at least 25 km apart.
    """
    pairs = config.overlap_pairs if pairs is None else pairs
    ids = cluster_ids(config.n_clusters)
    pts = _lattice(config)
    lats = [p[0] for p in pts]
    max_abs_lat = max(abs(min(lats)), abs(max(lats)))
    spacing_m = config.cluster_spacing * METERS_PER_DEGREE * math.cos(math.radians(max_abs_lat))
    offset_m = abs(config.overlap_offset) * METERS_PER_DEGREE
    if pairs and offset_m >= grid.neighborhood_m:
        raise SynthError("overlap_offset too large for the planted pair to overlap")
    if spacing_m - (offset_m if pairs else 0.0) < MIN_SEPARATION_M:
        raise SynthError(
            f"cluster_spacing {config.cluster_spacing} deg cannot keep unpaired clusters "
            f"{MIN_SEPARATION_M / 1000:.0f} km apart"
        )
    used: set[int] = set()
    for a, b in pairs:
        ia, ib = _pair_index(a, config.n_clusters, ids), _pair_index(b, config.n_clusters, ids)
        if ia == ib or ia in used or ib in used:
            raise SynthError(f"infeasible placement request for pair ({a}, {b})")
        used.update((ia, ib))
        pts[ib] = [pts[ia][0] + config.overlap_offset, pts[ia][1]]
    return [(round(lat, 6), round(lon, 6)) for lat, lon in pts]


def generate_data(config: SynthConfig, hierarchy: ClassHierarchy | None = None, grid: GridSpec = GridSpec()):
    """In-memory generation: ``(surveys, detections, ground_truth)``."""
    hierarchy = hierarchy or default_hierarchy()
    config.validate(hierarchy)
    rng = np.random.default_rng(config.seed)
    ids = cluster_ids(config.n_clusters)
    coords = plant_overlaps(config, grid=grid)
    parents = list(hierarchy.parents)
    gen_classes = [c for c in parents + [EXCLUDED_PARENT] if config.class_intensities.get(c, 0) > 0]
    children = {c: hierarchy.children_of(c) for c in gen_classes}

    counts = np.zeros((config.n_clusters, len(parents)))
    records: list[DetectionRecord] = []
    tps = grid.tiles_per_side
    for i, cid in enumerate(ids):
        for c in gen_classes:
            mult = rng.uniform(1.0 - config.rate_spread, 1.0 + config.rate_spread)
            rate = config.class_intensities[c] * mult
            k = int(rng.poisson(rate))
            if c != EXCLUDED_PARENT:
                counts[i, parents.index(c)] = k
            if k == 0:
                continue
            s_lo, s_hi = config.score_range.get(c, config.default_score_range)
            b_lo, b_hi = config.box_size_range.get(c, config.default_box_size_range)
            child_idx = rng.integers(0, len(children[c]), size=k)
            tiles = rng.integers(0, tps, size=(k, 2))
            wh = np.round(rng.uniform(b_lo, b_hi, size=(k, 2)), 2)
            u = rng.uniform(size=(k, 2))
            scores = np.round(rng.uniform(s_lo, s_hi, size=k), 4)
            for d in range(k):
                w, h = float(wh[d, 0]), float(wh[d, 1])
                lo = np.array([w, h]) / 2
                centre = np.clip(np.round(lo + u[d] * (grid.tile_px - 2 * lo), 2), lo, grid.tile_px - lo)
                records.append(
                    DetectionRecord(
                        cid,
                        TileIndex(int(tiles[d, 0]), int(tiles[d, 1])),
                        BoundingBox(float(centre[0]), float(centre[1]), w, h),
                        children[c][child_idx[d]],
                        float(scores[d]),
                    )
                )

    latent = apply_relation(config.relation, counts, parents)
    spread = float(np.ptp(latent)) if len(latent) else 0.0
    noise = rng.normal(0.0, 1.0, size=config.n_clusters) * config.noise_sigma * spread
    poverty = np.maximum(np.round(latent + noise, 6), 0.0)
    surveys = [
        SurveyRecord(cid, GeoPoint(lat, lon), float(p))
        for cid, (lat, lon), p in zip(ids, coords, poverty)
    ]
    truth = GroundTruth(json.loads(json.dumps(config.relation)), parents, counts, latent, poverty, ids)
    return surveys, DetectionSet.from_records(records), truth


def generate(config: SynthConfig, out_dir, hierarchy: ClassHierarchy | None = None, grid: GridSpec = GridSpec()):
    """Write ``detections.jsonl``, ``survey.csv`` and ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    surveys, dets, truth = generate_data(config, hierarchy, grid)
    paths = {
        "detections": out / "detections.jsonl",
        "survey": out / "survey.csv",
        "ground_truth": out / "ground_truth.json",
    }
    save_detections(paths["detections"], dets.records())
    save_survey(paths["survey"], surveys)
    gt = truth.to_dict()
    gt["config"] = config.to_dict()
    paths["ground_truth"].write_text(json.dumps(gt, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths, truth
