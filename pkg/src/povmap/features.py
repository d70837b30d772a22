"""Weighted object-count features.

Each tile yields a per-class vector; a cluster's vector is the sum over its
tiles. Four weightings are supported:

``counts``      one per detection
``confidence``  the detection's confidence score
``size``        the box area ``w * h`` in px^2
``confsize``    ``confidence`` and ``size`` concatenated (2L dimensions)

Detections scoring below the threshold are discarded before weighting; the
comparison is inclusive (``score >= threshold`` is kept).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data_io import Dataset, DetectionRecord, write_csv
from .geo_grid import nms
from .taxonomy import EXCLUDED, ClassHierarchy, default_hierarchy, resolve

KINDS = ("counts", "confidence", "size", "confsize")
KIND_TITLES = {
    "counts": "Counts",
    "confidence": "Confidence x Counts",
    "size": "Size x Counts",
    "confsize": "(Conf., Size) x Counts",
}
DEFAULT_THRESHOLD = 0.6


@dataclass(frozen=True)
class FeatureScheme:
    kind: str = "counts"
    level: str = "parent"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}; choose from {KINDS}")
        if self.level not in ("parent", "child"):
            raise ValueError(f"unknown level {self.level!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")

    def dim(self, hierarchy: ClassHierarchy) -> int:
        n = hierarchy.num_classes(self.level)
        return 2 * n if self.kind == "confsize" else n

    def names(self, hierarchy: ClassHierarchy) -> list[str]:
        labels = hierarchy.labels(self.level)
        if self.kind == "confsize":
            return [f"conf:{self.level}:{c}" for c in labels] + [
                f"size:{self.level}:{c}" for c in labels
            ]
        return [f"{self.level}:{c}" for c in labels]

    def with_threshold(self, threshold: float) -> "FeatureScheme":
        return FeatureScheme(self.kind, self.level, threshold)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    scheme: FeatureScheme
    owner: str | None = None


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (N, D), rows in survey order
    targets: np.ndarray
    cluster_ids: list[str]
    names: list[str]
    scheme: FeatureScheme

    @property
    def shape(self):
        return self.values.shape


def _weights(kind, scores, areas):
    if kind == "counts":
        return np.ones_like(scores)
    if kind == "confidence":
        return scores
    return areas


def tile_vector(
    dets: Iterable[DetectionRecord],
    scheme: FeatureScheme,
    hierarchy: ClassHierarchy | None = None,
) -> FeatureVector:
    """Per-class weighted counts for the detections of a single tile."""
    hierarchy = hierarchy or default_hierarchy()
    n = hierarchy.num_classes(scheme.level)
    conf = np.zeros(n)
    size = np.zeros(n)
    count = np.zeros(n)
    for d in dets:
        idx = resolve(hierarchy, d.label, scheme.level)
        if idx is EXCLUDED or d.score < scheme.threshold:
            continue
        count[idx] += 1.0
        conf[idx] += d.score
        size[idx] += d.box.w * d.box.h
    values = {
        "counts": count,
        "confidence": conf,
        "size": size,
        "confsize": np.concatenate([conf, size]),
    }[scheme.kind]
    return FeatureVector(values, scheme)


def cluster_vector(
    tile_vectors: Sequence[FeatureVector],
    scheme: FeatureScheme | None = None,
    hierarchy: ClassHierarchy | None = None,
    owner: str | None = None,
) -> FeatureVector:
    """Sum tile vectors into the cluster vector; absent tiles count as zero."""
    schemes = {tv.scheme for tv in tile_vectors}
    if scheme is not None:
        schemes.add(scheme)
    if len(schemes) > 1:
        raise ValueError("cannot aggregate tile vectors built with different schemes")
    if not schemes:
        raise ValueError("scheme is required to aggregate zero tiles")
    scheme = schemes.pop()
    total = np.zeros(scheme.dim(hierarchy or default_hierarchy()))
    for tv in tile_vectors:
        total = total + tv.values
    return FeatureVector(total, scheme, owner)


@dataclass
class DetectionArrays:
    """Flat per-detection columns, ordered by (survey position, tile, input order)."""

    cluster_pos: np.ndarray
    child: np.ndarray
    parent: np.ndarray  # -1 for children of the excluded bucket
    score: np.ndarray
    area: np.ndarray
    n_clusters: int

    @classmethod
    def from_dataset(
        cls,
        dataset: Dataset,
        hierarchy: ClassHierarchy | None = None,
        nms_iou: float | None = None,
    ) -> "DetectionArrays":
        hierarchy = hierarchy or default_hierarchy()
        c2p = hierarchy.child_to_parent_indices()
        pos, child, score, area = [], [], [], []
        for i, cid in enumerate(dataset.cluster_ids):
            tiles = dataset.detections.tiles(cid)
            for key in sorted(tiles):  # row-major == flat tile index order
                dets = tiles[key]
                if nms_iou is not None:
                    keep = nms(
                        [d.box for d in dets],
                        [d.score for d in dets],
                        [d.label for d in dets],
                        nms_iou,
                    )
                    dets = [dets[k] for k in keep]
                for d in dets:
                    pos.append(i)
                    child.append(hierarchy.child_index(d.label))
                    score.append(d.score)
                    area.append(d.box.w * d.box.h)
        child_arr = np.asarray(child, dtype=np.int64)
        return cls(
            cluster_pos=np.asarray(pos, dtype=np.int64),
            child=child_arr,
            parent=c2p[child_arr] if len(child_arr) else np.zeros(0, dtype=np.int64),
            score=np.asarray(score, dtype=float),
            area=np.asarray(area, dtype=float),
            n_clusters=len(dataset.cluster_ids),
        )

    def featurize(self, scheme: FeatureScheme, hierarchy: ClassHierarchy | None = None) -> np.ndarray:
        hierarchy = hierarchy or default_hierarchy()
        n = hierarchy.num_classes(scheme.level)
        cls_idx = self.parent if scheme.level == "parent" else self.child
        keep = (self.score >= scheme.threshold) & (cls_idx >= 0)
        flat = self.cluster_pos[keep] * n + cls_idx[keep]
        size = self.n_clusters * n

        def accumulate(kind):
            w = _weights(kind, self.score[keep], self.area[keep])
            return np.bincount(flat, weights=w, minlength=size).reshape(self.n_clusters, n)

        if scheme.kind == "confsize":
            return np.hstack([accumulate("confidence"), accumulate("size")])
        return accumulate(scheme.kind)


def build_matrix(
    dataset: Dataset,
    scheme: FeatureScheme,
    hierarchy: ClassHierarchy | None = None,
    arrays: DetectionArrays | None = None,
    nms_iou: float | None = None,
) -> FeatureMatrix:
    """Stack cluster vectors into an ``N x D`` design matrix in survey order.

    Pass precomputed ``arrays`` to avoid re-flattening the detections when
    building several schemes from the same dataset.
    """
    hierarchy = hierarchy or default_hierarchy()
    if arrays is None:
        arrays = DetectionArrays.from_dataset(dataset, hierarchy, nms_iou=nms_iou)
    values = arrays.featurize(scheme, hierarchy)
    return FeatureMatrix(
        values=values,
        targets=dataset.targets,
        cluster_ids=list(dataset.cluster_ids),
        names=scheme.names(hierarchy),
        scheme=scheme,
    )


def save_features(path, fm: FeatureMatrix, meta: dict | None = None):
    rows = ([cid, *row] for cid, row in zip(fm.cluster_ids, fm.values.tolist()))
    write_csv(path, ["cluster_id", *fm.names], rows, meta)


def mean_class_counts(counts: np.ndarray) -> np.ndarray:
    """Mean per-class count across clusters."""
    return counts.mean(axis=0) if len(counts) else np.zeros(counts.shape[1])

