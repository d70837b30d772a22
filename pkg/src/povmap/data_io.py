"""Loading, validation and persistence of detections, surveys and outputs.

File formats
------------
detections.jsonl
    One JSON object per line with ``cluster_id``, ``row``, ``col``, ``x_c``,
    ``y_c``, ``w``, ``h``, ``label`` and ``score``. Boxes are in the tile frame.
survey.csv
    Header ``cluster_id,lat,lon,poverty``.

Every CSV written here may start with ``# key=value`` provenance lines.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .geo_grid import BoundingBox, GeoPoint, GridSpec, TileIndex, clamp_box, nms
from .taxonomy import ClassHierarchy, HierarchyError

log = logging.getLogger(__name__)

SURVEY_HEADER = ["cluster_id", "lat", "lon", "poverty"]
DETECTION_FIELDS = ("cluster_id", "row", "col", "x_c", "y_c", "w", "h", "label", "score")


class DataError(ValueError):
    """Invalid or unreadable input data."""


@dataclass(frozen=True)
class DetectionRecord:
    cluster_id: str
    tile: TileIndex
    box: BoundingBox
    label: str
    score: float


@dataclass(frozen=True)
class SurveyRecord:
    cluster_id: str
    location: GeoPoint
    poverty: float


@dataclass
class DetectionSet:
    """Detections grouped by cluster id, then by ``(row, col)`` tile."""

    by_cluster: dict[str, dict[tuple[int, int], list[DetectionRecord]]] = field(
        default_factory=dict
    )
    n_read: int = 0
    n_dropped: int = 0

    def __len__(self):
        return sum(len(v) for tiles in self.by_cluster.values() for v in tiles.values())

    def records(self) -> Iterable[DetectionRecord]:
        for cid in self.by_cluster:
            tiles = self.by_cluster[cid]
            for key in sorted(tiles):
                yield from tiles[key]

    def tiles(self, cluster_id: str) -> dict[tuple[int, int], list[DetectionRecord]]:
        return self.by_cluster.get(cluster_id, {})

    @classmethod
    def from_records(cls, records: Iterable[DetectionRecord]) -> "DetectionSet":
        grouped: dict = defaultdict(lambda: defaultdict(list))
        n = 0
        for r in records:
            grouped[r.cluster_id][(r.tile.row, r.tile.col)].append(r)
            n += 1
        return cls({k: dict(v) for k, v in grouped.items()}, n_read=n)

    def suppressed(self, iou_threshold: float) -> "DetectionSet":
        """Copy with per-tile, per-label non-maximum suppression applied."""
        out: dict = {}
        kept = 0
        for cid, tiles in self.by_cluster.items():
            out[cid] = {}
            for key, dets in tiles.items():
                keep = nms([d.box for d in dets], [d.score for d in dets], [d.label for d in dets], iou_threshold)
                out[cid][key] = [dets[k] for k in keep]
                kept += len(keep)
        return DetectionSet(out, self.n_read, self.n_dropped + len(self) - kept)


@dataclass
class Dataset:
    surveys: list[SurveyRecord]
    detections: DetectionSet

    def __post_init__(self):
        ids = [s.cluster_id for s in self.surveys]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate cluster in survey records")
        unknown = sorted(set(self.detections.by_cluster) - set(ids))
        if unknown:
            raise DataError(
                f"{len(unknown)} detection cluster ids missing from survey, e.g. {unknown[0]!r}"
            )

    @property
    def cluster_ids(self) -> list[str]:
        return [s.cluster_id for s in self.surveys]

    @property
    def targets(self):
        import numpy as np

        return np.array([s.poverty for s in self.surveys], dtype=float)

    def __len__(self):
        return len(self.surveys)


def _finite(value, name, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"{where}: field {name!r} must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise DataError(f"{where}: field {name!r} is not finite")
    return value


def parse_detection(obj, hierarchy: ClassHierarchy, spec: GridSpec, where: str):
    """Validate one decoded detection object; None means the box was dropped."""
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    missing = [k for k in DETECTION_FIELDS if k not in obj]
    if missing:
        raise DataError(f"{where}: missing fields {missing}")
    cid = obj["cluster_id"]
    if not isinstance(cid, str) or not cid:
        raise DataError(f"{where}: cluster_id must be a non-empty string")
    row, col = obj["row"], obj["col"]
    if isinstance(row, bool) or isinstance(col, bool) or not isinstance(row, int) or not isinstance(col, int):
        raise DataError(f"{where}: row/col must be integers")
    if not (0 <= row < spec.tiles_per_side and 0 <= col < spec.tiles_per_side):
        raise DataError(f"{where}: tile ({row}, {col}) out of range")
    label = obj["label"]
    if not isinstance(label, str):
        raise DataError(f"{where}: label must be a string")
    try:
        label = hierarchy.children[hierarchy.child_index(label)]
    except HierarchyError as exc:
        raise DataError(f"{where}: {exc}") from None
    score = _finite(obj["score"], "score", where)
    if not 0.0 <= score <= 1.0:
        raise DataError(f"{where}: score {score} outside [0, 1]")
    x_c, y_c, w, h = (_finite(obj[k], k, where) for k in ("x_c", "y_c", "w", "h"))
    box = clamp_box(BoundingBox(x_c, y_c, w, h), spec.tile_px) if w > 0 and h > 0 else None
    if box is None:
        return None
    return DetectionRecord(cid, TileIndex(row, col), box, label, score)


def load_detections(path, hierarchy: ClassHierarchy, spec: GridSpec = GridSpec()) -> DetectionSet:
    """Read a detections JSONL file.

    Fails fast on the first malformed line. Boxes with non-positive size, or
    that vanish when clamped to the tile, are dropped and counted in
    ``n_dropped``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"detections file not found: {path}")
    records = []
    n_lines = dropped = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: unparseable line ({exc.msg})") from None
            rec = parse_detection(obj, hierarchy, spec, where)
            if rec is None:
                dropped += 1
            else:
                records.append(rec)
    if n_lines == 0:
        log.warning("detections file %s is empty", path)
    if dropped:
        log.warning("dropped %d degenerate boxes from %s", dropped, path)
    out = DetectionSet.from_records(records)
    out.n_read = n_lines
    out.n_dropped = dropped
    return out


def detection_to_dict(r: DetectionRecord) -> dict:
    return {
        "cluster_id": r.cluster_id,
        "row": r.tile.row,
        "col": r.tile.col,
        "x_c": r.box.x_c,
        "y_c": r.box.y_c,
        "w": r.box.w,
        "h": r.box.h,
        "label": r.label,
        "score": r.score,
    }


def save_detections(path, records: Iterable[DetectionRecord]):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(detection_to_dict(r), ensure_ascii=False) + "\n")


def load_survey(path) -> list[SurveyRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"survey file not found: {path}")
    out: list[SurveyRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8", newline="") as fh:
        numbered = [(i, line) for i, line in enumerate(fh, start=1) if not line.startswith("#")]
    if not numbered or [h.strip() for h in next(csv.reader([numbered[0][1]]))] != SURVEY_HEADER:
        raise DataError(f"{path}: header must be {','.join(SURVEY_HEADER)}")
    for lineno, line in numbered[1:]:
        row = next(csv.reader([line]), [])
        if not row:
            continue
        where = f"{path}:{lineno}"
        if len(row) != 4:
            raise DataError(f"{where}: malformed row, expected 4 fields")
        cid = row[0].strip()
        if not cid:
            raise DataError(f"{where}: empty cluster_id")
        try:
            lat, lon, poverty = (float(v) for v in row[1:])
        except ValueError:
            raise DataError(f"{where}: malformed row, non-numeric field") from None
        if not all(math.isfinite(v) for v in (lat, lon, poverty)):
            raise DataError(f"{where}: non-finite value")
        if poverty < 0:
            raise DataError(f"{where}: negative poverty {poverty}")
        if cid in seen:
            raise DataError(f"{where}: duplicate cluster {cid!r}")
        try:
            loc = GeoPoint(lat, lon)
        except ValueError as exc:
            raise DataError(f"{where}: {exc}") from None
        seen.add(cid)
        out.append(SurveyRecord(cid, loc, poverty))
    return out


def save_survey(path, surveys: Iterable[SurveyRecord]):
    write_csv(
        path,
        SURVEY_HEADER,
        ([s.cluster_id, s.location.lat, s.location.lon, s.poverty] for s in surveys),
    )


def load_dataset(detections_path, survey_path, hierarchy: ClassHierarchy, spec: GridSpec = GridSpec()) -> Dataset:
    surveys = load_survey(survey_path)
    dets = load_detections(detections_path, hierarchy, spec)
    return Dataset(surveys, dets)


def fmt(value) -> str:
    """Shortest round-trip text for floats; ``str`` for everything else."""
    kind = getattr(getattr(value, "dtype", None), "kind", "")
    if isinstance(value, float) or kind == "f":
        return repr(float(value))
    if kind in ("i", "u"):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows, meta: dict | None = None):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    """Return ``(meta, header, rows)`` for a CSV written by :func:`write_csv`."""
    meta: dict[str, str] = {}
    body = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("# ") and not body:
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = v
            else:
                body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise DataError(f"{path}: no header row")
    return meta, rows[0], rows[1:]


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
