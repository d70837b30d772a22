"""xView parent/child class ontology.

The built-in definition lists the 60 child classes with their parent. Children
whose parent is ``None`` are kept at child level but have no parent-level
dimension. Helipad, Construction Site and Vehicle Lot are promoted to parents
of their own.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

NUM_PARENTS = 10
NUM_CHILDREN = 60
EXCLUDED_PARENT = "None"
LEVELS = ("parent", "child")


class HierarchyError(ValueError):
    """Raised when a hierarchy definition is malformed or a label is unknown."""


class Excluded:
    """Marker returned by :func:`resolve` for children of the ``None`` bucket."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "EXCLUDED"

    def __bool__(self):
        return False


EXCLUDED = Excluded()


@dataclass(frozen=True)
class ClassHierarchy:
    parents: tuple[str, ...]
    children: tuple[str, ...]
    child_to_parent: dict[str, str]
    _child_index: dict[str, int] = field(init=False, repr=False, compare=False)
    _parent_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_child_index", {c: i for i, c in enumerate(self.children)})
        object.__setattr__(self, "_parent_index", {p: i for i, p in enumerate(self.parents)})

    def num_classes(self, level: str) -> int:
        _check_level(level)
        return len(self.parents) if level == "parent" else len(self.children)

    def labels(self, level: str) -> tuple[str, ...]:
        _check_level(level)
        return self.parents if level == "parent" else self.children

    def child_index(self, label: str) -> int:
        try:
            return self._child_index[label.strip()]
        except KeyError:
            raise HierarchyError(f"unknown label {label!r}") from None

    def parent_index(self, parent: str) -> int:
        try:
            return self._parent_index[parent]
        except KeyError:
            raise HierarchyError(f"unknown parent class {parent!r}") from None

    def children_of(self, parent: str) -> list[str]:
        return [c for c in self.children if self.child_to_parent[c] == parent]

    def child_to_parent_indices(self):
        """Array mapping child index -> parent index, ``-1`` for excluded children."""
        import numpy as np

        out = np.full(len(self.children), -1, dtype=np.int64)
        for i, c in enumerate(self.children):
            p = self.child_to_parent[c]
            if p != EXCLUDED_PARENT:
                out[i] = self._parent_index[p]
        return out


def _check_level(level):
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")


def _parse(text: str, source: str) -> ClassHierarchy:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or {"child", "parent"} - {f.strip() for f in reader.fieldnames}:
        raise HierarchyError(f"{source}: malformed file, expected header 'child,parent'")
    children: list[str] = []
    parents: list[str] = []
    mapping: dict[str, str] = {}
    for lineno, rec in enumerate(reader, start=2):
        rec = {k.strip(): v for k, v in rec.items() if k is not None}
        child = (rec.get("child") or "").strip()
        parent = (rec.get("parent") or "").strip()
        if not child:
            raise HierarchyError(f"{source}:{lineno}: malformed file, empty child label")
        if not parent:
            raise HierarchyError(f"{source}:{lineno}: child {child!r} has no parent assignment")
        if child in mapping:
            raise HierarchyError(f"{source}:{lineno}: duplicate label {child!r}")
        mapping[child] = parent
        children.append(child)
        if parent != EXCLUDED_PARENT and parent not in parents:
            parents.append(parent)
    if len(children) != NUM_CHILDREN or len(parents) != NUM_PARENTS:
        raise HierarchyError(
            f"{source}: wrong class counts: {len(children)} children, {len(parents)} parents "
            f"(expected {NUM_CHILDREN} and {NUM_PARENTS})"
        )
    return ClassHierarchy(tuple(parents), tuple(children), mapping)


def load_hierarchy(source: str | Path | None = None) -> ClassHierarchy:
    """Load a hierarchy definition file (CSV with ``child,parent`` columns).

    With no ``source`` the built-in xView definition is used. Parent order is
    the order of first appearance in the file.
    """
    if source is None:
        text = resources.files("povmap.data").joinpath("xview_hierarchy.csv").read_text("utf-8")
        return _parse(text, "<builtin>")
    path = Path(source)
    return _parse(path.read_text(encoding="utf-8"), str(path))


_DEFAULT: ClassHierarchy | None = None


def default_hierarchy() -> ClassHierarchy:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_hierarchy()
    return _DEFAULT


def resolve(hierarchy: ClassHierarchy, label: str, level: str):
    """Feature index of a child ``label`` at ``level``, or ``EXCLUDED``."""
    _check_level(level)
    ci = hierarchy.child_index(label)
    if level == "child":
        return ci
    parent = hierarchy.child_to_parent[hierarchy.children[ci]]
    if parent == EXCLUDED_PARENT:
        return EXCLUDED
    return hierarchy.parent_index(parent)
