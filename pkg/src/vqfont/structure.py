"""Character structure categories and feature-grid partitions.

A character is labelled with one of twelve spatial arrangements. Each
arrangement maps deterministically onto a partition of an ``h x w`` feature
grid into one to three disjoint patch-position sets, one per component.

Boundaries are fractional: two-way splits cut at 1/2, three-way splits at 1/3
and 2/3 (``floor(fraction * extent)``). Encompassing arrangements give the
enclosing component a frame ``ceil(extent / 8)`` patches thick along its
closed sides; the enclosed component takes the rest.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import GridTooSmall, UnknownCharacter, UnreadableSource

__all__ = [
    "StructureCategory",
    "CharacterEntry",
    "StructureTable",
    "ComponentLayout",
    "classify_structure",
    "decompose",
    "component_count",
    "load_structure_table",
    "default_structure_table",
]


class StructureCategory(str, enum.Enum):
    LEFT_RIGHT = "left-right"
    LEFT_CENTER_RIGHT = "left-center-right"
    TOP_BOTTOM = "top-bottom"
    TOP_CENTER_BOTTOM = "top-center-bottom"
    FULLY_ENCOMPASSED = "fully-encompassed"
    TOP_THREE_ENCOMPASSED = "top-three-encompassed"
    LEFT_THREE_ENCOMPASSED = "left-three-encompassed"
    BOTTOM_THREE_ENCOMPASSED = "bottom-three-encompassed"
    TOP_LEFT_ENCOMPASSED = "top-left-encompassed"
    TOP_RIGHT_ENCOMPASSED = "top-right-encompassed"
    BOTTOM_LEFT_ENCOMPASSED = "bottom-left-encompassed"
    INDEPENDENT = "independent"

    @property
    def component_count(self) -> int:
        if self is StructureCategory.INDEPENDENT:
            return 1
        if self in (StructureCategory.LEFT_CENTER_RIGHT, StructureCategory.TOP_CENTER_BOTTOM):
            return 3
        return 2

    @property
    def frame_sides(self) -> frozenset[str]:
        """Closed sides of the enclosing component (empty if not encompassing)."""
        return _FRAME_SIDES.get(self, frozenset())


_FRAME_SIDES = {
    StructureCategory.FULLY_ENCOMPASSED: frozenset("tblr"),
    StructureCategory.TOP_THREE_ENCOMPASSED: frozenset("tlr"),
    StructureCategory.LEFT_THREE_ENCOMPASSED: frozenset("ltb"),
    StructureCategory.BOTTOM_THREE_ENCOMPASSED: frozenset("blr"),
    StructureCategory.TOP_LEFT_ENCOMPASSED: frozenset("tl"),
    StructureCategory.TOP_RIGHT_ENCOMPASSED: frozenset("tr"),
    StructureCategory.BOTTOM_LEFT_ENCOMPASSED: frozenset("bl"),
}


@dataclass(frozen=True)
class CharacterEntry:
    codepoint: int
    category: StructureCategory
    components: tuple[str, ...]

    @property
    def char(self) -> str:
        return chr(self.codepoint)


class StructureTable(Mapping[int, CharacterEntry]):
    """Read-only codepoint -> (category, component names) table."""

    def __init__(self, entries: Iterable[CharacterEntry]):
        self._entries = {e.codepoint: e for e in entries}

    def __getitem__(self, codepoint: int) -> CharacterEntry:
        try:
            return self._entries[codepoint]
        except KeyError:
            raise UnknownCharacter(f"U+{codepoint:04X} is not in the structure table") from None

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def components(self, codepoint: int) -> frozenset[str]:
        return frozenset(self[codepoint].components)

    def category_map(self) -> dict[int, StructureCategory]:
        return {cp: e.category for cp, e in self._entries.items()}

    def save(self, path: str | Path) -> None:
        lines = ["# codepoint\tcategory\tcomponents\t# char"]
        for cp in sorted(self._entries):
            e = self._entries[cp]
            lines.append(f"{cp:04X}\t{e.category.value}\t{' '.join(e.components)}\t# {e.char}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_table(text: str) -> StructureTable:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise ValueError(f"line {lineno}: expected '<hex codepoint>\\t<category>[\\t<components>]'")
        cp = int(fields[0].removeprefix("U+"), 16)
        category = StructureCategory(fields[1].strip())
        comps = tuple(fields[2].split()) if len(fields) > 2 and fields[2].strip() else (chr(cp),)
        entries.append(CharacterEntry(cp, category, comps))
    return StructureTable(entries)


def load_structure_table(path: str | Path) -> StructureTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UnreadableSource(f"cannot read structure table {path}: {exc}") from exc
    return _parse_table(text)


def default_structure_table() -> StructureTable:
    """The bundled table covering the desk-scale charset."""
    text = resources.files("vqfont.data").joinpath("structure_table.tsv").read_text(encoding="utf-8")
    return _parse_table(text)


def classify_structure(codepoint: int, table: Mapping[int, CharacterEntry | StructureCategory]) -> StructureCategory:
    try:
        entry = table[codepoint]
    except KeyError:
        raise UnknownCharacter(f"U+{codepoint:04X} is not in the structure table") from None
    return entry.category if isinstance(entry, CharacterEntry) else StructureCategory(entry)


@dataclass(frozen=True)
class ComponentLayout:
    codepoint: int
    category: StructureCategory
    grid: tuple[int, int]
    components: tuple[frozenset[tuple[int, int]], ...]

    def assignment(self) -> np.ndarray:
        """``h x w`` int array holding the component index of every patch."""
        out = np.full(self.grid, -1, dtype=np.int64)
        for i, comp in enumerate(self.components):
            for r, c in comp:
                out[r, c] = i
        return out

    def to_record(self) -> dict:
        return {
            "codepoint": f"{self.codepoint:04X}",
            "category": self.category.value,
            "grid": list(self.grid),
            "components": [sorted([r, c] for r, c in comp) for comp in self.components],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_record(cls, rec: dict) -> "ComponentLayout":
        return cls(
            codepoint=int(rec["codepoint"], 16),
            category=StructureCategory(rec["category"]),
            grid=tuple(rec["grid"]),
            components=tuple(frozenset((r, c) for r, c in comp) for comp in rec["components"]),
        )


def component_count(layout: ComponentLayout) -> int:
    return len(layout.components)


def _frame_mask(h: int, w: int, sides: frozenset[str]) -> np.ndarray:
    tr, tc = math.ceil(h / 8), math.ceil(w / 8)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    mask = np.zeros((h, w), dtype=bool)
    if "t" in sides:
        mask |= rows < tr
    if "b" in sides:
        mask |= rows >= h - tr
    if "l" in sides:
        mask |= cols < tc
    if "r" in sides:
        mask |= cols >= w - tc
    return mask


def _assignment_grid(category: StructureCategory, h: int, w: int) -> np.ndarray:
    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(w)[None, :], (h, w))
    if category is StructureCategory.INDEPENDENT:
        return np.zeros((h, w), dtype=np.int64)
    if category is StructureCategory.LEFT_RIGHT:
        return (cols >= w // 2).astype(np.int64)
    if category is StructureCategory.TOP_BOTTOM:
        return (rows >= h // 2).astype(np.int64)
    if category is StructureCategory.LEFT_CENTER_RIGHT:
        return (cols >= w // 3).astype(np.int64) + (cols >= (2 * w) // 3)
    if category is StructureCategory.TOP_CENTER_BOTTOM:
        return (rows >= h // 3).astype(np.int64) + (rows >= (2 * h) // 3)
    # encompassing: enclosing frame is component 0, interior is component 1
    return (~_frame_mask(h, w, category.frame_sides)).astype(np.int64)


def decompose(codepoint: int, category: StructureCategory | str, grid: tuple[int, int]) -> ComponentLayout:
    """Partition an ``h x w`` grid into the components of ``category``."""
    category = StructureCategory(category)
    h, w = grid
    if h < 2 or w < 2:
        raise GridTooSmall(f"grid {h}x{w} is smaller than 2x2")
    assign = _assignment_grid(category, h, w)
    comps = []
    for i in range(category.component_count):
        rr, cc = np.nonzero(assign == i)
        if rr.size == 0:
            raise GridTooSmall(f"{category.value} leaves component {i} empty on a {h}x{w} grid")
        comps.append(frozenset(zip(rr.tolist(), cc.tolist())))
    return ComponentLayout(codepoint, category, (h, w), tuple(comps))
