"""Glyph ingestion, dataset splits and reference selection.

Two ingestion modes are supported:

* :class:`TrueTypeSource` rasterises a vector font file with FreeType.
* :class:`ImageDirectory` reads pre-rendered 8-bit grayscale PNGs listed in a
  ``manifest.csv`` (``font_id,codepoint,relative_path``). This mode is the
  canonical one for tests because it is bit-identical across platforms.

Images follow one convention everywhere: ink is 0, background is 1.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import (
    BadRatio,
    EmptyReferencePool,
    MissingGlyph,
    ShapeMismatch,
    UnknownCharacter,
    UnreadableSource,
)
from .structure import CharacterEntry

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("font_id", "codepoint", "relative_path")


@dataclass(frozen=True, eq=False)
class GlyphImage:
    pixels: np.ndarray
    codepoint: int
    font_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ShapeMismatch(f"glyph must be square 2-D, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.isfinite(px).all()):
            raise ValueError("glyph pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def char(self) -> str:
        return chr(self.codepoint)


class GlyphSource(Protocol):
    font_id: str

    def glyph(self, codepoint: int, size: int) -> GlyphImage: ...


def render_glyph(font_source: GlyphSource, codepoint: int, size: int) -> GlyphImage:
    """Render or load ``codepoint`` from ``font_source`` as a ``size x size`` glyph."""
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    return font_source.glyph(codepoint, size)


def _stretch(px: np.ndarray) -> np.ndarray:
    lo, hi = float(px.min()), float(px.max())
    if hi > lo:
        px = (px - lo) / (hi - lo)
    return np.clip(px, 0.0, 1.0).astype(np.float32)


class TrueTypeSource:
    """Rasterise glyphs from a TrueType/OpenType file."""

    def __init__(self, path: str | Path, font_id: str | None = None, fill: float = 0.85):
        self.path = Path(path)
        self.font_id = font_id or self.path.stem
        self.fill = fill
        try:
            from fontTools.ttLib import TTFont

            with TTFont(str(self.path), lazy=True) as tt:
                self._cmap = set(tt.getBestCmap() or {})
        except Exception as exc:  # fontTools raises a zoo of parse errors
            raise UnreadableSource(f"cannot read font {self.path}: {exc}") from exc

    def has_glyph(self, codepoint: int) -> bool:
        return codepoint in self._cmap

    @lru_cache(maxsize=8)
    def _font(self, px: int):
        try:
            return ImageFont.truetype(str(self.path), size=px)
        except OSError as exc:
            raise UnreadableSource(f"FreeType cannot open {self.path}: {exc}") from exc

    def glyph(self, codepoint: int, size: int) -> GlyphImage:
        if not self.has_glyph(codepoint):
            raise MissingGlyph(f"{self.font_id} has no glyph for U+{codepoint:04X}")
        font = self._font(max(1, int(round(size * self.fill))))
        canvas = Image.new("L", (size * 2, size * 2), 255)
        draw = ImageDraw.Draw(canvas)
        draw.text((size // 2, size // 2), chr(codepoint), font=font, fill=0)
        bbox = Image.eval(canvas, lambda v: 255 - v).getbbox()
        out = Image.new("L", (size, size), 255)
        if bbox is not None:
            ink = canvas.crop(bbox)
            if ink.width > size or ink.height > size:
                ink.thumbnail((size, size), Image.Resampling.LANCZOS)
            out.paste(ink, ((size - ink.width) // 2, (size - ink.height) // 2))
        px = np.asarray(out, dtype=np.float32) / 255.0
        return GlyphImage(_stretch(px), codepoint, self.font_id)


@dataclass(frozen=True)
class ManifestRecord:
    font_id: str
    codepoint: int
    relative_path: str


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise UnreadableSource(f"manifest {path} lacks columns {sorted(missing)}")
            return [
                ManifestRecord(r["font_id"], int(r["codepoint"].removeprefix("U+"), 16), r["relative_path"])
                for r in reader
            ]
    except OSError as exc:
        raise UnreadableSource(f"cannot read manifest {path}: {exc}") from exc


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.font_id, f"{r.codepoint:04X}", r.relative_path])


def save_png(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def load_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise UnreadableSource(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


class ImageDirectory:
    """A directory of pre-rendered glyph PNGs indexed by ``manifest.csv``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records = read_manifest(self.root / MANIFEST_NAME)
        self._index = {(r.font_id, r.codepoint): r.relative_path for r in self.records}

    @property
    def font_ids(self) -> list[str]:
        return sorted({r.font_id for r in self.records})

    def codepoints(self, font_id: str | None = None) -> list[int]:
        return sorted({r.codepoint for r in self.records if font_id is None or r.font_id == font_id})

    def has(self, font_id: str, codepoint: int) -> bool:
        return (font_id, codepoint) in self._index

    def font(self, font_id: str) -> "ImageFontView":
        return ImageFontView(self, font_id)

    def load(self, font_id: str, codepoint: int, size: int | None = None) -> GlyphImage:
        try:
            rel = self._index[(font_id, codepoint)]
        except KeyError:
            raise MissingGlyph(f"{font_id} has no image for U+{codepoint:04X}") from None
        px = load_png(self.root / rel)
        if size is not None and px.shape != (size, size):
            im = Image.fromarray(np.rint(px * 255).astype(np.uint8), mode="L")
            px = np.asarray(im.resize((size, size), Image.Resampling.BOX), dtype=np.float32) / 255.0
        return GlyphImage(px, codepoint, font_id)


@dataclass(frozen=True)
class ImageFontView:
    directory: ImageDirectory
    font_id: str

    def glyph(self, codepoint: int, size: int) -> GlyphImage:
        return self.directory.load(self.font_id, codepoint, size)


# --------------------------------------------------------------------------
# splits and references
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplits:
    seen_chars: frozenset[int]
    reference_chars: frozenset[int]
    unseen_chars: frozenset[int]
    seen_fonts: frozenset[str]
    unseen_fonts: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        for a, b in itertools.combinations((self.seen_chars, self.reference_chars, self.unseen_chars), 2):
            if a & b:
                raise ValueError("character splits overlap")
        if self.seen_fonts & self.unseen_fonts:
            raise ValueError("seen and unseen font sets overlap")

    def to_record(self) -> dict:
        return {
            "seen_chars": [f"{c:04X}" for c in sorted(self.seen_chars)],
            "reference_chars": [f"{c:04X}" for c in sorted(self.reference_chars)],
            "unseen_chars": [f"{c:04X}" for c in sorted(self.unseen_chars)],
            "seen_fonts": sorted(self.seen_fonts),
            "unseen_fonts": sorted(self.unseen_fonts),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DatasetSplits":
        chars = lambda key: frozenset(int(c, 16) for c in rec[key])  # noqa: E731
        return cls(
            chars("seen_chars"),
            chars("reference_chars"),
            chars("unseen_chars"),
            frozenset(rec["seen_fonts"]),
            frozenset(rec.get("unseen_fonts", ())),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplits":
        return cls.from_record(json.loads(Path(path).read_text(encoding="utf-8")))


def _split_counts(ratios: Sequence[float], n: int) -> tuple[int, int, int]:
    if len(ratios) != 3:
        raise BadRatio(f"expected three ratios (seen, reference, unseen), got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise BadRatio(f"ratios must be non-negative, got {tuple(ratios)}")
    if all(float(r).is_integer() for r in ratios) and sum(ratios) > 1:
        counts = tuple(int(r) for r in ratios)
        if sum(counts) > n:
            raise BadRatio(f"split counts {counts} exceed charset size {n}")
        return counts
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise BadRatio(f"fractional ratios must sum to 1, got {sum(ratios)}")
    ref, unseen = int(ratios[1] * n), int(ratios[2] * n)
    return n - ref - unseen, ref, unseen


def build_splits(
    charset: Sequence[int],
    font_ids: Sequence[str],
    ratios: Sequence[float],
    seed: int,
    unseen_fonts: int = 0,
    reference_pool: Iterable[int] | None = None,
) -> DatasetSplits:
    """Deterministically partition characters and fonts.

    ``ratios`` are either integer counts (which may sum to less than the
    charset size; the remainder is left out) or fractions summing to one.
    When ``reference_pool`` is given it is used verbatim as the reference set
    and the other two groups are drawn from the remaining characters.
    """
    chars = sorted(set(charset))
    rng = np.random.default_rng(seed)
    if reference_pool is not None:
        pool = sorted(set(reference_pool))
        if not set(pool) <= set(chars):
            raise BadRatio("reference pool contains characters outside the charset")
        rest = [c for c in chars if c not in set(pool)]
        n_seen, _, n_unseen = _split_counts(ratios, len(chars))
        if n_seen + n_unseen > len(rest):
            raise BadRatio(f"seen+unseen counts {n_seen + n_unseen} exceed the {len(rest)} non-reference characters")
        order = [rest[i] for i in rng.permutation(len(rest))]
        seen, refs, unseen = order[:n_seen], pool, order[n_seen : n_seen + n_unseen]
    else:
        n_seen, n_ref, n_unseen = _split_counts(ratios, len(chars))
        order = [chars[i] for i in rng.permutation(len(chars))]
        seen = order[:n_seen]
        refs = order[n_seen : n_seen + n_ref]
        unseen = order[n_seen + n_ref : n_seen + n_ref + n_unseen]

    fonts = sorted(set(font_ids))
    if not 0 <= unseen_fonts <= len(fonts):
        raise BadRatio(f"cannot hold out {unseen_fonts} of {len(fonts)} fonts")
    font_order = [fonts[i] for i in rng.permutation(len(fonts))]
    held = font_order[len(fonts) - unseen_fonts :]
    return DatasetSplits(
        frozenset(seen),
        frozenset(refs),
        frozenset(unseen),
        frozenset(font_order[: len(fonts) - unseen_fonts]),
        frozenset(held),
    )


@dataclass(frozen=True)
class ReferenceAssignment:
    target: int
    references: tuple[int, ...]


def _components_of(table: Mapping, codepoint: int) -> frozenset[str]:
    try:
        entry = table[codepoint]
    except KeyError:
        raise UnknownCharacter(f"U+{codepoint:04X} is not in the layout table") from None
    if isinstance(entry, CharacterEntry):
        return frozenset(entry.components)
    return frozenset(entry)


def select_references(
    target: int, reference_chars: Iterable[int], layout_table: Mapping, k: int = 3
) -> ReferenceAssignment:
    """Greedy maximum-coverage choice of ``k`` reference characters.

    Each round picks the candidate sharing the most not-yet-covered components
    with ``target`` (ties to the lowest codepoint). Once no candidate adds
    coverage, the remaining slots take the lowest unused codepoints.
    """
    pool = sorted(set(reference_chars) - {target})
    if not pool:
        raise EmptyReferencePool(f"no reference characters available for U+{target:04X}")
    if k < 1 or k > len(pool):
        raise ValueError(f"cannot pick {k} references from a pool of {len(pool)}")
    uncovered = set(_components_of(layout_table, target))
    comps = {cp: _components_of(layout_table, cp) for cp in pool}
    chosen: list[int] = []
    while len(chosen) < k and uncovered:
        best, gain = None, 0
        for cp in pool:
            if cp in chosen:
                continue
            g = len(comps[cp] & uncovered)
            if g > gain:
                best, gain = cp, g
        if best is None:
            break
        chosen.append(best)
        uncovered -= comps[best]
    for cp in pool:
        if len(chosen) == k:
            break
        if cp not in chosen:
            chosen.append(cp)
    return ReferenceAssignment(target, tuple(chosen))


def assign_references(
    targets: Iterable[int], reference_chars: Iterable[int], layout_table: Mapping, k: int = 3
) -> dict[int, ReferenceAssignment]:
    refs = frozenset(reference_chars)
    return {t: select_references(t, refs, layout_table, k) for t in sorted(set(targets))}


def coverage(target: int, references: Iterable[int], layout_table: Mapping) -> int:
    """Number of the target's components present in at least one reference."""
    covered = set()
    for cp in references:
        covered |= _components_of(layout_table, cp)
    return len(_components_of(layout_table, target) & covered)
