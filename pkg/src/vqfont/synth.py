"""Procedural glyph corpus.

No CJK outline fonts are assumed to be installed, so tests and demos run on a
synthetic corpus instead. Every component name gets a fixed stroke skeleton
(seeded from a CRC of the name). A character is drawn by laying its
components out in the regions of its structure category, the same regions
:func:`vqfont.structure.decompose` uses on the feature grid. A "font" is a
set of style parameters (stroke weight, contrast, slant, serifs, per-stroke
wobble). The wobble is seeded per (font, component), so a component looks
the same in every character of one font. That is the property reference
glyphs are supposed to transfer.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import MissingGlyph
from .glyphs import GlyphImage, ManifestRecord, save_png, write_manifest, MANIFEST_NAME
from .structure import StructureCategory, StructureTable

CONTENT_FONT_ID = "content"
MARGIN = 0.07
SUPERSAMPLE = 4

Stroke = list[tuple[float, float]]


def _seed(*parts: str) -> int:
    return zlib.crc32("\x1f".join(parts).encode("utf-8"))


@dataclass(frozen=True)
class FontStyle:
    weight: float = 0.055  # stroke width as a fraction of the glyph box
    contrast: float = 1.0  # horizontal / vertical stroke width
    slant: float = 0.0  # x shear per unit of y
    serif: float = 0.0  # serif blob radius as a fraction of the weight
    wobble: float = 0.0  # endpoint displacement amplitude
    squash: float = 1.0  # vertical scale of the glyph body

    @classmethod
    def random(cls, rng: np.random.Generator) -> "FontStyle":
        return cls(
            weight=float(rng.uniform(0.035, 0.11)),
            contrast=float(rng.choice([1.0, 1.0, 0.55, 0.4])),
            slant=float(rng.uniform(-0.18, 0.18)),
            serif=float(rng.choice([0.0, 0.0, 0.9, 1.3])),
            wobble=float(rng.choice([0.0, 0.02, 0.045])),
            squash=float(rng.uniform(0.82, 1.0)),
        )


def component_skeleton(name: str) -> list[Stroke]:
    """Deterministic stroke skeleton for a component, in unit-box coordinates."""
    rng = np.random.default_rng(_seed("component", name))
    strokes: list[Stroke] = []
    for _ in range(int(rng.integers(2, 6))):
        kind = rng.choice(["h", "h", "v", "v", "l", "r", "hook", "dot"])
        a, b = sorted(rng.uniform(0.08, 0.92, size=2))
        if b - a < 0.3:
            a, b = max(0.05, a - 0.15), min(0.95, b + 0.15)
        t = float(rng.uniform(0.12, 0.88))
        if kind == "h":
            strokes.append([(a, t), (b, t)])
        elif kind == "v":
            strokes.append([(t, a), (t, b)])
        elif kind == "l":
            strokes.append([(b, a), (a, b)])
        elif kind == "r":
            strokes.append([(a, a), (b, b)])
        elif kind == "hook":
            strokes.append([(t, a), (t, b), (max(0.05, t - 0.18), b - 0.1)])
        else:
            strokes.append([(t, a), (t + 0.08, a + 0.1)])
    return strokes


def frame_skeleton(name: str, sides: frozenset[str], band: float) -> list[Stroke]:
    """Skeleton of an enclosing component drawn along its closed sides."""
    lo, hi = band / 2, 1.0 - band / 2
    strokes: list[Stroke] = []
    if "t" in sides:
        strokes.append([(lo, lo), (hi, lo)])
    if "b" in sides:
        strokes.append([(lo, hi), (hi, hi)])
    if "l" in sides:
        strokes.append([(lo, lo), (lo, hi)])
    if "r" in sides:
        strokes.append([(hi, lo), (hi, hi)])
    # a small identifying mark inside the band so distinct radicals differ
    rng = np.random.default_rng(_seed("frame", name))
    side = sorted(sides)[int(rng.integers(len(sides)))]
    p = float(rng.uniform(0.2, 0.8))
    tick = band * float(rng.uniform(0.6, 1.4))
    if side in "tb":
        y = lo if side == "t" else hi
        strokes.append([(p, y - tick / 2), (p + tick, y + tick / 2)])
    else:
        x = lo if side == "l" else hi
        strokes.append([(x - tick / 2, p), (x + tick / 2, p + tick)])
    return strokes


def category_boxes(category: StructureCategory) -> list[tuple[float, float, float, float]]:
    """Component boxes ``(x0, y0, x1, y1)`` in the unit square, mirroring :func:`decompose`."""
    c = StructureCategory(category)
    if c is StructureCategory.INDEPENDENT:
        return [(0, 0, 1, 1)]
    if c is StructureCategory.LEFT_RIGHT:
        return [(0, 0, 0.5, 1), (0.5, 0, 1, 1)]
    if c is StructureCategory.TOP_BOTTOM:
        return [(0, 0, 1, 0.5), (0, 0.5, 1, 1)]
    if c is StructureCategory.LEFT_CENTER_RIGHT:
        return [(0, 0, 1 / 3, 1), (1 / 3, 0, 2 / 3, 1), (2 / 3, 0, 1, 1)]
    if c is StructureCategory.TOP_CENTER_BOTTOM:
        return [(0, 0, 1, 1 / 3), (0, 1 / 3, 1, 2 / 3), (0, 2 / 3, 1, 1)]
    band = 1 / 8
    s = c.frame_sides
    inner = (
        band if "l" in s else 0.0,
        band if "t" in s else 0.0,
        1 - band if "r" in s else 1.0,
        1 - band if "b" in s else 1.0,
    )
    return [(0, 0, 1, 1), inner]


class SyntheticFont:
    """A procedural font that draws any character in a structure table."""

    def __init__(self, font_id: str, style: FontStyle, table: StructureTable):
        self.font_id = font_id
        self.style = style
        self.table = table

    def _styled(self, comp: str, strokes: list[Stroke]) -> list[Stroke]:
        if not self.style.wobble:
            return strokes
        rng = np.random.default_rng(_seed("wobble", self.font_id, comp))
        return [
            [(x + rng.normal(0, self.style.wobble), y + rng.normal(0, self.style.wobble)) for x, y in s]
            for s in strokes
        ]

    def strokes(self, codepoint: int) -> list[Stroke]:
        """All strokes of a character in unit-square glyph coordinates."""
        entry = self.table[codepoint]
        boxes = category_boxes(entry.category)
        comps = list(entry.components)
        if len(comps) > len(boxes):
            # surplus components share the last region as one compound shape
            comps = comps[: len(boxes) - 1] + ["+".join(comps[len(boxes) - 1 :])]
        comps += comps[-1:] * (len(boxes) - len(comps))
        out: list[Stroke] = []
        for i, (comp, (x0, y0, x1, y1)) in enumerate(zip(comps, boxes)):
            if entry.category.frame_sides and i == 0:
                skel = frame_skeleton(comp, entry.category.frame_sides, 1 / 8)
                pad = 0.0
            else:
                skel = component_skeleton(comp)
                pad = 0.08
            skel = self._styled(comp, skel)
            bw, bh = x1 - x0, y1 - y0
            for s in skel:
                out.append([(x0 + bw * (pad + (1 - 2 * pad) * x), y0 + bh * (pad + (1 - 2 * pad) * y)) for x, y in s])
        return out

    def glyph(self, codepoint: int, size: int) -> GlyphImage:
        if codepoint not in self.table:
            raise MissingGlyph(f"{self.font_id} has no glyph for U+{codepoint:04X}")
        st = self.style
        big = size * SUPERSAMPLE
        im = Image.new("L", (big, big), 255)
        draw = ImageDraw.Draw(im)
        span = 1 - 2 * MARGIN

        def to_px(x: float, y: float) -> tuple[float, float]:
            y = 0.5 + (y - 0.5) * st.squash
            x = x + st.slant * (0.5 - y)
            return ((MARGIN + span * x) * big, (MARGIN + span * y) * big)

        vw = max(1.0, st.weight * span * big)
        for s in self.strokes(codepoint):
            pts = [to_px(x, y) for x, y in s]
            for p, q in zip(pts, pts[1:]):
                dx, dy = q[0] - p[0], q[1] - p[1]
                horiz = abs(dx) > 2 * abs(dy)
                w = max(1.0, vw * (st.contrast if horiz else 1.0))
                draw.line([p, q], fill=0, width=int(round(w)))
                r = w / 2
                for cx, cy in (p, q):
                    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=0)
            if st.serif:
                r = vw * st.serif / 2
                cx, cy = pts[-1]
                draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=0)
        small = im.resize((size, size), Image.Resampling.BOX)
        px = np.asarray(small, dtype=np.float32) / 255.0
        return GlyphImage(px, codepoint, self.font_id)


def make_fonts(n_fonts: int, table: StructureTable, seed: int = 0) -> list[SyntheticFont]:
    """The neutral content font followed by ``n_fonts`` randomly styled fonts."""
    rng = np.random.default_rng(seed)
    fonts = [SyntheticFont(CONTENT_FONT_ID, FontStyle(), table)]
    for i in range(n_fonts):
        fonts.append(SyntheticFont(f"font{i:03d}", FontStyle.random(rng), table))
    return fonts


def write_corpus(
    root: str | Path,
    fonts: Sequence[SyntheticFont],
    codepoints: Iterable[int],
    size: int,
) -> list[ManifestRecord]:
    """Render every (font, codepoint) pair to PNG and write ``manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    cps = sorted(set(codepoints))
    for font in fonts:
        for cp in cps:
            rel = f"{font.font_id}/{cp:04X}.png"
            save_png(root / rel, font.glyph(cp, size).pixels)
            records.append(ManifestRecord(font.font_id, cp, rel))
    write_manifest(root / MANIFEST_NAME, records)
    styles = {f.font_id: asdict(f.style) for f in fonts}
    (root / "fonts.json").write_text(json.dumps(styles, indent=1), encoding="utf-8")
    return records
