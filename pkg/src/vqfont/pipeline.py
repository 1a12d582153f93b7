"""Glue between the glyph corpus, the two training stages and evaluation.

These functions carry no learning logic of their own. They turn a glyph
source plus a structure table into tensors and :class:`PairSet` objects, and
they wrap checkpoint I/O and run directories for the command-line tool.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .attention import layout_assignment, padded_reference_assignment
from .config import RunConfig, config_from_dict, dump_config
from .errors import MissingCheckpoint, MissingGlyph, RunDirectoryLocked, UnknownCharacter, UnreadableSource, VQFontError
from .glyphs import (
    DatasetSplits,
    ImageDirectory,
    ReferenceAssignment,
    TrueTypeSource,
    assign_references,
    build_splits,
    save_png,
    write_manifest,
    ManifestRecord,
    MANIFEST_NAME,
)
from .refinement import CodepointLabels, PairSet, VQFont
from .structure import ComponentLayout, StructureTable, decompose, default_structure_table, load_structure_table
from .synth import make_fonts, write_corpus
from .vqgan import VQGAN

CHECKPOINT_VERSION = 1

GlyphLookup = Callable[[str, int], np.ndarray]


# --------------------------------------------------------------------------
# tensors and pairs
# --------------------------------------------------------------------------


def lookup_from_sources(sources: Mapping[str, object], size: int) -> GlyphLookup:
    """Pixel lookup over ``{font_id: GlyphSource}`` with a small cache."""
    cache: dict[tuple[str, int], np.ndarray] = {}

    def get(font_id: str, cp: int) -> np.ndarray:
        key = (font_id, cp)
        if key not in cache:
            try:
                src = sources[font_id]
            except KeyError:
                raise MissingGlyph(f"unknown font '{font_id}'") from None
            cache[key] = src.glyph(cp, size).pixels
        return cache[key]

    return get


def image_tensor(lookup: GlyphLookup, keys: Iterable[tuple[str, int]]) -> torch.Tensor:
    """Stack glyphs into a ``(N, 1, H, W)`` float tensor."""
    return torch.from_numpy(np.stack([lookup(f, cp) for f, cp in keys]).astype(np.float32))[:, None]


def layouts_for(codepoints: Iterable[int], table: StructureTable, grid: int) -> dict[int, ComponentLayout]:
    return {cp: decompose(cp, table[cp].category, (grid, grid)) for cp in set(codepoints)}


def build_pairs(
    lookup: GlyphLookup,
    fonts: Sequence[str],
    targets: Sequence[int],
    references: Mapping[int, ReferenceAssignment],
    table: StructureTable,
    content_font: str,
    grid: int,
    labels: CodepointLabels,
    allow_missing_target: bool = False,
) -> PairSet:
    """One pair per (font, target): content glyph, k references, ground truth.

    With ``allow_missing_target`` a target glyph absent from the source is
    recorded as row ``-1`` instead of raising; evaluation reports it.
    """
    keys: dict[tuple[str, int], int] = {}

    def row(font_id: str, cp: int) -> int:
        if (font_id, cp) not in keys:
            keys[(font_id, cp)] = len(keys)
        return keys[(font_id, cp)]

    layouts = layouts_for(
        list(targets) + [r for t in targets for r in references[t].references], table, grid
    )
    content, refs, target, c_assign, r_assign, s_assign, fids, cps = [], [], [], [], [], [], [], []
    for font_id in fonts:
        for cp in targets:
            ra = references[cp]
            content.append(row(content_font, cp))
            refs.append([row(font_id, r) for r in ra.references])
            if allow_missing_target:
                try:
                    lookup(font_id, cp)
                except MissingGlyph:
                    target.append(-1)
                else:
                    target.append(row(font_id, cp))
            else:
                target.append(row(font_id, cp))
            c_assign.append(layout_assignment(layouts[cp]))
            r_assign.append(padded_reference_assignment([layouts[r] for r in ra.references]))
            s_assign.append(padded_reference_assignment([layouts[cp]] * len(ra.references)))
            fids.append(font_id)
            cps.append(cp)
    glyphs = image_tensor(lookup, keys)
    lt = lambda x: torch.as_tensor(x, dtype=torch.long)  # noqa: E731
    return PairSet(
        glyphs=glyphs,
        content=lt(content),
        refs=lt(refs),
        target=lt(target),
        content_assign=torch.stack(c_assign),
        ref_assign=torch.stack(r_assign),
        self_assign=torch.stack(s_assign),
        labels=labels(cps),
        font_ids=fids,
        codepoints=cps,
    )


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def atomic_save(obj, path: str | Path) -> None:
    """``torch.save`` to a temporary name, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_vqgan(path, model: VQGAN, cfg: RunConfig, extra: dict | None = None) -> None:
    atomic_save(
        {"version": CHECKPOINT_VERSION, "kind": "vqgan", "config": cfg.to_dict(), "state": model.state_dict(), **(extra or {})},
        path,
    )


def _read(path, kind: str) -> dict:
    if path is None or not Path(path).is_file():
        raise MissingCheckpoint(f"no {kind} checkpoint at {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("kind") != kind:
        raise MissingCheckpoint(f"{path} is not a {kind} checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise MissingCheckpoint(f"{path} has unsupported version {ckpt.get('version')}")
    return ckpt


def load_vqgan(path) -> tuple[VQGAN, RunConfig]:
    ckpt = _read(path, "vqgan")
    cfg = config_from_dict(ckpt["config"])
    model = VQGAN.from_config(cfg)
    model.load_state_dict(ckpt["state"])
    return model.eval(), cfg


def export_codebook(model: VQGAN, path: str | Path) -> None:
    np.save(path, model.codebook.embedding.detach().cpu().numpy())


def save_vqfont(path, model: VQFont, vqgan: VQGAN, cfg: RunConfig, labels: CodepointLabels, extra: dict | None = None) -> None:
    atomic_save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": "vqfont",
            "config": cfg.to_dict(),
            "state": model.state_dict(),
            "vqgan_state": vqgan.state_dict(),
            "labels": labels.codepoints,
            **(extra or {}),
        },
        path,
    )


def load_vqfont(path) -> tuple[VQFont, RunConfig, dict]:
    ckpt = _read(path, "vqfont")
    cfg = config_from_dict(ckpt["config"])
    vqgan = VQGAN.from_config(cfg)
    vqgan.load_state_dict(ckpt["vqgan_state"])
    model = VQFont.from_config(vqgan, cfg)
    model.load_state_dict(ckpt["state"])
    return model.eval(), cfg, ckpt


# --------------------------------------------------------------------------
# run directories
# --------------------------------------------------------------------------


@dataclass
class RunDirectory:
    """Exclusive, append-only output directory with a config echo and JSONL log."""

    path: Path

    @classmethod
    def open(cls, path: str | Path, cfg: RunConfig | None = None) -> "RunDirectory":
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        lock = path / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirectoryLocked(f"{path} is in use by another run (remove {lock} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        run = cls(path)
        if cfg is not None:
            (path / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
        return run

    def close(self) -> None:
        (self.path / ".lock").unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def log(self, name: str, records: Iterable[dict]) -> None:
        with open(self.path / name, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")


def pick_device() -> torch.device:
    name = os.environ.get("VQFONT_DEVICE", "cpu")
    try:
        return torch.device(name)
    except RuntimeError as exc:
        raise VQFontError(f"bad VQFONT_DEVICE '{name}': {exc}") from exc


def timestamp() -> str:
    return time.strftime("%Y%m%d-%H%M%S")


# --------------------------------------------------------------------------
# prepared datasets
# --------------------------------------------------------------------------

DATA_FILE = "data.json"
SPLITS_FILE = "splits.json"
REFERENCES_FILE = "references.json"


def parse_codepoint(token: str) -> int:
    """``4E00``, ``U+4E00`` or a literal single character."""
    token = token.strip()
    if len(token) == 1:
        return ord(token)
    try:
        return int(token.upper().removeprefix("U+"), 16)
    except ValueError:
        raise UnknownCharacter(f"cannot read '{token}' as a codepoint") from None


def read_charset(path: str | Path) -> list[int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UnreadableSource(f"cannot read charset file {path}: {exc}") from exc
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.extend(parse_codepoint(t) for t in line.split())
    return list(dict.fromkeys(out))


def load_table(cfg: RunConfig) -> StructureTable:
    return load_structure_table(cfg.data.structure_table) if cfg.data.structure_table else default_structure_table()


@dataclass
class PreparedData:
    """A glyph corpus plus its splits and per-character reference choices."""

    root: Path
    images: ImageDirectory
    splits: DatasetSplits
    references: dict[int, ReferenceAssignment]
    table: StructureTable
    content_font: str
    image_size: int

    @classmethod
    def load(cls, root: str | Path, table: StructureTable | None = None) -> "PreparedData":
        root = Path(root)
        try:
            meta = json.loads((root / DATA_FILE).read_text(encoding="utf-8"))
            refs = json.loads((root / REFERENCES_FILE).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UnreadableSource(f"{root} is not a prepared data directory: {exc}") from exc
        if table is None:
            table = load_structure_table(meta["structure_table"]) if meta.get("structure_table") else default_structure_table()
        return cls(
            root=root,
            images=ImageDirectory(root / meta["images_dir"]),
            splits=DatasetSplits.load(root / SPLITS_FILE),
            references={int(t, 16): ReferenceAssignment(int(t, 16), tuple(int(r, 16) for r in rs)) for t, rs in refs.items()},
            table=table,
            content_font=meta["content_font"],
            image_size=int(meta["image_size"]),
        )

    def lookup(self) -> GlyphLookup:
        sources = {f: self.images.font(f) for f in self.images.font_ids}
        return lookup_from_sources(sources, self.image_size)

    def stage1_keys(self) -> list[tuple[str, int]]:
        """Glyphs the autoencoder trains on: content font plus seen fonts, non-test characters."""
        chars = sorted(self.splits.seen_chars | self.splits.reference_chars)
        fonts = [self.content_font, *sorted(self.splits.seen_fonts)]
        return [(f, c) for f in fonts for c in chars if self.images.has(f, c)]

    def labels(self) -> CodepointLabels:
        return CodepointLabels(self.splits.seen_chars)

    def pairs(self, split: str, grid: int, labels: CodepointLabels | None = None) -> PairSet:
        """``train`` (seen fonts, seen chars), ``sfuc`` or ``ufuc``."""
        s = self.splits
        fonts, chars = {
            "train": (s.seen_fonts, s.seen_chars),
            "sfuc": (s.seen_fonts, s.unseen_chars),
            "ufuc": (s.unseen_fonts, s.unseen_chars),
        }[split]
        return build_pairs(
            self.lookup(),
            sorted(fonts),
            sorted(chars),
            self.references,
            self.table,
            self.content_font,
            grid,
            labels or self.labels(),
            allow_missing_target=split != "train",
        )


def _render_font_files(fonts_dir: Path, out: Path, charset: Sequence[int], size: int) -> None:
    files = sorted(p for p in fonts_dir.iterdir() if p.suffix.lower() in (".ttf", ".otf", ".ttc"))
    if not files:
        raise UnreadableSource(f"no font files in {fonts_dir}")
    records = []
    for path in files:
        src = TrueTypeSource(path, path.stem)
        for cp in charset:
            if not src.has_glyph(cp):
                continue
            rel = f"{src.font_id}/{cp:04X}.png"
            save_png(out / rel, src.glyph(cp, size).pixels)
            records.append(ManifestRecord(src.font_id, cp, rel))
    write_manifest(out / MANIFEST_NAME, records)


def prepare_data(
    out: str | Path,
    cfg: RunConfig,
    images_dir: str | Path | None = None,
    fonts_dir: str | Path | None = None,
    charset: Sequence[int] | None = None,
) -> PreparedData:
    """Materialise a corpus, splits and reference assignments under ``out``.

    Glyphs come from a PNG directory, from vector font files, or, when
    neither is given, from the procedural corpus.
    """
    d = cfg.data
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(cfg)
    chars = list(charset) if charset is not None else sorted(table)
    missing = [c for c in chars if c not in table]
    if missing:
        raise UnknownCharacter(f"{len(missing)} charset entries lack a structure label, e.g. U+{missing[0]:04X}")
    if d.max_chars is not None:
        chars = chars[: d.max_chars]
    if images_dir is not None:
        img_root = Path(images_dir).resolve()
    else:
        img_root = out / "images"
        if fonts_dir is not None:
            _render_font_files(Path(fonts_dir), img_root, chars, d.image_size)
        else:
            write_corpus(img_root, make_fonts(d.synthetic_fonts, table, cfg.seed), chars, d.image_size)
    images = ImageDirectory(img_root)
    if d.content_font not in images.font_ids:
        raise MissingGlyph(f"content font '{d.content_font}' is not in the corpus")
    usable = [c for c in chars if images.has(d.content_font, c)]
    styles = [f for f in images.font_ids if f != d.content_font]
    pool = [parse_codepoint(c) for c in d.reference_chars] if d.reference_chars else None
    splits = build_splits(usable, styles, d.split_ratios, cfg.seed, d.unseen_fonts, pool)
    refs = assign_references(splits.seen_chars | splits.unseen_chars, splits.reference_chars, table, d.refs_per_char)
    splits.save(out / SPLITS_FILE)
    (out / REFERENCES_FILE).write_text(
        json.dumps({f"{t:04X}": [f"{r:04X}" for r in a.references] for t, a in refs.items()}, indent=1), encoding="utf-8"
    )
    meta = {
        "images_dir": os.path.relpath(img_root, out),
        "content_font": d.content_font,
        "image_size": d.image_size,
        "structure_table": d.structure_table,
        "seed": cfg.seed,
    }
    (out / DATA_FILE).write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return PreparedData.load(out, table)
