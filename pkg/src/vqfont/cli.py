"""``vqfont`` command-line entry point.

Every failure prints one line ``error <CODE>: <message>`` on stderr and exits
with status 1. Argument errors exit with status 2 (argparse convention).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline as pl
from .attention import layout_assignment, padded_reference_assignment
from .config import load_config
from .errors import EmptyReferences, MissingCheckpoint, VQFontError
from .glyphs import load_png, save_png, select_references, write_manifest, ManifestRecord, MANIFEST_NAME
from .metrics import MetricsReport, evaluate_split, save_comparison_grid
from .refinement import predict_pairs, train_vqfont
from .structure import classify_structure, decompose
from .vqgan import codebook_usage, extract_gt_indices, make_perceptual, reconstruct, train_vqgan

log = logging.getLogger("vqfont")


def _cfg(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _hist_log(run: pl.RunDirectory, name: str, history: list[dict]) -> None:
    run.log(name, history)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_prepare_data(args) -> dict:
    cfg = _cfg(args)
    d = cfg.data
    if args.split_ratios:
        d.split_ratios = [float(x) if "." in x else int(x) for x in args.split_ratios.split(",")]
    if args.refs_per_char is not None:
        d.refs_per_char = args.refs_per_char
    if args.content_font:
        d.content_font = args.content_font
    charset = pl.read_charset(args.charset_file or d.charset_file) if (args.charset_file or d.charset_file) else None
    with pl.RunDirectory.open(args.out, cfg) as run:
        data = pl.prepare_data(run.path, cfg, images_dir=args.images_dir, fonts_dir=args.fonts_dir, charset=charset)
    s = data.splits
    return {
        "out": str(args.out),
        "fonts": len(data.images.font_ids),
        "seen_chars": len(s.seen_chars),
        "reference_chars": len(s.reference_chars),
        "unseen_chars": len(s.unseen_chars),
        "seen_fonts": len(s.seen_fonts),
        "unseen_fonts": len(s.unseen_fonts),
    }


def cmd_pretrain_vqgan(args) -> dict:
    cfg = _cfg(args)
    data = pl.PreparedData.load(args.data)
    cfg.data.image_size = data.image_size
    x = pl.image_tensor(data.lookup(), data.stage1_keys())
    device = pl.pick_device()
    with pl.RunDirectory.open(args.out, cfg) as run:
        ckpt = run.path / "vqgan.pt"

        def on_ckpt(it, model, disc):
            pl.save_vqgan(ckpt, model, cfg, {"iteration": it})  # state_dict tensors load back onto cpu

        res = train_vqgan(x, cfg, iterations=args.iterations, on_checkpoint=on_ckpt, device=device)
        res.model.cpu()
        pl.save_vqgan(ckpt, res.model, cfg, {"iteration": len(res.history)})
        pl.export_codebook(res.model, run.path / "codebook.npy")
        _hist_log(run, "vqgan_log.jsonl", res.history)
        rec = reconstruct(res.model, x)
        usage = codebook_usage(extract_gt_indices(x, res.model), cfg.vqgan.codebook_size)
        summary = {"checkpoint": str(ckpt), "recon_l1": float((rec - x).abs().mean()), "codes_used": int((usage > 0).sum())}
        (run.path / "vqgan_summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return summary


def cmd_train_vqfont(args) -> dict:
    if not args.vqgan_ckpt:
        raise MissingCheckpoint("train-vqfont needs --vqgan-ckpt")
    vqgan, stage1_cfg = pl.load_vqgan(args.vqgan_ckpt)
    cfg = _cfg(args) if args.config else stage1_cfg
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.data, cfg.vqgan = stage1_cfg.data, stage1_cfg.vqgan
    data = pl.PreparedData.load(args.data)
    labels = data.labels()
    pairs = data.pairs("train", vqgan.latent_size, labels)
    with pl.RunDirectory.open(args.out, cfg) as run:
        ckpt = run.path / "vqfont.pt"

        def on_ckpt(it, model, disc):
            pl.save_vqfont(ckpt, model, vqgan, cfg, labels, {"iteration": it})

        res = train_vqfont(
            pairs, vqgan, cfg, len(labels), iterations=args.iterations, on_checkpoint=on_ckpt, device=pl.pick_device()
        )
        res.model.cpu()
        pl.save_vqfont(ckpt, res.model, vqgan, cfg, labels, {"iteration": len(res.history)})
        _hist_log(run, "vqfont_log.jsonl", res.history)
        images, idx = predict_pairs(res.model, pairs)
        summary = {"checkpoint": str(ckpt), "train_l1": float((images - pairs.glyphs[pairs.target]).abs().mean())}
        if idx is not None:
            summary["token_accuracy"] = float((idx == pairs.s_g).float().mean())
        (run.path / "vqfont_summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return summary


def _style_refs(args, data: pl.PreparedData, grid: int):
    """Reference images and layouts from ``--style-refs`` (PNG paths or characters of ``--font``)."""
    tokens = [t for t in args.style_refs.split(",") if t]
    imgs, layouts = [], []
    for tok in tokens:
        path = Path(tok)
        if path.suffix.lower() == ".png":
            px = load_png(path)
            try:
                cp = pl.parse_codepoint(path.stem)
                layout = decompose(cp, classify_structure(cp, data.table), (grid, grid))
            except VQFontError:
                layout = decompose(0, "independent", (grid, grid))
        else:
            if not args.font:
                raise EmptyReferences("character style references need --font")
            cp = pl.parse_codepoint(tok)
            px = data.lookup()(args.font, cp)
            layout = decompose(cp, classify_structure(cp, data.table), (grid, grid))
        if px.shape != (data.image_size, data.image_size):
            from PIL import Image

            im = Image.fromarray(np.rint(px * 255).astype(np.uint8), mode="L").resize((data.image_size,) * 2, Image.Resampling.BOX)
            px = np.asarray(im, dtype=np.float32) / 255.0
        imgs.append(px)
        layouts.append(layout)
    return torch.from_numpy(np.stack(imgs).astype(np.float32))[:, None], layouts


def cmd_generate(args) -> dict:
    model, cfg, _ = pl.load_vqfont(args.ckpt)
    data = pl.PreparedData.load(args.data)
    grid = model.grid
    refs, ref_layouts = _style_refs(args, data, grid)
    content_font = args.content_font or data.content_font
    look = data.lookup()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    r_assign = padded_reference_assignment(ref_layouts)[None]
    for tok in args.chars.split(","):
        cp = pl.parse_codepoint(tok)
        content = torch.from_numpy(look(content_font, cp).astype(np.float32))[None, None]
        c_assign = layout_assignment(decompose(cp, classify_structure(cp, data.table), (grid, grid)))[None]
        img = model.generate(content, refs[None], c_assign, r_assign)[0, 0].numpy()
        rel = f"{cp:04X}.png"
        save_png(out / rel, img)
        records.append(ManifestRecord("generated", cp, rel))
        if args.dump_attention:
            _dump_attention(model, content, refs[None], c_assign, r_assign, Path(args.dump_attention), cp)
    write_manifest(out / MANIFEST_NAME, records)
    return {"out": str(out), "generated": len(records)}


def cmd_evaluate(args) -> dict:
    if not args.ckpt:
        raise MissingCheckpoint("evaluate needs --ckpt")
    model, cfg, _ = pl.load_vqfont(args.ckpt)
    data = pl.PreparedData.load(args.data)
    extractor = None
    if args.lpips_weights:
        extractor = make_perceptual("vgg16", args.lpips_weights)
    report = MetricsReport()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in args.splits.split(","):
        pairs = data.pairs(split, model.grid)
        if len(pairs) == 0:
            continue
        report.extend(evaluate_split(model, pairs, split.upper(), extractor))
        if args.grid:
            images, _ = predict_pairs(model, pairs)
            save_comparison_grid(out / f"grid_{split}.png", pairs, images)
    report.save(out)
    sys.stdout.write(report.to_tsv())
    return report.aggregates()


def cmd_decompose(args) -> dict:
    cfg = _cfg(args)
    table = pl.load_table(cfg)
    cp = pl.parse_codepoint(args.char)
    category = classify_structure(cp, table)
    layout = decompose(cp, category, (args.grid, args.grid))
    return layout.to_record()


def _dump_attention(model, content, refs, c_assign, r_assign, out: Path, cp: int) -> list[str]:
    from PIL import Image

    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        _, attn = model.aggregate(content, refs, c_assign, r_assign, return_attention=True)
    written = []
    for name, logits in attn.items():
        if name == "structure":
            continue
        a = torch.softmax(logits, -1).mean(1)[0]  # heads averaged: (hw, k*hw)
        a = (a - a.min()) / (a.max() - a.min() + 1e-12)
        path = out / f"{cp:04X}_{name}.png"
        Image.fromarray(np.round(a.numpy() * 255).astype(np.uint8), mode="L").save(path)
        written.append(str(path))
    return written


def cmd_dump_attention(args) -> dict:
    model, cfg, _ = pl.load_vqfont(args.ckpt)
    data = pl.PreparedData.load(args.data)
    cp = pl.parse_codepoint(args.char)
    font = args.font or sorted(data.splits.seen_fonts)[0]
    look = data.lookup()
    grid = model.grid
    ra = data.references.get(cp) or select_references(cp, data.splits.reference_chars, data.table, cfg.data.refs_per_char)
    content = torch.from_numpy(look(data.content_font, cp).astype(np.float32))[None, None]
    refs = torch.from_numpy(np.stack([look(font, r) for r in ra.references]).astype(np.float32))[None, :, None]
    lay = lambda c: decompose(c, classify_structure(c, data.table), (grid, grid))  # noqa: E731
    c_assign = layout_assignment(lay(cp))[None]
    r_assign = padded_reference_assignment([lay(r) for r in ra.references])[None]
    return {"written": _dump_attention(model, content, refs, c_assign, r_assign, Path(args.out), cp)}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqfont", description="Few-shot glyph generation over a learned stroke codebook.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = cmd("prepare-data", cmd_prepare_data, "build a glyph corpus, splits and reference choices")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--images-dir")
    src.add_argument("--fonts-dir")
    sp.add_argument("--charset-file")
    sp.add_argument("--split-ratios", help="seen,reference,unseen counts or fractions")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--refs-per-char", type=int)
    sp.add_argument("--content-font")

    sp = cmd("pretrain-vqgan", cmd_pretrain_vqgan, "stage 1: train the glyph autoencoder and codebook")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)

    sp = cmd("train-vqfont", cmd_train_vqfont, "stage 2: train the few-shot generator")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vqgan-ckpt")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)

    sp = cmd("generate", cmd_generate, "render characters in the style of reference glyphs")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--content-font")
    sp.add_argument("--style-refs", required=True, help="comma-separated PNG paths or characters of --font")
    sp.add_argument("--font", help="font id the character references are taken from")
    sp.add_argument("--chars", required=True, help="comma-separated characters or hex codepoints")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-attention", metavar="DIR")

    sp = cmd("evaluate", cmd_evaluate, "score generated glyphs against ground truth")
    sp.add_argument("--ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--splits", default="sfuc,ufuc")
    sp.add_argument("--grid", action="store_true", help="also write comparison-grid PNGs")
    sp.add_argument("--lpips-weights", help="VGG16 weights enabling the lpips column")

    sp = cmd("decompose", cmd_decompose, "print a character's structure category and component patches")
    sp.add_argument("--char", required=True)
    sp.add_argument("--grid", type=int, default=16)
    sp.add_argument("--config")

    sp = cmd("dump-attention", cmd_dump_attention, "write attention heatmaps for one character")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--char", required=True)
    sp.add_argument("--font")
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except VQFontError as exc:
        msg = " ".join(str(exc).split())
        print(f"error {exc.code}: {msg}", file=sys.stderr)
        return 1
    if result is not None and args.command != "evaluate":
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
