"""Stage 1: learn a glyph codebook by reconstruction, then look at what it learned.

Renders a small procedural corpus, trains the autoencoder for a few hundred
steps and writes ``recon.png`` (originals above reconstructions) to the output
directory.

    python demos/02_codebook_pretraining.py --iterations 300 --out /tmp/vqfont_demo
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from vqfont.config import validate_config
from vqfont.glyphs import save_png
from vqfont.pipeline import image_tensor, lookup_from_sources
from vqfont.structure import default_structure_table
from vqfont.synth import make_fonts
from vqfont.vqgan import codebook_usage, extract_gt_indices, reconstruct, train_vqgan

p = argparse.ArgumentParser()
p.add_argument("--iterations", type=int, default=300)
p.add_argument("--out", default="demo_out")
args = p.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

torch.manual_seed(0)
table = default_structure_table()
fonts = make_fonts(4, table, seed=0)
chars = sorted(table)[:40]
look = lookup_from_sources({f.font_id: f for f in fonts}, 32)
x = image_tensor(look, [(f.font_id, c) for f in fonts for c in chars])
print(f"{len(x)} glyphs from {len(fonts)} fonts at 32 px")

cfg = validate_config({"preset": "tiny"})
res = train_vqgan(x, cfg, iterations=args.iterations, log_every=max(1, args.iterations // 5))
for rec in res.history[:: max(1, args.iterations // 5)]:
    print(f"  step {rec['iteration']:5d}  l1 {rec['l1']:.4f}  total {rec['total']:.4f}")

rec = reconstruct(res.model, x)
print(f"mean reconstruction L1 {float((rec - x).abs().mean()):.4f}")

idx = extract_gt_indices(x, res.model)
usage = codebook_usage(idx, cfg.vqgan.codebook_size)
print(f"codebook: {int((usage > 0).sum())}/{cfg.vqgan.codebook_size} entries in use")
print("index grid of the first glyph:")
print(idx[0].numpy())

strip = lambda t: np.concatenate(list(t[:12, 0].numpy()), axis=1)  # noqa: E731
save_png(out / "recon.png", np.concatenate([strip(x), strip(rec)], axis=0))
print(f"wrote {out / 'recon.png'}")
