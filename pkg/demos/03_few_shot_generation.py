"""End-to-end few-shot generation on a procedural corpus.

1. prepare a corpus with seen/reference/unseen character splits and a held-out font
2. pretrain the codebook autoencoder
3. train the index-prediction generator on seen fonts and characters
4. generate unseen characters for seen and unseen fonts and score them
5. write comparison grids and attention heatmaps

    python demos/03_few_shot_generation.py --stage1 600 --stage2 800 --out /tmp/vqfont_demo3

Rows of ``grid_*.png`` read: content glyph, the style references, the
generated glyph, the ground truth.
"""

import argparse
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from vqfont.config import validate_config
from vqfont.metrics import evaluate_split, save_comparison_grid
from vqfont.pipeline import prepare_data
from vqfont.refinement import attach_gt_indices, predict_pairs, train_vqfont
from vqfont.vqgan import train_vqgan

p = argparse.ArgumentParser()
p.add_argument("--stage1", type=int, default=600)
p.add_argument("--stage2", type=int, default=800)
p.add_argument("--out", default="demo_out")
args = p.parse_args()
out = Path(args.out)

torch.manual_seed(0)
cfg = validate_config({"preset": "tiny", "data": {"synthetic_fonts": 5, "split_ratios": [60, 30, 20]}})
data = prepare_data(out / "data", cfg)
s = data.splits
print(f"chars: {len(s.seen_chars)} seen, {len(s.reference_chars)} reference, {len(s.unseen_chars)} unseen")
print(f"fonts: seen {sorted(s.seen_fonts)}, unseen {sorted(s.unseen_fonts)}")

x = torch.from_numpy(np.stack([data.lookup()(f, c) for f, c in data.stage1_keys()]))[:, None]
vq = train_vqgan(x, cfg, iterations=args.stage1, log_every=0).model
print(f"stage 1 done on {len(x)} glyphs")

grid = cfg.vqgan.latent_size
labels = data.labels()
train = attach_gt_indices(data.pairs("train", grid, labels), vq)
res = train_vqfont(train, vq, cfg, len(labels), iterations=args.stage2, log_every=0)
h = res.history
head, tail = h[: len(h) // 10 or 1], h[-(len(h) // 10 or 1) :]
mean = lambda rs, k: float(np.mean([r[k] for r in rs]))  # noqa: E731
print(f"stage 2: index loss {mean(head, 'l_main'):.3f} -> {mean(tail, 'l_main'):.3f}, "
      f"token accuracy {mean(tail, 'token_acc'):.3f}")

model = res.model
for split in ("sfuc", "ufuc"):
    pairs = data.pairs(split, grid, labels)
    agg = evaluate_split(model, pairs, split.upper()).aggregates()[split.upper()]
    print(f"{split.upper()}: " + "  ".join(f"{k} {v:.4f}" for k, v in agg.items() if k != "count"))
    images, _ = predict_pairs(model, pairs)
    save_comparison_grid(out / f"grid_{split}.png", pairs, images, limit=10)

# where does one content patch look in the references?
pairs = data.pairs("ufuc", grid, labels)
b = pairs.batch(torch.arange(1))
model.eval()
with torch.no_grad():
    _, attn = model.aggregate(b["content"], b["refs"], b["content_assign"], b["ref_assign"], return_attention=True)
for name, logits in attn.items():
    if name == "structure":
        continue
    row = torch.softmax(logits, -1).mean(1)[0, grid * grid // 2].reshape(-1, grid, grid)
    tile = torch.cat(list(row), dim=1)
    tile = (tile / tile.max()).numpy()
    img = Image.fromarray(np.uint8(tile * 255), mode="L").resize((tile.shape[1] * 8, tile.shape[0] * 8), Image.NEAREST)
    img.save(out / f"attention_{name}.png")
print(f"wrote grids and attention maps under {out}")
