"""Few-shot glyph generation over a learned stroke codebook.

Stage 1 (:mod:`vqfont.vqgan`) learns a discrete codebook of glyph patches by
self-reconstruction. Stage 2 (:mod:`vqfont.refinement`) predicts codebook
indices for a new character from a content glyph and a few style references,
with structure-aware cross-attention (:mod:`vqfont.attention`).
"""

from .config import RunConfig, load_config, validate_config
from .errors import VQFontError
from .glyphs import DatasetSplits, GlyphImage, ImageDirectory, TrueTypeSource, build_splits, render_glyph, select_references
from .metrics import MetricsReport, evaluate_split, l1, psnr, rmse, ssim
from .refinement import VQFont, generate, train_vqfont
from .structure import ComponentLayout, StructureCategory, classify_structure, decompose
from .vqgan import VQGAN, quantize, train_vqgan

__version__ = "0.1.0"
