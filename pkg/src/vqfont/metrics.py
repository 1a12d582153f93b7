"""Image similarity metrics and the split-level evaluation harness.

All metrics take two arrays of equal shape with values in [0, 1]. L1 is the
mean absolute error on that scale. PSNR of identical images returns ``cap``
so that means over a split stay finite. SSIM uses an 11x11 Gaussian window
(sigma 1.5), ``C1 = 0.01**2`` and ``C2 = 0.03**2``, averaged over all fully
contained windows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.signal import correlate2d

from .errors import ExtractorUnavailable, MissingGroundTruth, ShapeMismatch

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
COLUMNS = ("l1", "rmse", "psnr", "ssim", "lpips")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.abs(a - b).mean())


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(((a - b) ** 2).mean()))


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _squeeze2d(a: np.ndarray) -> np.ndarray:
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"ssim expects a single 2-D image, got shape {a.shape}")
    return a


def ssim(a, b) -> float:
    a, b = _pair(a, b)
    a, b = _squeeze2d(a), _squeeze2d(b)
    size = min(SSIM_WINDOW, *a.shape)
    w = gaussian_window(size)
    filt = lambda x: correlate2d(x, w, mode="valid")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    while t.ndim < 4:
        t = t[None]
    return t


@torch.no_grad()
def lpips(a, b, extractor: Callable | None) -> float:
    """Learned perceptual distance under a feature extractor.

    Features are unit-normalised along channels, squared differences are
    averaged over positions and summed over channels, then averaged over
    layers. Without an extractor the metric is unavailable.
    """
    if extractor is None:
        raise ExtractorUnavailable("lpips needs a perceptual feature extractor")
    _pair(a, b)
    fa, fb = extractor(_as_batch(a)), extractor(_as_batch(b))
    total = 0.0
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((x - y) ** 2).sum(1).mean())
    return total / len(fa)


def score_pair(a, b, extractor: Callable | None = None) -> dict[str, float]:
    rec = {"l1": l1(a, b), "rmse": rmse(a, b), "psnr": psnr(a, b), "ssim": ssim(a, b)}
    if extractor is not None:
        rec["lpips"] = lpips(a, b, extractor)
    return rec


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-pair scores for one or more splits plus unweighted split means."""

    records: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        present = set().union(*(r.keys() for r in self.records)) if self.records else set()
        return [c for c in COLUMNS if c in present]

    @property
    def splits(self) -> list[str]:
        return list(dict.fromkeys(r["split"] for r in self.records))

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for split in self.splits:
            rows = [r for r in self.records if r["split"] == split]
            out[split] = {c: float(np.mean([r[c] for r in rows])) for c in self.columns}
            out[split]["count"] = len(rows)
        return out

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.records.extend(other.records)
        return self

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["split", "count", *self.columns])
        for split, agg in self.aggregates().items():
            w.writerow([split, agg["count"], *(f"{agg[c]:.6f}" for c in self.columns)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "aggregates": self.aggregates(), "records": self.records}, indent=1)

    def save(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tsv, js = out_dir / f"{stem}.tsv", out_dir / f"{stem}.json"
        tsv.write_text(self.to_tsv(), encoding="utf-8")
        js.write_text(self.to_json(), encoding="utf-8")
        return tsv, js


def evaluate_split(
    model,
    pairs,
    split: str,
    extractor: Callable | None = None,
    batch_size: int = 64,
) -> MetricsReport:
    """Generate every pair in ``pairs`` and score it against its ground truth.

    ``model`` is a :class:`~vqfont.refinement.VQFont` or any callable mapping a
    :class:`~vqfont.refinement.PairSet` to ``(N, 1, H, W)`` images.
    """
    from .refinement import VQFont, predict_pairs

    if len(pairs) == 0:
        raise ValueError(f"split '{split}' has no pairs")
    missing = [i for i, t in enumerate(pairs.target.tolist()) if t < 0]
    if missing:
        i = missing[0]
        raise MissingGroundTruth(
            f"{len(missing)} pair(s) in '{split}' lack ground truth, e.g. {pairs.font_ids[i]} U+{pairs.codepoints[i]:04X}"
        )
    generated = predict_pairs(model, pairs, batch_size)[0] if isinstance(model, VQFont) else model(pairs)
    truth = pairs.glyphs[pairs.target]
    report = MetricsReport()
    for i in range(len(pairs)):
        rec = {"split": split, "font_id": pairs.font_ids[i], "codepoint": f"{pairs.codepoints[i]:04X}"}
        rec.update(score_pair(generated[i, 0], truth[i, 0], extractor))
        report.records.append(rec)
    return report


def comparison_grid(pairs, generated: torch.Tensor, limit: int = 16, pad: int = 2) -> np.ndarray:
    """Rows of content | references | generated | ground truth, as one image."""
    n = min(limit, len(pairs))
    g = pairs.glyphs
    rows = []
    for i in range(n):
        tiles = [g[pairs.content[i], 0], *(g[r, 0] for r in pairs.refs[i]), generated[i, 0], g[pairs.target[i], 0]]
        rows.append(tiles)
    h = g.shape[-1]
    cols = len(rows[0])
    canvas = np.full((n * (h + pad) + pad, cols * (h + pad) + pad), 0.5, dtype=np.float32)
    for r, tiles in enumerate(rows):
        for c, t in enumerate(tiles):
            y, x = pad + r * (h + pad), pad + c * (h + pad)
            canvas[y : y + h, x : x + h] = t.detach().cpu().numpy()
    return canvas


def save_comparison_grid(path: str | Path, pairs, generated: torch.Tensor, limit: int = 16) -> None:
    img = comparison_grid(pairs, generated, limit)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def noisy(image: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    """``image`` plus clipped Gaussian noise; handy for monotonicity checks."""
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.normal(0, sigma, image.shape), 0, 1)


__all__: Sequence[str] = (
    "l1",
    "rmse",
    "psnr",
    "ssim",
    "lpips",
    "score_pair",
    "MetricsReport",
    "evaluate_split",
    "comparison_grid",
    "save_comparison_grid",
    "PSNR_CAP",
)
