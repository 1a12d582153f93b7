"""Cross-attention style aggregation with structure-level reweighting.

Content tokens query reference tokens. Patch logits are averaged inside
every (content component, reference component) block and the block mean is
added back onto the block's logits before the softmax.

Token order is row-major over the ``h x w`` grid. Reference tokens are the
``k`` reference grids concatenated in input order, and reference component
indices are concatenated the same way. Layouts enter the batched code path
as integer *assignment* vectors: ``content_assign[b, x]`` is the component of
content patch ``x`` and ``ref_assign[b, y]`` the (offset) component of
reference patch ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatch, EmptyReferences, LayoutMismatch, ShapeMismatch
from .structure import ComponentLayout
from .vqgan import Encoder

MAX_COMPONENTS = 3


def tokens(grid: torch.Tensor) -> torch.Tensor:
    """``(B, c, h, w)`` -> ``(B, h*w, c)`` row-major tokens."""
    return grid.flatten(2).transpose(1, 2)


class GlyphEncoder(nn.Module):
    """Content or style encoder producing ``c``-channel patch tokens."""

    def __init__(self, image_size: int, channels: Sequence[int], out_channels: int, res_blocks: int = 1):
        super().__init__()
        self.image_size = image_size
        self.grid = image_size // 2 ** (len(channels) - 1)
        self.net = Encoder(channels, out_channels, res_blocks=res_blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1:] != (1, self.image_size, self.image_size):
            raise ShapeMismatch(f"expected (B, 1, {self.image_size}, {self.image_size}) images, got {tuple(x.shape)}")
        return tokens(self.net(x))


def encode_content(encoder: GlyphEncoder, i_c: torch.Tensor) -> torch.Tensor:
    """Content glyphs ``(B, 1, H, W)`` -> ``f_c`` of shape ``(B, h*w, c)``."""
    return encoder(i_c)


def encode_style(encoder: GlyphEncoder, refs: torch.Tensor) -> torch.Tensor:
    """Reference glyphs ``(B, k, 1, H, W)`` -> ``f_S`` of shape ``(B, k*h*w, c)``."""
    if refs.ndim != 5 or refs.shape[1] == 0:
        raise EmptyReferences(f"expected (B, k>=1, 1, H, W) references, got {tuple(refs.shape)}")
    b, k = refs.shape[:2]
    f = encoder(refs.reshape(b * k, *refs.shape[2:]))
    return f.reshape(b, k * f.shape[1], f.shape[2])


class ProjectionSet(nn.Module):
    """Query/key/value projections split into ``heads`` equal slices."""

    def __init__(self, channels: int, heads: int = 8):
        super().__init__()
        if channels % heads:
            raise DimensionMismatch(f"heads={heads} does not divide channels={channels}")
        self.channels, self.heads = channels, heads
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(channels, channels, bias=False)
        self.w_v = nn.Linear(channels, channels, bias=False)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, n, c)`` -> ``(B, heads, n, c / heads)``."""
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.channels // self.heads).transpose(1, 2)


def _batched(*xs: torch.Tensor) -> tuple[bool, list[torch.Tensor]]:
    squeeze = xs[0].ndim == 2
    return squeeze, [x[None] if squeeze else x for x in xs]


def patch_attention(f_c: torch.Tensor, f_s: torch.Tensor, proj: ProjectionSet) -> torch.Tensor:
    """Raw per-head logits ``(B, heads, h*w, k*h*w)``.

    Each head scales by ``1 / sqrt(c / heads)``.
    """
    squeeze, (f_c, f_s) = _batched(f_c, f_s)
    if f_c.shape[-1] != proj.channels or f_s.shape[-1] != proj.channels:
        raise DimensionMismatch(f"token width must be {proj.channels}, got {f_c.shape[-1]} and {f_s.shape[-1]}")
    q = proj.split(proj.w_q(f_c))
    k = proj.split(proj.w_k(f_s))
    logits = q @ k.transpose(-1, -2) / math.sqrt(proj.channels // proj.heads)
    return logits[0] if squeeze else logits


def layout_assignment(layout: ComponentLayout) -> torch.Tensor:
    """Flattened row-major component index of every patch."""
    return torch.as_tensor(layout.assignment().reshape(-1), dtype=torch.long)


def reference_assignment(layouts: Sequence[ComponentLayout]) -> torch.Tensor:
    """Concatenated assignment over ``k`` references with offset component ids."""
    parts, offset = [], 0
    for lay in layouts:
        parts.append(layout_assignment(lay) + offset)
        offset += len(lay.components)
    return torch.cat(parts)


def padded_reference_assignment(layouts: Sequence[ComponentLayout]) -> torch.Tensor:
    """Like :func:`reference_assignment` but with a fixed stride of three ids per reference.

    The fixed stride lets samples with different component counts share one
    batch; unused ids simply own no patches.
    """
    return torch.cat([layout_assignment(lay) + MAX_COMPONENTS * i for i, lay in enumerate(layouts)])


def _one_hot(assign: torch.Tensor, n: int, dtype: torch.dtype) -> torch.Tensor:
    return F.one_hot(assign, n).to(dtype)


def structure_attention_from_assignment(
    a_patch: torch.Tensor,
    content_assign: torch.Tensor,
    ref_assign: torch.Tensor,
    m: int | None = None,
    n: int | None = None,
) -> torch.Tensor:
    """Block means of ``a_patch`` ``(B, H, X, Y)`` -> ``(B, H, m, n)``.

    Entry ``(i, j)`` is the mean of ``a_patch[x, y]`` over content patches of
    component ``i`` and reference patches of component ``j``; components that
    own no patches get 0.
    """
    squeeze = a_patch.ndim == 3
    if squeeze:
        a_patch, content_assign, ref_assign = a_patch[None], content_assign[None], ref_assign[None]
    if content_assign.shape[-1] != a_patch.shape[-2] or ref_assign.shape[-1] != a_patch.shape[-1]:
        raise LayoutMismatch(
            f"layouts cover {content_assign.shape[-1]}x{ref_assign.shape[-1]} patches, attention is "
            f"{a_patch.shape[-2]}x{a_patch.shape[-1]}"
        )
    m = m or int(content_assign.max()) + 1
    n = n or int(ref_assign.max()) + 1
    mc = _one_hot(content_assign, m, a_patch.dtype)  # (B, X, m)
    mr = _one_hot(ref_assign, n, a_patch.dtype)  # (B, Y, n)
    sums = torch.einsum("bxi,bhxy,byj->bhij", mc, a_patch, mr)
    counts = mc.sum(1)[:, :, None] * mr.sum(1)[:, None, :]  # (B, m, n)
    out = sums / counts.clamp_min(1)[:, None]
    return out[0] if squeeze else out


def reweight_from_assignment(
    a_patch: torch.Tensor, a_stru: torch.Tensor, content_assign: torch.Tensor, ref_assign: torch.Tensor
) -> torch.Tensor:
    """Add each block's structure weight onto every patch logit in the block."""
    squeeze = a_patch.ndim == 3
    if squeeze:
        a_patch, a_stru = a_patch[None], a_stru[None]
        content_assign, ref_assign = content_assign[None], ref_assign[None]
    if content_assign.shape[-1] != a_patch.shape[-2] or ref_assign.shape[-1] != a_patch.shape[-1]:
        raise LayoutMismatch("layouts do not match the attention map")
    b, h, m, n = a_stru.shape
    if int(content_assign.max()) >= m or int(ref_assign.max()) >= n:
        raise LayoutMismatch("layout component ids exceed the structure attention shape")
    rows = content_assign[:, None, :, None].expand(b, h, -1, n)
    per_row = torch.gather(a_stru, 2, rows)  # (B, H, X, n)
    cols = ref_assign[:, None, None, :].expand(b, h, per_row.shape[2], -1)
    out = a_patch + torch.gather(per_row, 3, cols)
    return out[0] if squeeze else out


@dataclass
class StructureAttention:
    weights: torch.Tensor  # (..., m, n)
    content_layout: ComponentLayout
    reference_layouts: tuple[ComponentLayout, ...]


def _check_grid(a_patch: torch.Tensor, content_layout: ComponentLayout, ref_layouts: Sequence[ComponentLayout]):
    hw = content_layout.grid[0] * content_layout.grid[1]
    if any(l.grid != content_layout.grid for l in ref_layouts):
        raise LayoutMismatch("reference layouts use a different grid from the content layout")
    if a_patch.shape[-2] != hw or a_patch.shape[-1] != hw * len(ref_layouts):
        raise LayoutMismatch(
            f"attention {tuple(a_patch.shape[-2:])} does not match {len(ref_layouts)} references on a "
            f"{content_layout.grid} grid"
        )


def structure_attention(
    a_patch: torch.Tensor, content_layout: ComponentLayout, ref_layouts: Sequence[ComponentLayout]
) -> StructureAttention:
    """Component-pair mean attention for a single sample (any leading head dims)."""
    if not ref_layouts:
        raise EmptyReferences("at least one reference layout is required")
    _check_grid(a_patch, content_layout, ref_layouts)
    ca = layout_assignment(content_layout)
    ra = reference_assignment(ref_layouts)
    lead = a_patch.shape[:-2]
    flat = a_patch.reshape(-1, *a_patch.shape[-2:])
    w = structure_attention_from_assignment(
        flat[None], ca[None], ra[None], m=len(content_layout.components), n=sum(len(l.components) for l in ref_layouts)
    )[0]
    return StructureAttention(w.reshape(*lead, *w.shape[-2:]), content_layout, tuple(ref_layouts))


def reweight(a_patch: torch.Tensor, a_stru: StructureAttention | torch.Tensor, layouts=None) -> torch.Tensor:
    """``A_patch`` plus the broadcast structure weight of each patch's block.

    ``layouts`` is ``(content_layout, ref_layouts)``; it may be omitted when
    ``a_stru`` is a :class:`StructureAttention` that carries them.
    """
    if isinstance(a_stru, StructureAttention):
        weights = a_stru.weights
        content_layout, ref_layouts = layouts or (a_stru.content_layout, a_stru.reference_layouts)
    else:
        weights = a_stru
        content_layout, ref_layouts = layouts
    _check_grid(a_patch, content_layout, ref_layouts)
    ca, ra = layout_assignment(content_layout), reference_assignment(ref_layouts)
    lead = a_patch.shape[:-2]
    flat = a_patch.reshape(-1, *a_patch.shape[-2:])
    wflat = weights.reshape(-1, *weights.shape[-2:])
    out = reweight_from_assignment(flat[None], wflat[None], ca[None], ra[None])[0]
    return out.reshape(*lead, *out.shape[-2:])


def aggregate(logits: torch.Tensor, f_s: torch.Tensor, proj: ProjectionSet) -> torch.Tensor:
    """Row softmax over reference tokens, then the weighted sum of value tokens.

    Returns ``(B, h*w, c)`` with per-head outputs concatenated.
    """
    squeeze = f_s.ndim == 2
    if squeeze:
        logits, f_s = logits[None], f_s[None]
    if f_s.shape[-1] != proj.channels or logits.shape[-1] != f_s.shape[1]:
        raise DimensionMismatch("logits, reference tokens and projections disagree on shape")
    v = proj.split(proj.w_v(f_s))  # (B, H, Y, c/H)
    out = torch.softmax(logits, dim=-1) @ v  # (B, H, X, c/H)
    b, h, x, ch = out.shape
    out = out.transpose(1, 2).reshape(b, x, h * ch)
    return out[0] if squeeze else out


class StyleAggregator(nn.Module):
    """Patch cross-attention with optional structure-level enhancement."""

    def __init__(self, channels: int, heads: int, use_ssem: bool = True):
        super().__init__()
        self.proj = ProjectionSet(channels, heads)
        self.use_ssem = use_ssem

    def forward(
        self,
        f_c: torch.Tensor,
        f_s: torch.Tensor,
        content_assign: torch.Tensor | None = None,
        ref_assign: torch.Tensor | None = None,
        return_attention: bool = False,
    ):
        logits = patch_attention(f_c, f_s, self.proj)
        attn = {"patch": logits}
        if self.use_ssem:
            if content_assign is None or ref_assign is None:
                raise LayoutMismatch("structure enhancement needs content and reference layouts")
            n = MAX_COMPONENTS * (f_s.shape[-2] // f_c.shape[-2])
            a_stru = structure_attention_from_assignment(logits, content_assign, ref_assign, m=MAX_COMPONENTS, n=n)
            logits = reweight_from_assignment(logits, a_stru, content_assign, ref_assign)
            attn.update(structure=a_stru, reweight=logits)
        out = aggregate(logits, f_s, self.proj)
        return (out, attn) if return_attention else out
