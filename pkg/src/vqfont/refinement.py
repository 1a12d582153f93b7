"""Stage 2: index prediction over the frozen codebook and generation.

The generator encodes a content glyph and ``k`` reference glyphs, aggregates
reference style with cross-attention and predicts one codebook index per
latent token. At generation time the argmax indices are looked up in the
frozen codebook and decoded. Training runs a main branch (real references)
and a self-reconstruction branch (the target glyph as every reference) with
shared weights. Only the decoder's first ``finetune_decoder_layers`` layers,
counted from the latent side, are trained; the codebook and later decoder
layers stay fixed.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .attention import GlyphEncoder, StyleAggregator, encode_content, encode_style
from .errors import DivergenceDetected, IndexOutOfRange, ShapeMismatch
from .vqgan import VQGAN, Decoder, batches, make_perceptual, perceptual_distance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageTwoLossWeights:
    self_branch: float = 1.0
    main: float = 2.0
    l1: float = 2.0
    adv: float = 0.002
    per: float = 1.0

    @classmethod
    def from_config(cls, f) -> "StageTwoLossWeights":
        return cls(f.lambda_self, f.lambda_main, f.lambda_l1, f.lambda_adv, f.lambda_per)


# --------------------------------------------------------------------------
# transformer
# --------------------------------------------------------------------------


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block; positional embeddings enter keys and queries only."""

    def __init__(self, width: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, width * ffn_mult), nn.GELU(), nn.Linear(width * ffn_mult, width))

    def forward(self, x, pos):
        h = self.norm1(x)
        qk = h + pos
        x = x + self.attn(qk, qk, h, need_weights=False)[0]
        return x + self.ffn(self.norm2(x))


class IndexTransformer(nn.Module):
    """Non-autoregressive token classifier: ``(B, h*w, c)`` -> ``(B, h*w, out_dim)``."""

    def __init__(self, n_tokens: int, width: int, blocks: int, heads: int, ffn_mult: int, out_dim: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.pos = nn.Parameter(torch.zeros(1, n_tokens, width))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads, ffn_mult) for _ in range(blocks))
        self.head = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, width), nn.GELU(), nn.Linear(width, out_dim))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.n_tokens:
            raise ShapeMismatch(f"expected (B, {self.n_tokens}, c) tokens, got {tuple(x.shape)}")
        for blk in self.blocks:
            x = blk(x, self.pos)
        return self.head(x)


def predict_indices(f_cs_star: torch.Tensor, transformer: IndexTransformer) -> torch.Tensor:
    """Per-token codebook logits ``(B, h*w, K)``."""
    return transformer(f_cs_star)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _flat_targets(logits: torch.Tensor, s_g: torch.Tensor) -> torch.Tensor:
    target = s_g.reshape(s_g.shape[0], -1) if s_g.ndim > 1 else s_g[None]
    if logits.ndim == 2:
        logits = logits[None]
    if target.shape != logits.shape[:2]:
        raise ShapeMismatch(f"targets {tuple(target.shape)} do not match logits {tuple(logits.shape)}")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= logits.shape[-1]):
        raise IndexOutOfRange(f"ground-truth index outside [0, {logits.shape[-1] - 1}]")
    return target


def token_cross_entropy(logits: torch.Tensor, s_g: torch.Tensor) -> torch.Tensor:
    target = _flat_targets(logits, s_g)
    logits = logits if logits.ndim == 3 else logits[None]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))


def indices_loss(logits_main: torch.Tensor, logits_self: torch.Tensor, s_g: torch.Tensor):
    """Token-averaged cross-entropy of both branches against ``s_g``."""
    return token_cross_entropy(logits_main, s_g), token_cross_entropy(logits_self, s_g)


def token_accuracy(logits: torch.Tensor, s_g: torch.Tensor) -> float:
    target = _flat_targets(logits, s_g)
    logits = logits if logits.ndim == 3 else logits[None]
    return float((logits.argmax(-1) == target).float().mean())


def d_hinge_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def g_hinge_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


@dataclass
class Stage2Losses:
    main: torch.Tensor
    self_branch: torch.Tensor
    l1: torch.Tensor
    adv: torch.Tensor
    per: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_main": float(self.main.detach()),
            "l_self": float(self.self_branch.detach()),
            "l1": float(self.l1.detach()),
            "adv_g": float(self.adv.detach()),
            "per": float(self.per.detach()),
            "total": float(self.total.detach()),
        }


def combine_stage2(
    main, self_branch, l1, adv, per, weights: StageTwoLossWeights = StageTwoLossWeights()
) -> Stage2Losses:
    total = weights.self_branch * self_branch + weights.main * main + weights.l1 * l1 + weights.adv * adv + weights.per * per
    return Stage2Losses(main, self_branch, l1, adv, per, total)


def stage2_losses(
    i_q: torch.Tensor,
    i_g: torch.Tensor,
    logits_main: torch.Tensor | None,
    logits_self: torch.Tensor | None,
    s_g: torch.Tensor | None,
    d_fake_logits: torch.Tensor | None = None,
    phi: Callable | None = None,
    weights: StageTwoLossWeights = StageTwoLossWeights(),
) -> Stage2Losses:
    """Weighted stage-2 objective.

    ``d_fake_logits`` are the conditional discriminator's outputs on ``i_q``;
    pass ``None`` to drop the adversarial term. ``logits_*`` may be ``None``
    for the no-codebook variant, which has no index targets.
    """
    if i_q.shape != i_g.shape:
        raise ShapeMismatch(f"generated {tuple(i_q.shape)} vs ground truth {tuple(i_g.shape)}")
    zero = i_q.new_zeros(())
    if logits_main is not None:
        main, self_branch = indices_loss(logits_main, logits_self, s_g)
    else:
        main = self_branch = zero
    l1 = (i_g - i_q).abs().mean()
    adv = g_hinge_loss(d_fake_logits) if d_fake_logits is not None else zero
    per = perceptual_distance(phi, i_g, i_q) if phi is not None else zero
    return combine_stage2(main, self_branch, l1, adv, per, weights)


# --------------------------------------------------------------------------
# conditional discriminator
# --------------------------------------------------------------------------


class CodepointLabels:
    """Codepoint -> class id; id 0 is the shared fallback for unknown characters."""

    def __init__(self, codepoints: Iterable[int]):
        self.codepoints = sorted(set(codepoints))
        self._ids = {cp: i + 1 for i, cp in enumerate(self.codepoints)}

    def __len__(self):
        return len(self.codepoints) + 1

    def __call__(self, codepoints: Iterable[int]) -> torch.Tensor:
        return torch.tensor([self._ids.get(cp, 0) for cp in codepoints], dtype=torch.long)


class ProjectionDiscriminator(nn.Module):
    """Conditional discriminator with a per-codepoint projection embedding."""

    def __init__(self, n_classes: int, channels: int = 64, layers: int = 3):
        super().__init__()
        sn = nn.utils.parametrizations.spectral_norm
        mods: list[nn.Module] = []
        in_ch, ch = 1, channels
        for _ in range(layers):
            mods += [sn(nn.Conv2d(in_ch, ch, 4, 2, 1)), nn.LeakyReLU(0.2)]
            in_ch, ch = ch, ch * 2
        self.features = nn.Sequential(*mods)
        self.linear = sn(nn.Linear(in_ch, 1))
        self.embed = sn(nn.Embedding(n_classes, in_ch))

    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        h = self.features(x * 2.0 - 1.0).sum(dim=(2, 3))
        return self.linear(h).squeeze(1) + (self.embed(labels) * h).sum(1)


# --------------------------------------------------------------------------
# the generator
# --------------------------------------------------------------------------


class VQFont(nn.Module):
    """Few-shot generator over a pretrained codebook and decoder.

    With ``use_codebook=False`` the transformer regresses continuous latents
    that feed a decoder trained from scratch (the patch-attention baseline).
    """

    def __init__(
        self,
        vqgan: VQGAN,
        encoder_channels: Sequence[int],
        channels: int = 256,
        attention_heads: int = 8,
        transformer_blocks: int = 15,
        transformer_heads: int = 8,
        ffn_mult: int = 4,
        finetune_decoder_layers: int = 4,
        use_ssem: bool = True,
        use_codebook: bool = True,
    ):
        super().__init__()
        self.image_size = vqgan.image_size
        self.grid = vqgan.latent_size
        self.use_codebook = use_codebook
        self.finetune_decoder_layers = finetune_decoder_layers
        self.content_encoder = GlyphEncoder(self.image_size, encoder_channels, channels)
        self.style_encoder = GlyphEncoder(self.image_size, encoder_channels, channels)
        if self.content_encoder.grid != self.grid:
            raise ShapeMismatch("content/style encoders must produce the VQGAN latent grid")
        self.aggregator = StyleAggregator(channels, attention_heads, use_ssem)
        out_dim = vqgan.codebook.size if use_codebook else vqgan.code_dim
        self.transformer = IndexTransformer(self.grid**2, channels, transformer_blocks, transformer_heads, ffn_mult, out_dim)
        self.codebook = copy.deepcopy(vqgan.codebook)
        if use_codebook:
            self.decoder = copy.deepcopy(vqgan.decoder)
        else:
            self.decoder = Decoder(vqgan.channels, vqgan.code_dim)
        self.apply_freeze()

    @classmethod
    def from_config(cls, vqgan: VQGAN, cfg, **overrides) -> "VQFont":
        f = cfg.vqfont
        kw = dict(
            encoder_channels=f.encoder_channels or cfg.vqgan.channels,
            channels=f.channels,
            attention_heads=f.attention_heads,
            transformer_blocks=f.transformer_blocks,
            transformer_heads=f.transformer_heads,
            ffn_mult=f.ffn_mult,
            finetune_decoder_layers=f.finetune_decoder_layers,
            use_ssem=f.use_ssem,
            use_codebook=f.use_codebook,
        )
        kw.update(overrides)
        return cls(vqgan, **kw)

    # parameter groups -----------------------------------------------------

    def finetuned_decoder_layers(self) -> list[nn.Module]:
        if not self.use_codebook:
            return list(self.decoder.layers)
        return list(self.decoder.layers[: self.finetune_decoder_layers])

    def frozen_decoder_layers(self) -> list[nn.Module]:
        if not self.use_codebook:
            return []
        return list(self.decoder.layers[self.finetune_decoder_layers :])

    def apply_freeze(self) -> None:
        self.codebook.requires_grad_(False)
        for layer in self.frozen_decoder_layers():
            layer.requires_grad_(False)
        for layer in self.finetuned_decoder_layers():
            layer.requires_grad_(True)

    # forward --------------------------------------------------------------

    def aggregate(self, content, refs, content_assign=None, ref_assign=None, return_attention=False):
        f_c = encode_content(self.content_encoder, content)
        f_s = encode_style(self.style_encoder, refs)
        return self.aggregator(f_c, f_s, content_assign, ref_assign, return_attention=return_attention)

    def forward(self, content, refs, content_assign=None, ref_assign=None):
        """Transformer outputs: index logits ``(B, h*w, K)`` or continuous latents."""
        return self.transformer(self.aggregate(content, refs, content_assign, ref_assign))

    def two_branch(self, content, refs, target, content_assign, ref_assign, self_assign):
        """Main-branch and self-reconstruction outputs from one set of weights.

        The self branch replaces all ``k`` reference slots with the target
        glyph. Content is encoded once and both branches share one pass
        through the aggregator and transformer.
        """
        k = refs.shape[1]
        f_c = encode_content(self.content_encoder, content)
        f_s = encode_style(self.style_encoder, refs)
        f_self = encode_style(self.style_encoder, target[:, None]).repeat(1, k, 1)
        f_cs = self.aggregator(
            torch.cat([f_c, f_c]),
            torch.cat([f_s, f_self]),
            None if content_assign is None else torch.cat([content_assign, content_assign]),
            None if ref_assign is None else torch.cat([ref_assign, self_assign]),
        )
        return self.transformer(f_cs).chunk(2)

    def decode_output(self, out: torch.Tensor) -> torch.Tensor:
        b = out.shape[0]
        if self.use_codebook:
            idx = out.argmax(-1).reshape(b, self.grid, self.grid)
            z = self.codebook.lookup(idx)
        else:
            z = out.transpose(1, 2).reshape(b, -1, self.grid, self.grid)
        return self.decoder(z)

    @torch.no_grad()
    def generate(self, content, refs, content_assign=None, ref_assign=None) -> torch.Tensor:
        was = self.training
        self.eval()
        try:
            return self.decode_output(self(content, refs, content_assign, ref_assign))
        finally:
            self.train(was)


def generate(model: VQFont, i_c, refs, content_assign=None, ref_assign=None) -> torch.Tensor:
    return model.generate(i_c, refs, content_assign, ref_assign)


def _max_abs_grad(params: Iterable[nn.Parameter]) -> float:
    out = 0.0
    for p in params:
        if p.grad is not None:
            out = max(out, float(p.grad.detach().abs().max()))
    return out


def gradient_audit(model: VQFont) -> dict[str, float]:
    """Largest absolute gradient per parameter group after a backward pass."""
    return {
        "codebook": _max_abs_grad(model.codebook.parameters()),
        "decoder_frozen": _max_abs_grad(p for l in model.frozen_decoder_layers() for p in l.parameters()),
        "decoder_finetuned": _max_abs_grad(p for l in model.finetuned_decoder_layers() for p in l.parameters()),
        "decoder_finetuned_min_layer": min(
            (_max_abs_grad(l.parameters()) for l in model.finetuned_decoder_layers() if any(True for _ in l.parameters())),
            default=0.0,
        ),
    }


# --------------------------------------------------------------------------
# paired training data
# --------------------------------------------------------------------------


@dataclass
class PairSet:
    """Indexed (content, references, target) training or evaluation pairs.

    Images live once in ``glyphs``; every pair refers to them by row.
    """

    glyphs: torch.Tensor  # (G, 1, H, W)
    content: torch.Tensor  # (N,)
    refs: torch.Tensor  # (N, k)
    target: torch.Tensor  # (N,)
    content_assign: torch.Tensor  # (N, h*w)
    ref_assign: torch.Tensor  # (N, k*h*w)
    self_assign: torch.Tensor  # (N, k*h*w) target layout repeated k times
    labels: torch.Tensor  # (N,)
    font_ids: list[str]
    codepoints: list[int]
    s_g: torch.Tensor | None = None  # (N, h, w)

    def __len__(self):
        return int(self.content.shape[0])

    @property
    def k(self) -> int:
        return int(self.refs.shape[1])

    def subset(self, idx) -> "PairSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        il = idx.tolist()
        return PairSet(
            self.glyphs,
            self.content[idx],
            self.refs[idx],
            self.target[idx],
            self.content_assign[idx],
            self.ref_assign[idx],
            self.self_assign[idx],
            self.labels[idx],
            [self.font_ids[i] for i in il],
            [self.codepoints[i] for i in il],
            pick(self.s_g),
        )

    def to(self, device) -> "PairSet":
        """Copy with every tensor moved to ``device``."""
        mv = lambda t: None if t is None else t.to(device)  # noqa: E731
        return PairSet(
            mv(self.glyphs), mv(self.content), mv(self.refs), mv(self.target), mv(self.content_assign),
            mv(self.ref_assign), mv(self.self_assign), mv(self.labels), self.font_ids, self.codepoints, mv(self.s_g),
        )

    def batch(self, idx):
        g = self.glyphs
        return {
            "content": g[self.content[idx]],
            "refs": g[self.refs[idx]],
            "target": g[self.target[idx]],
            "content_assign": self.content_assign[idx],
            "ref_assign": self.ref_assign[idx],
            "self_assign": self.self_assign[idx],
            "labels": self.labels[idx],
            "s_g": None if self.s_g is None else self.s_g[idx],
        }


def attach_gt_indices(pairs: PairSet, vqgan: VQGAN) -> PairSet:
    from .vqgan import extract_gt_indices

    pairs.s_g = extract_gt_indices(pairs.glyphs[pairs.target], vqgan)
    return pairs


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class Stage2Result:
    model: VQFont
    discriminator: nn.Module
    history: list[dict] = field(default_factory=list)


def train_vqfont(
    pairs: PairSet,
    vqgan: VQGAN | str | Path | None,
    cfg,
    n_classes: int,
    model: VQFont | None = None,
    iterations: int | None = None,
    on_checkpoint: Callable[[int, VQFont, nn.Module], None] | None = None,
    log_every: int = 100,
    device: torch.device | str = "cpu",
    **model_overrides,
) -> Stage2Result:
    """Train the few-shot generator on ``pairs`` against a frozen stage-1 model.

    ``vqgan`` may be a model or the path of a stage-1 checkpoint.
    """
    if vqgan is None or isinstance(vqgan, (str, Path)):
        from .pipeline import load_vqgan

        vqgan = load_vqgan(vqgan)[0]
    f = cfg.vqfont
    iterations = f.iterations if iterations is None else iterations
    if len(pairs) == 0:
        raise ValueError("train_vqfont needs at least one pair")
    torch.manual_seed(cfg.seed)
    vqgan.eval().requires_grad_(False)
    if pairs.s_g is None:
        attach_gt_indices(pairs, vqgan)
    model = (model or VQFont.from_config(vqgan, cfg, **model_overrides)).to(device)
    model.apply_freeze()
    disc = ProjectionDiscriminator(n_classes, f.disc_channels, layers=min(3, cfg.downsamplings)).to(device)
    phi = make_perceptual(cfg.vqgan.perceptual, cfg.vqgan.perceptual_weights).to(device)
    train_pairs = pairs.to(device)
    weights = StageTwoLossWeights.from_config(f)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt_g = torch.optim.Adam(trainable, lr=f.lr, betas=(0.9, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=f.lr, betas=(0.0, 0.99))
    gen = torch.Generator().manual_seed(cfg.seed)
    stream = batches(len(pairs), f.batch_size, gen)
    history: list[dict] = []
    model.train()
    t0 = time.perf_counter()
    for it in range(iterations):
        b = train_pairs.batch(next(stream))
        use_adv = it >= f.disc_start and weights.adv > 0
        if model.use_codebook:
            logits_main, logits_self = model.two_branch(
                b["content"], b["refs"], b["target"], b["content_assign"], b["ref_assign"], b["self_assign"]
            )
            i_q = model.decode_output(logits_main.detach())
        else:
            logits_main = logits_self = None
            i_q = model.decode_output(model(b["content"], b["refs"], b["content_assign"], b["ref_assign"]))
        d_fake = disc(i_q, b["labels"]) if use_adv else None
        losses = stage2_losses(i_q, b["target"], logits_main, logits_self, b["s_g"], d_fake, phi, weights)
        if not torch.isfinite(losses.total):
            raise DivergenceDetected(f"non-finite stage-2 loss at iteration {it}")
        opt_g.zero_grad(set_to_none=True)
        losses.total.backward()
        rec = {"iteration": it, **losses.as_floats(), **{f"grad_{name}": v for name, v in gradient_audit(model).items()}}
        opt_g.step()
        if logits_main is not None:
            rec["token_acc"] = token_accuracy(logits_main.detach(), b["s_g"])
        if use_adv:
            d_loss = d_hinge_loss(disc(b["target"], b["labels"]), disc(i_q.detach(), b["labels"]))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            rec["d_loss"] = float(d_loss.detach())
        rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        if log_every and it % log_every == 0:
            log.info("vqfont it=%d main=%.4f l1=%.4f acc=%.3f", it, rec["l_main"], rec["l1"], rec.get("token_acc", float("nan")))
        if on_checkpoint and f.checkpoint_every and (it + 1) % f.checkpoint_every == 0:
            on_checkpoint(it + 1, model, disc)
    model.eval()
    return Stage2Result(model, disc, history)


@torch.no_grad()
def predict_pairs(model: VQFont, pairs: PairSet, batch_size: int = 64):
    """Generated images ``(N, 1, H, W)`` and, with a codebook, argmax index grids."""
    model.eval()
    images, indices = [], []
    for start in range(0, len(pairs), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(pairs)))
        b = pairs.batch(idx)
        out = model(b["content"], b["refs"], b["content_assign"], b["ref_assign"])
        images.append(model.decode_output(out))
        if model.use_codebook:
            indices.append(out.argmax(-1).reshape(len(idx), model.grid, model.grid))
    return torch.cat(images), (torch.cat(indices) if indices else None)
