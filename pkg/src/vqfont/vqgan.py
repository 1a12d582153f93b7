"""Stage-1 glyph VQGAN: encoder, codebook, decoder, discriminator and training.

Feature grids are ``(B, d, h, w)`` tensors; images are ``(B, 1, H, W)`` in
``[0, 1]`` with ink at 0. The encoder maps ``[0, 1]`` to ``[-1, 1]``
internally and the decoder squashes its output with a sigmoid.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatch, DivergenceDetected, ShapeMismatch

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=math.gcd(8, ch), num_channels=ch, eps=1e-6)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        out_ch = out_ch or in_ch
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class OutputHead(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm = _norm(in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.silu(self.norm(x)))


class Encoder(nn.Module):
    """Residual conv stack with ``len(channels) - 1`` stride-2 downsamplings."""

    def __init__(self, channels: Sequence[int], out_dim: int, in_ch: int = 1, res_blocks: int = 1):
        super().__init__()
        self.downsamplings = len(channels) - 1
        layers: list[nn.Module] = [nn.Conv2d(in_ch, channels[0], 3, padding=1)]
        for i in range(self.downsamplings):
            layers.append(ResBlock(channels[i], channels[i + 1]))
            layers += [ResBlock(channels[i + 1]) for _ in range(res_blocks - 1)]
            layers.append(Downsample(channels[i + 1]))
        layers += [ResBlock(channels[-1]) for _ in range(res_blocks)]
        layers.append(OutputHead(channels[-1], out_dim))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x * 2.0 - 1.0)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; ``layers[0]`` sits next to the codebook."""

    def __init__(self, channels: Sequence[int], in_dim: int, out_ch: int = 1, res_blocks: int = 1):
        super().__init__()
        ch = list(reversed(channels))
        layers: list[nn.Module] = [nn.Conv2d(in_dim, ch[0], 3, padding=1)]
        layers += [ResBlock(ch[0]) for _ in range(res_blocks)]
        for i in range(len(ch) - 1):
            layers.append(Upsample(ch[i]))
            layers.append(ResBlock(ch[i], ch[i + 1]))
            layers += [ResBlock(ch[i + 1]) for _ in range(res_blocks - 1)]
        layers.append(OutputHead(ch[-1], out_ch))
        self.layers = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.layers(z))


# --------------------------------------------------------------------------
# quantisation
# --------------------------------------------------------------------------


def nearest_indices(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the closest codebook row (Euclidean) for every row of ``z``.

    Distances are evaluated in float64 so rounding cannot reorder candidates
    that differ by more than ~1e-12; exact ties resolve to the lowest index.
    """
    if z.shape[-1] != codebook.shape[-1]:
        raise DimensionMismatch(f"feature depth {z.shape[-1]} != codebook dimension {codebook.shape[-1]}")
    with torch.no_grad():
        z64 = z.reshape(-1, z.shape[-1]).double()
        c64 = codebook.double()
        d = (z64 * z64).sum(1, keepdim=True) - 2.0 * z64 @ c64.T + (c64 * c64).sum(1)[None, :]
        return d.argmin(dim=1).reshape(z.shape[:-1])


def straight_through(zc: torch.Tensor, zq: torch.Tensor) -> torch.Tensor:
    """Forward value ``zq``; backward passes the gradient to ``zc`` unchanged."""
    return zc + (zq - zc).detach()


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int):
        super().__init__()
        if size < 1:
            raise ValueError("codebook needs at least one entry")
        self.size, self.dim = size, dim
        self.embedding = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))

    @property
    def entries(self) -> torch.Tensor:
        return self.embedding

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """``(B, h, w)`` indices -> ``(B, d, h, w)`` code vectors."""
        return F.embedding(indices, self.embedding).permute(0, 3, 1, 2).contiguous()

    def forward(self, zc: torch.Tensor):
        """Quantise a ``(B, d, h, w)`` grid.

        Returns ``(zq_st, zq, indices)``: the straight-through tensor fed to
        the decoder, the raw selected entries (which carry the codebook
        gradient) and the ``(B, h, w)`` index grid.
        """
        if zc.shape[1] != self.dim:
            raise DimensionMismatch(f"feature depth {zc.shape[1]} != codebook dimension {self.dim}")
        idx = nearest_indices(zc.permute(0, 2, 3, 1), self.embedding)
        zq = self.lookup(idx)
        return straight_through(zc, zq), zq, idx


def quantize(zc, codebook):
    """Functional quantiser on channel-last arrays.

    ``zc`` has shape ``(..., d)`` and ``codebook`` ``(K, d)``; returns the
    quantised array and the index array of shape ``zc.shape[:-1]``. NumPy
    inputs give NumPy outputs.
    """
    as_numpy = isinstance(zc, np.ndarray)
    z = torch.as_tensor(zc)
    c = torch.as_tensor(codebook, dtype=z.dtype)
    if c.ndim != 2 or c.shape[0] < 1:
        raise DimensionMismatch("codebook must be a non-empty (K, d) matrix")
    idx = nearest_indices(z, c)
    zq = c[idx]
    if as_numpy:
        return zq.numpy(), idx.numpy()
    return zq, idx


# --------------------------------------------------------------------------
# the autoencoder
# --------------------------------------------------------------------------


class VQGAN(nn.Module):
    def __init__(
        self,
        image_size: int,
        channels: Sequence[int],
        codebook_size: int,
        code_dim: int,
        res_blocks: int = 1,
    ):
        super().__init__()
        self.image_size = image_size
        self.latent_size = image_size // 2 ** (len(channels) - 1)
        self.code_dim = code_dim
        self.channels = list(channels)
        self.encoder = Encoder(channels, code_dim, res_blocks=res_blocks)
        self.codebook = Codebook(codebook_size, code_dim)
        self.decoder = Decoder(channels, code_dim, res_blocks=res_blocks)

    @classmethod
    def from_config(cls, cfg) -> "VQGAN":
        q = cfg.vqgan
        return cls(cfg.data.image_size, q.channels, q.codebook_size, q.code_dim, q.res_blocks)

    def _check_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeMismatch(f"expected (B, 1, {self.image_size}, {self.image_size}) images, got {tuple(x.shape)}")
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(self._check_image(x))

    def quantize(self, zc: torch.Tensor):
        return self.codebook(zc)

    def decode(self, zq: torch.Tensor) -> torch.Tensor:
        n = self.latent_size
        if zq.ndim != 4 or zq.shape[1:] != (self.code_dim, n, n):
            raise ShapeMismatch(f"expected (B, {self.code_dim}, {n}, {n}) features, got {tuple(zq.shape)}")
        return self.decoder(zq)

    def decode_indices(self, indices: torch.Tensor) -> torch.Tensor:
        return self.decode(self.codebook.lookup(indices))

    def forward(self, x: torch.Tensor):
        zc = self.encode(x)
        zq_st, zq, idx = self.quantize(zc)
        return self.decode(zq_st), zc, zq, idx

    @torch.no_grad()
    def indices(self, x: torch.Tensor) -> torch.Tensor:
        return self.quantize(self.encode(x))[2]


@torch.no_grad()
def extract_gt_indices(images: torch.Tensor, vqgan: VQGAN, batch_size: int = 256) -> torch.Tensor:
    """Ground-truth index grids ``(B, h, w)`` from a frozen VQGAN."""
    was_training = vqgan.training
    vqgan.eval()
    try:
        x = vqgan._check_image(torch.as_tensor(images, dtype=torch.float32))
        return torch.cat([vqgan.indices(chunk) for chunk in x.split(batch_size)])
    finally:
        vqgan.train(was_training)


def codebook_usage(indices: torch.Tensor, size: int) -> np.ndarray:
    """Histogram of codebook entry usage."""
    return np.bincount(torch.as_tensor(indices).reshape(-1).cpu().numpy(), minlength=size)


# --------------------------------------------------------------------------
# discriminator and perceptual features
# --------------------------------------------------------------------------


class PatchDiscriminator(nn.Module):
    """PatchGAN-style real/fake discriminator returning a logit map."""

    def __init__(self, channels: int = 64, layers: int = 3, in_ch: int = 1):
        super().__init__()
        mods: list[nn.Module] = [nn.Conv2d(in_ch, channels, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = channels
        for _ in range(1, layers):
            mods += [nn.Conv2d(ch, ch * 2, 4, 2, 1), _norm(ch * 2), nn.LeakyReLU(0.2)]
            ch *= 2
        mods.append(nn.Conv2d(ch, 1, 3, 1, 1))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


class RandomConvFeatures(nn.Module):
    """Frozen, fixed-seed random conv stack used as the default feature extractor.

    It needs no downloaded weights, so tests and CPU runs are self-contained.
    Use :class:`VGG16Features` for the pretrained extractor.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList()
        in_ch = 1
        for w in widths:
            conv = nn.Conv2d(in_ch, w, 3, padding=1)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            self.blocks.append(conv)
            in_ch = w
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        h = x * 2.0 - 1.0
        for i, conv in enumerate(self.blocks):
            h = F.relu(conv(h))
            feats.append(h)
            if i < len(self.blocks) - 1:
                h = F.avg_pool2d(h, 2)
        return feats


class VGG16Features(nn.Module):
    """Intermediate VGG16 activations (relu1_2, relu2_2, relu3_3, relu4_3)."""

    CUTS = (4, 9, 16, 23)

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from .errors import ExtractorUnavailable

        try:
            import torchvision

            if weights_path:
                net = torchvision.models.vgg16()
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                net = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # missing torchvision, no network, bad file
            raise ExtractorUnavailable(f"pretrained VGG16 weights unavailable: {exc}") from exc
        self.features = net.features[: self.CUTS[-1] + 1]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x) -> list[torch.Tensor]:
        h = (x.expand(-1, 3, -1, -1) - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.CUTS:
                feats.append(h)
        return feats


def make_perceptual(kind: str = "random", weights_path: str | None = None) -> nn.Module:
    if kind == "random":
        return RandomConvFeatures()
    if kind == "vgg16":
        return VGG16Features(weights_path)
    raise ValueError(f"unknown perceptual extractor {kind!r}")


def perceptual_distance(extractor: Callable, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared feature distance, averaged per layer and summed over layers."""
    total = a.new_zeros(())
    for fa, fb in zip(extractor(a), extractor(b)):
        total = total + ((fa - fb) ** 2).mean()
    return total


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


@dataclass
class VqganLossBundle:
    l1: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    total: torch.Tensor
    lambda_adv: float = 0.8
    lambda_comm: float = 0.5

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "perceptual", "adversarial", "codebook", "commitment", "total")}


def codebook_loss(zc: torch.Tensor, zq: torch.Tensor) -> torch.Tensor:
    """``||sg(zc) - zq||^2`` (mean over elements); moves codebook entries."""
    return ((zc.detach() - zq) ** 2).mean()


def commitment_loss(zc: torch.Tensor, zq: torch.Tensor) -> torch.Tensor:
    """``||zc - sg(zq)||^2`` (mean over elements); moves the encoder."""
    return ((zc - zq.detach()) ** 2).mean()


def generator_adversarial_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """``-log D(I_r)`` with ``D = sigmoid(logits)``, averaged over patches."""
    return F.softplus(-fake_logits).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def vqgan_losses(
    i_f: torch.Tensor,
    i_r: torch.Tensor,
    zc: torch.Tensor,
    zq: torch.Tensor,
    discriminator: Callable | None = None,
    perceptual_extractor: Callable | None = None,
    lambda_adv: float = 0.8,
    lambda_comm: float = 0.5,
) -> VqganLossBundle:
    """Self-reconstruction losses.

    ``zq`` must be the raw codebook selection (not the straight-through
    tensor) so the codebook term reaches the codebook.
    """
    if i_f.shape != i_r.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(i_f.shape)} vs {tuple(i_r.shape)}")
    if zc.shape != zq.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(zc.shape)} vs {tuple(zq.shape)}")
    zero = i_r.new_zeros(())
    l1 = (i_f - i_r).abs().mean()
    per = perceptual_distance(perceptual_extractor, i_f, i_r) if perceptual_extractor is not None else zero
    adv = generator_adversarial_loss(discriminator(i_r)) if discriminator is not None else zero
    code = codebook_loss(zc, zq)
    comm = commitment_loss(zc, zq)
    total = l1 + per + lambda_adv * adv + code + lambda_comm * comm
    return VqganLossBundle(l1, per, adv, code, comm, total, lambda_adv, lambda_comm)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: nn.Module
    discriminator: nn.Module
    history: list[dict] = field(default_factory=list)


def batches(n: int, batch_size: int, generator: torch.Generator) -> Iterable[torch.Tensor]:
    """Endless stream of shuffled index batches (epoch-wise without replacement)."""
    while True:
        perm = torch.randperm(n, generator=generator)
        for i in range(0, n, batch_size):
            yield perm[i : i + batch_size]


def _finite_or_raise(value: torch.Tensor, it: int) -> None:
    if not torch.isfinite(value):
        raise DivergenceDetected(f"non-finite loss at iteration {it}")


def train_vqgan(
    images: torch.Tensor,
    cfg,
    model: VQGAN | None = None,
    iterations: int | None = None,
    on_checkpoint: Callable[[int, VQGAN, nn.Module], None] | None = None,
    log_every: int = 100,
    device: torch.device | str = "cpu",
) -> TrainResult:
    """Alternating generator/discriminator training on ``(N, 1, H, W)`` glyphs.

    The codebook is learnt by gradient descent on the codebook loss (no EMA).
    """
    images = torch.as_tensor(images, dtype=torch.float32).to(device)
    if images.ndim == 3:
        images = images[:, None]
    if images.shape[0] == 0:
        raise ValueError("train_vqgan needs a non-empty dataset")
    q = cfg.vqgan
    iterations = q.iterations if iterations is None else iterations
    torch.manual_seed(cfg.seed)
    model = (model or VQGAN.from_config(cfg)).to(device)
    disc = PatchDiscriminator(q.disc_channels, layers=min(3, cfg.downsamplings)).to(device)
    phi = make_perceptual(q.perceptual, q.perceptual_weights).to(device)
    opt_g = torch.optim.Adam(model.parameters(), lr=q.lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=q.lr, betas=(0.5, 0.9))
    gen = torch.Generator().manual_seed(cfg.seed)
    stream = batches(images.shape[0], q.batch_size, gen)
    history: list[dict] = []
    model.train()
    t0 = time.perf_counter()
    for it in range(iterations):
        x = images[next(stream)]
        use_adv = it >= q.disc_start
        x_r, zc, zq, _ = model(x)
        bundle = vqgan_losses(
            x, x_r, zc, zq, disc if use_adv else None, phi, lambda_adv=q.lambda_adv, lambda_comm=q.lambda_comm
        )
        _finite_or_raise(bundle.total, it)
        opt_g.zero_grad(set_to_none=True)
        bundle.total.backward()
        opt_g.step()
        rec = {"iteration": it, **bundle.as_floats()}
        if use_adv:
            d_loss = discriminator_loss(disc(x), disc(x_r.detach()))
            _finite_or_raise(d_loss, it)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            rec["discriminator"] = float(d_loss)
        rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        if log_every and it % log_every == 0:
            log.info("vqgan it=%d l1=%.4f total=%.4f", it, rec["l1"], rec["total"])
        if on_checkpoint and q.checkpoint_every and (it + 1) % q.checkpoint_every == 0:
            on_checkpoint(it + 1, model, disc)
    model.eval()
    return TrainResult(model, disc, history)


@torch.no_grad()
def reconstruct(model: VQGAN, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    x = model._check_image(torch.as_tensor(images, dtype=torch.float32))
    return torch.cat([model(chunk)[0] for chunk in x.split(batch_size)])
