"""Acceptance gate.

One test per criterion, named ``test_criterion_NN_<label>``. The session
summary prints a PASS/FAIL line for each. Criteria 6 to 8 share one stage-1
model and one stage-2 run per variant.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import nearest_scan, partition_cells, reweight_loop, structure_attention_loop, ssim_loop
from vqfont.attention import ProjectionSet, aggregate, patch_attention, reweight, structure_attention
from vqfont.config import validate_config
from vqfont.glyphs import assign_references
from vqfont.metrics import PSNR_CAP, l1, psnr, rmse, ssim
from vqfont.pipeline import build_pairs, image_tensor, lookup_from_sources
from vqfont.refinement import CodepointLabels, StageTwoLossWeights, attach_gt_indices, predict_pairs, stage2_losses, train_vqfont
from vqfont.structure import StructureCategory, decompose
from vqfont.synth import make_fonts
from vqfont.vqgan import VQGAN, nearest_indices, reconstruct, train_vqgan, vqgan_losses

CATEGORIES = list(StructureCategory)
STAGE1_ITERATIONS = 1000
STAGE2_ITERATIONS = 3000
N_FONTS, N_CHARS, POOL = 5, 100, 30


def _flat(layout, offset=0):
    w = layout.grid[1]
    return [{r * w + c + offset for r, c in comp} for comp in layout.components]


# -- 1 ------------------------------------------------------------------------------


def test_criterion_01_quantization_oracle():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    cb = torch.randn(32, 8, generator=g)
    cb[17] = cb[3]  # duplicate entry: ties must go to 3
    z = torch.randn(1000, 8, generator=g)
    z[:50] = cb[3] + 1e-3 * torch.randn(50, 8, generator=g)
    got = nearest_indices(z, cb).numpy()
    want = nearest_scan(z.numpy(), cb.numpy())
    assert np.array_equal(got, want)
    assert not (got == 17).any()
    assert time.perf_counter() - t0 < 10


# -- 2 ------------------------------------------------------------------------------


def test_criterion_02_straight_through_gradient():
    t0 = time.perf_counter()
    cfg = validate_config({"preset": "tiny"})
    torch.manual_seed(0)
    m = VQGAN.from_config(cfg)
    zc = m.encode(torch.rand(2, 1, 32, 32))
    zc.retain_grad()
    zq, _, _ = m.quantize(zc)
    zq.retain_grad()
    (m.decode(zq) * torch.randn(2, 1, 32, 32)).sum().backward()
    assert torch.equal(zc.grad, zq.grad)
    assert time.perf_counter() - t0 < 30


# -- 3 ------------------------------------------------------------------------------


def test_criterion_03_ssem_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    seen = set()
    for i in range(100):
        k = 1 + i % 3
        cats = [CATEGORIES[(i + j * 5) % 12] for j in range(k + 1)]
        seen.update(cats)
        grid = (4, 8, 16)[i % 3]
        cl = decompose(1, cats[0], (grid, grid))
        rls = [decompose(2 + j, c, (grid, grid)) for j, c in enumerate(cats[1:])]
        hw = grid * grid
        a = torch.from_numpy(rng.normal(size=(hw, k * hw)))
        cs = _flat(cl)
        rs = [s for j, rl in enumerate(rls) for s in _flat(rl, j * hw)]
        sa = structure_attention(a, cl, rls)
        want = structure_attention_loop(a.numpy(), cs, rs)
        assert np.abs(sa.weights.numpy() - want).max() < 1e-6
        assert np.abs(reweight(a, sa).numpy() - reweight_loop(a.numpy(), want, cs, rs)).max() < 1e-6
    assert seen == set(CATEGORIES)

    torch.manual_seed(0)
    proj = ProjectionSet(16, 4)
    f_c, f_s = torch.randn(16, 16), torch.randn(32, 16)
    cl = decompose(1, "left-right", (4, 4))
    rls = [decompose(2, "top-bottom", (4, 4)), decompose(3, "fully-encompassed", (4, 4))]
    a = patch_attention(f_c, f_s, proj)
    zero = torch.zeros(a.shape[0], len(cl.components), sum(len(r.components) for r in rls))
    assert torch.equal(aggregate(reweight(a, zero, (cl, rls)), f_s, proj), aggregate(a, f_s, proj))
    assert time.perf_counter() - t0 < 60


# -- 4 ------------------------------------------------------------------------------


def test_criterion_04_loss_arithmetic():
    phi = lambda x: [x]  # noqa: E731
    # stage 1
    i_f, i_r = torch.tensor([[[[1.0, 0.0]]]]), torch.tensor([[[[0.5, 0.5]]]])
    zc, zq = torch.tensor([[[[1.0]], [[2.0]]]]), torch.tensor([[[[0.0]], [[4.0]]]])
    b = vqgan_losses(i_f, i_r, zc, zq, lambda x: torch.zeros(1, 1, 1, 1), phi)
    terms = {"l1": 0.5, "perceptual": 0.25, "adversarial": math.log(2), "codebook": 2.5, "commitment": 2.5}
    for name, want in terms.items():
        assert abs(float(getattr(b, name)) - want) < 1e-6, name
    assert abs(float(b.total) - (0.5 + 0.25 + 0.8 * math.log(2) + 2.5 + 0.5 * 2.5)) < 1e-6
    # stage 2
    s = stage2_losses(
        i_r, i_f, torch.tensor([[[0.0, 0.0]]]), torch.tensor([[[math.log(3.0), 0.0]]]), torch.tensor([[0]]),
        torch.tensor([1.0, 3.0]), phi,
    )
    terms = {"main": math.log(2), "self_branch": math.log(4 / 3), "l1": 0.5, "per": 0.25, "adv": -2.0}
    for name, want in terms.items():
        assert abs(float(getattr(s, name)) - want) < 1e-6, name
    total = math.log(4 / 3) + 2 * math.log(2) + 2 * 0.5 + 0.002 * -2.0 + 0.25
    assert abs(float(s.total) - total) < 1e-6
    # defaults read back from an empty config
    cfg = validate_config({})
    assert (cfg.vqgan.lambda_comm, cfg.vqgan.lambda_adv) == (0.5, 0.8)
    w = StageTwoLossWeights.from_config(cfg.vqfont)
    assert (w.main, w.l1, w.self_branch, w.per, w.adv) == (2.0, 2.0, 1.0, 1.0, 0.002)


# -- 5 ------------------------------------------------------------------------------


def test_criterion_05_vqgan_overfit(overfit_glyphs):
    assert overfit_glyphs.shape[0] == 50
    iterations = 1000
    cfg = validate_config({"preset": "tiny", "seed": 5})
    t0 = time.perf_counter()
    res = train_vqgan(overfit_glyphs, cfg, iterations=iterations, log_every=0)
    elapsed = time.perf_counter() - t0
    err = float((reconstruct(res.model, overfit_glyphs) - overfit_glyphs).abs().mean())
    print(f"stage-1 overfit: {iterations} iterations, L1 {err:.4f}, {elapsed:.0f} s")
    assert iterations <= 2000 and err < 0.05 and elapsed < 15 * 60


# -- 6, 7, 8 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation(table):
    """Stage 1 on the setup's glyphs, then a lazily trained stage-2 run per variant."""
    fonts = make_fonts(N_FONTS, table, seed=0)
    cps = sorted(table)
    perm = np.random.default_rng(0).permutation(cps)
    targets = sorted(int(c) for c in perm[:N_CHARS])
    pool = sorted(int(c) for c in perm[N_CHARS : N_CHARS + POOL])
    look = lookup_from_sources({f.font_id: f for f in fonts}, 32)
    styled = [f.font_id for f in fonts[1:]]
    cfg = validate_config({"preset": "tiny"})
    x = image_tensor(look, [(f.font_id, c) for f in fonts for c in targets + pool])
    vq = train_vqgan(x, cfg, iterations=STAGE1_ITERATIONS, log_every=0).model
    labels = CodepointLabels(targets)
    refs = assign_references(targets, pool, table, cfg.data.refs_per_char)
    pairs = attach_gt_indices(build_pairs(look, styled, targets, refs, table, "content", 8, labels), vq)
    assert len(pairs) == N_FONTS * N_CHARS
    runs = {}

    def run(name):
        if name not in runs:
            variant = {"full": {}, "no_ssem": {"use_ssem": False}, "baseline": {"use_ssem": False, "use_codebook": False}}[name]
            t0 = time.perf_counter()
            res = train_vqfont(pairs, vq, cfg, len(labels), iterations=STAGE2_ITERATIONS, log_every=0, **variant)
            elapsed = time.perf_counter() - t0
            images, idx = predict_pairs(res.model, pairs)
            gt = pairs.glyphs[pairs.target]
            per_pair = (images - gt).abs().flatten(1).mean(1)
            copy = (pairs.glyphs[pairs.content] - gt).abs().flatten(1).mean(1)
            runs[name] = {
                "result": res,
                "elapsed": elapsed,
                "l1": float(per_pair.mean()),
                "beats_copy": float((per_pair < copy).float().mean()),
                "token_acc": None if idx is None else float((idx == pairs.s_g).float().mean()),
            }
            r = runs[name]
            print(f"{name}: l1 {r['l1']:.4f} beats-copy {r['beats_copy']:.3f} token-acc {r['token_acc']} {elapsed:.0f} s")
        return runs[name]

    return run


def test_criterion_06_index_prediction_overfit(ablation):
    r = ablation("full")
    assert r["token_acc"] >= 0.80, f"token accuracy {r['token_acc']:.3f}"
    assert r["beats_copy"] >= 0.90, f"beats copy-content on {r['beats_copy']:.3f}"
    assert r["elapsed"] < 45 * 60


def test_criterion_07_ablation_direction(ablation):
    full, no_ssem, base = (ablation(n)["l1"] for n in ("full", "no_ssem", "baseline"))
    assert full <= no_ssem <= base, f"full {full:.4f} no-ssem {no_ssem:.4f} baseline {base:.4f}"
    assert full < no_ssem and full < base


def test_criterion_08_freeze_audit(ablation):
    history = ablation("full")["result"].history
    assert len(history) == STAGE2_ITERATIONS
    for rec in history:
        assert rec["grad_codebook"] == 0.0
        assert rec["grad_decoder_frozen"] == 0.0
        assert rec["grad_decoder_finetuned_min_layer"] > 0.0


# -- 9 ------------------------------------------------------------------------------


def test_criterion_09_metric_sanity():
    a = np.random.default_rng(9).random((32, 32))
    assert (l1(a, a), rmse(a, a), psnr(a, a)) == (0.0, 0.0, PSNR_CAP)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)) - 6.0206) < 1e-3
    r, c = np.indices((32, 32))
    board = (((r // 4) + (c // 4)) % 2).astype(float)
    other = np.roll(board, 2, axis=0) * 0.8 + 0.1
    assert abs(ssim(board, other) - ssim_loop(board, other)) < 1e-4
    assert abs(ssim(a, board) - ssim_loop(a, board)) < 1e-4


# -- 10 -----------------------------------------------------------------------------


@pytest.mark.parametrize("grid", [16, 8])
def test_criterion_10_structure_partition(grid):
    everything = {(r, c) for r in range(grid) for c in range(grid)}
    for cat in CATEGORIES:
        comps = [set(map(tuple, comp)) for comp in decompose(0, cat, (grid, grid)).components]
        assert sum(len(x) for x in comps) == grid * grid
        assert set().union(*comps) == everything
        assert comps == partition_cells(cat.value, grid, grid)
    if grid == 16:
        assert [len(x) for x in decompose(0, "left-right", (16, 16)).components] == [128, 128]
