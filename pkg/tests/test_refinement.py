import math

import numpy as np
import pytest
import torch

from oracles import cross_entropy_loop
from vqfont.config import validate_config
from vqfont.errors import DivergenceDetected, IndexOutOfRange, MissingCheckpoint, ShapeMismatch
from vqfont.refinement import (
    CodepointLabels,
    IndexTransformer,
    ProjectionDiscriminator,
    StageTwoLossWeights,
    VQFont,
    combine_stage2,
    d_hinge_loss,
    g_hinge_loss,
    generate,
    gradient_audit,
    indices_loss,
    predict_indices,
    predict_pairs,
    stage2_losses,
    token_accuracy,
    train_vqfont,
)
from vqfont.vqgan import VQGAN


def tiny_model(use_ssem=True, use_codebook=True):
    cfg = validate_config({"preset": "tiny"})
    torch.manual_seed(0)
    return VQFont.from_config(VQGAN.from_config(cfg), cfg, use_ssem=use_ssem, use_codebook=use_codebook), cfg


# -- transformer -------------------------------------------------------------------


def test_logits_shape_full_scale():
    t = IndexTransformer(256, 16, 1, 2, 1, 1024)
    assert predict_indices(torch.randn(1, 256, 16), t).shape == (1, 256, 1024)


def test_token_count_checked():
    t = IndexTransformer(64, 16, 1, 2, 1, 8)
    with pytest.raises(ShapeMismatch):
        t(torch.randn(1, 63, 16))


def test_transformer_deterministic_in_eval():
    t = IndexTransformer(16, 8, 2, 2, 2, 5).eval()
    x = torch.randn(2, 16, 8)
    assert torch.equal(t(x), t(x))


def test_positional_embedding_only_in_keys_and_queries():
    torch.manual_seed(0)
    t = IndexTransformer(4, 8, 1, 1, 1, 3)
    blk = t.blocks[0]
    x = torch.randn(1, 4, 8)
    h = blk.norm1(x)
    captured = {}
    orig = blk.attn.forward

    def spy(q, k, v, **kw):
        captured.update(q=q, k=k, v=v)
        return orig(q, k, v, **kw)

    blk.attn.forward = spy
    t(x)
    assert torch.allclose(captured["q"], h + t.pos) and torch.allclose(captured["k"], h + t.pos)
    assert torch.allclose(captured["v"], h)


def test_single_sample_overfit():
    torch.manual_seed(0)
    t = IndexTransformer(16, 32, 2, 4, 2, 16)
    x = torch.randn(1, 16, 32)
    s_g = torch.randint(0, 16, (1, 4, 4))
    opt = torch.optim.Adam(t.parameters(), lr=3e-3)
    for _ in range(150):
        loss = indices_loss(t(x), t(x), s_g)[0]
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert token_accuracy(t(x).detach(), s_g) >= 0.95


# -- index losses ---------------------------------------------------------------------


def test_saturated_logits_give_zero_loss():
    s_g = torch.tensor([[1, 3], [0, 2]])[None]
    logits = torch.full((1, 4, 4), -1e4)
    logits[0, torch.arange(4), s_g.reshape(-1)] = 1e4
    main, self_ = indices_loss(logits, logits, s_g)
    assert float(main) < 1e-6 and float(self_) < 1e-6


def test_uniform_logits_give_log_k():
    main, _ = indices_loss(torch.zeros(2, 6, 4), torch.zeros(2, 6, 4), torch.randint(0, 4, (2, 6)))
    assert abs(float(main) - math.log(4)) < 1e-6


def test_cross_entropy_loop_oracle():
    g = torch.Generator().manual_seed(4)
    logits = torch.randn(3, 9, 7, generator=g)
    s_g = torch.randint(0, 7, (3, 3, 3), generator=g)
    main, _ = indices_loss(logits, logits, s_g)
    assert abs(float(main) - cross_entropy_loop(logits.numpy(), s_g.numpy())) < 1e-6


def test_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        indices_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), torch.tensor([[0, 1, 2, 4]]))
    with pytest.raises(ShapeMismatch):
        indices_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), torch.tensor([[0, 1, 2]]))


# -- stage-2 objective -----------------------------------------------------------------


def test_default_weights():
    w = StageTwoLossWeights()
    assert (w.self_branch, w.main, w.l1, w.adv, w.per) == (1.0, 2.0, 2.0, 0.002, 1.0)
    assert StageTwoLossWeights.from_config(validate_config({}).vqfont) == w


def test_perfect_generation_leaves_adversarial_term():
    img = torch.rand(2, 1, 8, 8)
    s_g = torch.randint(0, 3, (2, 2, 2))
    logits = torch.full((2, 4, 3), -1e4).scatter(2, s_g.reshape(2, 4, 1), 1e4)
    d_fake = torch.tensor([0.3, -0.7])
    out = stage2_losses(img, img.clone(), logits, logits, s_g, d_fake, lambda x: [x])
    assert abs(float(out.total) - 0.002 * float(g_hinge_loss(d_fake))) < 1e-7


def test_stage2_hand_arithmetic():
    i_g = torch.tensor([[[[1.0, 0.0]]]])
    i_q = torch.tensor([[[[0.5, 0.5]]]])
    s_g = torch.tensor([[0]])
    logits_main = torch.tensor([[[0.0, 0.0]]])
    logits_self = torch.tensor([[[math.log(3.0), 0.0]]])
    d_fake = torch.tensor([1.0, 3.0])
    out = stage2_losses(i_q, i_g, logits_main, logits_self, s_g, d_fake, lambda x: [x])
    assert abs(float(out.main) - math.log(2)) < 1e-6
    assert abs(float(out.self_branch) - math.log(4 / 3)) < 1e-6
    assert abs(float(out.l1) - 0.5) < 1e-6
    assert abs(float(out.per) - 0.25) < 1e-6
    assert abs(float(out.adv) + 2.0) < 1e-6
    expected = math.log(4 / 3) + 2 * math.log(2) + 2 * 0.5 + 0.002 * -2.0 + 0.25
    assert abs(float(out.total) - expected) < 1e-6


def test_combine_uses_weights():
    t = lambda v: torch.tensor(v)  # noqa: E731
    w = StageTwoLossWeights(self_branch=3, main=5, l1=7, adv=11, per=13)
    assert float(combine_stage2(t(1.0), t(10.0), t(100.0), t(1000.0), t(10000.0), w).total) == 5 + 30 + 700 + 11000 + 130000


def test_hinge_losses():
    real, fake = torch.tensor([2.0, 0.5, -1.0]), torch.tensor([-3.0, 0.0, 0.5])
    # relu(1 - real) = [0, 0.5, 2] -> 2.5/3 ; relu(1 + fake) = [0, 1, 1.5] -> 2.5/3
    assert abs(float(d_hinge_loss(real, fake)) - 5.0 / 3.0) < 1e-6
    assert abs(float(g_hinge_loss(fake)) - 2.5 / 3.0) < 1e-6


def test_stage2_shape_check():
    with pytest.raises(ShapeMismatch):
        stage2_losses(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8), None, None, None)


def test_codepoint_labels_and_discriminator():
    labels = CodepointLabels([0x597D, 0x4E00])
    assert labels([0x4E00, 0x597D, 0xE000]).tolist() == [1, 2, 0]
    d = ProjectionDiscriminator(len(labels), channels=8, layers=2)
    out = d(torch.rand(3, 1, 16, 16), labels([0x4E00, 0x597D, 0xE000]))
    assert out.shape == (3,) and torch.isfinite(out).all()


# -- the generator ---------------------------------------------------------------------


def test_freeze_groups():
    m, _ = tiny_model()
    assert not m.codebook.embedding.requires_grad
    assert all(not p.requires_grad for l in m.frozen_decoder_layers() for p in l.parameters())
    assert all(p.requires_grad for l in m.finetuned_decoder_layers() for p in l.parameters())
    assert len(m.finetuned_decoder_layers()) == 4
    assert m.finetuned_decoder_layers()[0] is m.decoder.layers[0]


def test_baseline_decoder_is_fresh_and_trainable():
    m, _ = tiny_model(use_ssem=False, use_codebook=False)
    assert all(p.requires_grad for p in m.decoder.parameters())
    assert m.frozen_decoder_layers() == []


def test_branches_share_weights(small_pairs):
    pairs, _ = small_pairs
    m, _ = tiny_model()
    m.eval()
    b = pairs.batch(torch.arange(4))
    k = pairs.k
    own = b["target"][:, None].expand(-1, k, -1, -1, -1)
    main, self_ = m.two_branch(b["content"], own, b["target"], b["content_assign"], b["self_assign"], b["self_assign"])
    assert torch.allclose(main, self_, atol=1e-6)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len({id(p) for p in m.parameters()})


def test_generate_shape_range_determinism(small_pairs):
    pairs, _ = small_pairs
    m, _ = tiny_model()
    b = pairs.batch(torch.arange(3))
    out = generate(m, b["content"], b["refs"], b["content_assign"], b["ref_assign"])
    again = generate(m, b["content"], b["refs"], b["content_assign"], b["ref_assign"])
    assert out.shape == (3, 1, 32, 32) and out.min() >= 0 and out.max() <= 1
    assert torch.equal(out, again)


def test_overfit_five_beats_content_copy(small_pairs, stage1_overfit):
    pairs, labels = small_pairs
    five = pairs.subset(range(5))
    cfg = validate_config({"preset": "tiny", "vqfont": {"batch_size": 5, "disc_start": 10_000}})
    res = train_vqfont(five, stage1_overfit.model, cfg, len(labels), iterations=300, log_every=0)
    images, _ = predict_pairs(res.model, five)
    gt = five.glyphs[five.target]
    l1_gen = (images - gt).abs().flatten(1).mean(1)
    l1_copy = (five.glyphs[five.content] - gt).abs().flatten(1).mean(1)
    assert (l1_gen < l1_copy).all()


def test_training_freeze_audit(small_pairs, stage1_overfit):
    pairs, labels = small_pairs
    cfg = validate_config({"preset": "tiny", "vqfont": {"batch_size": 4, "disc_start": 2}})
    vq = stage1_overfit.model
    res = train_vqfont(pairs, vq, cfg, len(labels), iterations=4, log_every=0)
    for rec in res.history:
        assert rec["grad_codebook"] == 0.0 and rec["grad_decoder_frozen"] == 0.0
        assert rec["grad_decoder_finetuned_min_layer"] > 0.0
    m = res.model
    assert torch.equal(m.codebook.embedding, vq.codebook.embedding)
    for mine, ref in zip(m.frozen_decoder_layers(), list(vq.decoder.layers)[4:]):
        assert all(torch.equal(a, b) for a, b in zip(mine.state_dict().values(), ref.state_dict().values()))
    assert "d_loss" in res.history[-1] and "d_loss" not in res.history[0]
    audit = gradient_audit(m)
    assert set(audit) >= {"codebook", "decoder_frozen", "decoder_finetuned"}


def test_missing_checkpoint(small_pairs, tmp_path, tiny_cfg):
    pairs, labels = small_pairs
    with pytest.raises(MissingCheckpoint):
        train_vqfont(pairs, tmp_path / "absent.pt", tiny_cfg, len(labels), iterations=1)
    with pytest.raises(MissingCheckpoint):
        train_vqfont(pairs, None, tiny_cfg, len(labels), iterations=1)


def test_divergence(small_pairs, stage1_overfit, tiny_cfg):
    pairs, labels = small_pairs
    bad = pairs.subset(range(4))
    bad.glyphs = torch.full_like(bad.glyphs, float("nan"))
    with pytest.raises(DivergenceDetected):
        train_vqfont(bad, stage1_overfit.model, tiny_cfg, len(labels), iterations=2, log_every=0)


def test_full_scale_defaults():
    f = validate_config({}).vqfont
    assert (f.lr, f.batch_size, f.transformer_blocks, f.transformer_heads, f.attention_heads, f.channels) == (
        2e-4, 32, 15, 8, 8, 256,
    )
    assert f.finetune_decoder_layers == 4
