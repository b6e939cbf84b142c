import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mona_lab.nets import (EmbeddingBatch, SegModel, StudentTeacherPair,
                           l2_normalize, make_windows)

from _gradcheck import central_difference_check


def tiny_model(seed=0, dtype=torch.float64, num_classes=3, width=2, m_embed=8):
    torch.manual_seed(seed)
    return SegModel(num_classes=num_classes, base_width=width,
                    m_embed=m_embed).to(dtype)


class TestForward:
    def test_shapes(self):
        model = tiny_model()
        x = torch.rand(12, 12, dtype=torch.float64)
        logits, feats, gf = model(x)
        assert logits.shape == (1, 3, 12, 12)
        assert gf.shape == (1, 8)  # 4 * base_width
        assert [f.shape[-1] for f in feats] == [12, 6, 3]

    def test_batched_input(self):
        model = tiny_model()
        logits, _, gf = model(torch.rand(4, 12, 12, dtype=torch.float64))
        assert logits.shape == (4, 3, 12, 12) and gf.shape == (4, 8)

    def test_zero_head_gives_uniform_softmax(self):
        model = tiny_model()
        with torch.no_grad():
            model.backbone.head.weight.zero_()
            model.backbone.head.bias.zero_()
        logits, _, _ = model(torch.rand(8, 8, dtype=torch.float64))
        probs = F.softmax(logits, dim=1)
        assert torch.allclose(probs, torch.full_like(probs, 1 / 3), atol=1e-12)

    def test_deterministic_construction_and_forward(self):
        a, b = tiny_model(seed=3), tiny_model(seed=3)
        x = torch.rand(8, 8, dtype=torch.float64)
        assert torch.equal(a(x)[0], b(x)[0])


class TestHeads:
    def test_global_embed_unit_norm(self):
        model = tiny_model()
        _, _, gf = model(torch.rand(3, 8, 8, dtype=torch.float64))
        emb = model.global_embed(gf, use_predictor=True)
        norms = emb.vectors.norm(dim=-1)
        assert torch.allclose(norms, torch.ones(3, dtype=torch.float64), atol=1e-6)
        assert emb.scope == "global" and emb.source == "student_aug"

    def test_predictor_changes_embedding(self):
        model = tiny_model()
        _, _, gf = model(torch.rand(8, 8, dtype=torch.float64))
        with_p = model.global_embed(gf, use_predictor=True).vectors
        without = model.global_embed(gf, use_predictor=False).vectors
        assert not torch.allclose(with_p, without)

    def test_representation_head_unit_norm_per_pixel(self):
        model = tiny_model()
        _, feats, _ = model(torch.rand(2, 12, 12, dtype=torch.float64))
        rep = model.representation_head(feats)
        assert rep.shape == (2, 8, 12, 12)
        norms = rep.norm(dim=1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)

    def test_local_project_shape_and_norm(self):
        model = tiny_model()
        _, feats, _ = model(torch.rand(16, 16, dtype=torch.float64))
        rep = model.representation_head(feats)
        windows = [(0, 0, 4, 4), (8, 8, 4, 4), (12, 0, 4, 4)]
        emb = model.local_project(rep, windows, use_predictor=True)
        assert emb.vectors.shape == (3, 8)
        assert torch.allclose(emb.vectors.norm(dim=-1),
                              torch.ones(3, dtype=torch.float64), atol=1e-6)

    def test_local_project_window_out_of_bounds(self):
        model = tiny_model()
        _, feats, _ = model(torch.rand(8, 8, dtype=torch.float64))
        rep = model.representation_head(feats)
        with pytest.raises(ValueError, match="window"):
            model.local_project(rep, [(6, 6, 4, 4)], use_predictor=False)

    def test_embedding_batch_tags_validated(self):
        v = torch.zeros(1, 4)
        with pytest.raises(AssertionError):
            EmbeddingBatch(v, "global", "nonsense")

    def test_l2_normalize(self):
        v = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        np.testing.assert_allclose(l2_normalize(v).numpy(), [[0.6, 0.8]], atol=1e-7)


class TestEMA:
    def test_scalar_update_example(self):
        # xi = 0.5, theta = 1.5, t = 0.99  ->  0.99*0.5 + 0.01*1.5 = 0.51
        pair = StudentTeacherPair(tiny_model(), momentum=0.99)
        with torch.no_grad():
            for p in pair.student.parameters():
                p.fill_(1.5)
            for p in pair.teacher.parameters():
                p.fill_(0.5)
        pair.ema_update()
        for p in pair.teacher.parameters():
            assert torch.allclose(p, torch.full_like(p, 0.51), atol=1e-12)

    def test_momentum_zero_copies_student(self):
        pair = StudentTeacherPair(tiny_model(seed=1), momentum=0.0)
        with torch.no_grad():
            for p in pair.student.parameters():
                p.add_(0.3)
        pair.ema_update()
        for ps, pt in zip(pair.student.parameters(), pair.teacher.parameters()):
            assert torch.equal(ps, pt)

    def test_fixed_point_when_equal(self):
        pair = StudentTeacherPair(tiny_model(seed=2), momentum=0.99)
        before = [p.clone() for p in pair.teacher.parameters()]
        pair.ema_update()
        for b, p in zip(before, pair.teacher.parameters()):
            assert torch.allclose(b, p, atol=1e-15)

    def test_affine_combination_linearity(self):
        # for theta fixed, the update is affine in xi: update(a*x + b*y) =
        # a*update(x) + b*update(y) whenever a + b = 1
        a, b = 0.3, 0.7
        pair_x = StudentTeacherPair(tiny_model(seed=4), momentum=0.99)
        pair_y = StudentTeacherPair(tiny_model(seed=4), momentum=0.99)
        pair_m = StudentTeacherPair(tiny_model(seed=4), momentum=0.99)
        rng = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for px, py, pm in zip(pair_x.teacher.parameters(),
                                  pair_y.teacher.parameters(),
                                  pair_m.teacher.parameters()):
                px.copy_(torch.randn(px.shape, generator=rng, dtype=px.dtype))
                py.copy_(torch.randn(py.shape, generator=rng, dtype=py.dtype))
                pm.copy_(a * px + b * py)
        for pair in (pair_x, pair_y, pair_m):
            pair.ema_update()
        for px, py, pm in zip(pair_x.teacher.parameters(),
                              pair_y.teacher.parameters(),
                              pair_m.teacher.parameters()):
            assert torch.allclose(pm, a * px + b * py, atol=1e-12)

    def test_teacher_requires_no_grad(self):
        pair = StudentTeacherPair(tiny_model())
        assert all(not p.requires_grad for p in pair.teacher.parameters())

    def test_bad_momentum_rejected(self):
        with pytest.raises(ValueError):
            StudentTeacherPair(tiny_model(), momentum=1.0)

    def test_shape_mismatch_rejected(self):
        pair = StudentTeacherPair(tiny_model())
        pair.student.backbone.head = torch.nn.Conv2d(5, 3, 1).to(torch.float64)
        with pytest.raises(ValueError, match="shape mismatch"):
            pair.ema_update()


class TestMakeWindows:
    def test_count_size_and_bounds(self):
        rng = np.random.default_rng(0)
        windows = make_windows(20, 24, 10, 6, rng)
        assert len(windows) == 10
        for (r0, c0, h, w) in windows:
            assert (h, w) == (6, 6)
            assert 0 <= r0 <= 14 and 0 <= c0 <= 18

    def test_size_clamped_to_map(self):
        rng = np.random.default_rng(0)
        (win,) = make_windows(4, 4, 1, 100, rng)
        assert win == (0, 0, 4, 4)


class TestGradients:
    def test_segmentation_logits_gradients(self):
        model = tiny_model(seed=5)
        x = torch.rand(12, 12, dtype=torch.float64)
        probe = torch.randn(1, 3, 12, 12, dtype=torch.float64)

        def loss_fn():
            logits, _, _ = model(x)
            return (logits * probe).mean()

        central_difference_check(model, loss_fn, n_probes=20, seed=0)

    def test_representation_head_gradients(self):
        model = tiny_model(seed=6)
        x = torch.rand(12, 12, dtype=torch.float64)
        probe = torch.randn(1, 8, 12, 12, dtype=torch.float64)

        def loss_fn():
            _, feats, _ = model(x)
            return (model.representation_head(feats) * probe).sum()

        central_difference_check(model, loss_fn, n_probes=20, seed=1)

    def test_global_embedding_gradients(self):
        model = tiny_model(seed=7)
        x = torch.rand(12, 12, dtype=torch.float64)
        probe = torch.randn(1, 8, dtype=torch.float64)

        def loss_fn():
            _, _, gf = model(x)
            return (model.global_embed(gf, use_predictor=True).vectors * probe).sum()

        central_difference_check(model, loss_fn, n_probes=20, seed=2)
