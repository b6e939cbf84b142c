import numpy as np
import pytest
import torch

from mona_lab.data import Sample2D
from mona_lab.metrics import (ASD_UNDEFINED, asd, asd_volume, boundary_pixels,
                              dice, evaluate, predict_labels)


def mask(rows, shape=(8, 8)):
    m = np.zeros(shape, dtype=bool)
    for r, c in rows:
        m[r, c] = True
    return m


class TestDice:
    def test_identical_masks(self):
        m = mask([(1, 1), (1, 2), (2, 2)])
        assert dice(m, m) == 1.0

    def test_disjoint_masks(self):
        assert dice(mask([(0, 0)]), mask([(5, 5)])) == 0.0

    def test_half_overlap_value(self):
        # |pred| = 2, |gt| = 2, intersection 1 -> 2*1 / 4 = 0.5
        assert dice(mask([(0, 0), (0, 1)]), mask([(0, 1), (0, 2)])) == 0.5

    def test_empty_vs_empty_is_one(self):
        assert dice(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0

    def test_empty_vs_nonempty_is_zero(self):
        assert dice(np.zeros((4, 4), bool), mask([(1, 1)], (4, 4))) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.5
        assert dice(a, b) == dice(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice(np.zeros((3, 3), bool), np.zeros((4, 4), bool))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            a = rng.random((5, 5)) > 0.6
            b = rng.random((5, 5)) > 0.6
            inter = sum(1 for i in range(5) for j in range(5) if a[i, j] and b[i, j])
            tot = int(a.sum() + b.sum())
            expect = 1.0 if tot == 0 else 2 * inter / tot
            assert abs(dice(a, b) - expect) < 1e-12


class TestBoundary:
    def test_filled_square_boundary_ring(self):
        m = np.zeros((6, 6), dtype=bool)
        m[1:5, 1:5] = True
        b = {tuple(p) for p in boundary_pixels(m)}
        expect = {(r, c) for r in range(1, 5) for c in range(1, 5)
                  if r in (1, 4) or c in (1, 4)}
        assert b == expect

    def test_single_pixel_is_its_own_boundary(self):
        b = boundary_pixels(mask([(3, 3)]))
        np.testing.assert_array_equal(b, [[3, 3]])

    def test_border_touching_mask_counts_as_boundary(self):
        m = np.zeros((4, 4), dtype=bool)
        m[0, :] = True
        assert len(boundary_pixels(m)) == 4

    def test_empty_mask(self):
        assert len(boundary_pixels(np.zeros((4, 4), bool))) == 0


class TestASD:
    def test_identical_zero(self):
        m = mask([(2, 2), (2, 3), (3, 2)])
        assert asd(m, m) == 0.0

    def test_two_points_distance(self):
        # single pixels 3 columns apart -> every direction averages to 3
        assert asd(mask([(2, 1)]), mask([(2, 4)])) == 3.0

    def test_spacing_scales_distances(self):
        a, b = mask([(2, 1)]), mask([(2, 4)])
        assert asd(a, b, spacing=(1.0, 2.0)) == 6.0

    def test_empty_side_undefined(self):
        out = asd(np.zeros((4, 4), bool), mask([(1, 1)], (4, 4)))
        assert np.isnan(out)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((7, 7)) > 0.5, rng.random((7, 7)) > 0.5
        assert abs(asd(a, b) - asd(b, a)) < 1e-12

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.random((6, 6)) > 0.55
            b = rng.random((6, 6)) > 0.55
            ba, bb = boundary_pixels(a), boundary_pixels(b)
            if len(ba) == 0 or len(bb) == 0:
                continue
            dists_ab = [min(np.hypot(*(p - q)) for q in bb) for p in ba]
            dists_ba = [min(np.hypot(*(q - p)) for p in ba) for q in bb]
            expect = (sum(dists_ab) + sum(dists_ba)) / (len(ba) + len(bb))
            assert abs(asd(a, b) - expect) < 1e-10


class TestASDVolume:
    def test_stacked_identical_zero(self):
        m = np.stack([mask([(2, 2), (2, 3)])] * 3)
        assert asd_volume(m, m) == 0.0

    def test_z_spacing_matters(self):
        a = np.zeros((2, 4, 4), dtype=bool)
        b = np.zeros((2, 4, 4), dtype=bool)
        a[0, 1, 1] = True
        b[1, 1, 1] = True
        assert asd_volume(a, b, spacing=(1.0, 1.0, 1.0)) == 1.0
        assert asd_volume(a, b, spacing=(2.5, 1.0, 1.0)) == 2.5

    def test_empty_undefined(self):
        a = np.zeros((2, 4, 4), dtype=bool)
        b = np.zeros((2, 4, 4), dtype=bool)
        b[0, 1, 1] = True
        assert np.isnan(asd_volume(a, b))


class LookupModel(torch.nn.Module):
    """Emits one-hot logits from a fixed image -> label table."""

    def __init__(self, table, num_classes):
        super().__init__()
        self.table = {k: np.asarray(v) for k, v in table.items()}
        self.num_classes = num_classes
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x):
        key = round(float(x.sum().item()), 6)
        lab = self.table[key]
        logits = torch.full((1, self.num_classes) + lab.shape, -10.0,
                            dtype=torch.float64)
        for c in range(self.num_classes):
            logits[0, c][torch.as_tensor(lab == c)] = 10.0
        return logits, None, None


def labeled_volume(pid, n_slices, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_slices):
        lab = np.zeros((8, 8), dtype=np.int64)
        lab[2:5, 2:5] = 1
        lab[6, 6] = 2
        img = rng.random((8, 8))
        out.append(Sample2D(image=img, label=lab, patient_id=pid, slice_index=i))
    return out


class TestEvaluate:
    def test_perfect_predictor_scores(self):
        samples = labeled_volume("a", 3, 0) + labeled_volume("b", 2, 1)
        table = {round(float(s.image.sum()), 6): s.label for s in samples}
        model = LookupModel(table, num_classes=3)
        evals, summary = evaluate(model, samples, num_classes=3)
        assert summary["macro_dice"] == 1.0
        assert summary["macro_asd"] == 0.0
        assert {e.patient_id for e in evals} == {"a", "b"}
        for e in evals:
            assert all(v == 1.0 for v in e.dice.values())

    def test_constant_background_predictor(self):
        samples = labeled_volume("a", 2, 2)
        table = {round(float(s.image.sum()), 6): np.zeros((8, 8), dtype=np.int64)
                 for s in samples}
        model = LookupModel(table, num_classes=3)
        _, summary = evaluate(model, samples, num_classes=3)
        assert summary["macro_dice"] == 0.0
        assert np.isnan(summary["macro_asd"])

    def test_per_class_dice_keys(self):
        samples = labeled_volume("a", 2, 3)
        table = {round(float(s.image.sum()), 6): s.label for s in samples}
        _, summary = evaluate(LookupModel(table, 3), samples, num_classes=3)
        assert sorted(summary["per_class_dice"]) == [1, 2]

    def test_unlabeled_sample_rejected(self):
        s = Sample2D(image=np.zeros((4, 4)), label=None, patient_id="x", slice_index=0)
        with pytest.raises(ValueError, match="labels"):
            evaluate(LookupModel({}, 2), [s], num_classes=2)

    def test_deterministic(self):
        from mona_lab.nets import SegModel
        torch.manual_seed(0)
        model = SegModel(num_classes=3, base_width=2, m_embed=8).to(torch.float64)
        samples = labeled_volume("a", 2, 4)
        _, s1 = evaluate(model, samples, num_classes=3)
        _, s2 = evaluate(model, samples, num_classes=3)
        assert s1 == s2

    def test_predict_labels_argmax(self):
        lab = np.zeros((8, 8), dtype=np.int64)
        lab[1:4, 1:4] = 2
        img = np.random.default_rng(5).random((8, 8))
        model = LookupModel({round(float(img.sum()), 6): lab}, 3)
        np.testing.assert_array_equal(predict_labels(model, img), lab)
