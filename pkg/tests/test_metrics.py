from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ball, random_labels
from vasq.metrics import (
    abundance_ratios,
    dice,
    evaluate,
    hd95,
    level_weights,
    mcs,
    overlap_loss,
    sensitivity,
    total_loss,
    weighted_dice_loss,
)
from vasq.phantom import TreeSpec, make_phantom, rasterize
from vasq.skeleton import BranchLevels
from vasq.volume import ARTERY, VEIN, GeometryError, LabelMask, ProbabilityMap


def brute_counts(p, t):
    inter = np_ = nt = 0
    for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
        inter += a and b
        np_ += a
        nt += b
    return inter, np_, nt


def brute_boundary(mask):
    pts = []
    nx, ny, nz = mask.shape
    for x, y, z in np.argwhere(mask):
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            q = (x + d[0], y + d[1], z + d[2])
            inside = 0 <= q[0] < nx and 0 <= q[1] < ny and 0 <= q[2] < nz
            if not inside or not mask[q]:
                pts.append((x, y, z))
                break
    return np.asarray(pts, dtype=float)


def brute_hd95(a, b, spacing):
    pa = brute_boundary(a) * spacing
    pb = brute_boundary(b) * spacing
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(d.min(1), 95), np.percentile(d.min(0), 95))


def nested_levels(shape=(20, 20, 20), sizes=(40, 80, 160, 320)):
    """Four level deltas of known sizes laid out as consecutive voxels."""
    codes = np.zeros(int(np.prod(shape)), np.uint8)
    start = 0
    for i, n in enumerate(sizes):
        codes[start:start + n] = i + 1
        start += n
    return BranchLevels.from_codes(codes.reshape(shape))


def prob(a, v=None, **kw):
    a = np.asarray(a, dtype=float)
    return ProbabilityMap(a, np.zeros_like(a) if v is None else np.asarray(v, float), **kw)


class TestCounting:
    def test_dice_examples(self):
        p = np.zeros((10, 10, 10), bool)
        t = np.zeros_like(p)
        assert dice(p, t) == 1.0
        t[0, :] = True
        assert dice(t, t) == 1.0
        p[5, :] = True
        assert dice(p, t) == 0.0
        p = np.zeros(1000, bool)
        t = np.zeros(1000, bool)
        p[:100] = True
        t[50:150] = True
        assert dice(p, t) == 0.5

    def test_dice_both_empty_flagged(self):
        flags = {}
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), flags=flags)
        assert "dice_both_empty" in flags

    def test_sensitivity_examples(self):
        t = np.zeros(1000, bool)
        t[:200] = True
        p = np.zeros_like(t)
        p[50:300] = True
        assert sensitivity(p, t) == 0.75
        assert sensitivity(np.ones_like(t), t) == 1.0
        assert sensitivity(~t, t) == 0.0
        flags = {}
        assert sensitivity(t, np.zeros_like(t), flags=flags) == 1.0
        assert "sensitivity_empty_truth" in flags

    def test_mcs_examples(self, rng):
        truth = LabelMask(random_labels(rng, (16, 16, 16)))
        assert mcs(truth, truth) == 0.0
        swapped = LabelMask(np.choose(truth.labels, [0, 2, 1]).astype(np.uint8))
        # every truth vessel voxel is crossed once and counted twice in the denominator
        assert mcs(swapped, truth) == 0.5
        assert mcs(LabelMask(np.zeros_like(truth.labels)), truth) == 0.0
        flags = {}
        empty = LabelMask(np.zeros((3, 3, 3), np.uint8))
        assert mcs(empty, empty, flags) == 0.0 and "mcs_all_empty" in flags

    def test_mcs_balanced_swap(self):
        labels = np.zeros((10, 10, 10), np.uint8)
        labels[:3] = ARTERY
        labels[5:8] = VEIN
        truth = LabelMask(labels)
        swapped = LabelMask(np.choose(labels, [0, 2, 1]).astype(np.uint8))
        assert mcs(swapped, truth) == 0.5

    def test_brute_force_oracle(self, rng):
        for _ in range(3):
            p = LabelMask(random_labels(rng))
            t = LabelMask(random_labels(rng))
            for code in (ARTERY, VEIN):
                inter, n_p, n_t = brute_counts(p.select(code), t.select(code))
                assert dice(p, t, code) == 2 * inter / (n_p + n_t)
                assert sensitivity(p, t, code) == inter / n_t
            cross = brute_counts(p.artery, t.vein)[0] + brute_counts(p.vein, t.artery)[0]
            total = sum(int(m.sum()) for m in (p.artery, p.vein, t.artery, t.vein))
            assert mcs(p, t) == cross / total

    def test_properties(self, label_pair):
        a, b = label_pair
        for code in (ARTERY, VEIN):
            assert dice(a, b, code) == dice(b, a, code)
            assert 0 <= dice(a, b, code) <= 1
            assert 0 <= sensitivity(a, b, code) <= 1
        assert mcs(a, b) == mcs(b, a)

    def test_geometry_mismatch(self):
        a = LabelMask(np.zeros((4, 4, 4), np.uint8), spacing=(1, 1, 1))
        b = LabelMask(np.zeros((4, 4, 4), np.uint8), spacing=(1, 1, 2))
        with pytest.raises(GeometryError):
            dice(a, b)
        with pytest.raises(ValueError):
            dice(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


class TestHD95:
    def test_identical(self):
        b = ball((20, 20, 20), (10, 10, 10), 6)
        assert hd95(b, b) == 0.0

    def test_spheres(self):
        shape = (40, 34, 34)
        a = ball(shape, (14, 17, 17), 10)
        b = ball(shape, (19, 17, 17), 10)
        value = hd95(a, b)
        assert 0 < value <= 5
        assert value == pytest.approx(brute_hd95(a, b, np.ones(3)), abs=1e-9)
        assert hd95(b, a) == value

    @pytest.mark.parametrize("k,sz", [(1, 1.0), (3, 1.5), (4, 0.625)])
    def test_translation(self, k, sz):
        spacing = np.array([0.7, 0.7, sz])
        a = np.zeros((16, 16, 24), bool)
        a[4:12, 5:11, 6:14] = True
        b = np.roll(a, k, axis=2)
        value = hd95(a, b, spacing)
        assert abs(value - k * sz) <= np.linalg.norm(spacing)
        assert value == pytest.approx(brute_hd95(a, b, spacing), abs=1e-9)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="undefined distance"):
            hd95(np.zeros((4, 4, 4)), np.ones((4, 4, 4)))


class TestAbundance:
    @pytest.fixture(scope="class")
    @staticmethod
    def depth5():
        spec = TreeSpec(generations=6, root_radius=4.2, radius_decay=0.87, branch_length=24,
                        length_decay=0.87)
        return make_phantom(spec)

    def test_identity(self, depth5):
        hints = {ARTERY: depth5.root_hints["artery"], VEIN: depth5.root_hints["vein"]}
        r = abundance_ratios(depth5.truth, depth5.truth, root_hints=hints)
        for key in ("A", "V"):
            assert r[key]["sl_ratio"] == 1.0 and r[key]["bc_ratio"] == 1.0

    def test_pruned_generations(self, depth5):
        case = depth5
        trees = {k: t.pruned(2) for k, t in case.trees.items()}
        pred = rasterize(trees, case.image.dims, case.image.spacing, case.image.origin).truth
        hints = {ARTERY: case.root_hints["artery"], VEIN: case.root_hints["vein"]}
        r = abundance_ratios(pred, case.truth, root_hints=hints)
        for key in ("A", "V"):
            assert r[key]["bc_truth"] == 31
            assert r[key]["bc_ratio"] == 3 / 31
            assert 0 < r[key]["sl_ratio"] < 1

    def test_empty_pred(self, depth5):
        pred = LabelMask(np.zeros_like(depth5.truth.labels), depth5.truth.spacing,
                         depth5.truth.origin)
        r = abundance_ratios(pred, depth5.truth)
        assert r["A"]["sl_ratio"] == 0 and r["A"]["bc_ratio"] == 0

    def test_empty_truth_raises(self):
        empty = LabelMask(np.zeros((8, 8, 8), np.uint8))
        with pytest.raises(ValueError, match="empty"):
            abundance_ratios(empty, empty)


class TestWeightedDice:
    def test_perfect_prediction(self):
        lv = nested_levels()
        truth = lv.masks[3]
        loss = weighted_dice_loss(prob(truth), lv)
        w = level_weights(lv)
        assert w == [40 / 80, 40 / 160, 40 / 320]
        assert loss == pytest.approx(-0.5 * (1 + sum(w)), rel=1e-12)

    def test_zero_prediction(self):
        lv = nested_levels()
        assert weighted_dice_loss(prob(np.zeros(lv.dims)), lv) == 0.0

    def test_both_classes_summed(self):
        lv = nested_levels()
        truth = lv.masks[3]
        one = weighted_dice_loss(prob(truth), lv)
        both = weighted_dice_loss(prob(truth, truth), {ARTERY: lv, VEIN: lv})
        assert both == pytest.approx(2 * one, rel=1e-12)

    def test_scaling_invariant(self, rng):
        lv = nested_levels()
        # off-truth voxels take the nearest level, which depends on sampling ties
        p = np.where(lv.masks[3], rng.random(lv.dims), 0.0)
        doubled = BranchLevels.from_codes(np.repeat(lv.codes(), 2, axis=0))
        a = weighted_dice_loss(prob(p), lv)
        b = weighted_dice_loss(prob(np.repeat(p, 2, axis=0)), doubled)
        assert level_weights(doubled) == level_weights(lv)
        assert b == pytest.approx(a, rel=1e-12)

    def test_monotone_towards_truth(self):
        lv = nested_levels()
        truth = lv.masks[3].astype(float)
        losses = [weighted_dice_loss(prob(t * truth), lv) for t in (0.25, 0.5, 0.75, 1.0)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_permutation_invariant(self, rng):
        lv = nested_levels()
        truth = lv.masks[3]
        p = np.where(truth, rng.random(lv.dims), 0.0)
        perm = rng.permutation(truth.size)
        codes = lv.codes().ravel()[perm].reshape(lv.dims)
        q = p.ravel()[perm].reshape(lv.dims)
        a = weighted_dice_loss(prob(p), lv)
        b = weighted_dice_loss(prob(q), BranchLevels.from_codes(codes))
        assert b == pytest.approx(a, rel=1e-12)

    def test_empty_level_skipped(self):
        lv = nested_levels(sizes=(40, 0, 160, 320))
        flags = {}
        loss = weighted_dice_loss(prob(lv.masks[3]), lv, flags)
        assert "empty_level_1" in flags
        assert loss == pytest.approx(-0.5 * (1 + 40 / 160 + 40 / 320), rel=1e-12)


class TestOverlapAndTotal:
    def test_examples(self, rng):
        labels = np.zeros((10, 10, 10), np.uint8)
        labels[:3] = ARTERY
        labels[5:8] = VEIN
        truth = LabelMask(labels)
        assert overlap_loss(ProbabilityMap.from_labels(truth), truth) == 0.0
        assert overlap_loss(prob(truth.vein, truth.artery), truth) == 0.5
        assert overlap_loss(prob(np.zeros(truth.dims)), truth) == 0.0

    def test_equals_mcs_on_hard(self, rng):
        worst = 0.0
        for _ in range(1000):
            p = LabelMask(random_labels(rng, (6, 6, 6)))
            t = LabelMask(random_labels(rng, (6, 6, 6)))
            worst = max(worst, abs(overlap_loss(ProbabilityMap.from_labels(p), t) - mcs(p, t)))
        assert worst <= 1e-15

    def test_total_is_sum(self, rng):
        lv = nested_levels()
        codes = np.where(lv.masks[3], ARTERY, 0).astype(np.uint8)
        codes[-100:] = VEIN
        truth = LabelMask(codes)
        vlv = BranchLevels.from_codes(np.where(truth.vein, 4, 0))
        levels = {ARTERY: lv, VEIN: vlv}
        p = prob(rng.random(lv.dims), rng.random(lv.dims))
        expected = weighted_dice_loss(p, levels) + overlap_loss(p, truth)
        assert abs(total_loss(p, levels, truth) - expected) <= 1e-12
        perfect = ProbabilityMap.from_labels(truth)
        assert total_loss(perfect, levels, truth) == weighted_dice_loss(perfect, levels)
        zero = prob(np.zeros(lv.dims))
        assert total_loss(zero, levels, truth) == 0.0

    @given(st.integers(0, 2 ** 31))
    def test_overlap_bounded(self, seed):
        r = np.random.default_rng(seed)
        truth = LabelMask(random_labels(r, (5, 5, 5)))
        p = prob(r.random((5, 5, 5)), r.random((5, 5, 5)))
        assert 0.0 <= overlap_loss(p, truth) <= 1.0


class TestEvaluate:
    @pytest.fixture(scope="class")
    @staticmethod
    def case():
        return make_phantom(TreeSpec(generations=4))

    def test_perfect(self, case):
        hints = {ARTERY: case.root_hints["artery"], VEIN: case.root_hints["vein"]}
        r = evaluate(case.truth, case.truth, case.levels_A, case.levels_V, root_hints=hints)
        assert r.dsc_whole_A == r.dsc_whole_V == r.dsc_intra_A == r.dsc_intra_V == 1.0
        assert r.sen == 1.0 and r.mcs == 0.0 and r.hd95_mm == 0.0
        assert r.bc_ratio_A == r.bc_ratio_V == r.sl_ratio_A == r.sl_ratio_V == 1.0
        assert r.loss_overlap == 0.0 and r.loss_total == r.loss_dsc < 0
        assert "dsc_intra" in r.conventions

    def test_empty_prediction(self, case):
        empty = LabelMask(np.zeros_like(case.truth.labels), case.truth.spacing, case.truth.origin)
        r = evaluate(empty, case.truth, case.levels_A, case.levels_V)
        assert r.dsc_whole_A == 0.0 and r.sen == 0.0 and r.hd95_mm is None
        assert r.loss_total == 0.0
        assert r.sl_ratio_A == 0.0
        assert set(r.to_json()) >= {"dsc_whole_A", "mcs", "hd95_mm", "conventions"}
