from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from vasq.phantom import (
    CohortModel,
    GeometricTree,
    Segment,
    TreeSpec,
    analytic_block,
    ctpa_to_ncct,
    generate_cohort,
    generate_tree,
    make_phantom,
    rasterize,
    rasterize_capsules,
)
from vasq.volume import ARTERY, VEIN


@pytest.fixture(scope="module")
def case():
    return make_phantom(TreeSpec(generations=4))


def traverse_length(tree: GeometricTree) -> float:
    # walk parent links instead of trusting segment order
    total = 0.0
    stack = [s for s in tree.segments if s.parent == -1]
    while stack:
        s = stack.pop()
        total += float(np.linalg.norm(s.end - s.start))
        stack.extend(tree.children(s.index))
    return total


class TestTreeSpec:
    @pytest.mark.parametrize("kwargs", [
        {"generations": 0}, {"radius_decay": 1.0}, {"radius_decay": 0.0}, {"length_decay": 1.5},
        {"jitter": 0.6}, {"root_radius": -1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TreeSpec(**kwargs)


class TestGenerateTree:
    def test_single_generation(self):
        tree = generate_tree(TreeSpec(generations=1))
        assert len(tree.segments) == 1
        block = analytic_block(tree)
        assert block["junctions"] == 0 and block["segments"] == 1

    @pytest.mark.parametrize("g", [2, 3, 5, 7])
    def test_counts(self, g):
        tree = generate_tree(TreeSpec(generations=g))
        assert len(tree.segments) == 2 ** g - 1
        junctions = sum(1 for s in tree.segments if len(tree.children(s.index)) == 2)
        assert junctions == 2 ** (g - 1) - 1
        assert all(len(tree.children(s.index)) in (0, 2) for s in tree.segments)
        block = analytic_block(tree)
        assert block["segments"] == 2 ** g - 1 and block["junctions"] == junctions
        assert block["endpoints"] == 2 ** (g - 1) + 1

    @pytest.mark.parametrize("spec", [TreeSpec(), TreeSpec(generations=5, length_decay=0.9,
                                                           branch_length=17.3)])
    def test_length_closed_form(self, spec):
        tree = generate_tree(spec)
        closed = sum(2 ** g * spec.branch_length * spec.length_decay ** g
                     for g in range(spec.generations))
        assert abs(traverse_length(tree) - closed) <= 1e-9
        assert abs(analytic_block(tree)["total_length_mm"] - closed) <= 1e-9

    def test_children_continue_from_parent(self):
        tree = generate_tree(TreeSpec(generations=4, branch_angle=60))
        for s in tree.segments[1:]:
            parent = tree.segments[s.parent]
            assert np.array_equal(s.start, parent.end)
            assert s.generation == parent.generation + 1
            cos = np.dot(s.end - s.start, parent.end - parent.start) / (s.length * parent.length)
            assert np.degrees(np.arccos(np.clip(cos, -1, 1))) == pytest.approx(30.0, abs=1e-9)

    def test_deterministic_with_jitter(self):
        spec = TreeSpec(generations=5, jitter=0.3, rng_seed=11)
        a, b = generate_tree(spec), generate_tree(spec)
        assert all(np.array_equal(x.end, y.end) for x, y in zip(a.segments, b.segments))
        c = generate_tree(TreeSpec(generations=5, jitter=0.3, rng_seed=12))
        assert not all(np.array_equal(x.end, y.end) for x, y in zip(a.segments, c.segments))


class TestRasterize:
    def test_zero_radius_empty(self):
        case = make_phantom(TreeSpec(generations=3, root_radius=0.0))
        assert not case.truth.foreground.any()

    @pytest.mark.parametrize("r,length,sp", [(3.0, 20.0, 1.0), (4.0, 30.0, 0.5), (2.0, 15.0, 0.6)])
    def test_capsule_volume(self, r, length, sp):
        seg = Segment(0, np.array([0.0, 0.0, 0.0]), np.array([length, 0.0, 0.0]), r, 0, -1)
        pad = r + 2
        n = int(np.ceil((length + 2 * pad) / sp)) + 1
        m = int(np.ceil(2 * pad / sp)) + 1
        origin = (-pad, -pad, -pad)
        mask, _ = rasterize_capsules([seg], (n, m, m), (sp, sp, sp), origin)
        # capsule = cylinder + ball; the cylinder alone is within 10% of pi r^2 l
        volume = mask.sum() * sp ** 3
        capsule = np.pi * r ** 2 * length + 4 / 3 * np.pi * r ** 3
        assert volume == pytest.approx(capsule, rel=0.10)
        x = origin[0] + np.arange(n) * sp
        cylinder_part = mask[(x >= 0) & (x <= length)].sum() * sp ** 3
        assert cylinder_part == pytest.approx(np.pi * r ** 2 * length, rel=0.10)

    def test_palette(self, case):
        img = case.image.voxels
        assert set(np.unique(img)) == {-850.0, 40.0, 300.0}
        assert np.all(img[case.truth.foreground] == 300.0)
        heart = case.heart_mask.labels.astype(bool)
        assert np.all(img[heart & ~case.truth.foreground] == 40.0)

    def test_classes_disjoint_and_levels(self, case):
        assert case.truth.artery.any() and case.truth.vein.any()
        assert not (case.truth.artery & case.truth.vein).any()
        for lv, cls in ((case.levels_A, case.truth.artery), (case.levels_V, case.truth.vein)):
            for a, b in zip(lv.masks, lv.masks[1:]):
                assert not (a & ~b).any()
            assert np.array_equal(lv.masks[3], cls)

    def test_vein_is_translate(self, case):
        a = np.argwhere(case.truth.artery)
        v = np.argwhere(case.truth.vein)
        shift = v.min(0) - a.min(0)
        assert shift[0] == 0 and shift[1] == 0
        assert np.array_equal(a + shift, v)

    def test_analytic_block(self, case):
        for name in ("artery", "vein"):
            block = case.analytic[name]
            assert block["bifurcations"] == 7
            assert block["voxels"] == int(case.truth.select(ARTERY if name == "artery" else VEIN).sum())

    def test_root_hint_in_vessel(self, case):
        assert case.truth.labels[case.root_hints["artery"]] == ARTERY
        assert case.truth.labels[case.root_hints["vein"]] == VEIN

    def test_deterministic(self, case):
        again = make_phantom(TreeSpec(generations=4))
        assert np.array_equal(again.image.voxels, case.image.voxels)
        assert np.array_equal(again.truth.labels, case.truth.labels)
        assert again.analytic == case.analytic

    def test_overlap_rejected(self):
        tree = generate_tree(TreeSpec(generations=2))
        with pytest.raises(ValueError, match="overlap"):
            rasterize({"artery": tree, "vein": tree}, (60, 60, 60), (1, 1, 1), (-10, -30, -30))


class TestNcct:
    def test_vessels_darkened(self, case):
        nc = ctpa_to_ncct(case)
        vessel = nc.image.voxels[case.truth.foreground]
        assert 40 <= vessel.mean() <= 60
        assert vessel.min() >= 40 and vessel.max() <= 60

    def test_outside_unchanged(self, case):
        nc = ctpa_to_ncct(case)
        shell = ndimage.binary_dilation(case.truth.foreground, np.ones((3, 3, 3), bool))
        assert np.array_equal(nc.image.voxels[~shell], case.image.voxels[~shell])
        assert nc.truth is case.truth

    def test_idempotent(self, case):
        once = ctpa_to_ncct(case)
        assert np.array_equal(ctpa_to_ncct(once).image.voxels, once.image.voxels)


class TestCohort:
    def test_empty(self):
        assert generate_cohort(0) == []

    def test_exact_model(self):
        model = CohortModel(seed=5)
        records = generate_cohort(50, model)
        for r in records:
            for name, (b0, bv, bs, ba) in model.betas.items():
                expected = b0 + bv * r.lung_volume + bs * r.sex + ba * r.age
                assert getattr(r, name) == pytest.approx(expected, rel=0, abs=1e-9)
            assert 30 <= r.age <= 80 and r.sex in (0, 1) and r.lung_volume > 0

    def test_deterministic_and_balanced(self):
        a = generate_cohort(400, CohortModel(seed=3))
        assert a == generate_cohort(400, CohortModel(seed=3))
        assert a != generate_cohort(400, CohortModel(seed=4))
        males = sum(r.sex for r in a)
        assert 150 < males < 250
