"""
Synthetic vascular phantoms with analytic ground truth.

A phantom is a pair of binary trees (artery and a translated vein copy)
rasterized as capsules into lung parenchyma, with cardinal trunks rooted
inside a heart region. The generator records exact centerlines, branch
generations and the expected level of every branch, so skeleton, tree and
metric code can be checked against closed-form answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .volume import ARTERY, VEIN, LabelMask, VoxelGrid

HU_VESSEL = 300.0
HU_PARENCHYMA = -850.0
HU_TISSUE = 40.0
HU_AIR = -1000.0
HU_NCCT_VESSEL = 50.0
CONTRAST_THRESHOLD = 200.0


@dataclass(frozen=True)
class TreeSpec:
    generations: int = 7
    root_radius: float = 4.0  # mm
    radius_decay: float = 0.8
    branch_length: float = 24.0  # mm, generation 0
    length_decay: float = 0.8
    branch_angle: float = 70.0  # degrees between sibling branches
    rng_seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if min(self.root_radius, self.branch_length, self.branch_angle) < 0:
            raise ValueError("tree parameters must be non-negative")
        if not (0 < self.radius_decay < 1 and 0 < self.length_decay <= 1):
            raise ValueError("decay factors must lie in (0, 1)")
        if not 0 <= self.jitter <= 0.5:
            raise ValueError("jitter must lie in [0, 0.5]")

    def radius(self, generation: int) -> float:
        return self.root_radius * self.radius_decay ** generation

    def length(self, generation: int) -> float:
        return self.branch_length * self.length_decay ** generation


@dataclass(frozen=True)
class Segment:
    index: int
    start: np.ndarray
    end: np.ndarray
    radius: float
    generation: int
    parent: int  # -1 for the root

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)


@dataclass
class GeometricTree:
    spec: TreeSpec
    segments: list

    @property
    def root(self) -> Segment:
        return self.segments[0]

    def total_length(self) -> float:
        return float(sum(s.length for s in self.segments))

    def children(self, index: int) -> list:
        return [s for s in self.segments if s.parent == index]

    def translated(self, offset) -> "GeometricTree":
        offset = np.asarray(offset, dtype=float)
        return GeometricTree(self.spec, [Segment(s.index, s.start + offset, s.end + offset,
                                                 s.radius, s.generation, s.parent)
                                         for s in self.segments])

    def pruned(self, max_generation: int) -> "GeometricTree":
        return GeometricTree(self.spec, [s for s in self.segments if s.generation <= max_generation])


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * np.dot(axis, v) * (1 - np.cos(angle)))


def _unit(v):
    return v / np.linalg.norm(v)


def generate_tree(spec: TreeSpec, start=(0.0, 0.0, 0.0), direction=(0.0, 0.0, 1.0),
                  plane_normal=(0.0, 1.0, 0.0)) -> GeometricTree:
    """Binary recursive tree; each bifurcation plane is turned 90 degrees
    from its parent's so the tree fills 3D space."""
    rng = np.random.default_rng(spec.rng_seed)
    half = np.deg2rad(spec.branch_angle) / 2.0
    segments: list[Segment] = []

    def jittered(value):
        if spec.jitter == 0:
            return value
        return value * (1.0 + spec.jitter * rng.uniform(-1.0, 1.0))

    root_dir = _unit(np.asarray(direction, dtype=float))
    normal = np.asarray(plane_normal, dtype=float)
    normal = _unit(normal - np.dot(normal, root_dir) * root_dir)
    # breadth-first so segment indices group by generation
    queue = [(np.asarray(start, dtype=float), root_dir, normal, 0, -1)]
    while queue:
        nxt = []
        for origin, d, n, gen, parent in queue:
            length = jittered(spec.length(gen))
            seg = Segment(len(segments), origin, origin + length * d, spec.radius(gen), gen, parent)
            segments.append(seg)
            if gen + 1 >= spec.generations:
                continue
            if spec.jitter:
                n = _rotate(n, d, spec.jitter * np.pi * rng.uniform(-1.0, 1.0))
            for sign in (1.0, -1.0):
                child = _unit(_rotate(d, n, sign * jittered(half)))
                child_normal = _unit(np.cross(child, n))
                nxt.append((seg.end, child, child_normal, gen + 1, seg.index))
        queue = nxt
    return GeometricTree(spec, segments)


def analytic_block(tree: GeometricTree) -> dict:
    """Closed-form topology and length of a jitter-free tree, both counting
    conventions spelled out."""
    spec = tree.spec
    g = spec.generations
    return {
        "generations": g,
        "bifurcation_depth": g - 1,
        "segments": 2 ** g - 1,
        "junctions": 2 ** (g - 1) - 1,
        "bifurcations": 2 ** (g - 1) - 1,
        "endpoints": 2 ** (g - 1) + 1,
        "total_length_mm": float(sum(2 ** k * spec.length(k) for k in range(g))) if spec.jitter == 0
        else tree.total_length(),
        "traversal_length_mm": tree.total_length(),
        "branch_generations": [s.generation for s in tree.segments],
    }


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def level_of_generation(intrapulmonary_generation: int) -> int:
    """Level index for an intrapulmonary branch generation (>= 1)."""
    g = intrapulmonary_generation
    if g <= 0:
        return 0
    if g <= 2:
        return 1
    if g <= 5:
        return 2
    return 3


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance of each point to segment ab and the clamped projection t."""
    ab = b - a
    denom = float(np.dot(ab, ab))
    if denom == 0:
        t = np.zeros(points.shape[0])
    else:
        t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1), t


def rasterize_capsules(segments, dims, spacing, origin, radius_scale: float = 1.0,
                       extra: float = 0.0):
    """Rasterize capsules by the voxel-centre rule.

    Returns the union mask and, per voxel, the index of the capsule with the
    smallest normalised distance (distance / radius), -1 outside.
    """
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)
    mask = np.zeros(dims, dtype=bool)
    owner = np.full(dims, -1, dtype=np.int32)
    best = np.full(dims, np.inf)
    for k, seg in enumerate(segments):
        r = seg.radius * radius_scale + extra
        if r <= 0:
            continue
        lo = np.floor((np.minimum(seg.start, seg.end) - r - origin) / spacing).astype(int)
        hi = np.ceil((np.maximum(seg.start, seg.end) + r - origin) / spacing).astype(int) + 1
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, dims)
        if np.any(hi <= lo):
            continue
        idx = np.stack(np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij"), -1)
        pts = origin + idx.reshape(-1, 3) * spacing
        dist, _ = _segment_distance(pts, seg.start, seg.end)
        inside = dist <= r
        norm = (dist / r).reshape(idx.shape[:3])
        inside = inside.reshape(idx.shape[:3])
        sl = tuple(slice(l, h) for l, h in zip(lo, hi))
        sub_best = best[sl]
        take = inside & (norm < sub_best)
        sub_best[take] = norm[take]
        owner[sl][take] = k
        mask[sl] |= inside
    return mask, owner


@dataclass
class PhantomCase:
    image: VoxelGrid
    truth: LabelMask
    levels_A: object
    levels_V: object
    lung_mask: LabelMask
    heart_mask: LabelMask
    analytic: dict
    trees: dict = field(default_factory=dict)
    root_hints: dict = field(default_factory=dict)

    @property
    def spacing(self):
        return self.image.spacing


def _shift_overlaps(mask: np.ndarray, shift) -> bool:
    """True if ``mask`` and ``mask`` translated by integer ``shift`` intersect."""
    src, dst = [], []
    for n, d in zip(mask.shape, shift):
        if abs(d) >= n:
            return False
        src.append(slice(0, n - d) if d >= 0 else slice(-d, n))
        dst.append(slice(d, n) if d >= 0 else slice(0, n + d))
    return bool(np.any(mask[tuple(src)] & mask[tuple(dst)]))


# z only: the metric lattice keeps 1 mm along z, so the vein stays an exact
# voxel translation of the artery after resampling too
_OFFSET_DIRECTIONS = [(0, 0, 1), (0, 0, -1)]
TRUNK_DIRECTION = (1.0, 0.0, 0.0)
TRUNK_PLANE_NORMAL = (0.0, 0.0, 1.0)


def _vein_offset(artery: GeometricTree, spacing, gap: float) -> np.ndarray:
    """Smallest integer-voxel translation along z
    that keeps a copy of the tree at least ``gap`` mm from the original and
    leaves room for the heart regions."""
    sp = np.asarray(spacing, dtype=float)
    segs = artery.segments
    lo = np.min([np.minimum(s.start, s.end) - s.radius for s in segs], axis=0) - gap - sp
    hi = np.max([np.maximum(s.start, s.end) + s.radius for s in segs], axis=0) + gap + sp
    origin = np.floor(lo / sp) * sp
    dims = tuple(int(n) for n in np.ceil((hi - origin) / sp).astype(int) + 1)
    grown, _ = rasterize_capsules(segs, dims, spacing, origin, extra=gap)
    best = None
    for direction in _OFFSET_DIRECTIONS:
        step = np.asarray(direction)
        for k in range(1, max(dims) + 1):
            shift = tuple(int(v) for v in step * k)
            if best is not None and np.linalg.norm(shift * sp) >= np.linalg.norm(best * sp):
                break
            if _shift_overlaps(grown, shift):
                continue
            offset = np.asarray(shift) * sp
            try:
                _heart_balls([artery, artery.translated(offset)], gap)
            except ValueError:
                continue
            best = np.asarray(shift)
            break
    return best * sp


def _heart_balls(trees, gap: float):
    """One ball per trunk: contains the trunk midpoint and start, excludes
    every generation >= 1 midpoint."""
    balls = []
    others = [s for t in trees for s in t.segments if s.generation >= 1]
    for tree in trees:
        trunk = tree.root
        d = _unit(trunk.end - trunk.start)
        center = trunk.start + 0.35 * trunk.length * d
        radius = 0.65 * trunk.length
        limit = min((float(np.linalg.norm(s.midpoint - center)) for s in others),
                    default=np.inf) - gap
        radius = min(radius, limit)
        if radius <= 0.35 * trunk.length:
            raise ValueError("trunk too short to place a heart region around it")
        balls.append((center, radius))
    return balls


def _expected_levels(tree: GeometricTree) -> list[int]:
    # trunk (generation 0) sits in the heart; generation g >= 1 is the g-th
    # intrapulmonary generation
    return [level_of_generation(s.generation) for s in tree.segments]


def make_phantom(spec: TreeSpec | None = None, spacing=(1.0, 1.0, 1.0), margin: float = 6.0,
                 vein_gap: float = 3.0, with_vein: bool = True) -> PhantomCase:
    """Generate and rasterize an artery/vein phantom.

    The vein tree is an integer-voxel translation of the artery tree placed
    as close as ``vein_gap`` allows, so both rasterize identically and the
    classes run side by side.
    """
    spec = spec or TreeSpec()
    spacing = tuple(float(s) for s in spacing)
    artery = generate_tree(spec, direction=TRUNK_DIRECTION, plane_normal=TRUNK_PLANE_NORMAL)
    trees = {"artery": artery}
    if with_vein and spec.root_radius > 0:
        trees["vein"] = artery.translated(_vein_offset(artery, spacing, vein_gap))

    segs = [s for t in trees.values() for s in t.segments]
    lo = np.min([np.minimum(s.start, s.end) - s.radius for s in segs], axis=0) - margin
    hi = np.max([np.maximum(s.start, s.end) + s.radius for s in segs], axis=0) + margin
    sp = np.asarray(spacing)
    origin = np.floor(lo / sp) * sp
    dims = tuple(int(n) for n in np.ceil((hi - origin) / sp).astype(int) + 1)
    return rasterize(trees, dims, spacing, tuple(origin))


def rasterize(trees: dict, dims, spacing, origin, heart_gap: float = 1.0) -> PhantomCase:
    """Rasterize artery/vein trees into a CTPA-like HU image with truth masks.

    Vessels are 300 HU, parenchyma -850 HU and the heart 40 HU; a voxel is
    vessel iff its centre lies inside a capsule.
    """
    from .skeleton import levels_from_owner

    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    labels = np.zeros(dims, dtype=np.uint8)
    owners = {}
    masks = {}
    for name, code in (("artery", ARTERY), ("vein", VEIN)):
        tree = trees.get(name)
        if tree is None:
            masks[name] = np.zeros(dims, dtype=bool)
            owners[name] = np.full(dims, -1, dtype=np.int32)
            continue
        mask, owner = rasterize_capsules(tree.segments, dims, spacing, origin)
        if np.any(mask & (labels != 0)):
            raise ValueError("artery and vein capsules overlap")
        labels[mask] = code
        masks[name] = mask
        owners[name] = owner

    present = [t for t in trees.values() if t is not None and t.root.radius > 0]
    heart = np.zeros(dims, dtype=bool)
    if present and any(m.any() for m in masks.values()):
        grid_pts = np.stack(np.meshgrid(*[origin[a] + np.arange(dims[a]) * spacing[a]
                                          for a in range(3)], indexing="ij"), -1)
        for center, radius in _heart_balls(present, heart_gap):
            heart |= np.sum((grid_pts - center) ** 2, axis=-1) <= radius ** 2
    lung = ~heart

    image = np.full(dims, HU_PARENCHYMA, dtype=np.float32)
    image[heart] = HU_TISSUE
    image[labels != 0] = HU_VESSEL

    levels = {}
    analytic = {}
    hints = {}
    for name in ("artery", "vein"):
        tree = trees.get(name)
        gen_levels = _expected_levels(tree) if tree is not None else []
        levels[name] = levels_from_owner(masks[name], owners[name], gen_levels, heart,
                                         spacing=spacing, origin=origin)
        if tree is not None:
            block = analytic_block(tree)
            block["expected_levels"] = gen_levels
            block["voxels"] = int(masks[name].sum())
            analytic[name] = block
            trunk = tree.root
            hint = trunk.start + 0.25 * (trunk.end - trunk.start)
            hints[name] = tuple(int(i) for i in np.floor((hint - np.asarray(origin)) / np.asarray(spacing) + 0.5))

    geom = dict(spacing=spacing, origin=origin)
    return PhantomCase(
        image=VoxelGrid(image, units="HU", **geom),
        truth=LabelMask(labels, **geom),
        levels_A=levels["artery"],
        levels_V=levels["vein"],
        lung_mask=LabelMask(lung.astype(np.uint8), **geom),
        heart_mask=LabelMask(heart.astype(np.uint8), **geom),
        analytic=analytic,
        trees=trees,
        root_hints=hints,
    )


# ---------------------------------------------------------------------------
# intensity transform and cohorts
# ---------------------------------------------------------------------------

def ctpa_to_ncct(case: PhantomCase, target: float = HU_NCCT_VESSEL) -> PhantomCase:
    """Bring contrast-enhanced vessels down to non-contrast intensity.

    Voxels inside the vessel truth or its 1-voxel shell that are brighter
    than 200 HU are mapped to ``target + 0.1 * (v - 300)`` clipped to
    ``target +/- 10``; everything else is left untouched.
    """
    image = np.array(case.image.voxels, copy=True)
    vessel = case.truth.foreground
    region = ndimage.binary_dilation(vessel, structure=ndimage.generate_binary_structure(3, 3))
    bright = region & (image > CONTRAST_THRESHOLD)
    image[bright] = np.clip(target + 0.1 * (image[bright] - HU_VESSEL), target - 10.0, target + 10.0)
    meta = dict(case.image.meta)
    meta["contrast"] = "non-contrast (synthetic)"
    return PhantomCase(case.image.with_voxels(image, meta=meta), case.truth, case.levels_A,
                       case.levels_V, case.lung_mask, case.heart_mask, case.analytic,
                       case.trees, case.root_hints)


@dataclass(frozen=True)
class CohortModel:
    """Planted linear model: index = b0 + b_vol*volume + b_sex*sex + b_age*age + noise.

    ``betas`` maps each abundance index to ``(b0, b_vol, b_sex, b_age)``.
    """

    betas: dict = field(default_factory=lambda: {
        "slpa": (2000.0, 2400.0, -918.86, -20.0),
        "slpv": (1800.0, 1900.0, -691.31, -18.0),
        "bcpa": (300.0, 340.0, -220.82, -3.0),
        "bcpv": (300.0, 320.0, -183.78, -3.0),
    })
    noise_sd: dict = field(default_factory=lambda: {"slpa": 0.0, "slpv": 0.0, "bcpa": 0.0, "bcpv": 0.0})
    lung_volume_male: tuple = (5.5, 0.8)  # liters, mean and sd
    lung_volume_female: tuple = (4.3, 0.7)
    age_range: tuple = (30.0, 80.0)
    seed: int = 0


def generate_cohort(n: int, model: CohortModel | None = None) -> list:
    from .stats import INDICES, SubjectRecord

    model = model or CohortModel()
    rng = np.random.default_rng(model.seed)
    records = []
    for k in range(n):
        sex = int(rng.random() < 0.5)
        age = float(rng.uniform(*model.age_range))
        mean, sd = model.lung_volume_male if sex else model.lung_volume_female
        volume = float(max(rng.normal(mean, sd), 0.5))
        values = {}
        for name in INDICES:
            b0, b_vol, b_sex, b_age = model.betas[name]
            noise = model.noise_sd.get(name, 0.0)
            eps = float(rng.normal(0.0, noise)) if noise > 0 else 0.0
            values[name] = b0 + b_vol * volume + b_sex * sex + b_age * age + eps
        records.append(SubjectRecord(id=f"S{k:05d}", sex=sex, age=age, lung_volume=volume, **values))
    return records


def spec_dict(spec: TreeSpec) -> dict:
    return asdict(spec)
