"""
Saliency-transmission cascade: stage inputs, prior transmission and a
classical (non-learned) stage segmenter.

Stage ``i`` sees the windowed CT, its vesselness and the previous stage's
probabilities after one pass of a fixed smoothing kernel. Stage 0 gets
all-zero priors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .enhance import VesselnessParams, frangi_vesselness
from .volume import (ARTERY, HU_WINDOW, VEIN, LabelMask, ProbabilityMap, VoxelGrid,
                     check_same_geometry)

log = logging.getLogger(__name__)

N_STAGES = 4
_CONN26 = ndimage.generate_binary_structure(3, 3)


@dataclass(frozen=True)
class TransmissionKernel:
    """Normalised 3x3x3 Gaussian shared by every stage and both classes."""

    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel sigma must be positive, got {self.sigma}")

    @property
    def weights(self) -> np.ndarray:
        t = np.arange(-1, 2, dtype=np.float64)
        d2 = t[:, None, None] ** 2 + t[None, :, None] ** 2 + t[None, None, :] ** 2
        w = np.exp(-0.5 * d2 / self.sigma ** 2)
        return w / w.sum()

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = ndimage.correlate(np.asarray(values, dtype=np.float64), self.weights, mode="nearest")
        return np.clip(out, 0.0, 1.0)


def transmit_prior(prev: ProbabilityMap, kernel: TransmissionKernel | None = None):
    """Smooth both class channels of the previous stage; returns (prior_A, prior_V)."""
    kernel = kernel or TransmissionKernel()
    return kernel.apply(prev.prob_artery), kernel.apply(prev.prob_vein)


@dataclass(frozen=True)
class StageInput:
    ct: VoxelGrid
    vesselness: VoxelGrid
    prior_A: np.ndarray
    prior_V: np.ndarray
    stage_index: int

    @property
    def channels(self) -> list:
        return [np.asarray(self.ct.voxels), np.asarray(self.vesselness.voxels),
                self.prior_A, self.prior_V]

    @property
    def spacing(self):
        return self.ct.spacing

    @property
    def origin(self):
        return self.ct.origin

    @property
    def dims(self):
        return self.ct.dims


def assemble_input(ct: VoxelGrid, vesselness: VoxelGrid, prior_A, prior_V, stage: int) -> StageInput:
    """Stack the four stage channels; stage 0 always gets zero priors."""
    if not 0 <= stage < N_STAGES:
        raise ValueError(f"stage index must be in 0..{N_STAGES - 1}, got {stage}")
    check_same_geometry(ct, vesselness)
    priors = []
    for name, prior in (("prior_A", prior_A), ("prior_V", prior_V)):
        if prior is None or stage == 0:
            priors.append(np.zeros(ct.dims))
            continue
        if isinstance(prior, (VoxelGrid, ProbabilityMap)):
            check_same_geometry(ct, prior)
            prior = prior.voxels
        prior = np.asarray(prior, dtype=np.float64)
        if prior.shape != ct.dims:
            raise ValueError(f"{name} shape {prior.shape} does not match CT {ct.dims}")
        priors.append(prior)
    return StageInput(ct, vesselness, priors[0], priors[1], stage)


class StageSegmenter(Protocol):
    def __call__(self, stage_input: StageInput) -> ProbabilityMap: ...


@dataclass
class CascadeResult:
    final: ProbabilityMap
    stages: list
    flags: dict = field(default_factory=dict)


def _as_probability(out, stage_input: StageInput, stage: int) -> ProbabilityMap:
    if isinstance(out, ProbabilityMap):
        pm = out
    else:
        a, v = out
        pm = ProbabilityMap(np.asarray(a, dtype=np.float64), np.asarray(v, dtype=np.float64),
                            spacing=stage_input.spacing, origin=stage_input.origin)
    check_same_geometry(stage_input.ct, pm)
    return pm


def run_cascade(ct: VoxelGrid, segmenters: Sequence, kernel: TransmissionKernel | None = None,
                vesselness: VoxelGrid | None = None,
                vesselness_params: VesselnessParams | None = None) -> CascadeResult:
    """Run the four stages in order and keep every stage output for audit."""
    if len(segmenters) != N_STAGES:
        raise ValueError(f"expected {N_STAGES} segmenters, got {len(segmenters)}")
    if ct.units == "HU":
        raise ValueError("the cascade expects windowed CT, not HU")
    kernel = kernel or TransmissionKernel()
    if vesselness is None:
        vesselness = frangi_vesselness(ct, vesselness_params)
    stages = []
    flags = {}
    prev = None
    for i, segment in enumerate(segmenters):
        prior_A, prior_V = (None, None) if prev is None else transmit_prior(prev, kernel)
        stage_input = assemble_input(ct, vesselness, prior_A, prior_V, i)
        try:
            prev = _as_probability(segment(stage_input), stage_input, i)
        except ValueError as exc:
            raise ValueError(f"stage {i} produced an invalid probability map: {exc}") from exc
        if prev.meta.get("flags"):
            flags[f"stage_{i}"] = prev.meta["flags"]
        stages.append(prev)
    return CascadeResult(stages[-1], stages, flags)


def labels_from_probability(pm: ProbabilityMap, threshold: float = 0.5) -> LabelMask:
    """Hard labels: the larger class channel where it reaches ``threshold``."""
    a, v = np.asarray(pm.prob_artery), np.asarray(pm.prob_vein)
    labels = np.zeros(pm.dims, dtype=np.uint8)
    labels[(a >= threshold) & (a >= v)] = ARTERY
    labels[(v >= threshold) & (v > a)] = VEIN
    return LabelMask(labels, spacing=pm.spacing, origin=pm.origin)


# ---------------------------------------------------------------------------
# classical stage backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CascadeConfig:
    thresholds: tuple = (0.30, 0.20, 0.12, 0.08)
    gamma: float = 0.05
    kernel_sigma: float = 1.0
    band_k: float = 3.0  # robust standard deviations of the seed intensities
    band_margin_hu: float = 180.0
    window: tuple = HU_WINDOW
    geodesic_mm: float | None = None  # None: unlimited growth within the band
    gated: tuple = (False, True, True, True)  # stage 0 is never gated
    seeds: dict = field(default_factory=dict)  # class code -> cardinal voxel index

    def __post_init__(self):
        if len(self.thresholds) != N_STAGES or len(self.gated) != N_STAGES:
            raise ValueError(f"thresholds and gated need {N_STAGES} entries")
        if not all(0 < t <= 1 for t in self.thresholds):
            raise ValueError(f"thresholds must lie in (0, 1], got {self.thresholds}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.band_k < 0 or self.band_margin_hu < 0:
            raise ValueError("band parameters must be non-negative")
        seeds = {}
        for key, voxel in dict(self.seeds).items():
            code = {"artery": ARTERY, "vein": VEIN, "a": ARTERY, "v": VEIN}.get(str(key).lower(), key)
            seeds[int(code)] = tuple(int(c) for c in voxel)
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "gated", tuple(bool(g) for g in self.gated))

    @property
    def kernel(self) -> TransmissionKernel:
        return TransmissionKernel(self.kernel_sigma)

    def without_gate(self, stage: int) -> "CascadeConfig":
        gated = list(self.gated)
        gated[stage] = False
        return replace(self, gated=tuple(gated))

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "gamma": self.gamma,
                "kernel_sigma": self.kernel_sigma, "band_k": self.band_k,
                "band_margin_hu": self.band_margin_hu, "window": list(self.window),
                "geodesic_mm": self.geodesic_mm, "gated": list(self.gated),
                "seeds": {str(k): list(v) for k, v in sorted(self.seeds.items())}}

    @classmethod
    def from_dict(cls, data: dict) -> "CascadeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown cascade config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("thresholds", "window", "gated"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _band(ct: np.ndarray, seeds: np.ndarray, config: CascadeConfig):
    """Intensity band of the seeds: median +/- (k robust sd + margin)."""
    values = ct[seeds]
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    width = config.band_k * 1.4826 * mad + config.band_margin_hu / (config.window[1] - config.window[0])
    return med - width, med + width


def _grow(seeds: np.ndarray, allowed: np.ndarray, spacing, geodesic_mm) -> np.ndarray:
    start = seeds & allowed
    if geodesic_mm is None:
        labels, _ = ndimage.label(allowed, structure=_CONN26)
        keep = np.unique(labels[start])
        return np.isin(labels, keep[keep > 0])
    steps = max(int(np.ceil(geodesic_mm / min(spacing))), 0)
    if steps == 0:
        return start
    return ndimage.binary_dilation(start, structure=_CONN26, iterations=steps, mask=allowed)


def _geodesic_split(component: np.ndarray, seed_a, seed_v) -> np.ndarray:
    """Within one component, True where the artery seed is geodesically closer."""
    front_a = np.zeros_like(component)
    front_v = np.zeros_like(component)
    front_a[seed_a] = True
    front_v[seed_v] = True
    owner = np.zeros(component.shape, dtype=np.int8)
    owner[front_a] = 1
    owner[front_v & ~front_a] = 2
    while True:
        grow_a = ndimage.binary_dilation(owner == 1, _CONN26) & component & (owner == 0)
        grow_v = ndimage.binary_dilation(owner == 2, _CONN26) & component & (owner == 0)
        if not grow_a.any() and not grow_v.any():
            break
        owner[grow_a] = 1
        owner[grow_v & ~grow_a] = 2
    return owner == 1


def _nearest_in(region: np.ndarray, voxel, radius: int = 3):
    """Closest region voxel to ``voxel`` within ``radius`` voxels, or None."""
    lo = [max(c - radius, 0) for c in voxel]
    hi = [min(c + radius + 1, n) for c, n in zip(voxel, region.shape)]
    window = region[tuple(slice(a, b) for a, b in zip(lo, hi))]
    pts = np.argwhere(window)
    if not len(pts):
        return None
    pts = pts + np.asarray(lo)
    k = int(np.argmin(np.sum((pts - np.asarray(voxel)) ** 2, axis=1)))
    return tuple(int(c) for c in pts[k])


def split_classes(region: np.ndarray, seeds: dict, prior_A=None, prior_V=None, flags=None):
    """Assign connected components of ``region`` to artery or vein.

    A component holding one cardinal seed takes that class; one holding
    both is split by geodesic distance to the two seeds. Remaining
    components follow the larger transmitted prior mass, then the nearest
    labelled voxel. Returns (artery, vein) boolean arrays.
    """
    flags = flags if flags is not None else {}
    labels, n = ndimage.label(region, structure=_CONN26)
    artery = np.zeros(region.shape, dtype=bool)
    vein = np.zeros(region.shape, dtype=bool)
    anchors = {code: _nearest_in(region, voxel) for code, voxel in seeds.items()}
    seeded = {}
    for code, anchor in anchors.items():
        if anchor is None:
            flags[f"seed_{code}_missed"] = "cardinal seed not inside the grown region"
            continue
        seeded.setdefault(int(labels[anchor]), []).append(code)
    pending = []
    for comp in range(1, n + 1):
        codes = seeded.get(comp, [])
        if len(codes) == 1:
            (artery if codes[0] == ARTERY else vein)[labels == comp] = True
        elif len(codes) == 2:
            mask = labels == comp
            near_a = _geodesic_split(mask, anchors[ARTERY], anchors[VEIN])
            artery |= mask & near_a
            vein |= mask & ~near_a
            flags["shared_component"] = "component holding both seeds split geodesically"
        else:
            pending.append(comp)
    if not pending:
        return artery, vein
    objects = ndimage.find_objects(labels)
    unresolved = []
    for comp in pending:
        box = objects[comp - 1]
        mask = labels[box] == comp
        mass_a = float(prior_A[box][mask].sum()) if prior_A is not None else 0.0
        mass_v = float(prior_V[box][mask].sum()) if prior_V is not None else 0.0
        if mass_a > mass_v:
            artery[box] |= mask
        elif mass_v > mass_a:
            vein[box] |= mask
        else:
            unresolved.append(comp)
    if unresolved:
        labelled = artery | vein
        if labelled.any():
            _, idx = ndimage.distance_transform_edt(~labelled, return_indices=True)
            nearest_a = artery[tuple(idx)]
            for comp in unresolved:
                mask = labels == comp
                if np.count_nonzero(nearest_a[mask]) * 2 >= np.count_nonzero(mask):
                    artery |= mask
                else:
                    vein |= mask
        else:
            for comp in unresolved:
                artery |= labels == comp
            flags["unassigned_components"] = "no class evidence; components labelled artery"
    return artery, vein


class ClassicalStageSegmenter:
    """Vesselness seeds grown within an intensity band, gated by the prior.

    ``stage`` fixes which threshold the segmenter uses; when omitted the
    input's stage index decides. Gating always follows the input's stage
    index, so stage 0 is never gated.
    """

    def __init__(self, config: CascadeConfig | None = None, stage: int | None = None):
        self.config = config or CascadeConfig()
        self.stage = stage

    def accepted(self, x: StageInput, flags: dict | None = None):
        """Hard artery and vein masks of this stage."""
        cfg = self.config
        flags = flags if flags is not None else {}
        tau = cfg.thresholds[self.stage if self.stage is not None else x.stage_index]
        ct = np.asarray(x.ct.voxels, dtype=np.float64)
        v = np.asarray(x.vesselness.voxels)
        if x.stage_index > 0 and cfg.gated[x.stage_index]:
            gate = np.maximum(x.prior_A, x.prior_V) >= cfg.gamma
        else:
            gate = np.ones(x.dims, dtype=bool)
        seeds = (v >= tau) & gate
        if not seeds.any():
            flags["no_seeds"] = f"no vesselness >= {tau} inside the gate"
            empty = np.zeros(x.dims, dtype=bool)
            return empty, empty
        lo, hi = _band(ct, seeds, cfg)
        allowed = (ct >= lo) & (ct <= hi) & gate
        region = _grow(seeds, allowed, x.spacing, cfg.geodesic_mm)
        prior_A = x.prior_A if x.stage_index > 0 else None
        prior_V = x.prior_V if x.stage_index > 0 else None
        return split_classes(region, cfg.seeds, prior_A, prior_V, flags)

    def __call__(self, x: StageInput) -> ProbabilityMap:
        flags: dict = {}
        artery, vein = self.accepted(x, flags)
        kernel = self.config.kernel
        prob = []
        for mask in (artery, vein):
            m = mask.astype(np.float64)
            prob.append(np.maximum(m, kernel.apply(m)))
        if flags:
            log.info("stage %d: %s", x.stage_index, flags)
        return ProbabilityMap(prob[0], prob[1], spacing=x.spacing, origin=x.origin,
                              meta={"flags": flags, "stage": x.stage_index})


def classical_segmenters(config: CascadeConfig | None = None) -> list:
    config = config or CascadeConfig()
    return [ClassicalStageSegmenter(config, stage=i) for i in range(N_STAGES)]


def classical_stage_segmenter(stage_input: StageInput, config: CascadeConfig | None = None) -> ProbabilityMap:
    return ClassicalStageSegmenter(config)(stage_input)
