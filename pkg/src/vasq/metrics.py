"""
Overlap, boundary and abundance metrics, and the training losses.

Counting metrics work on boolean arrays or label masks and are computed
from integer voxel counts, so they are exact. Every empty-set convention
that fires is recorded in the optional ``flags`` dict passed by the caller.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .skeleton import (N_LEVELS, BranchLevels, build_tree, count_bifurcations, extract_skeleton,
                       skeleton_length, tree_length)
from .volume import (ARTERY, VEIN, LabelMask, ProbabilityMap, check_same_geometry,
                     to_metric_space)

CLASSES = {"A": ARTERY, "V": VEIN}

CONVENTIONS = {
    "dice_both_empty": 1.0,
    "sensitivity_empty_truth": 1.0,
    "mcs_all_empty": 0.0,
    "soft_dice_zero_denominator": "term skipped",
    "hd95_pooling": "max of the two directed 95th percentiles (linear interpolation)",
    "hd95_boundary": "face-connected boundary voxels",
    "dsc_intra": "dice outside the truth level-0 (in-heart) region",
    "loss_level_zones": "each voxel belongs to the level of its nearest truth voxel",
    "abundance_space": "linear resampling of each class indicator to 0.652 x 0.652 x 1.0 mm, kept at >= 0.5",
    "skeleton": "directional thinning with (26, 6) simple-point test",
}


def _flag(flags, key, message):
    if flags is not None:
        flags[key] = message


def _binary(x, cls=None) -> np.ndarray:
    if isinstance(x, LabelMask):
        return x.foreground if cls is None else x.select(cls)
    return np.asarray(x, dtype=bool)


def _pair(pred, truth, cls=None):
    if hasattr(pred, "spacing") and hasattr(truth, "spacing"):
        check_same_geometry(pred, truth)
    p, t = _binary(pred, cls), _binary(truth, cls)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p, t


def dice(pred, truth, cls=None, flags=None) -> float:
    """2|P & T| / (|P| + |T|); 1 when both are empty."""
    p, t = _pair(pred, truth, cls)
    inter = int(np.count_nonzero(p & t))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if total == 0:
        _flag(flags, "dice_both_empty", "both masks empty; dice = 1")
        return 1.0
    return 2 * inter / total


def sensitivity(pred, truth, cls=None, flags=None) -> float:
    """|P & T| / |T|; 1 when the truth is empty."""
    p, t = _pair(pred, truth, cls)
    n_true = int(np.count_nonzero(t))
    if n_true == 0:
        _flag(flags, "sensitivity_empty_truth", "empty truth; sensitivity = 1")
        return 1.0
    return int(np.count_nonzero(p & t)) / n_true


def mcs(pred: LabelMask, truth: LabelMask, flags=None) -> float:
    """Artery/vein misclassification score.

    (|P_A & T_V| + |P_V & T_A|) / (|P_A| + |P_V| + |T_A| + |T_V|)
    """
    if isinstance(pred, LabelMask) and isinstance(truth, LabelMask):
        check_same_geometry(pred, truth)
    pl, tl = np.asarray(getattr(pred, "labels", pred)), np.asarray(getattr(truth, "labels", truth))
    pa, pv, ta, tv = pl == ARTERY, pl == VEIN, tl == ARTERY, tl == VEIN
    cross = int(np.count_nonzero(pa & tv)) + int(np.count_nonzero(pv & ta))
    total = sum(int(np.count_nonzero(m)) for m in (pa, pv, ta, tv))
    if total == 0:
        _flag(flags, "mcs_all_empty", "all label sets empty; mcs = 0")
        return 0.0
    return cross / total


def face_boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                          border_value=0)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def hd95(pred, truth, spacing=None, cls=None) -> float:
    """Symmetric 95th-percentile boundary distance in mm."""
    p, t = _pair(pred, truth, cls)
    if spacing is None:
        spacing = getattr(truth, "spacing", (1.0, 1.0, 1.0))
    if not p.any() or not t.any():
        raise ValueError("hd95 is undefined for an empty mask (undefined distance)")
    bp, bt = face_boundary(p), face_boundary(t)
    spacing = tuple(float(s) for s in spacing)
    d_pt = np.percentile(_directed_distances(bp, bt, spacing), 95)
    d_tp = np.percentile(_directed_distances(bt, bp, spacing), 95)
    return float(max(d_pt, d_tp))


# ---------------------------------------------------------------------------
# abundance
# ---------------------------------------------------------------------------

def abundance_counts(mask: LabelMask, cls, root_hint=None) -> dict:
    """Skeleton voxel count, centerline length (mm) and bifurcation count of
    one class in metric space."""
    metric = to_metric_space(mask)
    skel = extract_skeleton(metric, cls)
    if not skel.voxels.any():
        return {"sl": 0, "length_mm": 0.0, "bc": 0}
    hint = None
    if root_hint is not None:
        phys = np.asarray(mask.origin) + np.asarray(root_hint) * np.asarray(mask.spacing)
        hint = tuple(int(i) for i in np.floor(0.5 + (phys - np.asarray(metric.origin))
                                             / np.asarray(metric.spacing)))
    tree = build_tree(skel, hint)
    return {"sl": skeleton_length(skel), "length_mm": tree_length(tree),
            "bc": count_bifurcations(tree)}


def abundance_ratios(pred: LabelMask, truth: LabelMask, truth_levels=None, root_hints=None) -> dict:
    """Detected skeleton-length and bifurcation proportions per class.

    Both masks are resampled to the metric lattice before thinning. Ratios
    above 1 (over-segmentation) are reported as they are. ``truth_levels``
    is accepted for interface symmetry; only the class masks are used.
    """
    check_same_geometry(pred, truth)
    root_hints = root_hints or {}
    out = {}
    for key, code in CLASSES.items():
        hint = root_hints.get(code, root_hints.get(key))
        t = abundance_counts(truth, code, hint)
        if t["sl"] == 0:
            raise ValueError(f"truth skeleton of class {key} is empty")
        p = abundance_counts(pred, code, hint)
        out[key] = {
            "sl_ratio": p["sl"] / t["sl"],
            "bc_ratio": p["bc"] / t["bc"] if t["bc"] else None,
            "sl_pred": p["sl"], "sl_truth": t["sl"],
            "bc_pred": p["bc"], "bc_truth": t["bc"],
            "length_mm_pred": p["length_mm"], "length_mm_truth": t["length_mm"],
        }
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _levels_by_class(levels) -> dict:
    if isinstance(levels, BranchLevels):
        return {ARTERY: levels}
    if isinstance(levels, dict):
        return {int(k) if not isinstance(k, str) else CLASSES[k[0].upper()]: v
                for k, v in levels.items() if v is not None}
    a, v = levels
    return {code: lv for code, lv in ((ARTERY, a), (VEIN, v)) if lv is not None}


def level_zones(levels: BranchLevels, spacing=None) -> np.ndarray:
    """Partition of the whole grid by the level of the nearest truth voxel.

    Returns int8 codes 0..3; -1 everywhere when the truth is empty.
    """
    codes = levels.codes()
    if not codes.any():
        return np.full(codes.shape, -1, dtype=np.int8)
    spacing = spacing or levels.spacing
    _, idx = ndimage.distance_transform_edt(codes == 0, sampling=spacing, return_indices=True)
    return (codes[tuple(idx)].astype(np.int8) - 1)


def level_weights(levels: BranchLevels, flags=None) -> list:
    """w^i = V(T^0) / V(dT^i) for i = 1..3 (None where dT^i is empty)."""
    v0 = int(np.count_nonzero(levels.delta(0)))
    weights = []
    for i in range(1, N_LEVELS):
        vi = int(np.count_nonzero(levels.delta(i)))
        if vi == 0:
            _flag(flags, f"empty_level_{i}", f"level {i} delta is empty; its term is skipped")
            weights.append(None)
        else:
            weights.append(v0 / vi)
    return weights


def weighted_dice_terms(pred: ProbabilityMap, levels, flags=None) -> dict:
    """Per-class soft-dice terms and weights behind the weighted dice loss."""
    out = {}
    for code, lv in _levels_by_class(levels).items():
        if lv.dims != pred.dims:
            raise ValueError(f"level masks {lv.dims} do not match prediction {pred.dims}")
        p = np.asarray(pred.channel(code), dtype=np.float64)
        zones = level_zones(lv, pred.spacing)
        terms = []
        for i in range(N_LEVELS):
            t = lv.delta(i)
            pz = np.where(zones == i, p, 0.0)
            denom = float(pz.sum()) + int(np.count_nonzero(t))
            if denom == 0:
                _flag(flags, f"zero_denominator_{code}_{i}", "soft-dice term with zero denominator")
                terms.append(None)
            else:
                terms.append(float(pz[t].sum()) / denom)
        out[code] = {"terms": terms, "weights": [1.0] + level_weights(lv, flags)}
    return out


def weighted_dice_loss(pred: ProbabilityMap, levels, flags=None) -> float:
    """-(term^0 + sum_i w^i term^i), summed over classes.

    ``levels`` is a BranchLevels, an (artery, vein) pair or a dict keyed by
    class code. Terms whose level delta or denominator is empty are skipped.
    """
    total = 0.0
    for block in weighted_dice_terms(pred, levels, flags).values():
        for term, weight in zip(block["terms"], block["weights"]):
            if term is not None and weight is not None:
                total -= weight * term
    return total


def overlap_loss(pred: ProbabilityMap, truth: LabelMask, flags=None) -> float:
    """Soft misclassification score between artery and vein channels."""
    check_same_geometry(pred, truth)
    pa = np.asarray(pred.prob_artery, dtype=np.float64)
    pv = np.asarray(pred.prob_vein, dtype=np.float64)
    ta, tv = truth.artery, truth.vein
    denom = float(pa.sum()) + float(pv.sum()) + int(np.count_nonzero(ta)) + int(np.count_nonzero(tv))
    if denom == 0:
        _flag(flags, "overlap_all_empty", "prediction and truth empty; overlap loss = 0")
        return 0.0
    return (float(pa[tv].sum()) + float(pv[ta].sum())) / denom


def total_loss(pred: ProbabilityMap, levels, truth: LabelMask, flags=None) -> float:
    return weighted_dice_loss(pred, levels, flags) + overlap_loss(pred, truth, flags)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    dsc_whole_A: float
    dsc_whole_V: float
    dsc_intra_A: float
    dsc_intra_V: float
    sen: float
    mcs: float
    hd95_mm: float | None
    bc_ratio_A: float | None = None
    bc_ratio_V: float | None = None
    sl_ratio_A: float | None = None
    sl_ratio_V: float | None = None
    loss_dsc: float = 0.0
    loss_overlap: float = 0.0
    loss_total: float = 0.0
    sen_A: float = 0.0
    sen_V: float = 0.0
    hd95_A_mm: float | None = None
    hd95_V_mm: float | None = None
    abundance: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _safe_hd95(p, t, spacing, flags, key):
    try:
        return hd95(p, t, spacing)
    except ValueError:
        _flag(flags, key, "empty mask; hd95 undefined")
        return None


def evaluate(pred: LabelMask, truth: LabelMask, levels_A: BranchLevels, levels_V: BranchLevels,
             prob: ProbabilityMap | None = None, with_abundance: bool = True,
             root_hints=None) -> MetricsReport:
    """Full metric suite of one case."""
    check_same_geometry(pred, truth)
    flags: dict = {}
    intra = {}
    for key, code, lv in (("A", ARTERY, levels_A), ("V", VEIN, levels_V)):
        outside = ~lv.masks[0]
        intra[key] = dice(pred.select(code) & outside, truth.select(code) & outside,
                          flags=flags)
    prob = prob if prob is not None else ProbabilityMap.from_labels(pred)
    levels = {ARTERY: levels_A, VEIN: levels_V}
    loss_dsc = weighted_dice_loss(prob, levels, flags)
    loss_overlap = overlap_loss(prob, truth, flags)
    sp = truth.spacing
    report = MetricsReport(
        dsc_whole_A=dice(pred, truth, ARTERY, flags),
        dsc_whole_V=dice(pred, truth, VEIN, flags),
        dsc_intra_A=intra["A"],
        dsc_intra_V=intra["V"],
        sen=sensitivity(pred.foreground, truth.foreground, flags=flags),
        mcs=mcs(pred, truth, flags),
        hd95_mm=_safe_hd95(pred.foreground, truth.foreground, sp, flags, "hd95_empty"),
        loss_dsc=loss_dsc,
        loss_overlap=loss_overlap,
        loss_total=loss_dsc + loss_overlap,
        sen_A=sensitivity(pred, truth, ARTERY, flags),
        sen_V=sensitivity(pred, truth, VEIN, flags),
        hd95_A_mm=_safe_hd95(pred.artery, truth.artery, sp, flags, "hd95_A_empty"),
        hd95_V_mm=_safe_hd95(pred.vein, truth.vein, sp, flags, "hd95_V_empty"),
    )
    if with_abundance:
        try:
            ab = abundance_ratios(pred, truth, root_hints=root_hints)
        except ValueError as exc:
            _flag(flags, "abundance_skipped", str(exc))
        else:
            report.abundance = ab
            report.bc_ratio_A, report.sl_ratio_A = ab["A"]["bc_ratio"], ab["A"]["sl_ratio"]
            report.bc_ratio_V, report.sl_ratio_V = ab["V"]["bc_ratio"], ab["V"]["sl_ratio"]
    report.conventions = {**CONVENTIONS, "fired": flags}
    return report
