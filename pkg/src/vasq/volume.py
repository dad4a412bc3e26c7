"""
Voxel grids, intensity windowing, resampling and sub-volume tiling.

All arrays are indexed ``[x, y, z]``. ``origin`` is the physical position
(mm) of the centre of voxel ``(0, 0, 0)``, as in the MetaImage ``Offset``
field. Grids are treated as immutable: constructors copy nothing but mark
the arrays read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HU_WINDOW = (-1000.0, 600.0)
STANDARD_DIMS = (512, 512, 512)
STANDARD_SPACING = (334.0 / 512.0, 334.0 / 512.0, 1.0)
METRIC_SPACING = (0.652, 0.652, 1.0)
TILE_DIMS = (192, 192, 128)

BACKGROUND, ARTERY, VEIN = 0, 1, 2


class GeometryError(ValueError):
    """Raised when grids that must share a lattice do not."""


def _triple(values, name: str) -> tuple[float, float, float]:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(values)}")
    return values


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.flags.writeable:
        array = array.view()
        array.flags.writeable = False
    return array


@dataclass(frozen=True)
class VoxelGrid:
    """Scalar 3D image with anisotropic spacing.

    ``units`` is ``"HU"`` for raw CT values or ``"normalized"`` for windowed
    data in [0, 1]. ``meta`` carries provenance flags (interpolation,
    cropping, fallbacks) that downstream reports echo.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] | None = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    units: str = "HU"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3:
            raise GeometryError(f"expected a 3D array, got {voxels.ndim}D")
        if min(voxels.shape) < 1:
            raise GeometryError(f"all dims must be >= 1, got {voxels.shape}")
        if self.spacing is not None:
            spacing = _triple(self.spacing, "spacing")
            if min(spacing) <= 0:
                raise GeometryError(f"spacing must be positive, got {spacing}")
            object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        object.__setattr__(self, "voxels", _readonly(voxels))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, **changes) -> "VoxelGrid":
        """Same geometry, new values."""
        fields = dict(spacing=self.spacing, origin=self.origin, units=self.units,
                      meta=dict(self.meta))
        fields.update(changes)
        return VoxelGrid(voxels, **fields)


@dataclass(frozen=True)
class LabelMask:
    """Per-voxel class codes: 0 background, 1 artery, 2 vein.

    Binary masks (lung, heart, single-class vessels) use the same type with
    codes {0, 1}.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise GeometryError(f"expected a 3D array, got {labels.ndim}D")
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        elif labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 2):
                raise ValueError("label codes must lie in {0, 1, 2}")
            labels = labels.astype(np.uint8)
        if labels.size and labels.max() > 2:
            raise ValueError("label codes must lie in {0, 1, 2}")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GeometryError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        object.__setattr__(self, "labels", _readonly(labels))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    def select(self, code: int) -> np.ndarray:
        return self.labels == code

    @property
    def artery(self) -> np.ndarray:
        return self.labels == ARTERY

    @property
    def vein(self) -> np.ndarray:
        return self.labels == VEIN

    @property
    def foreground(self) -> np.ndarray:
        return self.labels != BACKGROUND

    def with_labels(self, labels: np.ndarray) -> "LabelMask":
        return LabelMask(labels, spacing=self.spacing, origin=self.origin, meta=dict(self.meta))


@dataclass(frozen=True)
class ProbabilityMap:
    """Independent per-class soft scores, each channel in [0, 1]."""

    prob_artery: np.ndarray
    prob_vein: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.asarray(self.prob_artery, dtype=np.float64)
        v = np.asarray(self.prob_vein, dtype=np.float64)
        if a.shape != v.shape or a.ndim != 3:
            raise GeometryError(f"channel shapes differ or are not 3D: {a.shape} vs {v.shape}")
        for name, channel in (("artery", a), ("vein", v)):
            if channel.size and not (np.all(channel >= 0.0) and np.all(channel <= 1.0)):
                raise ValueError(f"{name} probabilities must lie in [0, 1]")
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        object.__setattr__(self, "prob_artery", _readonly(a))
        object.__setattr__(self, "prob_vein", _readonly(v))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.prob_artery.shape)

    @classmethod
    def zeros_like(cls, geometry) -> "ProbabilityMap":
        zeros = np.zeros(geometry.dims)
        return cls(zeros, zeros, spacing=geometry.spacing, origin=geometry.origin)

    @classmethod
    def from_labels(cls, mask: LabelMask) -> "ProbabilityMap":
        return cls(mask.artery.astype(float), mask.vein.astype(float),
                   spacing=mask.spacing, origin=mask.origin)

    def channel(self, code: int) -> np.ndarray:
        if code == ARTERY:
            return self.prob_artery
        if code == VEIN:
            return self.prob_vein
        raise ValueError(f"no probability channel for class {code}")


def describe_geometry(obj) -> str:
    return f"dims={obj.dims} spacing={obj.spacing} origin={obj.origin}"


def check_same_geometry(*objects, atol: float = 1e-9) -> None:
    """Raise GeometryError unless all objects share dims, spacing and origin."""
    first = objects[0]
    for other in objects[1:]:
        same = (first.dims == other.dims
                and first.spacing is not None and other.spacing is not None
                and np.allclose(first.spacing, other.spacing, rtol=0, atol=atol)
                and np.allclose(first.origin, other.origin, rtol=0, atol=atol))
        if not same:
            raise GeometryError(
                f"geometry mismatch: {describe_geometry(first)} vs {describe_geometry(other)}")


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def window_hu(grid: VoxelGrid, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> VoxelGrid:
    """Clamp HU values to ``[lo, hi]`` and map linearly onto [0, 1]."""
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got [{lo}, {hi}]")
    values = np.asarray(grid.voxels, dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite voxel value {values[index]} at index {index}")
    out = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return grid.with_voxels(out, units="normalized")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _source_index(n_src, o_src, s_src, n_dst, o_dst, s_dst) -> np.ndarray:
    """Continuous source index of every target lattice point along one axis."""
    positions = o_dst + np.arange(n_dst) * s_dst
    index = (positions - o_src) / s_src
    nearest = np.rint(index)
    snap = np.abs(index - nearest) < 1e-9
    index[snap] = nearest[snap]
    return index


def _centered_origin(geometry, spacing, dims) -> tuple[float, float, float]:
    center = np.asarray(geometry.origin) + (np.asarray(geometry.dims) - 1) / 2.0 * np.asarray(geometry.spacing)
    return tuple(center - (np.asarray(dims) - 1) / 2.0 * np.asarray(spacing))


def _lerp_axis(array: np.ndarray, index: np.ndarray, axis: int) -> np.ndarray:
    n = array.shape[axis]
    index = np.clip(index, 0.0, n - 1)
    i0 = np.floor(index).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (index - i0).astype(array.dtype)
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    lower = np.take(array, i0, axis=axis)
    upper = np.take(array, i1, axis=axis)
    return lower + w * (upper - lower)  # exact on constant runs


def _nearest_axis(array: np.ndarray, index: np.ndarray, axis: int) -> np.ndarray:
    n = array.shape[axis]
    i = np.clip(np.floor(index + 0.5), 0, n - 1).astype(np.intp)
    return np.take(array, i, axis=axis)


def _work_dtype(array: np.ndarray):
    return np.float64 if array.dtype == np.float64 else np.float32


def _resample_array(array, src_geom, spacing, dims, origin, nearest=False):
    order = sorted(range(3), key=lambda ax: dims[ax] / array.shape[ax])
    flags = []
    out = array if nearest else array.astype(_work_dtype(array), copy=False)
    for axis in order:
        index = _source_index(array.shape[axis], src_geom.origin[axis], src_geom.spacing[axis],
                              dims[axis], origin[axis], spacing[axis])
        if nearest or array.shape[axis] == 1:
            if not nearest:
                flags.append(axis)
            out = _nearest_axis(out, index, axis)
        else:
            out = _lerp_axis(out, index, axis)
    return out, flags


def resample_trilinear(grid: VoxelGrid, target_spacing: Sequence[float],
                       target_dims: Sequence[int],
                       target_origin: Sequence[float] | None = None) -> VoxelGrid:
    """Sample ``grid`` on a new lattice by trilinear interpolation in mm.

    The target lattice shares the physical centre of the source unless
    ``target_origin`` is given. Samples beyond the source extent take the
    nearest boundary value. Axes with a single source voxel are sampled by
    nearest neighbour and listed in ``meta["nearest_axes"]``.
    """
    if grid.spacing is None:
        raise GeometryError("grid has no spacing; cannot place it in physical space")
    spacing = _triple(target_spacing, "target_spacing")
    dims = tuple(int(n) for n in target_dims)
    if min(spacing) <= 0 or min(dims) < 1 or len(dims) != 3:
        raise GeometryError(f"invalid target lattice spacing={spacing} dims={dims}")
    origin = _triple(target_origin, "target_origin") if target_origin is not None \
        else _centered_origin(grid, spacing, dims)
    out, flags = _resample_array(np.asarray(grid.voxels), grid, spacing, dims, origin)
    meta = dict(grid.meta)
    meta["mapping"] = "interpolated"
    if flags:
        meta["nearest_axes"] = flags
    return VoxelGrid(out, spacing=spacing, origin=origin, units=grid.units, meta=meta)


def resample_labels_nearest(mask: LabelMask, target_spacing: Sequence[float],
                            target_dims: Sequence[int],
                            target_origin: Sequence[float] | None = None) -> LabelMask:
    """Nearest-neighbour label resampling in physical coordinates."""
    spacing = _triple(target_spacing, "target_spacing")
    dims = tuple(int(n) for n in target_dims)
    if min(spacing) <= 0 or min(dims) < 1:
        raise GeometryError(f"invalid target lattice spacing={spacing} dims={dims}")
    origin = _triple(target_origin, "target_origin") if target_origin is not None \
        else _centered_origin(mask, spacing, dims)
    out, _ = _resample_array(np.asarray(mask.labels), mask, spacing, dims, origin, nearest=True)
    return LabelMask(out, spacing=spacing, origin=origin, meta=dict(mask.meta))


def metric_lattice(geometry, spacing: Sequence[float] = METRIC_SPACING):
    """Dims covering the physical extent of ``geometry`` at ``spacing``."""
    extent = np.asarray(geometry.dims) * np.asarray(geometry.spacing)
    dims = np.maximum(1, np.rint(extent / np.asarray(spacing))).astype(int)
    return tuple(float(s) for s in spacing), tuple(int(n) for n in dims)


def resample_labels_linear(mask: LabelMask, target_spacing: Sequence[float],
                           target_dims: Sequence[int],
                           target_origin: Sequence[float] | None = None) -> LabelMask:
    """Label resampling by trilinear interpolation of each class indicator.

    A voxel takes the class whose interpolated indicator is largest,
    provided it reaches 0.5. Surfaces come out smoother than with nearest
    neighbour, which keeps thinning free of staircase spurs.
    """
    spacing = _triple(target_spacing, "target_spacing")
    dims = tuple(int(n) for n in target_dims)
    if min(spacing) <= 0 or min(dims) < 1:
        raise GeometryError(f"invalid target lattice spacing={spacing} dims={dims}")
    origin = _triple(target_origin, "target_origin") if target_origin is not None \
        else _centered_origin(mask, spacing, dims)
    fa, _ = _resample_array(mask.artery.astype(np.float32), mask, spacing, dims, origin)
    fv, _ = _resample_array(mask.vein.astype(np.float32), mask, spacing, dims, origin)
    out = np.zeros(dims, dtype=np.uint8)
    out[(fa >= 0.5) & (fa >= fv)] = ARTERY
    out[(fv >= 0.5) & (fv > fa)] = VEIN
    return LabelMask(out, spacing=spacing, origin=origin, meta=dict(mask.meta))


def to_metric_space(mask: LabelMask, spacing: Sequence[float] = METRIC_SPACING) -> LabelMask:
    """Resample a label mask onto the metric lattice covering the same extent."""
    spacing, dims = metric_lattice(mask, spacing)
    return resample_labels_linear(mask, spacing, dims)


def normalize_to_standard_space(grid: VoxelGrid, dims: Sequence[int] = STANDARD_DIMS,
                                spacing: Sequence[float] = STANDARD_SPACING) -> VoxelGrid:
    """Resample into the 334 x 334 x 512 mm standardized volume.

    The physical centre of the input maps to the centre of the output.
    Target voxels whose centres fall outside the input extent are filled
    with air (-1000 HU, or 0 for windowed data). Inputs wider than the
    standard volume are centre-cropped and flagged in ``meta``.
    """
    if grid.spacing is None:
        raise GeometryError("grid has no spacing metadata; cannot place it in physical space")
    spacing = _triple(spacing, "spacing")
    dims = tuple(int(n) for n in dims)
    origin = _centered_origin(grid, spacing, dims)
    fill = -1000.0 if grid.units == "HU" else 0.0
    source = np.asarray(grid.voxels)
    work = source.astype(_work_dtype(source), copy=False)

    # restrict to the block of target voxels inside the source extent
    block = []
    for axis in range(3):
        index = _source_index(source.shape[axis], grid.origin[axis], grid.spacing[axis],
                              dims[axis], origin[axis], spacing[axis])
        inside = np.flatnonzero((index >= -0.5) & (index <= source.shape[axis] - 0.5))
        block.append((int(inside[0]), int(inside[-1]) + 1) if inside.size else (0, 0))

    out = np.full(dims, fill, dtype=work.dtype)
    meta = dict(grid.meta)
    meta["mapping"] = "interpolated"
    extent = np.asarray(grid.dims) * np.asarray(grid.spacing)
    standard_extent = np.asarray(dims) * np.asarray(spacing)
    if np.any(extent > standard_extent + 1e-9):
        meta["cropped"] = True
    if all(hi > lo for lo, hi in block):
        sub_dims = tuple(hi - lo for lo, hi in block)
        sub_origin = tuple(origin[a] + block[a][0] * spacing[a] for a in range(3))
        values, flags = _resample_array(work, grid, spacing, sub_dims, sub_origin)
        if flags:
            meta["nearest_axes"] = flags
        out[block[0][0]:block[0][1], block[1][0]:block[1][1], block[2][0]:block[2][1]] = values
    return VoxelGrid(out, spacing=spacing, origin=origin, units=grid.units, meta=meta)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileSet:
    """Fixed-size sub-volumes of one source grid.

    ``tiles`` holds ``(offset, grid)`` pairs; edge tiles are padded with
    their edge values and ``padding`` records how many voxels per axis are
    padding. ``source`` keeps the source geometry needed by :func:`stitch`.
    """

    tile_dims: tuple[int, int, int]
    overlap: tuple[int, int, int]
    tiles: list
    padding: list
    source_dims: tuple[int, int, int]
    source_spacing: tuple[float, float, float] | None
    source_origin: tuple[float, float, float]
    units: str = "HU"


def _tile_starts(n: int, size: int, overlap: int) -> list[int]:
    if n <= size:
        return [0]
    stride = size - overlap
    count = int(np.ceil((n - overlap) / stride))
    return [k * stride for k in range(count)]


def tile(grid: VoxelGrid, overlap=32, tile_dims=TILE_DIMS) -> TileSet:
    """Cut ``grid`` into overlapping tiles of ``tile_dims`` voxels."""
    tile_dims = tuple(int(n) for n in tile_dims)
    overlap = (int(overlap),) * 3 if np.isscalar(overlap) else tuple(int(o) for o in overlap)
    for size, ov in zip(tile_dims, overlap):
        if not 0 <= ov < size:
            raise ValueError(f"overlap {ov} must be in [0, tile size {size})")
    source = np.asarray(grid.voxels)
    starts = [_tile_starts(n, size, ov) for n, size, ov in zip(source.shape, tile_dims, overlap)]
    tiles, padding = [], []
    spacing = grid.spacing or (1.0, 1.0, 1.0)
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                offset = (sx, sy, sz)
                stop = [min(o + size, n) for o, size, n in zip(offset, tile_dims, source.shape)]
                block = source[sx:stop[0], sy:stop[1], sz:stop[2]]
                pad = tuple(size - (hi - lo) for size, lo, hi in zip(tile_dims, offset, stop))
                if any(pad):
                    block = np.pad(block, [(0, p) for p in pad], mode="edge")
                else:
                    block = block.copy()
                origin = tuple(grid.origin[a] + offset[a] * spacing[a] for a in range(3))
                tiles.append((offset, VoxelGrid(block, spacing=grid.spacing, origin=origin,
                                                units=grid.units)))
                padding.append(pad)
    return TileSet(tile_dims, overlap, tiles, padding, grid.dims, grid.spacing, grid.origin,
                   grid.units)


def _owned_range(start: int, k: int, starts: list[int], n: int, overlap: int) -> tuple[int, int]:
    lo = 0 if k == 0 else start + overlap // 2
    hi = n if k == len(starts) - 1 else starts[k + 1] + overlap // 2
    return lo, hi


def stitch(tiles: TileSet) -> VoxelGrid:
    """Reassemble a grid from its tiles.

    Each tile contributes only its centred share of every overlap, so the
    result is a bit-exact copy of the source for scalar data.
    """
    n = tiles.source_dims
    starts = [_tile_starts(n[a], tiles.tile_dims[a], tiles.overlap[a]) for a in range(3)]
    dtype = np.asarray(tiles.tiles[0][1].voxels).dtype
    out = np.empty(n, dtype=dtype)
    for offset, grid in tiles.tiles:
        ranges = []
        for a in range(3):
            k = starts[a].index(offset[a])
            ranges.append(_owned_range(offset[a], k, starts[a], n[a], tiles.overlap[a]))
        src = tuple(slice(lo - offset[a], hi - offset[a]) for a, (lo, hi) in enumerate(ranges))
        dst = tuple(slice(lo, hi) for lo, hi in ranges)
        out[dst] = np.asarray(grid.voxels)[src]
    return VoxelGrid(out, spacing=tiles.source_spacing, origin=tiles.source_origin, units=tiles.units)
