"""
Multiscale Hessian vesselness, the vessel-consistency loss and
Poisson transmission noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import poisson

from .volume import VoxelGrid, check_same_geometry

MU_WATER = 0.0195  # 1/mm
PATH_LENGTH = 100.0  # mm
_FLAT = 1e-10  # structureness below this is numerical noise


@dataclass(frozen=True)
class VesselnessParams:
    scales: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    alpha: float = 0.5
    beta: float = 0.5
    c: float | None = None  # None: half the max Hessian Frobenius norm over all scales
    bright: bool = True

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or min(scales) <= 0:
            raise ValueError(f"scales must be non-empty and positive, got {scales}")
        object.__setattr__(self, "scales", scales)
        if self.alpha <= 0 or self.beta <= 0 or (self.c is not None and self.c <= 0):
            raise ValueError("alpha, beta and c must be positive")


@dataclass(frozen=True)
class NoiseParams:
    n0: float
    seed: int = 0

    def __post_init__(self):
        if not self.n0 > 0:
            raise ValueError(f"incident photon count must be positive, got {self.n0}")


def _kernels(sigma: float):
    """Sampled Gaussian, first- and second-derivative correlation weights.

    Moments are corrected after sampling so that the smoothing kernel sums
    to 1, the first-derivative kernel reproduces d/dx of a linear ramp and
    the second-derivative kernel annihilates constants and reproduces the
    curvature of a parabola exactly, however small sigma is in voxels.
    """
    radius = max(int(np.ceil(4.0 * sigma)), 2)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    k0 = g / g.sum()
    k1 = t * g
    k1 /= np.sum(t * k1)
    k2 = (t ** 2 / sigma ** 4 - 1.0 / sigma ** 2) * g
    k2 -= k0 * k2.sum()
    k2 *= 2.0 / np.sum(t ** 2 * k2)
    return k0, k1, k2


def hessian_components(values: np.ndarray, sigma: float, spacing) -> dict:
    """Scale-normalised Gaussian-derivative Hessian, keyed by axis pair."""
    values = np.asarray(values, dtype=np.float64)
    # derivatives ignore offsets; removing one makes constant input exactly flat
    values = values - values.flat[0]
    kernels = [_kernels(sigma / s) for s in spacing]
    out = {}
    for a in range(3):
        for b in range(a, 3):
            orders = [0, 0, 0]
            orders[a] += 1
            orders[b] += 1
            field = values
            for axis in range(3):
                field = ndimage.correlate1d(field, kernels[axis][orders[axis]], axis=axis,
                                            mode="nearest")
            out[(a, b)] = field * (sigma ** 2 / (spacing[a] * spacing[b]))
    return out


def _eigvals_sorted(h: dict, chunk: int = 1 << 20) -> np.ndarray:
    shape = h[(0, 0)].shape
    n = int(np.prod(shape))
    flat = {key: value.reshape(-1) for key, value in h.items()}
    out = np.empty((n, 3))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        m = np.empty((stop - start, 3, 3))
        for (a, b), value in flat.items():
            m[:, a, b] = value[start:stop]
            m[:, b, a] = value[start:stop]
        ev = np.linalg.eigvalsh(m)
        order = np.argsort(np.abs(ev), axis=1, kind="stable")
        out[start:stop] = np.take_along_axis(ev, order, axis=1)
    return out.reshape(shape + (3,))


def hessian_eigenvalues(grid: VoxelGrid, sigma: float):
    """Eigenvalues of the sigma-scale Hessian, sorted |l1| <= |l2| <= |l3|.

    ``sigma`` is in mm and must be at least half the coarsest spacing.
    Returns three arrays shaped like the grid.
    """
    if sigma < max(grid.spacing) / 2.0 - 1e-12:
        raise ValueError(f"sigma {sigma} mm is below half the voxel spacing {grid.spacing}")
    ev = _eigvals_sorted(hessian_components(grid.voxels, sigma, grid.spacing))
    return ev[..., 0], ev[..., 1], ev[..., 2]


def _shape_factors(grid: VoxelGrid, sigma: float, params: VesselnessParams):
    """Eigenvalue-ratio part of the response and the structureness at one scale."""
    ev = _eigvals_sorted(hessian_components(grid.voxels, sigma, grid.spacing))
    l1, l2, l3 = ev[..., 0], ev[..., 1], ev[..., 2]
    s = np.sqrt(l1 ** 2 + l2 ** 2 + l3 ** 2)
    a2, a3 = np.abs(l2), np.abs(l3)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.where(a3 > 0, a2 / a3, 0.0)
        rb = np.where(a2 * a3 > 0, np.abs(l1) / np.sqrt(a2 * a3), 0.0)
    shape = ((1.0 - np.exp(-ra ** 2 / (2 * params.alpha ** 2)))
             * np.exp(-rb ** 2 / (2 * params.beta ** 2)))
    wrong = (l2 > 0) | (l3 > 0) if params.bright else (l2 < 0) | (l3 < 0)
    shape[wrong | (a3 == 0) | (s <= _FLAT)] = 0.0
    return shape.astype(np.float32), s.astype(np.float32)


def frangi_vesselness(grid: VoxelGrid, params: VesselnessParams | None = None,
                      return_scales: bool = False):
    """Maximum Frangi response over ``params.scales``, in [0, 1].

    The structureness constant ``c`` defaults to half the largest Hessian
    Frobenius norm found in the volume at any scale, so responses of
    different scales are comparable and the arg-max scale tracks vessel
    radius. With ``return_scales`` the per-voxel arg-max scale (mm) is
    returned as well.
    """
    params = params or VesselnessParams()
    factors = [_shape_factors(grid, sigma, params) for sigma in params.scales]
    s_max = max(float(s.max()) for _, s in factors)
    best = np.zeros(grid.dims)
    best_scale = np.zeros(grid.dims)
    if s_max > _FLAT:
        c = params.c if params.c is not None else 0.5 * s_max
        for sigma, (shape, s) in zip(params.scales, factors):
            s = s.astype(np.float64)
            v = shape * (1.0 - np.exp(-s ** 2 / (2 * c ** 2)))
            better = v > best
            best[better] = v[better]
            best_scale[better] = sigma
    out = grid.with_voxels(np.clip(best, 0.0, 1.0), units="normalized")
    if return_scales:
        return out, best_scale
    return out


def enhance_stack(grid: VoxelGrid, params: VesselnessParams | None = None):
    """Return ``(grid, vesselness)``: the two input channels of a stage."""
    return grid, frangi_vesselness(grid, params)


def vessel_consistency_loss(recon: VoxelGrid, reference: VoxelGrid,
                            params: VesselnessParams | None = None) -> float:
    """Mean squared difference of the vesselness responses."""
    check_same_geometry(recon, reference)
    a = np.asarray(frangi_vesselness(recon, params).voxels)
    b = np.asarray(frangi_vesselness(reference, params).voxels)
    return float(np.mean((a - b) ** 2))


def voxel_uniforms(seed: int, start: int, count: int) -> np.ndarray:
    """Uniform variates for voxels ``start .. start+count`` in flat order.

    Philox is counter based, so any slab of the volume can be drawn on its
    own and still match a whole-volume draw.
    """
    block, skip = divmod(int(start), 4)
    bitgen = np.random.Philox(key=int(seed) & ((1 << 64) - 1))
    if block:
        bitgen = bitgen.advance(block)
    u = np.random.Generator(bitgen).random(count + skip)[skip:]
    # ppf(0) is -1 for a Poisson law; keep u strictly inside (0, 1)
    return np.clip(u, np.finfo(float).tiny, None)


def add_poisson_noise(grid: VoxelGrid, params: NoiseParams, slab: int = 1 << 20) -> VoxelGrid:
    """Simulate photon-count noise on an HU grid along a fixed-length ray.

    HU is converted to attenuation, the transmitted fraction is drawn as
    Poisson counts out of ``params.n0`` photons and converted back to HU.
    """
    if grid.units != "HU":
        raise ValueError("noise is simulated on HU data, not windowed data")
    if not params.n0 > 0:
        raise ValueError(f"incident photon count must be positive, got {params.n0}")
    hu = np.asarray(grid.voxels, dtype=np.float64).reshape(-1)
    out = np.empty_like(hu)
    n0 = float(params.n0)
    for start in range(0, hu.size, slab):
        stop = min(start + slab, hu.size)
        mu = MU_WATER * (1.0 + hu[start:stop] / 1000.0)
        expected = n0 * np.exp(-mu * PATH_LENGTH)
        counts = poisson.ppf(voxel_uniforms(params.seed, start, stop - start), expected)
        transmission = np.maximum(counts / n0, 1.0 / n0)
        out[start:stop] = 1000.0 * (-np.log(transmission) / (PATH_LENGTH * MU_WATER) - 1.0)
    meta = dict(grid.meta)
    meta["noise"] = {"n0": n0, "seed": int(params.seed), "model": "single-ray Poisson"}
    return grid.with_voxels(out.reshape(grid.dims), meta=meta)
