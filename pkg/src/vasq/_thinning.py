"""
Directional 3D curve thinning with an explicit (26, 6) simple-point test.

Border voxels are peeled in six directional sub-iterations. Candidates of
a sub-iteration are collected in parallel and then re-checked one by one
before deletion, so topology is preserved at every single deletion. The
re-check visits the eight parity subfields in turn. Voxels of one subfield
are never 26-adjacent, so a deletion cannot cascade along the scan axis;
plain raster order ate two-voxel-thick ribbons from the tip in one sweep.
Voxels with exactly one 26-neighbour are curve ends and are never removed.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# the 27 positions of a 3x3x3 cube, index = 9*(dx+1) + 3*(dy+1) + (dz+1)
_CUBE = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])
_CENTRE = 13


def _adjacency(kind: str) -> np.ndarray:
    """Neighbour table within the cube, padded with -1."""
    table = np.full((27, 26), -1, dtype=np.int64)
    for a in range(27):
        row = []
        for b in range(27):
            if a == b or b == _CENTRE or a == _CENTRE:
                continue
            d = np.abs(_CUBE[a] - _CUBE[b])
            if d.max() != 1:
                continue
            if kind == "6" and d.sum() != 1:
                continue
            row.append(b)
        table[a, :len(row)] = row
    return table


_ADJ26 = _adjacency("26")
_ADJ6 = _adjacency("6")
_N18 = np.array([np.abs(c).sum() <= 2 for c in _CUBE]) & (np.arange(27) != _CENTRE)
_FACE = np.array([np.abs(c).sum() == 1 for c in _CUBE])
_DIRECTIONS = np.array([(0, -1, 0), (0, 1, 0), (1, 0, 0), (-1, 0, 0), (0, 0, 1), (0, 0, -1)])


@njit(cache=True)
def _components(cube, want, allowed, adj, seeds_only):
    """Count components of cells with ``cube == want`` inside ``allowed``.

    With a non-empty ``seeds_only`` mask only components containing at
    least one seed cell are counted.
    """
    seen = np.zeros(27, dtype=np.bool_)
    stack = np.empty(27, dtype=np.int64)
    count = 0
    for start in range(27):
        if seen[start] or not allowed[start] or cube[start] != want:
            continue
        seen[start] = True
        top = 0
        stack[0] = start
        hit = not seeds_only.any() or seeds_only[start]
        while top >= 0:
            cell = stack[top]
            top -= 1
            for k in range(26):
                nb = adj[cell, k]
                if nb < 0:
                    break
                if not seen[nb] and allowed[nb] and cube[nb] == want:
                    seen[nb] = True
                    if seeds_only[nb]:
                        hit = True
                    top += 1
                    stack[top] = nb
        if hit:
            count += 1
    return count


@njit(cache=True)
def _gather(img, x, y, z, cube):
    n = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                v = img[x + i - 1, y + j - 1, z + k - 1]
                cube[9 * i + 3 * j + k] = v
                n += v
    return n - cube[13]


@njit(cache=True)
def _deletable(img, x, y, z, cube, adj26, adj6, n18, face, not_centre, no_seeds):
    neighbours = _gather(img, x, y, z, cube)
    if neighbours <= 1:
        return False
    if _components(cube, 1, not_centre, adj26, no_seeds) != 1:
        return False
    return _components(cube, 0, n18, adj6, face) == 1


@njit(cache=True)
def _thin(img, adj26, adj6, n18, face, directions):
    nx, ny, nz = img.shape
    cube = np.zeros(27, dtype=img.dtype)
    not_centre = np.ones(27, dtype=np.bool_)
    not_centre[13] = False
    no_seeds = np.zeros(27, dtype=np.bool_)
    cand = np.empty((img.size // 2 + 1, 3), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
            n = 0
            for x in range(1, nx - 1):
                for y in range(1, ny - 1):
                    for z in range(1, nz - 1):
                        if img[x, y, z] == 0 or img[x + dx, y + dy, z + dz] != 0:
                            continue
                        if _deletable(img, x, y, z, cube, adj26, adj6, n18, face,
                                      not_centre, no_seeds):
                            if n == cand.shape[0]:
                                grown = np.empty((2 * n, 3), dtype=np.int64)
                                grown[:n] = cand
                                cand = grown
                            cand[n, 0] = x
                            cand[n, 1] = y
                            cand[n, 2] = z
                            n += 1
            for field in range(8):
                for i in range(n):
                    x, y, z = cand[i, 0], cand[i, 1], cand[i, 2]
                    if 4 * (x & 1) + 2 * (y & 1) + (z & 1) != field:
                        continue
                    if _deletable(img, x, y, z, cube, adj26, adj6, n18, face,
                                  not_centre, no_seeds):
                        img[x, y, z] = 0
                        changed = True
    return img


def thin(binary: np.ndarray) -> np.ndarray:
    """Curve skeleton of a 3D binary array (26-connected foreground)."""
    binary = np.asarray(binary, dtype=bool)
    out = np.zeros(binary.shape, dtype=bool)
    if not binary.any():
        return out
    # thinning the bounding box keeps subfield parity tied to the object,
    # so translated copies thin identically
    box = tuple(slice(int(i.min()), int(i.max()) + 1) for i in np.nonzero(binary))
    img = np.pad(binary[box], 1).astype(np.uint8)
    _thin(img, _ADJ26, _ADJ6, _N18, _FACE, _DIRECTIONS)
    out[box] = img[1:-1, 1:-1, 1:-1].astype(bool)
    return out


def is_simple(cube: np.ndarray) -> bool:
    """Simple-point test for the centre of a 3x3x3 boolean cube."""
    flat = np.asarray(cube, dtype=np.uint8).reshape(27)
    not_centre = np.ones(27, dtype=bool)
    not_centre[_CENTRE] = False
    return (_components(flat, 1, not_centre, _ADJ26, np.zeros(27, dtype=bool)) == 1
            and _components(flat, 0, _N18, _ADJ6, _FACE) == 1)
