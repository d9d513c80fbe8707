"""Inside/outside cell labelling on a regular grid over the domain.

Cells touching a cloud point (closed cells) are interfacial; a 6-connected
flood fill from a boundary cell marks the outside; everything left is inside.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .pointcloud import DOMAIN_HALF_WIDTH

log = logging.getLogger(__name__)


class Label(IntEnum):
    INTERFACIAL = 0
    OUTSIDE = 1
    INSIDE = 2


class NoOutsideSeed(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionMask:
    grid_origin: np.ndarray  # lower corner of cell (0, 0, 0)
    h: float
    dims: tuple
    labels: np.ndarray  # int8, shape dims

    def counts(self) -> dict:
        return {lab.name: int((self.labels == lab).sum()) for lab in Label}

    def centers(self, index=None) -> np.ndarray:
        if index is None:
            index = np.argwhere(np.ones(self.dims, dtype=bool))
        return self.grid_origin + (np.asarray(index) + 0.5) * self.h

    def all_centers(self) -> np.ndarray:
        return self.centers()

    @property
    def has_interior(self) -> bool:
        return bool((self.labels == Label.INSIDE).any())


def cells_of(mask: RegionMask, label: Label) -> np.ndarray:
    """Cell centres with the given label in lexicographic index order."""
    idx = np.argwhere(mask.labels == label)
    return mask.centers(idx).reshape(-1, 3)


def interfacial_cells(points, origin, h, dims) -> np.ndarray:
    """Boolean grid marking closed cells that contain at least one point."""
    dims = tuple(int(d) for d in dims)
    occ = np.zeros(dims, dtype=bool)
    if len(points) == 0:
        return occ
    rel = (np.asarray(points, dtype=np.float64) - origin) / h
    # a point on a shared face/edge/corner lies in the closure of every
    # adjacent cell: take floor and, where rel is integral, also rel - 1
    base = np.floor(rel).astype(np.int64)
    on_face = rel == np.floor(rel)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                shift = np.array([dx, dy, dz])
                use = np.all(~shift.astype(bool) | on_face, axis=1)
                idx = base[use] - shift
                ok = np.all((idx >= 0) & (idx < np.array(dims)), axis=1)
                idx = idx[ok]
                occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def flood_fill_labels(interfacial: np.ndarray) -> np.ndarray:
    """Label a grid given its interfacial cells: non-interfacial cells
    6-connected to the grid boundary are outside, the rest inside.

    Equivalent to a BFS seeded with every non-interfacial boundary cell;
    seeding them all keeps boundary pieces that interfacial cells cut apart
    from being mislabelled inside.
    """
    from scipy import ndimage

    interfacial = np.asarray(interfacial, dtype=bool)
    border = np.ones(interfacial.shape, dtype=bool)
    border[(slice(1, -1),) * interfacial.ndim] = False
    if not np.any(border & ~interfacial):
        raise NoOutsideSeed("every boundary cell is interfacial")
    comp, _ = ndimage.label(~interfacial, structure=ndimage.generate_binary_structure(3, 1))
    outside_ids = np.unique(comp[border & ~interfacial])
    labels = np.full(interfacial.shape, Label.INSIDE, dtype=np.int8)
    labels[interfacial] = Label.INTERFACIAL
    labels[np.isin(comp, outside_ids)] = Label.OUTSIDE
    return labels


def domain_grid(dims: int = 64, half_width: float = DOMAIN_HALF_WIDTH):
    """(origin, h, dims) of cells tiling the cube domain exactly."""
    h = 2 * half_width / dims
    return np.full(3, -half_width), h, (dims, dims, dims)


def build_region_mask(points, h: float | None = None, dims: int | tuple = 64,
                      origin=None, warn: bool = True) -> RegionMask:
    if origin is None or h is None:
        d = dims if isinstance(dims, int) else dims[0]
        o, hh, dd = domain_grid(d)
        origin = o if origin is None else np.asarray(origin, dtype=np.float64)
        h = hh if h is None else h
        dims = dd if isinstance(dims, int) else tuple(dims)
    elif isinstance(dims, int):
        dims = (dims,) * 3
    origin = np.asarray(origin, dtype=np.float64)
    occ = interfacial_cells(points, origin, h, dims)
    labels = flood_fill_labels(occ)
    mask = RegionMask(origin, float(h), tuple(dims), labels)
    if warn and not mask.has_interior:
        log.warning("region mask has no interior cells")
    return mask


def median_spacing(points) -> float:
    from scipy.spatial import cKDTree
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def build_region_mask_auto(points, dims: int = 64, max_doublings: int = 3) -> tuple[RegionMask, int]:
    """Default grid, coarsened by factors of two (up to ``max_doublings``) while
    the interior is empty or the cloud is sparser than the cell size.

    Returns the mask and the number of doublings used.
    """
    spacing = median_spacing(points)
    for k in range(max_doublings + 1):
        d = dims // 2**k
        mask = build_region_mask(points, dims=d, warn=False)
        if mask.has_interior and spacing <= mask.h:
            if k:
                log.info("region mask uses coarsened cell size h=%.4f", mask.h)
            return mask, k
        if d <= 2:
            break
    log.warning("no interior found after %d coarsenings", k)
    return mask, k


def save_mask_rle(mask: RegionMask, path):
    """Debug export: header line ``nx ny nz h ox oy oz`` followed by
    ``label count`` runs over the C-ordered label array."""
    flat = mask.labels.ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [len(flat)]]))
    with open(path, "w") as fh:
        fh.write("%d %d %d %.17g %.17g %.17g %.17g\n" % (*mask.dims, mask.h, *mask.grid_origin))
        for s, n in zip(starts, lengths):
            fh.write(f"{int(flat[s])} {int(n)}\n")


def load_mask_rle(path) -> RegionMask:
    with open(path) as fh:
        head = fh.readline().split()
        dims = tuple(int(v) for v in head[:3])
        h = float(head[3])
        origin = np.array([float(v) for v in head[4:7]])
        runs = [tuple(int(v) for v in line.split()) for line in fh if line.strip()]
    flat = np.concatenate([np.full(n, lab, dtype=np.int8) for lab, n in runs])
    return RegionMask(origin, h, dims, flat.reshape(dims))
