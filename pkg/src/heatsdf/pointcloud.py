"""Unoriented point clouds: loading, normalisation into the domain, and the
density-adaptive quadrature weights for the mean surface integral."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DOMAIN_HALF_WIDTH = 1.2
DOMAIN_VOLUME = (2 * DOMAIN_HALF_WIDTH) ** 3


class ParseError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class TooFewPoints(ValueError):
    pass


class DegenerateCloud(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates ``x`` to ``scale * x + translation``."""

    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)

    def apply(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) + np.asarray(self.translation)

    def inverse(self, y):
        return (np.asarray(y, dtype=np.float64) - np.asarray(self.translation)) / self.scale

    def to_dict(self):
        return {"scale": self.scale, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), tuple(float(t) for t in d["translation"]))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    weights: np.ndarray
    epsilon: float | None = None
    transform: NormalizationTransform = NormalizationTransform()

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if w.shape != (len(pts),):
            raise ValueError("weights must have one entry per point")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_points(cls, points) -> "PointCloud":
        pts = np.asarray(points, dtype=np.float64)
        return cls(pts, np.full(len(pts), 1.0 / max(len(pts), 1)))


# --- loading -----------------------------------------------------------------
def load_point_cloud(path, format: str | None = None) -> PointCloud:
    """Read positions from ``.xyz``, ``.ply`` or ``.obj`` (vertex lines only)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "xyz":
        pts = _read_xyz(path)
    elif fmt == "obj":
        pts = _read_obj_vertices(path)
    elif fmt == "ply":
        pts = _read_ply(path)
    else:
        raise ParseError(f"unknown point cloud format {fmt!r}")
    if len(pts) < 4:
        raise TooFewPoints(f"{path}: need at least 4 points, found {len(pts)}")
    return PointCloud.from_points(pts)


def _read_xyz(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            if len(toks) < 3:
                raise ParseError("expected 'x y z'", lineno)
            try:
                rows.append([float(t) for t in toks[:3]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _read_obj_vertices(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0] != "v":
                continue
            if len(toks) < 4:
                raise ParseError("vertex line needs 3 coordinates", lineno)
            try:
                rows.append([float(t) for t in toks[1:4]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file", 1)
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(name, type)])
    for lineno, line in enumerate(header, 1):
        toks = line.split()
        if not toks:
            continue
        if toks[0] == "format":
            fmt = toks[1]
        elif toks[0] == "element":
            elements.append((toks[1], int(toks[2]), []))
        elif toks[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno)
            if toks[1] == "list":
                elements[-1][2].append((toks[4], ("list", toks[2], toks[3])))
            else:
                elements[-1][2].append((toks[2], toks[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", 2)
    for name, _, _ in elements:
        if name != "vertex":
            log.warning("ignoring PLY element %r", name)
    if not elements or elements[0][0] != "vertex":
        if not any(e[0] == "vertex" for e in elements):
            raise ParseError("PLY has no vertex element")

    if fmt == "ascii":
        lines = data[body_start:].decode("ascii").splitlines()
        li = 0
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                try:
                    ix = [names.index(c) for c in "xyz"]
                except ValueError:
                    raise ParseError("vertex element lacks x/y/z") from None
                rows = []
                for k in range(count):
                    lineno = len(header) + 2 + li + k
                    toks = lines[li + k].split() if li + k < len(lines) else []
                    try:
                        rows.append([float(toks[i]) for i in ix])
                    except (IndexError, ValueError):
                        raise ParseError("malformed vertex row", lineno) from None
                return np.array(rows, dtype=np.float64).reshape(-1, 3)
            li += count
        raise ParseError("PLY has no vertex element")

    off = body_start
    for name, count, props in elements:
        if name != "vertex":
            if any(isinstance(t, tuple) for _, t in props):
                raise ParseError("list properties before vertex element are unsupported")
            off += count * struct.calcsize("<" + "".join(_PLY_TYPES[t] for _, t in props))
            continue
        if any(isinstance(t, tuple) for _, t in props):
            raise ParseError("list property inside vertex element")
        dtype = np.dtype([(n, "<" + _PLY_TYPES[t]) for n, t in props])
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        return np.stack([arr[c].astype(np.float64) for c in "xyz"], axis=1)
    raise ParseError("PLY has no vertex element")


def save_xyz(pc_or_points, path):
    pts = pc_or_points.points if isinstance(pc_or_points, PointCloud) else pc_or_points
    np.savetxt(path, np.asarray(pts), fmt="%.17g")


# --- normalisation -------------------------------------------------------------
def normalize_to_domain(pc: PointCloud) -> PointCloud:
    """Isotropically scale/translate so the bounding box is centred at the
    origin with largest half-extent exactly 1."""
    lo = pc.points.min(axis=0)
    hi = pc.points.max(axis=0)
    half = 0.5 * (hi - lo).max()
    if not half > 0:
        raise DegenerateCloud("point cloud has zero bounding-box diameter")
    center = 0.5 * (lo + hi)
    scale = 1.0 / half
    tf = NormalizationTransform(scale, tuple(-scale * center))
    pts = np.clip(tf.apply(pc.points), -1.0, 1.0)
    return replace(pc, points=pts, transform=tf)


# --- adaptive weights ----------------------------------------------------------
def mollifier(r, epsilon: float):
    """nu^eps as a function of distance: eps^-3 exp(1 / ((r/eps)^2 - 1)) inside
    the unit ball, exactly 0 outside."""
    q = (np.asarray(r, dtype=np.float64) / epsilon) ** 2
    out = np.zeros_like(q)
    inside = q < 1.0
    out[inside] = np.exp(1.0 / (q[inside] - 1.0))
    return out / epsilon**3


def kth_neighbor_distances(points, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point (exact)."""
    if k == 0:
        return np.zeros(len(points))
    d, _ = cKDTree(points).query(points, k=k + 1)
    return d[:, k]


def select_epsilon(pc: PointCloud, k: int = 12, safety: float = 1.05) -> float:
    """Smallest radius (up to the safety factor) such that every point has at
    least ``k`` other cloud points within it."""
    if len(pc) <= k:
        raise ValueError(f"need more than k={k} points, have {len(pc)}")
    if k == 0:
        return float(np.finfo(np.float64).tiny)
    return float(kth_neighbor_distances(pc.points, k).max() * safety)


def adaptive_weights(points, epsilon: float) -> np.ndarray:
    """Normalised density-compensating weights, self term included."""
    points = np.asarray(points, dtype=np.float64)
    tree = cKDTree(points)
    pairs = tree.query_pairs(epsilon, output_type="ndarray")
    dens = np.full(len(points), mollifier(np.zeros(1), epsilon)[0])
    if len(pairs):
        r = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
        nu = mollifier(r, epsilon)
        # sorted accumulation keeps the sum order independent of tree traversal
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        np.add.at(dens, pairs[order, 0], nu[order])
        order = np.lexsort((pairs[:, 0], pairs[:, 1]))
        np.add.at(dens, pairs[order, 1], nu[order])
    w = 1.0 / dens
    return w / w.sum()


def adaptive_weights_bruteforce(points, epsilon: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    w = 1.0 / mollifier(r, epsilon).sum(axis=1)
    return w / w.sum()


def compute_adaptive_weights(pc: PointCloud, epsilon: float | None = None, k: int = 12) -> PointCloud:
    if epsilon is None:
        epsilon = select_epsilon(pc, k)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return replace(pc, weights=adaptive_weights(pc.points, epsilon), epsilon=float(epsilon))


def prepare_cloud(pc: PointCloud, k: int = 12, adaptive: bool = True) -> PointCloud:
    """Normalise and weight a raw cloud (the standard preprocessing)."""
    pc = normalize_to_domain(pc)
    if adaptive:
        pc = compute_adaptive_weights(pc, k=k)
    return pc
