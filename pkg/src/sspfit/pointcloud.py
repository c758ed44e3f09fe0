"""Point cloud ingestion, normalization and nearest-neighbour queries."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateExtent,
    DimensionMismatch,
    EmptyCloud,
    InsufficientNeighbors,
    ParseError,
)

log = logging.getLogger(__name__)

CUBE_HALF_EXTENT = 0.9
DENSITY_NEIGHBOR = 50


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] not in (2, 3):
            raise DimensionMismatch(f"points must be (n, 2) or (n, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise EmptyCloud("point cloud has no points")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise DimensionMismatch(
                    f"normals shape {self.normals.shape} != points shape {self.points.shape}"
                )

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class NormalizationTransform:
    """Uniform scale plus offset: ``normalized = raw * scale + offset``."""

    scale: float
    offset: np.ndarray

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset

    def invert(self, y):
        return (np.asarray(y, dtype=np.float64) - self.offset) / self.scale

    def to_dict(self):
        return {"scale": float(self.scale), "offset": [float(v) for v in self.offset]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), np.asarray(d["offset"], dtype=np.float64))

    @classmethod
    def identity(cls, dim):
        return cls(1.0, np.zeros(dim))


def _unit(normals: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ParseError("zero-length normal in input")
    return normals / norm


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _load_xyz(path: Path, dim: Optional[int]):
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise EmptyCloud(f"{path}: no points")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ParseError(f"{path}: inconsistent column count")
    if dim is None:
        # 2 or 4 columns only make sense in 2D, 3 or 6 only in 3D
        dim = {2: 2, 4: 2, 3: 3, 6: 3}.get(width)
        if dim is None:
            raise ParseError(f"{path}: cannot infer dimension from {width} columns")
    if width not in (dim, 2 * dim):
        raise DimensionMismatch(f"{path}: {width} columns for dimension {dim}")
    data = np.asarray(rows, dtype=np.float64)
    normals = _unit(data[:, dim:]) if width == 2 * dim else None
    return PointCloud(data[:, :dim], normals)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise ParseError("missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype) | (prop, ("list", count_t, item_t))])
    while True:
        raw = fh.readline()
        if not raw:
            raise ParseError("unterminated ply header")
        tok = raw.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown ply type {tok[1]}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected ply header line: {raw!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported ply format {fmt!r}")
    return fmt, elements


def read_ply(path) -> dict:
    """Read every element of an ascii or binary little-endian PLY file.

    Scalar properties come back as 1-D arrays keyed ``element.property``;
    list properties come back as a list of integer arrays.
    """
    out = {}
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh)
        if fmt == "ascii":
            tokens = fh.read().split()
            pos = 0
            for name, count, props in elements:
                cols = {p: [] for p, _ in props}
                for _ in range(count):
                    for p, t in props:
                        if isinstance(t, tuple):
                            n = int(tokens[pos]); pos += 1
                            cols[p].append(np.array([int(t) for t in tokens[pos:pos + n]], dtype=np.int64))
                            pos += n
                        else:
                            cols[p].append(float(tokens[pos])); pos += 1
                for p, t in props:
                    out[f"{name}.{p}"] = cols[p] if isinstance(t, tuple) else np.asarray(cols[p])
        else:
            buf = fh.read()
            pos = 0
            for name, count, props in elements:
                if all(not isinstance(t, tuple) for _, t in props):
                    dt = np.dtype([(p, "<" + t) for p, t in props])
                    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
                    pos += dt.itemsize * count
                    for p, _ in props:
                        out[f"{name}.{p}"] = arr[p].astype(np.float64)
                    continue
                cols = {p: [] for p, _ in props}
                for _ in range(count):
                    for p, t in props:
                        if isinstance(t, tuple):
                            ct, it = np.dtype("<" + t[1]), np.dtype("<" + t[2])
                            n = int(np.frombuffer(buf, ct, 1, pos)[0]); pos += ct.itemsize
                            cols[p].append(np.frombuffer(buf, it, n, pos).astype(np.int64))
                            pos += it.itemsize * n
                        else:
                            d = np.dtype("<" + t)
                            cols[p].append(float(np.frombuffer(buf, d, 1, pos)[0])); pos += d.itemsize
                for p, t in props:
                    out[f"{name}.{p}"] = cols[p] if isinstance(t, tuple) else np.asarray(cols[p])
    if not any(k.startswith("vertex.") for k in out):
        raise ParseError(f"{path}: no vertex element")
    return out


def _load_ply(path: Path, dim: Optional[int]):
    try:
        data = read_ply(path)
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    axes = ["x", "y", "z"]
    naxes = ["nx", "ny", "nz"]
    have = [a for a in axes if f"vertex.{a}" in data]
    if dim is None:
        dim = len(have)
    if have[:dim] != axes[:dim] or dim not in (2, 3):
        raise DimensionMismatch(f"{path}: vertex properties {have} for dimension {dim}")
    pts = np.stack([data[f"vertex.{a}"] for a in axes[:dim]], axis=1)
    normals = None
    if all(f"vertex.{a}" in data for a in naxes[:dim]):
        normals = _unit(np.stack([data[f"vertex.{a}"] for a in naxes[:dim]], axis=1))
    if len(pts) == 0:
        raise EmptyCloud(f"{path}: no points")
    return PointCloud(pts, normals)


def load_point_cloud(path, format: Optional[str] = None, dim: Optional[int] = None) -> PointCloud:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt in ("xyz", "txt", "pts"):
        return _load_xyz(path, dim)
    if fmt == "ply":
        return _load_ply(path, dim)
    raise ParseError(f"unsupported point cloud format {fmt!r}")


def save_xyz(path, pc: PointCloud):
    data = pc.points if pc.normals is None else np.hstack([pc.points, pc.normals])
    np.savetxt(path, data, fmt="%.17g")


def save_ply(path, pc: PointCloud):
    """Write an ascii PLY with optional normals."""
    axes = "xyz"[: pc.dim]
    props = [f"property double {a}" for a in axes]
    data = pc.points
    if pc.normals is not None:
        props += [f"property double n{a}" for a in axes]
        data = np.hstack([pc.points, pc.normals])
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pc)}\n" + "\n".join(props) + "\nend_header\n")
        np.savetxt(fh, data, fmt="%.17g")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_to_cube(pc: PointCloud, half_extent: float = CUBE_HALF_EXTENT):
    lo, hi = pc.points.min(axis=0), pc.points.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise DegenerateExtent("all points coincide")
    scale = 2.0 * half_extent / extent
    offset = -0.5 * (lo + hi) * scale
    tf = NormalizationTransform(scale, offset)
    out = np.clip(tf.apply(pc.points), -half_extent, half_extent)
    normals = None if pc.normals is None else pc.normals.copy()
    return PointCloud(out, normals), tf


# ---------------------------------------------------------------------------
# spatial index
# ---------------------------------------------------------------------------

class KnnIndex:
    """Immutable k-d tree over a cloud; read queries are thread safe."""

    def __init__(self, pc: PointCloud):
        self.cloud = pc
        self.tree = cKDTree(pc.points)

    def __len__(self):
        return len(self.cloud)

    def query(self, q, k: int):
        """k nearest points of each query, sorted by distance then index."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        k = min(int(k), len(self))
        dist, idx = self.tree.query(q, k=k)
        dist = dist.reshape(len(q), k)
        idx = idx.reshape(len(q), k)
        order = np.lexsort((idx, dist), axis=-1)
        return np.take_along_axis(dist, order, -1), np.take_along_axis(idx, order, -1)

    def nearest(self, q):
        """Distance and index of the nearest cloud point (lowest index on ties)."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        k = min(4, len(self))
        dist, idx = self.tree.query(q, k=k)
        dist = dist.reshape(len(q), k)
        idx = idx.reshape(len(q), k)
        tied = dist == dist[:, :1]
        best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
        return dist[:, 0], best


def nearest_with_normal(index: KnnIndex, q):
    """Nearest cloud point to ``q``: (distance, point, normal or None).

    ``q`` may be a single point or a batch; output shapes follow the input.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    dist, idx = index.nearest(q)
    pts = index.cloud.points[idx]
    normals = None if index.cloud.normals is None else index.cloud.normals[idx]
    if single:
        return float(dist[0]), pts[0], None if normals is None else normals[0]
    return dist, pts, normals


def density_indicator(pc: PointCloud, index: Optional[KnnIndex] = None) -> float:
    """Mean distance from each point to its 50th nearest other point."""
    if len(pc) < 2:
        raise EmptyCloud("density needs at least two points")
    index = index or KnnIndex(pc)
    k = min(DENSITY_NEIGHBOR, len(pc) - 1)
    dist, _ = index.tree.query(pc.points, k=k + 1)
    return float(np.mean(dist[:, k]))


def estimate_unoriented_normals(pc: PointCloud, k: int = 32, index: Optional[KnnIndex] = None) -> PointCloud:
    """Local PCA normals (smallest-eigenvalue eigenvector), sign arbitrary."""
    d = pc.dim
    if k < d or len(pc) <= k:
        raise InsufficientNeighbors(f"need |P| > k >= {d}, got |P|={len(pc)}, k={k}")
    index = index or KnnIndex(pc)
    _, idx = index.query(pc.points, k)
    nbrs = pc.points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    tol = 1e-9 * np.maximum(evals[:, -1], np.finfo(float).tiny)
    degenerate = np.abs(evals[:, 1] - evals[:, 0]) <= tol
    if np.any(degenerate):
        raise InsufficientNeighbors(
            f"{int(degenerate.sum())} rank-deficient neighbourhoods (collinear or coincident points)"
        )
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pc.points.copy(), normals)
