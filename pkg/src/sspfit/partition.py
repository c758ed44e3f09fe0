"""Voxelization of [-1, 1]^d and sign-known / sign-uncertain labelling.

The sign-known region is grown by a breadth-first flood fill from the
boundary of the grid. A voxel joins it only when neither the voxel nor any
of its face neighbours holds a cloud point, so the fill halts one voxel
short of the data.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NonPositiveDensity, OutOfRange
from .pointcloud import PointCloud

log = logging.getLogger(__name__)

MIN_RESOLUTION = 10
MAX_RESOLUTION = 512


def grid_resolution(density: float, lo: int = MIN_RESOLUTION, hi: int = MAX_RESOLUTION) -> int:
    if not density > 0:
        raise NonPositiveDensity(f"density indicator must be positive, got {density}")
    n = 10 * round(1.0 / (1.5 * density * 10))
    n = min(max(n, lo), hi)
    return int(n - n % 10) if n >= 10 else int(n)


@dataclass
class VoxelGrid:
    resolution: int
    dim: int
    occupancy: np.ndarray
    known: Optional[np.ndarray] = None
    degenerate: bool = False
    lo: float = field(default=-1.0, repr=False)

    @property
    def edge(self) -> float:
        return 2.0 / self.resolution

    @property
    def epsilon(self) -> float:
        """Signed-loss margin, one over the grid resolution."""
        return 1.0 / self.resolution

    @property
    def shape(self):
        return (self.resolution,) * self.dim

    @property
    def uncertain(self) -> np.ndarray:
        if self.known is None:
            raise ValueError("grid has not been partitioned")
        return ~self.known

    def voxel_of(self, points) -> np.ndarray:
        """Integer voxel ids for points; +1.0 maps into the last cell."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ids = np.floor((p - self.lo) / self.edge).astype(np.int64)
        return np.clip(ids, 0, self.resolution - 1)

    def flat(self, ids) -> np.ndarray:
        ids = np.atleast_2d(ids)
        return np.ravel_multi_index(tuple(ids.T), self.shape)

    def unflat(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def centers(self, ids) -> np.ndarray:
        return self.lo + self.edge * (np.asarray(ids, dtype=np.float64) + 0.5)


def build_voxel_grid(pc: PointCloud, resolution: int) -> VoxelGrid:
    if resolution < 1:
        raise OutOfRange(f"resolution must be positive, got {resolution}")
    grid = VoxelGrid(int(resolution), pc.dim, np.zeros((resolution,) * pc.dim, dtype=bool))
    ids = grid.voxel_of(pc.points)
    grid.occupancy[tuple(ids.T)] = True
    return grid


def voxel_center(grid: VoxelGrid, voxel_id) -> np.ndarray:
    vid = np.asarray(voxel_id)
    if vid.shape != (grid.dim,) or np.any(vid < 0) or np.any(vid >= grid.resolution):
        raise OutOfRange(f"voxel id {voxel_id} outside grid of resolution {grid.resolution}")
    return grid.centers(vid)


def _face_shifts(dim):
    for axis in range(dim):
        for step in (-1, 1):
            yield axis, step


def _shift(a: np.ndarray, axis: int, step: int) -> np.ndarray:
    """``out[x] = a[x - step]`` along ``axis``; vacated cells are False."""
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        src[axis], dst[axis] = slice(None, -step), slice(step, None)
    else:
        src[axis], dst[axis] = slice(-step, None), slice(None, step)
    out[tuple(dst)] = a[tuple(src)]
    return out


def dilate_faces(a: np.ndarray) -> np.ndarray:
    """Mask grown by one voxel across faces."""
    out = a.copy()
    for axis, step in _face_shifts(a.ndim):
        out |= _shift(a, axis, step)
    return out


def boundary_mask(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for axis in range(len(shape)):
        idx = [slice(None)] * len(shape)
        idx[axis] = 0
        m[tuple(idx)] = True
        idx[axis] = -1
        m[tuple(idx)] = True
    return m


def _bfs_frontier(passable: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    known = seeds & passable
    frontier = known
    while frontier.any():
        grown = dilate_faces(frontier) & passable & ~known
        known |= grown
        frontier = grown
    return known


def _bfs_queue(passable: np.ndarray, seed_ids: np.ndarray) -> np.ndarray:
    shape = passable.shape
    known = np.zeros(shape, dtype=bool)
    queue = deque(map(tuple, seed_ids))
    while queue:
        v = queue.popleft()
        if known[v] or not passable[v]:
            continue
        known[v] = True
        for axis, step in _face_shifts(len(shape)):
            n = list(v)
            n[axis] += step
            if 0 <= n[axis] < shape[axis] and not known[tuple(n)]:
                queue.append(tuple(n))
    return known


def partition_space(grid: VoxelGrid, method: str = "frontier", rng=None) -> VoxelGrid:
    """Label every voxel Known (provably outside) or Uncertain.

    ``method="frontier"`` runs a level-synchronous vectorized BFS;
    ``method="queue"`` runs a FIFO BFS whose seed order is shuffled by
    ``rng`` when one is given. Both produce the same labels.
    """
    occ = grid.occupancy
    boundary = boundary_mask(occ.shape)
    seeds = boundary & ~occ
    grid.degenerate = not seeds.any()
    if grid.degenerate:
        log.warning("no unoccupied boundary voxel; every voxel is sign-uncertain")
        grid.known = np.zeros_like(occ)
        return grid
    passable = ~dilate_faces(occ)
    if method == "frontier":
        grid.known = _bfs_frontier(passable, seeds)
    elif method == "queue":
        seed_ids = np.argwhere(seeds)
        if rng is not None:
            seed_ids = seed_ids[rng.permutation(len(seed_ids))]
        grid.known = _bfs_queue(passable, seed_ids)
    else:
        raise ValueError(f"unknown method {method!r}")
    return grid


def partition_cloud(pc: PointCloud, resolution: int) -> VoxelGrid:
    return partition_space(build_voxel_grid(pc, resolution))


# ---------------------------------------------------------------------------
# raw grid dumps
# ---------------------------------------------------------------------------

def write_raw_grid(path, values: np.ndarray):
    """Write ``values`` x-fastest to ``path`` with a text header at ``path.hdr``."""
    path = Path(path)
    values = np.asarray(values)
    dtype = "uint8" if values.dtype == np.uint8 else "float64"
    payload = values.astype("<u1" if dtype == "uint8" else "<f8")
    path.write_bytes(payload.ravel(order="F").tobytes())
    Path(str(path) + ".hdr").write_text(
        f"N {values.shape[0]}\nd {values.ndim}\ndtype {dtype}\norder x-fastest\n"
    )


def read_raw_grid(path) -> np.ndarray:
    path = Path(path)
    hdr = dict(line.split(None, 1) for line in Path(str(path) + ".hdr").read_text().splitlines() if line)
    n, d = int(hdr["N"]), int(hdr["d"])
    dt = "<u1" if hdr["dtype"].strip() == "uint8" else "<f8"
    flat = np.frombuffer(path.read_bytes(), dtype=dt)
    return flat.reshape((n,) * d, order="F")


def write_label_mask(path, grid: VoxelGrid):
    """0 = Known, 1 = Uncertain."""
    write_raw_grid(path, grid.uncertain.astype(np.uint8))
