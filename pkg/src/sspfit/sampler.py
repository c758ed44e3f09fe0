"""Per-voxel loss tracking and loss-proportional sample generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import InapplicableVoxel
from .partition import VoxelGrid, write_raw_grid
from .pointcloud import KnnIndex

TRACKED = ("dist_on", "grad_on", "dist_free", "grad_free", "signed")
MOMENTUM = 0.1


@dataclass
class SampleBudget:
    on_surface: int = round(16384 * 7 / 9)
    free_uncertain: int = round(16384 / 3)
    outside: int = 16384

    def __post_init__(self):
        for v in (self.on_surface, self.free_uncertain, self.outside):
            if int(v) != v or v <= 0:
                raise ValueError("sample counts must be positive integers")

    @classmethod
    def scaled(cls, factor: float):
        base = cls()
        return cls(*(max(1, round(v * factor)) for v in (base.on_surface, base.free_uncertain, base.outside)))


@dataclass
class SampleBatch:
    on_points: np.ndarray
    on_normals: Optional[np.ndarray]
    on_voxel: np.ndarray
    free_points: np.ndarray
    free_dist: np.ndarray
    free_normals: Optional[np.ndarray]
    free_voxel: np.ndarray
    out_points: np.ndarray
    out_voxel: np.ndarray

    def counts(self):
        return len(self.on_points), len(self.free_points), len(self.out_points)


class LossTracker:
    """Running-mean loss per applicable voxel, one table per loss type.

    Occupied voxels carry the on-surface losses, sign-uncertain voxels the
    free-space losses and sign-known voxels the signed loss. Every table
    starts at ``init`` so sampling is uniform until losses come in.
    """

    def __init__(self, grid: VoxelGrid, momentum: float = MOMENTUM, init: float = 1.0):
        self.grid = grid
        self.momentum = momentum
        occupied = np.flatnonzero(grid.occupancy.ravel())
        uncertain = np.flatnonzero(grid.uncertain.ravel())
        known = np.flatnonzero(grid.known.ravel())
        self.voxels: Dict[str, np.ndarray] = {
            "dist_on": occupied, "grad_on": occupied,
            "dist_free": uncertain, "grad_free": uncertain,
            "signed": known,
        }
        self.values: Dict[str, np.ndarray] = {
            k: np.full(len(v), float(init)) for k, v in self.voxels.items()
        }

    def _slots(self, loss_type, flat_ids):
        vox = self.voxels[loss_type]
        flat_ids = np.atleast_1d(np.asarray(flat_ids, dtype=np.int64))
        pos = np.searchsorted(vox, flat_ids)
        ok = (pos < len(vox)) & (vox[np.minimum(pos, len(vox) - 1)] == flat_ids) if len(vox) else np.zeros(len(flat_ids), bool)
        if not np.all(ok):
            bad = flat_ids[~ok][:5].tolist()
            raise InapplicableVoxel(f"voxels {bad} are not tracked for {loss_type}")
        return pos

    def get(self, loss_type, flat_id) -> float:
        return float(self.values[loss_type][self._slots(loss_type, flat_id)[0]])

    def update(self, loss_type, flat_id, value: float):
        if value < 0:
            raise ValueError("tracked losses must be nonnegative")
        slot = self._slots(loss_type, flat_id)[0]
        v = self.values[loss_type]
        v[slot] = (1.0 - self.momentum) * v[slot] + self.momentum * value

    def update_batch(self, loss_type, flat_ids, sample_losses):
        """One running-mean step per visited voxel using its mean sample loss."""
        flat_ids = np.asarray(flat_ids, dtype=np.int64)
        sample_losses = np.asarray(sample_losses, dtype=np.float64)
        if len(flat_ids) == 0 or len(sample_losses) == 0:
            return
        slots = self._slots(loss_type, flat_ids)
        n = len(self.voxels[loss_type])
        count = np.bincount(slots, minlength=n)
        total = np.bincount(slots, weights=sample_losses, minlength=n)
        hit = count > 0
        v = self.values[loss_type]
        v[hit] = (1.0 - self.momentum) * v[hit] + self.momentum * (total[hit] / count[hit])

    def probabilities(self, loss_type) -> np.ndarray:
        return sampling_probabilities(self.values[loss_type])

    def dense(self, loss_type) -> np.ndarray:
        out = np.zeros(self.grid.resolution ** self.grid.dim)
        out[self.voxels[loss_type]] = self.values[loss_type]
        return out.reshape(self.grid.shape)

    def dump(self, path, loss_type):
        write_raw_grid(path, self.dense(loss_type))


def sampling_probabilities(tracked) -> np.ndarray:
    """Probabilities proportional to tracked losses; uniform when they sum to 0."""
    m = np.asarray(tracked, dtype=np.float64)
    if len(m) == 0:
        return m
    s = m.sum()
    if not s > 0:
        return np.full(len(m), 1.0 / len(m))
    return m / s


def draw_voxels(probs, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` slot indices drawn with replacement."""
    return rng.choice(len(probs), size=n, replace=True, p=probs)


def _mixed_draws(tracker, types, n, adaptive_fraction, rng):
    """Draw ``n`` tracked slots: an adaptive share by loss, the rest uniform."""
    probs = [tracker.probabilities(t) for t in types]
    p = np.mean(probs, axis=0)
    n_adapt = int(round(n * adaptive_fraction))
    size = len(p)
    slots = np.concatenate([
        draw_voxels(p, n_adapt, rng),
        rng.integers(0, size, n - n_adapt),
    ])
    return tracker.voxels[types[0]][slots]


def _uniform_in_cells(grid: VoxelGrid, flat_ids, rng):
    ids = grid.unflat(flat_ids)
    lo = grid.lo + grid.edge * ids
    return lo + grid.edge * rng.random(ids.shape)


def sample_on_surface(grid, tracker, index: KnnIndex, budget: int, rng, *,
                      jitter_sigma=None, k=8, adaptive_fraction=0.5, types=("dist_on", "grad_on")):
    """Points of the cloud near loss-weighted occupied voxels.

    Each drawn voxel contributes the ``k`` cloud points nearest to its
    jittered center; the concatenation is cut to exactly ``budget``.
    """
    if jitter_sigma is None:
        jitter_sigma = grid.edge / 2
    k = max(1, min(int(k), len(index)))
    n_draw = math.ceil(budget / k)
    vox = _mixed_draws(tracker, types, n_draw, adaptive_fraction, rng)
    centers = grid.centers(grid.unflat(vox))
    if jitter_sigma > 0:
        centers = centers + rng.normal(0.0, jitter_sigma, centers.shape)
    _, idx = index.query(centers, k)
    idx = idx.reshape(-1)[:budget]
    owner = np.repeat(vox, k)[:budget]
    cloud = index.cloud
    normals = None if cloud.normals is None else cloud.normals[idx]
    return cloud.points[idx], normals, owner, idx


def sample_free_space(grid, tracker, index: KnnIndex, budget: int, rng, *,
                      adaptive_fraction=0.5, types=("dist_free", "grad_free")):
    """Uniform points inside loss-weighted sign-uncertain voxels, with targets."""
    vox = _mixed_draws(tracker, types, budget, adaptive_fraction, rng)
    pts = _uniform_in_cells(grid, vox, rng)
    dist, nn_idx = index.nearest(pts)
    normals = None if index.cloud.normals is None else index.cloud.normals[nn_idx]
    return pts, dist, normals, vox


def sample_outside(grid, tracker, budget: int, rng, *, adaptive_fraction=0.5):
    """Uniform points inside loss-weighted sign-known voxels (empty if none)."""
    if len(tracker.voxels["signed"]) == 0 or budget == 0:
        return np.zeros((0, grid.dim)), np.zeros(0, dtype=np.int64)
    vox = _mixed_draws(tracker, ("signed",), budget, adaptive_fraction, rng)
    return _uniform_in_cells(grid, vox, rng), vox


def sample_batch(grid, tracker, index, budget: SampleBudget, rng, *,
                 adaptive_fraction=0.5, use_signed=True, use_grad=True, on_k=8) -> SampleBatch:
    on_types = ("dist_on", "grad_on") if use_grad else ("dist_on",)
    free_types = ("dist_free", "grad_free") if use_grad else ("dist_free",)
    on_pts, on_n, on_vox, _ = sample_on_surface(
        grid, tracker, index, budget.on_surface, rng,
        k=on_k, adaptive_fraction=adaptive_fraction, types=on_types)
    if len(tracker.voxels["dist_free"]):
        fr_pts, fr_d, fr_n, fr_vox = sample_free_space(
            grid, tracker, index, budget.free_uncertain, rng,
            adaptive_fraction=adaptive_fraction, types=free_types)
    else:
        fr_pts, fr_d, fr_vox = np.zeros((0, grid.dim)), np.zeros(0), np.zeros(0, np.int64)
        fr_n = None if on_n is None else np.zeros((0, grid.dim))
    if use_signed:
        out_pts, out_vox = sample_outside(grid, tracker, budget.outside, rng,
                                          adaptive_fraction=adaptive_fraction)
    else:
        out_pts, out_vox = np.zeros((0, grid.dim)), np.zeros(0, np.int64)
    return SampleBatch(on_pts, on_n, on_vox, fr_pts, fr_d, fr_n, fr_vox, out_pts, out_vox)
