"""Reconstruction metrics: L1 Chamfer distance, normal consistency, F-score."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySet, ZeroAreaMesh

DEFAULT_TAU = 0.01


@dataclass
class EvalReport:
    cd_l1: float
    nc: float
    f_score: float
    n_pred: int
    n_gt: int
    tau: float

    def to_dict(self):
        return asdict(self)


def _check(*sets):
    for s in sets:
        if s is None or len(s) == 0:
            raise EmptySet("metric needs non-empty point sets")


def _nn(src, dst):
    """Distance and index of the nearest ``dst`` point for every ``src`` point."""
    return cKDTree(dst).query(src, k=1)


def sample_mesh_surface(vertices, faces, n: int, rng: np.random.Generator):
    """Area-weighted uniform samples on triangles (or length-weighted on 2D segments).

    Returns ``(points, normals)`` with one face normal per sample.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if f.shape[1] == 2:
        a, b = v[f[:, 0]], v[f[:, 1]]
        size = np.linalg.norm(b - a, axis=1)
        if len(f) == 0 or size.sum() <= 0:
            raise ZeroAreaMesh("contour has zero length")
        face = rng.choice(len(f), size=n, p=size / size.sum())
        t = rng.random((n, 1))
        pts = a[face] + t * (b[face] - a[face])
        tangent = (b - a)[face] / size[face, None]
        return pts, np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(cross, axis=1)
    if len(f) == 0 or area.sum() <= 0:
        raise ZeroAreaMesh("mesh has no face with positive area")
    face = rng.choice(len(f), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    pts = (1 - r1) * a[face] + r1 * (1 - r2) * b[face] + r1 * r2 * c[face]
    normals = cross[face] / (2.0 * area[face, None])
    return pts, normals


def chamfer_l1(a, b) -> float:
    _check(a, b)
    d_ab, _ = _nn(a, b)
    d_ba, _ = _nn(b, a)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def normal_consistency(a, na, b, nb) -> float:
    """Symmetric mean |cos| between each normal and its nearest neighbour's."""
    _check(a, b)
    _, i_ab = _nn(a, b)
    _, i_ba = _nn(b, a)
    ab = np.abs(np.sum(np.asarray(na) * np.asarray(nb)[i_ab], axis=1))
    ba = np.abs(np.sum(np.asarray(nb) * np.asarray(na)[i_ba], axis=1))
    return 0.5 * (float(np.mean(ab)) + float(np.mean(ba)))


def precision_recall(a, b, tau: float = DEFAULT_TAU):
    if not tau > 0:
        raise ValueError("tau must be positive")
    _check(a, b)
    d_ab, _ = _nn(a, b)
    d_ba, _ = _nn(b, a)
    return float(np.mean(d_ab <= tau)), float(np.mean(d_ba <= tau))


def f_score(a, b, tau: float = DEFAULT_TAU) -> float:
    p, r = precision_recall(a, b, tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def evaluate_points(pred, pred_normals, gt, gt_normals, tau: float = DEFAULT_TAU) -> EvalReport:
    return EvalReport(
        cd_l1=chamfer_l1(pred, gt),
        nc=normal_consistency(pred, pred_normals, gt, gt_normals),
        f_score=f_score(pred, gt, tau),
        n_pred=len(pred),
        n_gt=len(gt),
        tau=tau,
    )


def evaluate_mesh(mesh, gt_points, gt_normals, n: int, rng: np.random.Generator,
                  tau: float = DEFAULT_TAU, gt_faces: Optional[np.ndarray] = None) -> EvalReport:
    """Sample the predicted mesh (and the GT mesh when ``gt_faces`` is given) and score."""
    pred, pred_n = sample_mesh_surface(mesh.vertices, mesh.faces, n, rng)
    if gt_faces is not None:
        gt_points, gt_normals = sample_mesh_surface(gt_points, gt_faces, n, rng)
    return evaluate_points(pred, pred_n, gt_points, gt_normals, tau)
