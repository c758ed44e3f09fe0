"""Zero-level-set extraction and field rasters."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from skimage import measure

from .field import NeuralField, PeState, evaluate, input_gradient
from .fileio import write_contour_csv, write_mesh_ply, write_obj, write_pfm, write_svg

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 128


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray  # (m, 3) triangles in 3D, (m, 2) segments in 2D
    normals: Optional[np.ndarray] = None
    empty: bool = False

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def save(self, path, fmt: Optional[str] = None):
        fmt = (fmt or str(path).rsplit(".", 1)[-1]).lower()
        if fmt == "obj":
            write_obj(path, self.vertices, self.faces, self.normals)
        elif fmt == "ply":
            write_mesh_ply(path, self.vertices, self.faces, self.normals)
        elif fmt == "svg":
            write_svg(path, self.vertices, self.faces)
        elif fmt == "csv":
            write_contour_csv(path, self.vertices, self.faces)
        else:
            raise ValueError(f"unsupported output format {fmt!r}")


def _callables(field, pe):
    if isinstance(field, NeuralField):
        pe = pe or PeState()
        return (lambda x: np.atleast_1d(evaluate(field, x, pe)),
                lambda x: np.atleast_2d(input_gradient(field, x, pe)))
    f = field

    def grad(x, h=1e-6):
        x = np.atleast_2d(x)
        g = np.empty_like(x)
        for a in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[a] = h
            g[:, a] = (f(x + e) - f(x - e)) / (2 * h)
        return g

    return (lambda x: np.asarray(f(np.atleast_2d(x)), dtype=np.float64), grad)


def sample_grid(field, resolution: int, pe: Optional[PeState] = None, bounds=(-1.0, 1.0), dim: int = 3):
    """Field values on a node-centered lattice with ``resolution`` samples per axis."""
    f, _ = _callables(field, pe)
    axis = np.linspace(bounds[0], bounds[1], resolution)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return f(pts).reshape((resolution,) * dim), axis


def _unit_normals(grad_fn, verts):
    g = grad_fn(verts)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.where(norm > 0, norm, 1.0)


def marching_cubes(field, resolution: int = DEFAULT_RESOLUTION, pe: Optional[PeState] = None,
                   bounds=(-1.0, 1.0), values: Optional[np.ndarray] = None) -> Mesh:
    """Triangle mesh of the zero level set; ``empty`` is set when there is no crossing.

    ``field`` is a NeuralField (with ``pe``) or a callable mapping (n, 3)
    points to values. Vertices carry normalized gradient normals.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    _, grad_fn = _callables(field, pe)
    if values is None:
        values, _ = sample_grid(field, resolution, pe, bounds, 3)
    if not (values.min() < 0.0 < values.max()):
        log.warning("no zero crossing in the sampled field")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)), empty=True)
    step = (bounds[1] - bounds[0]) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=(step,) * 3, gradient_direction="ascent", allow_degenerate=False)
    verts = verts.astype(np.float64) + bounds[0]
    faces = faces.astype(np.int64)
    return Mesh(verts, faces, _unit_normals(grad_fn, verts))


def marching_squares(field, resolution: int = 256, pe: Optional[PeState] = None,
                     bounds=(-1.0, 1.0), values: Optional[np.ndarray] = None) -> Mesh:
    """Segment loops of the zero level set of a 2D field."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    _, grad_fn = _callables(field, pe)
    if values is None:
        values, _ = sample_grid(field, resolution, pe, bounds, 2)
    if not (values.min() < 0.0 < values.max()):
        log.warning("no zero crossing in the sampled field")
        return Mesh(np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2)), empty=True)
    step = (bounds[1] - bounds[0]) / (resolution - 1)
    verts, segs = [], []
    for contour in measure.find_contours(values, 0.0):
        closed = len(contour) > 2 and np.allclose(contour[0], contour[-1])
        pts = contour[:-1] if closed else contour
        base = sum(len(v) for v in verts)
        idx = np.arange(len(pts)) + base
        segs.append(np.stack([idx[:-1], idx[1:]], axis=1))
        if closed:
            segs.append(np.array([[idx[-1], idx[0]]]))
        verts.append(pts * step + bounds[0])
    verts = np.concatenate(verts).astype(np.float64)
    segs = np.concatenate(segs).astype(np.int64)
    segs = segs[segs[:, 0] != segs[:, 1]]
    return Mesh(verts, segs, _unit_normals(grad_fn, verts))


def extract(field, dim: int, resolution: Optional[int] = None, pe: Optional[PeState] = None, bounds=(-1.0, 1.0)) -> Mesh:
    if dim == 3:
        return marching_cubes(field, resolution or DEFAULT_RESOLUTION, pe, bounds)
    return marching_squares(field, resolution or 256, pe, bounds)


def sdf_slice(field, axis: int = 2, offset: float = 0.0, resolution: int = 256,
              pe: Optional[PeState] = None, bounds=(-1.0, 1.0), dim: int = 3) -> np.ndarray:
    """Row-major raster of f over a cell-centered grid on an axis-aligned plane.

    ``raster[r, c]`` samples the first in-plane axis at column ``c`` and the
    second at row ``r``. In 2D the plane is the whole domain and ``axis`` is
    ignored.
    """
    if not bounds[0] <= offset <= bounds[1]:
        raise ValueError("slice offset outside bounds")
    f, _ = _callables(field, pe)
    coords = bounds[0] + (np.arange(resolution) + 0.5) * (bounds[1] - bounds[0]) / resolution
    cc, rr = np.meshgrid(coords, coords, indexing="xy")
    if dim == 2:
        pts = np.stack([cc.ravel(), rr.ravel()], axis=1)
    else:
        in_plane = [a for a in range(3) if a != axis]
        pts = np.empty((cc.size, 3))
        pts[:, in_plane[0]] = cc.ravel()
        pts[:, in_plane[1]] = rr.ravel()
        pts[:, axis] = offset
    return f(pts).reshape(resolution, resolution)


def save_slice(path, raster):
    write_pfm(path, raster)
