"""Mesh, contour and raster file formats."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError
from .pointcloud import read_ply


def write_obj(path, vertices, faces, normals=None):
    with open(path, "w") as fh:
        np.savetxt(fh, vertices, fmt="v %.10g %.10g %.10g")
        if normals is not None:
            np.savetxt(fh, normals, fmt="vn %.10g %.10g %.10g")
            np.savetxt(fh, np.repeat(np.asarray(faces) + 1, 2, axis=1), fmt="f %d//%d %d//%d %d//%d")
        elif len(faces):
            np.savetxt(fh, np.asarray(faces) + 1, fmt="f %d %d %d")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(v) for v in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    # fan-triangulate polygons
                    faces += [[idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1)]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def write_mesh_ply(path, vertices, faces, normals=None):
    vertices = np.asarray(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    props = ["property double x", "property double y", "property double z"]
    data = vertices
    if normals is not None:
        props += ["property double nx", "property double ny", "property double nz"]
        data = np.hstack([vertices, normals])
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n" + "\n".join(props) + "\n")
        fh.write(f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        np.savetxt(fh, data, fmt="%.10g")
        if len(faces):
            np.savetxt(fh, np.hstack([np.full((len(faces), 1), 3), faces]), fmt="%d")


def read_mesh_ply(path):
    data = read_ply(path)
    verts = np.stack([data["vertex.x"], data["vertex.y"], data["vertex.z"]], axis=1)
    faces = []
    for key in ("face.vertex_indices", "face.vertex_index"):
        if key in data:
            for idx in data[key]:
                faces += [[idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1)]
            break
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def read_mesh(path):
    """Vertices and triangle faces from an .obj or .ply file."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_mesh_ply(path)
    raise ParseError(f"unsupported mesh format {suffix!r}")


def write_contour_csv(path, vertices, segments):
    """One row per vertex: loop id, x, y, in loop order."""
    with open(path, "w") as fh:
        fh.write("loop,x,y\n")
        for loop_id, loop in enumerate(segment_loops(segments)):
            for v in loop:
                fh.write(f"{loop_id},{vertices[v][0]:.10g},{vertices[v][1]:.10g}\n")


def write_svg(path, vertices, segments, size: int = 512, bounds=(-1.0, 1.0)):
    lo, hi = bounds
    scale = size / (hi - lo)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for loop in segment_loops(segments):
        pts = " ".join(f"{(vertices[v][0] - lo) * scale:.3f},{(hi - vertices[v][1]) * scale:.3f}" for v in loop)
        lines.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def segment_loops(segments):
    """Chain 2-vertex segments into polylines (closed loops repeat their start)."""
    segments = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
    nxt = {}
    for a, b in segments:
        nxt.setdefault(int(a), []).append(int(b))
    indeg = {}
    for a, b in segments:
        indeg[int(b)] = indeg.get(int(b), 0) + 1
    loops = []
    starts = [int(a) for a, _ in segments if indeg.get(int(a), 0) == 0] + [int(a) for a, _ in segments]
    for s in starts:
        if not nxt.get(s):
            continue
        chain = [s]
        cur = s
        while nxt.get(cur):
            b = nxt[cur].pop()
            chain.append(b)
            cur = b
            if cur == s:
                break
        loops.append(chain)
    return loops


def write_pfm(path, raster):
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    raster = np.asarray(raster, dtype="<f4")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ParseError(f"{path}: not a single-channel PFM")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dt, count=w * h)
    return data.reshape(h, w)[::-1].astype(np.float64)
