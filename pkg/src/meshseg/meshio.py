"""Triangle-mesh parsing/writing, per-cell descriptors, and decimation.

Supported formats are ASCII OFF and ASCII OBJ (v/f records only, 1-based
indices).  Label files are newline-separated integers, one per cell.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (ContractViolation, DegenerateGeometryError,
                     MeshFormatError, PartialDecimationError)

AREA_TOL = 1e-12


@dataclass
class Mesh:
    vertices: np.ndarray              # (V, 3) float64
    faces: np.ndarray                 # (M, 3) int64
    labels: Optional[np.ndarray] = None  # (M,) int64

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def validate(self):
        v, f = self.vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3:
            raise ContractViolation("vertices must be V x 3")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ContractViolation("faces must be M x 3")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ContractViolation("face index out of range")
        if np.any(f[:, 0] == f[:, 1]) or np.any(f[:, 1] == f[:, 2]) \
                or np.any(f[:, 0] == f[:, 2]):
            raise ContractViolation("face with repeated vertex index")
        if f.size and np.min(face_areas(self)) <= AREA_TOL:
            raise DegenerateGeometryError("zero-area face")
        if self.labels is not None and len(self.labels) != len(f):
            raise ContractViolation("label count != face count")


def face_normals_areas(mesh: Mesh):
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norms
    if np.any(areas <= AREA_TOL):
        raise DegenerateGeometryError("zero-area face")
    return cross / norms[:, None], areas


def face_areas(mesh: Mesh):
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass
class CellDescriptors:
    """Per-cell 24-d input: 12 coordinate values and 12 normal values.

    coords:  three vertex positions then the centroid.
    normals: three (area-weighted) vertex normals then the face normal.
    """
    coords: np.ndarray   # (M, 12)
    normals: np.ndarray  # (M, 12)


def cell_descriptors(mesh: Mesh) -> CellDescriptors:
    v, f = mesh.vertices, mesh.faces
    fn, areas = face_normals_areas(mesh)

    weighted = fn * areas[:, None]
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, f[:, k], weighted)
    lens = np.linalg.norm(vn, axis=1)
    used = np.zeros(len(v), dtype=bool)
    used[f.ravel()] = True
    if np.any(lens[used] < 1e-20):
        raise DegenerateGeometryError("vertex normal vanished")
    vn = vn / np.where(lens > 0, lens, 1.0)[:, None]

    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    centroid = (p0 + p1 + p2) / 3.0
    coords = np.hstack([p0, p1, p2, centroid])
    normals = np.hstack([vn[f[:, 0]], vn[f[:, 1]], vn[f[:, 2]], fn])
    return CellDescriptors(coords=coords, normals=normals)


# ---------------------------------------------------------------- file IO

def _infer_format(path):
    s = str(path).lower()
    if s.endswith(".off"):
        return "off"
    if s.endswith(".obj"):
        return "obj"
    raise ContractViolation(f"cannot infer mesh format from {path!r}")


def load_mesh(path, fmt: Optional[str] = None) -> Mesh:
    fmt = fmt or _infer_format(path)
    if fmt == "off":
        mesh = _load_off(path)
    elif fmt == "obj":
        mesh = _load_obj(path)
    else:
        raise ContractViolation(f"unknown mesh format {fmt!r}")
    mesh.validate()
    return mesh


def _content_lines(path):
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _load_off(path) -> Mesh:
    lines = _content_lines(path)
    try:
        lineno, line = next(lines)
    except StopIteration:
        raise MeshFormatError("empty OFF file") from None
    if line == "OFF":
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MeshFormatError("missing count line", lineno) from None
    elif line.startswith("OFF"):
        line = line[3:].strip()
    else:
        raise MeshFormatError("missing OFF header", lineno)
    parts = line.split()
    if len(parts) != 3:
        raise MeshFormatError("count line must be 'V F E'", lineno)
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshFormatError("bad counts", lineno) from None

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MeshFormatError(f"expected {nv} vertices") from None
        parts = line.split()
        if len(parts) < 3:
            raise MeshFormatError("vertex needs 3 coordinates", lineno)
        try:
            verts[i] = [float(x) for x in parts[:3]]
        except ValueError:
            raise MeshFormatError("bad vertex coordinate", lineno) from None

    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MeshFormatError(f"expected {nf} faces") from None
        parts = line.split()
        try:
            count = int(parts[0])
        except (ValueError, IndexError):
            raise MeshFormatError("bad face record", lineno) from None
        if count != 3:
            raise MeshFormatError(f"only triangles supported, got {count}-gon",
                                  lineno)
        if len(parts) < 4:
            raise MeshFormatError("truncated face record", lineno)
        idx = [int(x) for x in parts[1:4]]
        if any(j < 0 or j >= nv for j in idx):
            raise MeshFormatError(f"face index out of range: {idx}", lineno)
        faces[i] = idx
    return Mesh(vertices=verts, faces=faces)


def _load_obj(path) -> Mesh:
    verts, faces = [], []
    for lineno, line in _content_lines(path):
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshFormatError("vertex needs 3 coordinates", lineno)
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise MeshFormatError("bad vertex coordinate", lineno) from None
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshFormatError("only triangle faces supported", lineno)
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError:
                raise MeshFormatError("bad face index", lineno) from None
            if any(j < 1 for j in idx):
                raise MeshFormatError("OBJ indices are 1-based and positive",
                                      lineno)
            faces.append([j - 1 for j in idx])
        # other record types (vn, vt, usemtl, ...) are ignored
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        raise MeshFormatError(f"face index {f.max() + 1} exceeds vertex count "
                              f"{len(v)}")
    return Mesh(vertices=v, faces=f)


def write_mesh(path, mesh: Mesh, fmt: Optional[str] = None):
    fmt = fmt or _infer_format(path)
    with open(path, "w") as f:
        if fmt == "off":
            f.write("OFF\n")
            f.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
            for p in mesh.vertices:
                f.write("%.17g %.17g %.17g\n" % tuple(p))
            for a, b, c in mesh.faces:
                f.write(f"3 {a} {b} {c}\n")
        elif fmt == "obj":
            for p in mesh.vertices:
                f.write("v %.17g %.17g %.17g\n" % tuple(p))
            for a, b, c in mesh.faces:
                f.write(f"f {a + 1} {b + 1} {c + 1}\n")
        else:
            raise ContractViolation(f"unknown mesh format {fmt!r}")


def write_labels(path, labels):
    with open(path, "w") as f:
        for lab in labels:
            f.write(f"{int(lab)}\n")


def read_labels(path, expected_count: Optional[int] = None) -> np.ndarray:
    labels = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise MeshFormatError("bad label", lineno) from None
    out = np.asarray(labels, dtype=np.int64)
    if expected_count is not None and len(out) != expected_count:
        raise ContractViolation(
            f"label file has {len(out)} entries, mesh has {expected_count} cells")
    return out


# ------------------------------------------------------------- decimation

def decimate(mesh: Mesh, target_cells: int) -> Mesh:
    """Shortest-edge collapse until at most target_cells faces remain.

    Collapses that would flip a face normal, create a degenerate face, or
    break manifoldness (link condition) are rejected.  Labels, when present,
    are re-assigned by nearest original face centroid.
    """
    if target_cells < 4:
        raise ContractViolation("target_cells must be >= 4")
    mesh.validate()
    if mesh.n_faces <= target_cells:
        return mesh

    verts = mesh.vertices.copy()
    faces = [tuple(int(x) for x in row) for row in mesh.faces]
    face_alive = [True] * len(faces)
    n_alive = len(faces)

    vert_faces = [set() for _ in range(len(verts))]
    for fi, (a, b, c) in enumerate(faces):
        vert_faces[a].add(fi)
        vert_faces[b].add(fi)
        vert_faces[c].add(fi)

    def neighbors(u):
        out = set()
        for fi in vert_faces[u]:
            out.update(faces[fi])
        out.discard(u)
        return out

    def edge_len(u, v):
        d = verts[u] - verts[v]
        return float(np.dot(d, d))

    def push_edges_of(u, heap):
        for w in neighbors(u):
            a, b = (u, w) if u < w else (w, u)
            heapq.heappush(heap, (edge_len(a, b), a, b))

    heap = []
    seen = set()
    for a, b, c in faces:
        for u, v in ((a, b), (b, c), (a, c)):
            e = (u, v) if u < v else (v, u)
            if e not in seen:
                seen.add(e)
                heapq.heappush(heap, (edge_len(*e), *e))
    del seen

    def try_collapse(u, v):
        """Collapse v into u placed at the edge midpoint; False if rejected."""
        shared = vert_faces[u] & vert_faces[v]
        if not 1 <= len(shared) <= 2:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(faces[fi])
        opposite -= {u, v}
        if neighbors(u) & neighbors(v) != opposite:
            return False  # link condition: pinched/non-manifold collapse

        new_pos = 0.5 * (verts[u] + verts[v])
        affected = (vert_faces[u] | vert_faces[v]) - shared

        def normal_of(fi, pos_map):
            p = [pos_map.get(x, verts[x]) for x in faces[fi]]
            return np.cross(p[1] - p[0], p[2] - p[0])

        moved = {u: new_pos, v: new_pos}
        for fi in affected:
            old_n = normal_of(fi, {})
            new_n = normal_of(fi, moved)
            new_area = 0.5 * np.linalg.norm(new_n)
            if new_area <= AREA_TOL:
                return False
            if float(np.dot(old_n, new_n)) < 0.0:
                return False

        # commit
        verts[u] = new_pos
        for fi in shared:
            face_alive[fi] = False
            for x in faces[fi]:
                vert_faces[x].discard(fi)
        for fi in list(vert_faces[v]):
            a, b, c = faces[fi]
            faces[fi] = tuple(u if x == v else x for x in (a, b, c))
            vert_faces[v].discard(fi)
            vert_faces[u].add(fi)
        return True

    while n_alive > target_cells and heap:
        length, u, v = heapq.heappop(heap)
        if not vert_faces[u] or not vert_faces[v]:
            continue
        if not (vert_faces[u] & vert_faces[v]):
            continue  # edge no longer exists
        cur = edge_len(u, v)
        if cur > length * (1 + 1e-12):
            heapq.heappush(heap, (cur, u, v))
            continue
        shared = len(vert_faces[u] & vert_faces[v])
        if try_collapse(u, v):
            n_alive -= min(shared, 2)
            push_edges_of(u, heap)

    if n_alive > target_cells:
        raise PartialDecimationError(n_alive, target_cells)

    keep = [fi for fi, alive in enumerate(face_alive) if alive]
    new_faces = np.asarray([faces[fi] for fi in keep], dtype=np.int64)
    used = np.unique(new_faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = Mesh(vertices=verts[used], faces=remap[new_faces])

    if mesh.labels is not None:
        orig_cent = mesh.vertices[mesh.faces].mean(axis=1)
        new_cent = out.vertices[out.faces].mean(axis=1)
        _, nearest = cKDTree(orig_cent).query(new_cent)
        out.labels = np.asarray(mesh.labels, dtype=np.int64)[nearest]

    out.validate()
    return out
