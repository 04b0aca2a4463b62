"""Procedural labeled "dental arch" meshes for desk-scale experiments.

A U-shaped triangulated strip stands in for the gingiva; mirrored Gaussian
bumps along the arc stand in for teeth, one class per mirrored pair.  Faces
are labeled by the dominant bump at their parameter-space centroid, so label
boundaries always fall on mesh edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, GenerationError
from .meshio import Mesh

BG = 0


@dataclass
class ArchSpec:
    teeth: int = 4              # mirrored tooth-class pairs; C = teeth + 1
    cells: int = 1024           # target face count (within +-10%)
    arch_radius: float = 10.0
    strip_width: float = 4.0
    arc_half_angle: float = 1.3  # radians, arch spans [-a, a]
    bump_height: float = 2.0
    bump_width: float = 0.9      # Gaussian sigma in arc-length units
    jitter: float = 0.01         # vertex noise; breaks grid symmetry ties
    seed: int = 0

    @property
    def n_classes(self):
        return self.teeth + 1

    def validate(self):
        if self.teeth < 0:
            raise ContractViolation("teeth must be >= 0")
        if self.cells < 100:
            raise ContractViolation("cells must be >= 100")
        for field in ("arch_radius", "strip_width", "arc_half_angle",
                      "bump_height", "bump_width"):
            if getattr(self, field) <= 0:
                raise ContractViolation(f"{field} must be positive")


def _bump_centers(spec: ArchSpec):
    """Arc-length bump centers and their classes, mirrored left/right."""
    arc = spec.arch_radius * spec.arc_half_angle  # half arc length
    centers, classes = [], []
    lo, hi = 0.18 * arc, 0.9 * arc
    for c in range(1, spec.teeth + 1):
        if spec.teeth == 1:
            u = lo
        else:
            u = lo + (hi - lo) * (c - 1) / (spec.teeth - 1)
        centers += [u, -u]
        classes += [c, c]
    return np.asarray(centers), np.asarray(classes, dtype=np.int64)


def generate_arch(spec: ArchSpec) -> Mesh:
    spec.validate()
    centers, classes = _bump_centers(spec)
    if len(centers) > 1:
        cs = np.sort(centers)
        if np.min(np.diff(cs)) < 2.5 * spec.bump_width:
            raise GenerationError(
                "bumps overlap: centers closer than 2.5 sigma")

    # grid resolution targeting `cells` faces at the strip's aspect ratio
    arc_len = 2 * spec.arch_radius * spec.arc_half_angle
    aspect = arc_len / spec.strip_width
    quads = spec.cells / 2
    nt = max(2, int(round(np.sqrt(quads / aspect))) + 1)
    ns = max(2, int(round(quads / (nt - 1))) + 1)
    n_faces = 2 * (ns - 1) * (nt - 1)
    if abs(n_faces - spec.cells) > 0.1 * spec.cells:
        raise GenerationError(
            f"grid gives {n_faces} cells, outside +-10% of {spec.cells}")

    rng = np.random.default_rng(spec.seed)
    theta = np.linspace(-spec.arc_half_angle, spec.arc_half_angle, ns)
    t = np.linspace(0.0, 1.0, nt)
    TH, T = np.meshgrid(theta, t, indexing="ij")
    U = spec.arch_radius * TH                       # arc coordinate
    V = (T - 0.5) * spec.strip_width                # cross coordinate

    def bump_field(u, v):
        h = np.zeros_like(u)
        for uc in centers:
            d2 = (u - uc) ** 2 + v ** 2
            h += spec.bump_height * np.exp(-d2 / (2 * spec.bump_width ** 2))
        return h

    r = spec.arch_radius + V
    x = r * np.sin(TH)
    z = r * np.cos(TH)
    y = bump_field(U, V)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    verts += rng.normal(0.0, spec.jitter, size=verts.shape)

    faces = []
    for i in range(ns - 1):
        for j in range(nt - 1):
            a = i * nt + j
            b = a + 1
            c = a + nt
            d = c + 1
            faces.append((a, b, c))
            faces.append((b, d, c))
    faces = np.asarray(faces, dtype=np.int64)

    # label each face by the dominant bump at its parameter-space centroid
    pu = U.reshape(-1)[faces].mean(axis=1)
    pv = V.reshape(-1)[faces].mean(axis=1)
    labels = np.full(len(faces), BG, dtype=np.int64)
    if len(centers):
        d2 = (pu[:, None] - centers[None, :]) ** 2 + pv[:, None] ** 2
        influence = np.exp(-d2 / (2 * spec.bump_width ** 2))
        best = np.argmax(influence, axis=1)
        inside = influence[np.arange(len(faces)), best] > np.exp(-1.5)
        labels[inside] = classes[best[inside]]

    mesh = Mesh(vertices=verts, faces=faces, labels=labels)
    mesh.validate()
    return mesh
