"""Procedural anomaly synthesis.

Base shapes are built as triangle meshes, refined by midpoint subdivision and
sampled uniformly by area. Six defect carvers then deform or cut a sampled
cloud and label the affected points:

* ``bulge`` / ``concavity``: Gaussian displacement along the seed normal.
* ``hole``: a ball around the seed is deleted; the surviving rim is labelled.
* ``break``: a cap beyond a cutting plane is deleted; the rim band is labelled.
* ``bending``: the part beyond a hinge plane rotates about the hinge line.
* ``crack``: a thin channel along a random surface walk is deleted.

A carve whose labelled fraction falls outside [0.01, 0.10] is retried with a
rescaled footprint, up to 32 attempts.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CannotSatisfyFraction, EmptyMesh, InvalidInput, InvalidMesh
from .geometry import Mesh, NeighborIndex, PointCloud, estimate_normals, mean_spacing
from .io import atomic_write_text, read_mesh, write_ply

GENERATOR_VERSION = "1.0"
MANIFEST_VERSION = 1
DEFECT_KINDS = ("bulge", "concavity", "hole", "break", "bending", "crack")
SHAPES = ("sphere", "cylinder", "bottle", "cap", "bowl", "box")
MIN_FRACTION, MAX_FRACTION = 0.01, 0.10
MAX_ATTEMPTS = 32


# ---------------------------------------------------------------- meshes

def _edge_midpoints(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    return mids, inv.reshape(3, -1).T  # per face: edge ids of (01, 12, 20)


def subdivide_once(mesh: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints."""
    mids, eid = _edge_midpoints(mesh)
    nv = len(mesh.vertices)
    a, b, c = mesh.faces.T
    ab, bc, ca = (nv + eid[:, i] for i in range(3))
    faces = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([ab, b, bc], 1),
        np.stack([ca, bc, c], 1), np.stack([ab, bc, ca], 1),
    ])
    return Mesh(np.concatenate([mesh.vertices, mids]), faces)


def subdivide(mesh: Mesh, target_vertices: int) -> Mesh:
    """Midpoint subdivision, repeated until the vertex count reaches the target."""
    if not isinstance(mesh, Mesh):
        raise InvalidMesh("subdivide expects a Mesh")
    if len(mesh.faces) == 0:
        raise InvalidMesh("cannot subdivide a mesh without faces")
    while len(mesh.vertices) < target_vertices:
        mesh = subdivide_once(mesh)
    return mesh


def sample_surface(mesh: Mesh, n_points: int, seed) -> PointCloud:
    """Area-weighted uniform samples with interpolated vertex normals.

    Meshes whose parts share no vertices (such as the box faces) therefore get
    flat normals on each part and sharp creases between parts.
    """
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    if n_points < 1:
        raise InvalidInput("n_points must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n_points, p=areas / total)
    u, v = rng.random(n_points), rng.random(n_points)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    w = 1.0 - u - v
    tri = mesh.faces[face]
    V = mesh.vertices
    pts = w[:, None] * V[tri[:, 0]] + u[:, None] * V[tri[:, 1]] + v[:, None] * V[tri[:, 2]]
    vn = mesh.vertex_normals()
    nrm = w[:, None] * vn[tri[:, 0]] + u[:, None] * vn[tri[:, 1]] + v[:, None] * vn[tri[:, 2]]
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


def merge_meshes(parts: Sequence[Mesh]) -> Mesh:
    verts, faces, off = [], [], 0
    for m in parts:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def icosahedron() -> Mesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    return Mesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)


def revolve(profile: np.ndarray, segments: int = 96) -> Mesh:
    """Surface of revolution about +z from an (r, z) polyline.

    Profile vertices with r == 0 become poles. Traversing the profile so the
    solid lies to its left (bottom to top for an outer wall) gives outward
    face winding.
    """
    profile = np.asarray(profile, dtype=np.float64)
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring_ids, verts = [], []
    for r, z in profile:
        base = len(verts)
        if r <= 1e-12:
            verts.append([0.0, 0.0, z])
            ring_ids.append([base] * segments)
        else:
            verts.extend(np.stack([r * np.cos(ang), r * np.sin(ang), np.full(segments, z)], 1))
            ring_ids.append(list(range(base, base + segments)))
    faces = []
    for a, b in zip(ring_ids[:-1], ring_ids[1:]):
        for j in range(segments):
            j2 = (j + 1) % segments
            t1, t2 = (a[j], a[j2], b[j2]), (a[j], b[j2], b[j])
            for t in (t1, t2):
                if len(set(t)) == 3:
                    faces.append(t)
    return Mesh(np.array(verts), np.array(faces))


def _disk(r: float, z: float, up: bool, segments: int = 96, rings: int = 12) -> Mesh:
    prof = np.stack([np.linspace(r, 0.0, rings + 1), np.full(rings + 1, z)], 1)
    return revolve(prof if up else prof[::-1], segments)


def _arc(r0: float, z0: float, radius: float, a0: float, a1: float, steps: int) -> np.ndarray:
    t = np.linspace(a0, a1, steps)
    return np.stack([r0 + radius * np.cos(t), z0 + radius * np.sin(t)], 1)


def _unique_rows(prof: np.ndarray) -> np.ndarray:
    keep = np.ones(len(prof), dtype=bool)
    keep[1:] = np.any(np.abs(np.diff(prof, axis=0)) > 1e-12, axis=1)
    return prof[keep]


def make_shape(name: str, target_vertices: int = 2500) -> Mesh:
    """Built-in procedural solid, scaled to fit the unit ball."""
    if name == "sphere":
        ico = icosahedron()
        m = subdivide(ico, target_vertices)
        mesh = Mesh(m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True), m.faces)
    elif name == "box":
        ext = np.array([1.0, 0.7, 0.8])
        g = np.linspace(-1.0, 1.0, 13)
        g1, g2 = (x.ravel() for x in np.meshgrid(g, g, indexing="ij"))
        idx = np.arange(169).reshape(13, 13)
        quads = np.stack([idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]], -1).reshape(-1, 4)
        tris = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
        parts = []
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            for sign in (-1.0, 1.0):
                verts = np.zeros((169, 3))
                verts[:, axis] = sign * ext[axis]
                verts[:, u], verts[:, v] = g1 * ext[u], g2 * ext[v]
                t = tris
                n = np.cross(verts[t[0, 1]] - verts[t[0, 0]], verts[t[0, 2]] - verts[t[0, 0]])
                if n[axis] * sign < 0:
                    t = t[:, ::-1]
                parts.append(Mesh(verts, t))
        mesh = merge_meshes(parts)
    elif name == "cylinder":
        side = revolve(np.stack([np.full(40, 0.6), np.linspace(-0.8, 0.8, 40)], 1))
        mesh = merge_meshes([side, _disk(0.6, -0.8, up=False), _disk(0.6, 0.8, up=True)])
    elif name == "bottle":
        z = np.linspace(-0.9, 0.9, 80)
        body = 0.5 - 0.3 * (1.0 / (1.0 + np.exp(-(z - 0.35) * 14.0)))
        r = np.where(z < -0.75, 0.5 - 0.5 * (1 - np.sqrt(np.clip(1 - ((z + 0.75) / 0.15) ** 2, 0, 1))) * 0.2, body)
        side = revolve(np.stack([r, z], 1))
        mesh = merge_meshes([side, _disk(float(r[0]), -0.9, up=False), _disk(float(r[-1]), 0.9, up=True)])
    elif name == "cap":
        prof = np.concatenate([
            np.array([[0.9, -0.35]]),
            np.stack([np.full(20, 0.9), np.linspace(-0.35, 0.15, 20)], 1),
            _arc(0.7, 0.15, 0.2, 0.0, np.pi / 2, 16),
            np.stack([np.linspace(0.7, 0.0, 24), np.full(24, 0.35)], 1),
        ])
        wall = revolve(_unique_rows(prof))
        mesh = merge_meshes([wall, _disk(0.9, -0.35, up=False)])
    elif name == "bowl":
        outer = _arc(0.0, 0.2, 1.0, -np.pi / 2, 0.0, 48)  # bottom pole up to the rim
        rim = _arc(0.95, 0.2, 0.05, 0.0, np.pi, 10)
        inner = _arc(0.0, 0.2, 0.9, 0.0, -np.pi / 2, 44)
        prof = _unique_rows(np.concatenate([outer, rim, inner]))
        prof[:, 0] = np.abs(prof[:, 0])
        prof[np.abs(prof[:, 0]) < 1e-9, 0] = 0.0
        mesh = revolve(prof)
    else:
        raise InvalidInput(f"unknown shape {name!r}; choose from {SHAPES}")
    mesh = subdivide(mesh, target_vertices)
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    v /= np.max(np.linalg.norm(v, axis=1))
    return Mesh(v, mesh.faces)


# ---------------------------------------------------------------- defects

@dataclass(frozen=True)
class DefectSpec:
    """One procedural defect.

    ``magnitude`` is the displacement amplitude for bulge, concavity and
    bending, the removal radius for holes, the cap depth for breaks and the
    channel half-width for cracks. ``sigma`` is the Gaussian footprint for
    displacements, the rim band for breaks and the hinge ramp for bending.
    ``extra`` holds ``direction`` (break/bending plane normal), ``axis`` and
    ``angle`` (bending) and ``hops`` (crack path length). For break and
    bending the seed is the cap apex and the plane sits ``depth`` below it.
    """

    kind: str
    seed_point: Tuple[float, float, float]
    magnitude: float
    sigma: float
    extra: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise InvalidInput(f"unknown defect kind {self.kind!r}")
        # bulge accepts a signed magnitude so that bulge(-a) == concavity(a)
        if self.kind == "bulge":
            if self.magnitude == 0 or not math.isfinite(self.magnitude):
                raise InvalidInput("bulge magnitude must be finite and nonzero")
        elif not self.magnitude > 0:
            raise InvalidInput("defect magnitude must be > 0")
        if not self.sigma > 0:
            raise InvalidInput("defect sigma must be > 0")
        object.__setattr__(self, "seed_point", tuple(float(x) for x in self.seed_point))

    def scaled(self, factor: float) -> "DefectSpec":
        """Same defect with its spatial footprint scaled by ``factor``."""
        extra = dict(self.extra)
        if self.kind in ("bulge", "concavity"):
            return replace(self, sigma=self.sigma * factor)
        if self.kind == "hole":
            return replace(self, magnitude=self.magnitude * factor)
        if self.kind in ("break", "bending"):
            extra["depth"] = extra.get("depth", self.sigma) * factor
            return replace(self, sigma=self.sigma * factor if self.kind == "break" else self.sigma,
                           extra=extra)
        extra["hops"] = max(2, int(round(extra.get("hops", 20) * factor)))
        return replace(self, extra=extra)

    def to_json(self) -> Dict:
        d = asdict(self)
        d["seed_point"] = list(self.seed_point)
        d["extra"] = {k: (list(v) if isinstance(v, (tuple, list, np.ndarray)) else v)
                      for k, v in self.extra.items()}
        return d


@dataclass
class GroundTruth:
    gt_label: np.ndarray
    region_id: np.ndarray
    inventory: Dict[int, DefectSpec]

    @property
    def fraction(self) -> float:
        return float(self.gt_label.mean()) if len(self.gt_label) else 0.0


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _seed_normal(cloud: PointCloud, s: np.ndarray) -> np.ndarray:
    i = int(np.argmin(np.sum((cloud.points - s) ** 2, axis=1)))
    return cloud.normals[i]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _rotate_about(p: np.ndarray, origin: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of each row of ``p`` by its own angle."""
    v = p - origin
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    k = axis[None, :]
    return origin + v * c + np.cross(k, v) * s + k * (v @ axis)[:, None] * (1.0 - c)


def _crack_path(cloud: PointCloud, start: int, hops: int, rng: np.random.Generator) -> np.ndarray:
    """Directed random walk on the 10-NN graph, never revisiting a point."""
    graph = NeighborIndex(cloud.points).knn(cloud.points, 11)
    nbrs = graph.indices[:, 1:]
    n0 = cloud.normals[start]
    tangent = _unit(np.cross(n0, rng.normal(size=3)))
    path, seen, cur = [start], {start}, start
    for _ in range(hops):
        cand = [j for j in nbrs[cur] if j not in seen]
        if not cand:
            break
        steps = cloud.points[cand] - cloud.points[cur]
        steps /= np.maximum(np.linalg.norm(steps, axis=1, keepdims=True), 1e-12)
        score = steps @ tangent + 0.3 * rng.standard_normal(len(cand))
        nxt = int(cand[int(np.argmax(score))])
        step = cloud.points[nxt] - cloud.points[cur]
        # keep heading roughly the same way, projected onto the local tangent plane
        nn = cloud.normals[nxt]
        t = 0.8 * tangent + 0.2 * _unit(step)
        t -= (t @ nn) * nn
        if np.linalg.norm(t) > 1e-9:
            tangent = _unit(t)
        path.append(nxt)
        seen.add(nxt)
        cur = nxt
    return np.array(path, dtype=np.int64)


def _dist_to_set(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    from scipy.spatial import cKDTree
    d, _ = cKDTree(targets).query(points)
    return d


def _apply(cloud: PointCloud, spec: DefectSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (new points, kept mask over the input, labelled mask over the output)."""
    p = cloud.points
    s = np.asarray(spec.seed_point)
    n = len(p)
    keep = np.ones(n, dtype=bool)
    kind = spec.kind
    if kind in ("bulge", "concavity"):
        sign = 1.0 if kind == "bulge" else -1.0
        amp = sign * spec.magnitude
        d2 = np.sum((p - s) ** 2, axis=1)
        inside = d2 <= (3.0 * spec.sigma) ** 2
        disp = np.where(inside, amp * np.exp(-d2 / (2.0 * spec.sigma ** 2)), 0.0)
        out = p + disp[:, None] * _seed_normal(cloud, s)[None, :]
        label = np.abs(disp) > 1e-4 * abs(spec.magnitude)
        return out, keep, label
    if kind == "hole":
        d = np.linalg.norm(p - s, axis=1)
        keep = d > spec.magnitude
        label = d[keep] <= 1.5 * spec.magnitude
        return p[keep], keep, label
    if kind == "break":
        u = _unit(spec.extra.get("direction", _seed_normal(cloud, s)))
        depth = spec.extra.get("depth", spec.magnitude)
        t = (p - s) @ u + depth  # signed distance to the cutting plane
        keep = t <= 0.0
        label = -t[keep] <= spec.sigma
        return p[keep], keep, label
    if kind == "bending":
        u = _unit(spec.extra.get("direction", _seed_normal(cloud, s)))
        depth = spec.extra.get("depth", spec.sigma)
        hinge = s - depth * u
        axis = np.asarray(spec.extra.get("axis", np.cross(u, [0.0, 0.0, 1.0])), dtype=np.float64)
        axis -= (axis @ u) * u
        if np.linalg.norm(axis) < 1e-9:
            axis = np.cross(u, [1.0, 0.0, 0.0])
        axis = _unit(axis)
        t = (p - hinge) @ u
        w = np.where(t > 0.0, _smoothstep(t / spec.sigma), 0.0)
        beyond = t > 0.0
        rel = p - hinge
        radial = rel - np.outer(rel @ axis, axis)
        rho = float(np.max(np.linalg.norm(radial[beyond], axis=1))) if beyond.any() else 0.0
        theta = float(spec.extra.get("angle", 0.35))
        if rho > 0:
            # chord length 2 rho sin(theta/2) must not exceed the magnitude
            theta = min(theta, 2.0 * math.asin(min(1.0, spec.magnitude / (2.0 * rho))))
        out = p.copy()
        if beyond.any():
            out[beyond] = _rotate_about(p[beyond], hinge, axis, theta * w[beyond])
        label = w > 0.1
        return out, keep, label
    # crack
    start = int(np.argmin(np.sum((p - s) ** 2, axis=1)))
    path = _crack_path(cloud, start, int(spec.extra.get("hops", 20)), rng)
    d = _dist_to_set(p, p[path])
    keep = d > spec.magnitude
    label = d[keep] <= 1.5 * spec.magnitude
    return p[keep], keep, label


def carve(cloud: PointCloud, spec: DefectSpec, seed, region: int = 1,
          max_attempts: int = MAX_ATTEMPTS) -> Tuple[PointCloud, GroundTruth]:
    """Apply one defect, rescaling its footprint until the labelled fraction fits.

    The returned cloud carries re-estimated normals where geometry moved, and
    gt/region arrays with the defect labelled as ``region``.
    """
    if cloud.normals is None:
        raise InvalidInput("carve needs a cloud with normals")
    base_gt = np.zeros(len(cloud), np.uint8) if cloud.gt_label is None else cloud.gt_label
    base_reg = np.zeros(len(cloud), np.int32) if cloud.region_id is None else cloud.region_id
    cur = spec
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), attempt]))
        pts, keep, label = _apply(cloud, cur, rng)
        gt = base_gt[keep].copy()
        reg = base_reg[keep].copy()
        new = label & (gt == 0)
        gt[new] = 1
        reg[new] = region
        frac = float(new.sum()) / max(len(pts), 1)
        if MIN_FRACTION <= frac <= MAX_FRACTION and len(pts) >= 16:
            if cur.kind in ("bulge", "concavity", "bending"):
                normals = estimate_normals(pts).normals
            else:
                normals = cloud.normals[keep]
            out = PointCloud(pts, normals, gt, reg)
            inv = {int(r): cur for r in (region,)}
            return out, GroundTruth(out.gt_label, out.region_id, inv)
        if frac < MIN_FRACTION:
            factor = 1.4 if frac == 0 else min(1.4, math.sqrt(0.04 / frac))
        else:
            factor = max(0.6, math.sqrt(0.05 / frac))
        cur = cur.scaled(factor)
    raise CannotSatisfyFraction(
        f"{spec.kind} defect could not reach an anomaly fraction in "
        f"[{MIN_FRACTION}, {MAX_FRACTION}] after {max_attempts} attempts")


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1)[0])
    return int(seed)


def random_defect(cloud: PointCloud, kind: str, rng: np.random.Generator,
                  severity: float = 1.0) -> DefectSpec:
    """Draw a defect whose footprint targets a 3-6% labelled fraction.

    Footprints come from distance quantiles around the seed, which keeps the
    labelled fraction near its target on any shape. ``severity`` scales the
    displacement amplitudes.
    """
    p = cloud.points
    i = int(rng.integers(len(p)))
    s = p[i]
    normal = cloud.normals[i]
    target = rng.uniform(0.03, 0.06)
    d = np.linalg.norm(p - s, axis=1)
    if kind in ("bulge", "concavity"):
        rho = float(np.quantile(d, target))
        mag = severity * rng.uniform(0.35, 0.55) * rho
        return DefectSpec(kind, s, mag, rho / 3.0)
    if kind == "hole":
        return DefectSpec(kind, s, float(np.quantile(d, target / 1.25)), 1.0)
    centroid = p.mean(axis=0)
    radial = s - centroid
    u = _unit(radial) if np.linalg.norm(radial) > 1e-9 else normal
    if u @ normal < 0:
        u = normal
    # a tilted plane avoids cutting exactly along a flat face
    u = _unit(u + 0.35 * _unit(np.cross(u, rng.normal(size=3))))
    # the cap apex along u becomes the seed, so cap depths are positive
    s = p[int(np.argmax(p @ u))]
    t = (p - s) @ u
    if kind == "break":
        removed = rng.uniform(0.05, 0.10)
        cut = float(np.quantile(t, 1.0 - removed))
        depth = -cut
        below = np.sort(cut - t[t <= cut])
        band = float(below[min(len(below) - 1, int(target * len(p)))])
        return DefectSpec(kind, s, max(depth, 1e-6), max(band, 1e-6),
                          {"direction": u.tolist(), "depth": max(depth, 1e-6)})
    if kind == "bending":
        cut = float(np.quantile(t, 1.0 - target))
        depth = max(-cut, 1e-6)
        ramp = max(0.25 * depth, 1e-6)
        axis = _unit(np.cross(u, rng.normal(size=3)))
        mag = severity * rng.uniform(0.12, 0.2)
        return DefectSpec(kind, s, mag, ramp, {"direction": u.tolist(), "depth": depth,
                                               "axis": axis.tolist(),
                                               "angle": float(rng.uniform(0.3, 0.6))})
    spacing = mean_spacing(p)
    width = 4.0 * spacing
    # rim band area ~ width * path length; path step ~ 1.2 spacing
    area = target * 4.0 * np.pi * float(np.quantile(d, 0.5)) ** 2 / 2.0
    hops = int(np.clip(0.5 * area / (width * 1.2 * spacing), 8, 400))
    return DefectSpec("crack", s, width, width, {"hops": hops})


# ---------------------------------------------------------------- datasets

@dataclass
class SynthConfig:
    classes: Tuple[str, ...] = SHAPES[:4]
    n_points: int = 10000
    n_train: int = 4
    n_test: int = 30
    n_test_normal: int = 12
    defects_per_sample: int = 1
    severity: float = 1.0
    rotation_jitter_deg: float = 3.0
    scale_jitter: float = 0.03
    mesh_vertices: int = 2500

    def validate(self):
        if not self.classes:
            raise InvalidInput("at least one class is required")
        if not 8000 <= self.n_points <= 30000:
            raise InvalidInput("n_points must lie in [8000, 30000]")
        if self.n_train != 4:
            raise InvalidInput("each class has exactly 4 training samples")
        if not 28 <= self.n_test <= 40:
            raise InvalidInput("n_test must lie in [28, 40]")
        if not 0 <= self.n_test_normal < self.n_test:
            raise InvalidInput("n_test_normal must leave room for defected samples")
        if self.defects_per_sample < 1:
            raise InvalidInput("defects_per_sample must be >= 1")


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = _unit(rng.normal(size=3))
    ang = math.radians(max_deg) * rng.uniform(-1.0, 1.0)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * K @ K


def _load_base(name: str, cfg: SynthConfig) -> Mesh:
    if name in SHAPES:
        return make_shape(name, cfg.mesh_vertices)
    mesh = subdivide(read_mesh(name), cfg.mesh_vertices)
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    return Mesh(v / np.max(np.linalg.norm(v, axis=1)), mesh.faces)


def class_name(shape: str) -> str:
    return Path(shape).stem if shape not in SHAPES else shape


def _make_sample(task) -> Dict:
    """Build and write one sample; returns its manifest record."""
    cfg, root, seed, ci, shape, split, idx, kinds = task
    ss = np.random.SeedSequence([seed, ci, 0 if split == "train" else 1, idx])
    rng = np.random.default_rng(ss)
    mesh = _load_base(shape, cfg)
    R = _random_rotation(rng, cfg.rotation_jitter_deg)
    scale = 1.0 + cfg.scale_jitter * rng.uniform(-1.0, 1.0)
    mesh = Mesh(mesh.vertices @ R.T * scale, mesh.faces)
    cloud = sample_surface(mesh, cfg.n_points, rng.integers(2 ** 63))
    cloud = PointCloud(cloud.points, cloud.normals, np.zeros(len(cloud), np.uint8),
                       np.zeros(len(cloud), np.int32))
    defects = []
    for r, kind in enumerate(kinds, start=1):
        spec = random_defect(cloud, kind, rng, cfg.severity)
        cloud, gt = carve(cloud, spec, int(rng.integers(2 ** 63)), region=r)
        defects.append({"region": r, **gt.inventory[r].to_json()})
    name = class_name(shape)
    rel = f"{name}/{split}/{split}_{idx:03d}.ply"
    write_ply(Path(root) / rel, cloud)
    return {
        "class": name, "path": rel, "split": split, "is_anomalous": bool(kinds),
        "defects": defects, "point_count": len(cloud),
        "anomaly_fraction": float(cloud.gt_label.mean()),
    }


def _plan(cfg: SynthConfig, seed: int) -> List[tuple]:
    tasks = []
    for ci, shape in enumerate(cfg.classes):
        for i in range(cfg.n_train):
            tasks.append((ci, shape, "train", i, ()))
        n_def = cfg.n_test - cfg.n_test_normal
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci, 2]))
        kinds = [DEFECT_KINDS[j % len(DEFECT_KINDS)] for j in range(n_def)]
        layout = [()] * cfg.n_test_normal
        for k in kinds:
            extra = [DEFECT_KINDS[int(rng.integers(len(DEFECT_KINDS)))]
                     for _ in range(cfg.defects_per_sample - 1)]
            layout.append(tuple([k] + extra))
        order = rng.permutation(len(layout))
        for i, j in enumerate(order):
            tasks.append((ci, shape, "test", i, layout[j]))
    return tasks


def generate_dataset(cfg: SynthConfig, out_dir, seed: int, jobs: int = 1) -> Dict:
    """Write every class's train/test clouds and ``manifest.json`` under ``out_dir``.

    The tree is built in a temporary sibling directory and moved into place
    only once complete, so a failure never leaves a partial dataset behind.
    """
    cfg.validate()
    out = Path(out_dir)
    if out.exists() and (not out.is_dir() or (any(out.iterdir()) and not (out / "manifest.json").exists())):
        raise InvalidInput(f"{out} exists and is not a dataset directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.tmp"))
    try:
        plan = _plan(cfg, seed)
        tasks = [(cfg, str(tmp), seed, ci, shape, split, idx, kinds)
                 for ci, shape, split, idx, kinds in plan]
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as ex:
                records = list(ex.map(_make_sample, tasks))
        else:
            records = [_make_sample(t) for t in tasks]
        manifest = {
            "version": MANIFEST_VERSION,
            "generator_version": GENERATOR_VERSION,
            "seed": int(seed),
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
            "classes": [class_name(c) for c in cfg.classes],
            "samples": records,
        }
        atomic_write_text(tmp / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out.exists():
            old = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.old"))
            os.replace(out, old / "d")
            os.replace(tmp, out)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def load_manifest(path) -> Dict:
    """Read a manifest and check it against the files next to it."""
    from .errors import ManifestMismatch
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as f:
        manifest = json.load(f)
    for key in ("version", "seed", "classes", "samples"):
        if key not in manifest:
            raise ManifestMismatch(f"manifest lacks {key!r}")
    root = path.parent
    for rec in manifest["samples"]:
        if rec["class"] not in manifest["classes"]:
            raise ManifestMismatch(f"sample {rec['path']} names unknown class {rec['class']!r}")
        if not (root / rec["path"]).exists():
            raise ManifestMismatch(f"missing sample file {rec['path']}")
    manifest["root"] = str(root)
    return manifest


def class_samples(manifest: Dict, cls: str, split: str) -> List[Dict]:
    return [r for r in manifest["samples"] if r["class"] == cls and r["split"] == split]
