import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare
from hypothesis import given, settings, strategies as st

from anomaly3d.errors import CannotSatisfyFraction, EmptyMesh, InvalidInput, ManifestMismatch
from anomaly3d.geometry import Mesh, PointCloud
from anomaly3d.io import read_ply
from anomaly3d.synth import (DEFECT_KINDS, SHAPES, DefectSpec, SynthConfig, carve, class_samples,
                             generate_dataset, icosahedron, load_manifest, make_shape,
                             random_defect, sample_surface, subdivide, subdivide_once)


def plane_cloud(side=100, spacing=0.05):
    g = (np.arange(side) - (side - 1) / 2) * spacing
    x, y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), np.zeros(side * side)], 1)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return PointCloud(pts, nrm)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- meshes

def test_subdivide_single_triangle():
    m = subdivide_once(Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]))
    assert len(m.vertices) == 6 and len(m.faces) == 4
    assert np.isclose(m.face_areas().sum(), 0.5)


def test_subdivide_icosahedron_counts():
    m = subdivide(icosahedron(), 40)
    assert len(m.vertices) == 42 and len(m.faces) == 80


def test_subdivide_noop_when_target_met():
    ico = icosahedron()
    m = subdivide(ico, 12)
    assert m is ico


def test_subdivision_keeps_surface():
    base = Mesh([[0, 0, 0], [2, 0, 0], [0, 3, 0], [0, 0, 1]], [[0, 1, 2], [0, 1, 3]])
    m = subdivide(base, 100)
    assert np.isclose(m.face_areas().sum(), base.face_areas().sum())


def test_sample_surface_density_follows_area():
    # unit square split into a small and a large triangle pair
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.25, 0, 0]]
    m = Mesh(v, [[0, 4, 3], [4, 1, 2], [4, 2, 3]])
    c = sample_surface(m, 10_000, 3)
    areas = m.face_areas() / m.face_areas().sum()
    # classify points to triangles by barycentric containment
    owner = np.full(len(c), -1)
    for f, tri in enumerate(m.faces):
        a, b, cc = m.vertices[tri][:, :2]
        lam = np.linalg.solve(np.array([b - a, cc - a]).T, (c.points[:, :2] - a).T).T
        inside = (lam >= -1e-9).all(1) & (lam.sum(1) <= 1 + 1e-9) & (owner < 0)
        owner[inside] = f
    assert np.all(owner >= 0)
    counts = np.bincount(owner, minlength=3)
    assert chisquare(counts, areas * len(c)).pvalue > 1e-3
    assert np.all(np.abs(counts / len(c) - areas) <= 0.1 * areas)


def test_sample_surface_deterministic_and_errors():
    m = make_shape("sphere", 500)
    a, b = sample_surface(m, 1000, 5), sample_surface(m, 1000, 5)
    assert np.array_equal(a.points, b.points)
    assert np.allclose(np.linalg.norm(a.normals, axis=1), 1)
    with pytest.raises(EmptyMesh):
        sample_surface(Mesh(np.zeros((3, 3)), np.zeros((0, 3), int)), 10, 0)


@pytest.mark.parametrize("name", SHAPES)
def test_shapes_fit_unit_ball_with_outward_normals(name):
    m = make_shape(name, 1500)
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.isclose(r.max(), 1.0)
    c = sample_surface(m, 3000, 1)
    if name != "bowl":  # the bowl's inner wall faces the centroid
        assert np.mean(np.sum(c.normals * c.points, axis=1) > 0) > 0.9


# ---------------------------------------------------------------- defects

def test_bulge_on_plane_labels_displaced_points():
    cloud = plane_cloud()
    spec = DefectSpec("bulge", (0, 0, 0), 0.1, 0.2)
    out, gt = carve(cloud, spec, 0)
    disp = out.points - cloud.points
    moved = np.linalg.norm(disp, axis=1) > 0
    assert np.array_equal(moved, gt.gt_label == 1)
    assert np.allclose(disp[:, :2], 0) and np.all(disp[moved, 2] > 0)
    assert 0.01 <= gt.fraction <= 0.10


def test_concavity_equals_negated_bulge():
    cloud = plane_cloud()
    a, _ = carve(cloud, DefectSpec("bulge", (0, 0, 0), -0.1, 0.2), 0)
    b, _ = carve(cloud, DefectSpec("concavity", (0, 0, 0), 0.1, 0.2), 0)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.gt_label, b.gt_label)


def test_hole_removes_five_percent():
    cloud = plane_cloud()
    n = len(cloud)
    d = np.linalg.norm(cloud.points, axis=1)
    radius = float(np.sort(d)[int(0.05 * n) - 1])
    out, gt = carve(cloud, DefectSpec("hole", (0, 0, 0), radius, 1.0), 0)
    assert len(out) == n - int(0.05 * n)
    assert 0.01 <= gt.fraction <= 0.10
    # labels mark the retained rim only
    rd = np.linalg.norm(out.points[gt.gt_label == 1], axis=1)
    assert rd.min() > radius and rd.max() <= 1.5 * radius


def test_carve_rescales_oversized_defect():
    cloud = plane_cloud()
    out, gt = carve(cloud, DefectSpec("bulge", (0, 0, 0), 0.1, 1.0), 0)
    assert 0.01 <= gt.fraction <= 0.10


def test_carve_gives_up_when_impossible():
    cloud = plane_cloud(20)
    with pytest.raises(CannotSatisfyFraction):
        carve(cloud, DefectSpec("bulge", (0, 0, 0), 0.1, 10.0), 0, max_attempts=1)


def test_defect_spec_validation():
    with pytest.raises(InvalidInput):
        DefectSpec("dent", (0, 0, 0), 1, 1)
    with pytest.raises(InvalidInput):
        DefectSpec("hole", (0, 0, 0), 0, 1)
    with pytest.raises(InvalidInput):
        DefectSpec("bulge", (0, 0, 0), 0.1, 0)
    spec = DefectSpec("crack", (0, 0, 0), 0.1, 0.1, {"hops": 10})
    assert json.loads(json.dumps(spec.to_json()))["extra"]["hops"] == 10


@pytest.mark.parametrize("kind", DEFECT_KINDS)
@pytest.mark.parametrize("shape", ["sphere", "cylinder", "box"])
def test_random_defects_land_in_fraction_range(kind, shape):
    mesh = make_shape(shape, 1500)
    cloud = sample_surface(mesh, 8000, 0)
    rng = np.random.default_rng(1)
    spec = random_defect(cloud, kind, rng, 1.0)
    out, gt = carve(cloud, spec, 2)
    assert 0.01 <= gt.fraction <= 0.10
    assert np.all(np.isfinite(out.points))
    if kind in ("bulge", "concavity", "bending"):
        grow = np.abs(out.points.max(0) - cloud.points.max(0)).max()
        grow = max(grow, np.abs(out.points.min(0) - cloud.points.min(0)).max())
        assert grow <= abs(spec.magnitude) + 1e-6


@settings(max_examples=15, deadline=None)
@given(st.floats(0.02, 0.3), st.floats(0.15, 0.4), st.sampled_from(["bulge", "concavity"]))
def test_displacement_never_exceeds_magnitude(mag, sigma, kind):
    cloud = plane_cloud(60)
    out, gt = carve(cloud, DefectSpec(kind, (0, 0, 0), mag, sigma), 0)
    assert np.all(np.isfinite(out.points))
    assert np.abs(out.points - cloud.points).max() <= mag + 1e-12


# ---------------------------------------------------------------- datasets

SMALL = SynthConfig(classes=("sphere",), n_points=8000, n_test=28, n_test_normal=10, mesh_vertices=800)


def test_dataset_deterministic_and_valid(tmp_path):
    a = generate_dataset(SMALL, tmp_path / "a", seed=7)
    generate_dataset(SMALL, tmp_path / "b", seed=7)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    man = load_manifest(tmp_path / "a")
    test = class_samples(man, "sphere", "test")
    assert 28 <= len(test) <= 40 and len(class_samples(man, "sphere", "train")) == 4
    for r in test:
        cloud, _ = read_ply(tmp_path / "a" / r["path"])
        assert len(cloud) == r["point_count"]
        if r["is_anomalous"]:
            assert 0.01 <= cloud.gt_label.mean() <= 0.10
            assert r["defects"][0]["kind"] in DEFECT_KINDS
        else:
            assert cloud.gt_label.sum() == 0
    assert a["generator_version"] and a["seed"] == 7


def test_dataset_refuses_foreign_directory(tmp_path):
    out = tmp_path / "occupied"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    with pytest.raises(InvalidInput):
        generate_dataset(SMALL, out, 0)
    assert (out / "keep.txt").exists()
    assert not any(p.name.startswith(".occupied") for p in tmp_path.iterdir())


def test_config_bounds():
    for bad in ({"n_points": 7999}, {"n_points": 30001}, {"n_test": 27}, {"n_train": 3}, {"classes": ()}):
        with pytest.raises(InvalidInput):
            SynthConfig(**bad).validate()
    SynthConfig(n_points=8000).validate()
    SynthConfig(n_points=30000).validate()


def test_manifest_mismatch(tmp_path):
    generate_dataset(SMALL, tmp_path / "d", 1)
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    man["samples"][0]["path"] = "missing.ply"
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ManifestMismatch):
        load_manifest(tmp_path / "d")
