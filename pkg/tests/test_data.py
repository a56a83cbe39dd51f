import numpy as np
import pytest
from hypothesis import given, strategies as st

from pffnet.data import (RNG_NAME, CorruptionSpec, ParseError, ShapeSpec, add_noise, build_from_manifest,
                         corrupt, density_gradient, density_stripe, format_manifest, load_cloud,
                         make_rng, manifest_values, principal_coordinate, quadric_height,
                         read_normals, read_xyz, sample_queries, specs_from_manifest, synth_shape,
                         write_normals, write_xyz)
from pffnet.geometry import GeometryError, PointCloud, bbox_diagonal


def implicit(spec):
    """Scalar field whose zero set is the sampled surface."""
    if spec.kind == "plane":
        return lambda p: p[..., 2]
    if spec.kind == "sphere":
        return lambda p: (p ** 2).sum(-1) - spec.radius ** 2
    if spec.kind == "cylinder":
        return lambda p: p[..., 0] ** 2 + p[..., 1] ** 2 - spec.radius ** 2
    if spec.kind == "torus":
        R, r = spec.major_radius, spec.radius
        return lambda p: (np.hypot(p[..., 0], p[..., 1]) - R) ** 2 + p[..., 2] ** 2 - r ** 2
    if spec.kind == "quadric":
        return lambda p: p[..., 2] - quadric_height(spec.coeffs, p[..., 0], p[..., 1])
    raise ValueError(spec.kind)


def numeric_gradient(f, pts, h=1e-6):
    g = np.zeros_like(pts)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        g[:, axis] = (f(pts + e) - f(pts - e)) / (2 * h)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


class TestShapes:
    @pytest.mark.parametrize("spec", [
        ShapeSpec(kind="plane", count=300, seed=1),
        ShapeSpec(kind="sphere", count=300, seed=2, radius=1.5),
        ShapeSpec(kind="cylinder", count=300, seed=3, radius=0.7),
        ShapeSpec(kind="torus", count=300, seed=4),
        ShapeSpec(kind="quadric", count=300, seed=5, coeffs=(0.3, -0.2, 1.0, 0.5, -0.7)),
    ], ids=lambda s: s.kind)
    def test_normals_match_surface_gradient(self, spec):
        cloud = synth_shape(spec)
        f = implicit(spec)
        np.testing.assert_allclose(np.abs(f(cloud.points)), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-12)
        grad = numeric_gradient(f, cloud.points)
        cos = np.abs(np.einsum("ij,ij->i", grad, cloud.normals))
        sin = np.sqrt(np.clip(1 - cos ** 2, 0, None))
        assert sin.max() < 1e-6

    def test_simple_cases(self):
        plane = synth_shape(ShapeSpec(kind="plane", count=50))
        np.testing.assert_array_equal(plane.normals, np.tile([0, 0, 1.0], (50, 1)))
        sphere = synth_shape(ShapeSpec(kind="sphere", count=50))
        np.testing.assert_allclose(sphere.normals, sphere.points, atol=1e-15)

    def test_box_faces(self):
        cloud = synth_shape(ShapeSpec(kind="box-edges", count=500, size=2.0, seed=3))
        on_face = np.abs(np.einsum("ij,ij->i", cloud.points, cloud.normals))
        np.testing.assert_allclose(on_face, 1.0, atol=1e-15)

    def test_deterministic(self):
        a = synth_shape(ShapeSpec(kind="torus", count=200, seed=9))
        b = synth_shape(ShapeSpec(kind="torus", count=200, seed=9))
        assert a.points.tobytes() == b.points.tobytes()
        c = synth_shape(ShapeSpec(kind="torus", count=200, seed=10))
        assert a.points.tobytes() != c.points.tobytes()

    def test_invalid(self):
        for bad in (ShapeSpec(kind="blob"), ShapeSpec(count=0), ShapeSpec(radius=-1.0),
                    ShapeSpec(radius=float("inf"))):
            with pytest.raises(ValueError):
                synth_shape(bad)


class TestRng:
    def test_stream_separation_and_repeatability(self):
        a = make_rng(5, "x").uniform(size=4)
        np.testing.assert_array_equal(a, make_rng(5, "x").uniform(size=4))
        assert not np.array_equal(a, make_rng(5, "y").uniform(size=4))
        assert not np.array_equal(a, make_rng(6, "x").uniform(size=4))

    def test_name_is_versioned(self):
        assert RNG_NAME.endswith("-v1")


class TestCorruptions:
    def test_zero_noise_is_identity(self):
        cloud = synth_shape(ShapeSpec(count=100))
        assert add_noise(cloud, 0.0, 1) is cloud

    def test_noise_statistics(self):
        cloud = synth_shape(ShapeSpec(kind="sphere", count=50_000, seed=1))
        noisy = add_noise(cloud, 0.006, 2)
        sigma = 0.006 * bbox_diagonal(cloud)
        std = (noisy.points - cloud.points).std(axis=0)
        np.testing.assert_allclose(std, sigma, rtol=0.05)
        assert noisy.normals is cloud.normals or np.array_equal(noisy.normals, cloud.normals)
        again = add_noise(cloud, 0.006, 2)
        assert again.points.tobytes() == noisy.points.tobytes()

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            add_noise(synth_shape(ShapeSpec(count=10)), -0.1, 0)

    def test_stripe_keep_all_is_identity(self):
        cloud = synth_shape(ShapeSpec(kind="plane", count=500, seed=3))
        out = density_stripe(cloud, 1, keep_ratio=1.0)
        np.testing.assert_array_equal(out.points, cloud.points)

    def test_stripe_histogram(self):
        cloud = synth_shape(ShapeSpec(kind="plane", count=30_000, seed=4, size=2.0))
        out = density_stripe(cloud, 1)
        t = principal_coordinate(cloud.points)
        lo, hi = t.min(), t.max()
        t_out = principal_coordinate(out.points)
        # slab counts against the input; the principal axis barely moves for a square
        counts_in = np.histogram(t, bins=6, range=(lo, hi))[0]
        kept = np.isin(cloud.points.view([("", float)] * 3), out.points.view([("", float)] * 3)).ravel()
        counts_out = np.histogram(t[kept], bins=6, range=(lo, hi))[0]
        ratio = counts_out / counts_in
        np.testing.assert_allclose(ratio[0::2], 1.0)
        np.testing.assert_allclose(ratio[1::2], 0.15, atol=0.03)
        assert len(t_out) == kept.sum()

    def test_gradient_ramp(self):
        cloud = synth_shape(ShapeSpec(kind="plane", count=100_000, seed=5))
        out = density_gradient(cloud, 2)
        t = principal_coordinate(cloud.points)
        frac = (t - t.min()) / (t.max() - t.min())
        kept = np.zeros(len(cloud), dtype=bool)
        idx = {p.tobytes(): i for i, p in enumerate(cloud.points)}
        kept[[idx[p.tobytes()] for p in out.points]] = True
        for d in range(10):
            sel = (frac >= d / 10) & (frac < (d + 1) / 10)
            expected = 0.05 + 0.95 * frac[sel].mean()
            assert abs(kept[sel].mean() - expected) < 0.03

    def test_empty_result(self):
        cloud = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        with pytest.raises(GeometryError):
            density_gradient(cloud, 0, low=0.0, high=0.0)

    def test_corrupt_validates(self):
        with pytest.raises(ValueError):
            corrupt(synth_shape(ShapeSpec(count=10)), CorruptionSpec(density="zigzag"))


class TestQueries:
    def test_full_permutation(self):
        q = sample_queries(100, 100, 3)
        assert sorted(q) == list(range(100))

    def test_determinism_and_seed_sensitivity(self):
        np.testing.assert_array_equal(sample_queries(1000, 50, 1), sample_queries(1000, 50, 1))
        differ = sum(not np.array_equal(sample_queries(1000, 50, s), sample_queries(1000, 50, s + 1))
                     for s in range(100))
        assert differ == 100

    def test_with_replacement_when_oversized(self):
        q = sample_queries(5, 20, 0)
        assert len(q) == 20 and q.max() < 5

    def test_bad_count(self):
        with pytest.raises(ValueError):
            sample_queries(10, 0, 0)


class TestFiles:
    @given(st.integers(0, 2 ** 32 - 1))
    def test_round_trip(self, seed):
        import tempfile, pathlib
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-8, 8, size=(20, 1))
        normals = rng.normal(size=(20, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        with tempfile.TemporaryDirectory() as d:
            d = pathlib.Path(d)
            write_xyz(d / "a.xyz", PointCloud(pts, normals))
            write_normals(d / "a.normals", normals)
            back = load_cloud(d / "a.xyz", d / "a.normals")
            np.testing.assert_array_equal(back.points, pts)
            np.testing.assert_allclose(back.normals, normals, atol=1e-9)

    def test_order_preserved_and_blank_lines(self, tmp_path):
        (tmp_path / "a.xyz").write_text("1 2 3\n\n4 5 6\n")
        np.testing.assert_array_equal(read_xyz(tmp_path / "a.xyz"), [[1, 2, 3], [4, 5, 6]])

    def test_malformed_line(self, tmp_path):
        (tmp_path / "a.xyz").write_text("1.0 2.0\n")
        with pytest.raises(ParseError, match=":1:"):
            read_xyz(tmp_path / "a.xyz")
        (tmp_path / "b.normals").write_text("0 0 1\n0 0 x\n")
        with pytest.raises(ParseError, match=":2:"):
            read_normals(tmp_path / "b.normals")

    def test_length_mismatch(self, tmp_path):
        (tmp_path / "a.xyz").write_text("0 0 0\n1 1 1\n")
        (tmp_path / "a.normals").write_text("0 0 1\n")
        with pytest.raises(ParseError):
            load_cloud(tmp_path / "a.xyz", tmp_path / "a.normals")


class TestManifest:
    def test_round_trip_rebuilds_identical_cloud(self):
        shape = ShapeSpec(kind="quadric", count=300, seed=4, coeffs=(0.1, 0.2, 0.3, 0.4, 0.5))
        corruption = CorruptionSpec(noise_sigma_frac=0.012, density="stripe", seed=9)
        text = format_manifest(manifest_values(shape, corruption))
        assert "corruption_noise_sigma_frac=0.012" in text
        assert "density_variant=stripe-v1" in text and f"rng={RNG_NAME}" in text
        s2, c2 = specs_from_manifest(text)
        assert s2 == shape and c2 == corruption
        a = corrupt(synth_shape(shape), corruption)
        b = build_from_manifest(text)
        assert a.points.tobytes() == b.points.tobytes()

    def test_bad_line(self):
        with pytest.raises(ParseError):
            specs_from_manifest("kind=sphere\nnonsense\n")
