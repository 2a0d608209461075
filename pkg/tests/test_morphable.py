"""PCA shape space: construction, round trips, registry, file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eyetwin.morphable import (
    ModelRegistry,
    MorphableModel,
    OcularLatent,
    build_3dmm,
    decode,
    decode_mesh,
    encode,
    load_3dmm,
    save_3dmm,
)
from eyetwin.registration import get_reference
from eyetwin.registration.pipeline import ShapeVector
from eyetwin.registration.rigid import LateralityError


def synthetic_shapes(m=12, n_vertices=40, seed=7, laterality="OD"):
    """Exemplars with a strong low-rank structure plus full-rank noise."""
    rng = np.random.default_rng(seed)
    size = 3 * n_vertices
    base = rng.normal(10.0, 2.0, size=size)
    modes = rng.normal(size=(3, size))
    weights = rng.normal(size=(m, 3)) * np.array([4.0, 2.0, 1.0])
    rows = base + weights @ modes + 0.01 * rng.normal(size=(m, size))
    return [ShapeVector(r, laterality=laterality, source_id=f"ex{i:02d}")
            for i, r in enumerate(rows)]


@pytest.fixture(scope="module")
def shapes():
    return synthetic_shapes()


@pytest.fixture(scope="module")
def model(shapes):
    return build_3dmm(shapes)


def rel_rmse(got, want):
    want = np.asarray(want, dtype=float)
    return float(np.sqrt(np.mean((np.asarray(got) - want) ** 2))
                 / np.sqrt(np.mean(want**2)))


class TestBuild:
    def test_dimension_is_one_less_than_exemplar_count(self, shapes, model):
        assert model.dim == len(shapes) - 1
        assert model.eigenvalues.shape == (model.dim,)
        assert model.components.shape == (model.dim, shapes[0].coords.size)
        assert model.n_exemplars == len(shapes)

    def test_mean_is_exemplar_average(self, shapes, model):
        rows = np.stack([s.coords for s in shapes])
        np.testing.assert_allclose(model.mean, rows.mean(axis=0), atol=1e-12)

    def test_components_orthonormal(self, model):
        gram = model.components @ model.components.T
        assert np.max(np.abs(gram - np.eye(model.dim))) < 1e-9

    def test_eigenvalues_descending_nonnegative(self, model):
        assert np.all(model.eigenvalues >= 0)
        assert np.all(np.diff(model.eigenvalues) <= 0)

    def test_sign_convention(self, model):
        # Largest-magnitude entry of each direction points positive.
        for u in model.components:
            assert u[np.argmax(np.abs(u))] > 0

    def test_matches_dense_covariance_eig(self):
        # Oracle: eigh of the explicit n x n covariance on a small instance.
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(5, 9))
        model = build_3dmm(list(rows))
        centered = rows - rows.mean(axis=0)
        cov = centered.T @ centered / (len(rows) - 1)
        w, v = np.linalg.eigh(cov)
        w, v = w[::-1], v[:, ::-1]
        np.testing.assert_allclose(model.eigenvalues, w[: model.dim], atol=1e-12)
        for i in range(model.dim):
            if model.eigenvalues[i] > 1e-12:
                assert abs(model.components[i] @ v[:, i]) > 1.0 - 1e-9

    def test_eigenvalue_is_coefficient_variance(self, shapes, model):
        # Projection coefficients of the exemplars have sample variance
        # equal to the stored eigenvalue, per direction.
        rows = np.stack([s.coords for s in shapes])
        alphas = (rows - model.mean) @ model.components.T
        np.testing.assert_allclose(
            alphas.var(axis=0, ddof=1), model.eigenvalues, rtol=1e-9, atol=1e-12
        )

    def test_rank_deficient_padding(self):
        a = np.arange(9, dtype=float)
        b = a + np.ones(9)
        model = build_3dmm([a, b, a, b])
        assert model.dim == 3
        assert model.eigenvalues[0] > 0
        assert model.eigenvalues[1] == 0.0 and model.eigenvalues[2] == 0.0
        gram = model.components @ model.components.T
        assert np.max(np.abs(gram - np.eye(3))) < 1e-9
        # Exemplars still reconstruct: their energy lives in the kept mode.
        for row in (a, b):
            rec = decode(encode(row, model), model)
            np.testing.assert_allclose(rec.coords, row, atol=1e-10)

    def test_plain_arrays_build_untagged_model(self):
        rng = np.random.default_rng(0)
        model = build_3dmm(list(rng.normal(size=(4, 6))))
        assert model.laterality is None

    def test_laterality_adopted_from_exemplars(self, model):
        assert model.laterality == "OD"

    def test_mixed_lateralities_rejected(self):
        a = ShapeVector(np.ones(6), laterality="OD")
        b = ShapeVector(np.zeros(6), laterality="OS")
        with pytest.raises(LateralityError):
            build_3dmm([a, b])

    def test_exemplar_conflicting_with_requested_tag_rejected(self):
        a = ShapeVector(np.ones(6), laterality="OD")
        with pytest.raises(LateralityError):
            build_3dmm([a, a], laterality="OS")

    def test_needs_two_exemplars(self):
        with pytest.raises(ValueError, match="at least two"):
            build_3dmm([np.ones(6)])

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError, match="differ in length"):
            build_3dmm([np.ones(6), np.ones(9)])

    def test_model_validates_orthonormality(self, model):
        with pytest.raises(ValueError, match="orthonormal"):
            MorphableModel(
                mean=model.mean,
                components=model.components * 1.5,
                eigenvalues=model.eigenvalues,
                laterality=None,
                n_exemplars=model.n_exemplars,
            )

    def test_model_validates_dimension(self, model):
        with pytest.raises(ValueError, match="exemplar count"):
            MorphableModel(
                mean=model.mean,
                components=model.components,
                eigenvalues=model.eigenvalues,
                laterality=None,
                n_exemplars=model.n_exemplars + 1,
            )

    def test_model_arrays_frozen(self, model):
        with pytest.raises(ValueError):
            model.mean[0] = 0.0


class TestEncodeDecode:
    def test_exemplar_round_trip(self, shapes, model):
        for s in shapes:
            rec = decode(encode(s, model), model)
            assert rel_rmse(rec.coords, s.coords) < 1e-9

    def test_exemplar_residual_zero(self, shapes, model):
        scale = float(np.linalg.norm(shapes[0].coords))
        for s in shapes:
            assert encode(s, model).residual < 1e-9 * scale

    def test_alpha_matches_projection(self, shapes, model):
        s = shapes[3]
        alpha = encode(s, model).alpha
        np.testing.assert_allclose(
            alpha, model.components @ (s.coords - model.mean), atol=1e-12
        )

    def test_out_of_span_residual_reported(self, model):
        rng = np.random.default_rng(5)
        x = rng.normal(size=model.mean.size)
        centered = x - model.mean
        rejection = centered - model.components.T @ (model.components @ centered)
        latent = encode(x, model)
        assert latent.residual == pytest.approx(np.linalg.norm(rejection), rel=1e-9)
        # Decoding drops the rejected part: re-encoding is then exact.
        again = encode(decode(latent, model), model)
        np.testing.assert_allclose(again.alpha, latent.alpha, atol=1e-9)
        assert again.residual < 1e-9 * np.linalg.norm(x)

    def test_decode_is_affine_in_alpha(self, model):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(2, model.dim))
        lhs = decode(a + b, model).coords
        rhs = decode(a, model).coords + decode(b, model).coords - model.mean
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=11, max_size=11))
    def test_latent_round_trip_exact(self, model, alpha):
        # decode output is in-span by construction, so encode inverts it up
        # to the orthonormality tolerance of the basis times the latent norm.
        got = encode(decode(alpha, model), model).alpha
        slack = 2e-9 * (1.0 + np.linalg.norm(alpha))
        np.testing.assert_allclose(got, alpha, atol=slack)

    def test_zero_latent_decodes_to_mean(self, model):
        np.testing.assert_allclose(
            decode(np.zeros(model.dim), model).coords, model.mean, atol=1e-12
        )

    def test_decode_tags_laterality(self, model):
        assert decode(np.zeros(model.dim), model).laterality == "OD"

    def test_encode_rejects_wrong_length(self, model):
        with pytest.raises(ValueError, match="length"):
            encode(np.ones(model.mean.size + 3), model)

    def test_encode_rejects_wrong_laterality(self, model):
        s = ShapeVector(np.ones(model.mean.size), laterality="OS")
        with pytest.raises(LateralityError):
            encode(s, model)

    def test_decode_rejects_wrong_length(self, model):
        with pytest.raises(ValueError, match="dimension"):
            decode(np.zeros(model.dim + 1), model)

    def test_decode_rejects_wrong_laterality(self, model):
        latent = OcularLatent(np.zeros(model.dim), laterality="OS")
        with pytest.raises(LateralityError):
            decode(latent, model)

    def test_latent_validates_finiteness(self):
        with pytest.raises(ValueError, match="non-finite"):
            OcularLatent(np.array([1.0, np.nan]))


class TestDecodeMesh:
    def test_reference_connectivity(self):
        ref = get_reference()
        base = ref.mesh.vertices.ravel() * 12.0
        rng = np.random.default_rng(2)
        shapes = [ShapeVector(base + 0.1 * rng.normal(size=base.size),
                              laterality="OD") for _ in range(4)]
        model = build_3dmm(shapes)
        mesh = decode_mesh(np.zeros(model.dim), model)
        assert mesh.n_vertices == ref.n_vertices
        np.testing.assert_array_equal(mesh.faces, ref.mesh.faces)
        np.testing.assert_allclose(
            mesh.vertices.ravel(), model.mean, atol=1e-12
        )
        assert mesh.laterality == "OD"

    def test_wrong_vertex_count_rejected(self, model):
        with pytest.raises(ValueError, match="vertices"):
            decode_mesh(np.zeros(model.dim), model)


class TestRegistry:
    def test_lookup_by_laterality(self, model):
        registry = ModelRegistry([model])
        assert registry.get("OD") is model
        assert registry.lateralities() == ["OD"]

    def test_missing_laterality_raises(self, model):
        registry = ModelRegistry([model])
        with pytest.raises(LateralityError, match="OS"):
            registry.get("OS")

    def test_untagged_model_rejected(self):
        rng = np.random.default_rng(0)
        untagged = build_3dmm(list(rng.normal(size=(3, 6))))
        with pytest.raises(LateralityError, match="laterality tag"):
            ModelRegistry([untagged])

    def test_same_tag_overwrites(self, shapes, model):
        other = build_3dmm(shapes[:6])
        registry = ModelRegistry([model, other])
        assert registry.get("OD") is other


class TestSaveLoad:
    def test_round_trip_exact(self, model, tmp_path):
        loaded = load_3dmm(save_3dmm(model, tmp_path / "model.3dmm"))
        np.testing.assert_array_equal(loaded.mean, model.mean)
        np.testing.assert_array_equal(loaded.components, model.components)
        np.testing.assert_array_equal(loaded.eigenvalues, model.eigenvalues)
        assert loaded.laterality == model.laterality
        assert loaded.n_exemplars == model.n_exemplars

    def test_save_is_byte_deterministic(self, model, tmp_path):
        a = save_3dmm(model, tmp_path / "a.3dmm").read_bytes()
        b = save_3dmm(model, tmp_path / "b.3dmm").read_bytes()
        assert a == b

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.bin"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ValueError, match="not a shape-model file"):
            load_3dmm(path)

    def test_rejects_truncated_payload(self, model, tmp_path):
        path = save_3dmm(model, tmp_path / "model.3dmm")
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_3dmm(path)
