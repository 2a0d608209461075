"""Condition encoding: LDL codecs, laterality table, fusion, dropout,
embedding providers and the metadata CSV."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eyetwin.cohort import CohortConfig, make_cohort
from eyetwin.conditioning import (
    AL_CODEC,
    EMBED_DIM,
    ConditionSources,
    EyeRecord,
    FileEmbeddingProvider,
    LateralityTable,
    LdlCodec,
    SE_CODEC,
    StubEmbeddingProvider,
    build_condition,
    condition_dropout,
    encode_continuous_conditions,
    fuse_conditions,
    ldl_encode,
    null_condition,
    read_records,
    stub_embedding,
    write_records,
)


class TestLdlCodec:
    def test_pinned_grids(self):
        assert (AL_CODEC.lo, AL_CODEC.hi, AL_CODEC.bins, AL_CODEC.sigma) == (20.0, 36.0, 512, 1.0)
        assert (SE_CODEC.lo, SE_CODEC.hi, SE_CODEC.bins, SE_CODEC.sigma) == (-30.0, 5.0, 512, 1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            LdlCodec(5.0, 5.0)
        with pytest.raises(ValueError):
            LdlCodec(0.0, 1.0, bins=1)
        with pytest.raises(ValueError):
            LdlCodec(0.0, 1.0, sigma=0.0)

    def test_encode_is_normalized_gaussian(self):
        codec = LdlCodec(0.0, 10.0, bins=101, sigma=2.0)
        vec = ldl_encode(5.0, codec)
        assert vec.shape == (101,)
        assert vec.sum() == pytest.approx(1.0)
        assert np.argmax(vec) == 50
        # symmetric around the center bin
        np.testing.assert_allclose(vec[50 - 5 : 50], vec[50 + 5 : 50 : -1])
        # log of a Gaussian is quadratic: second difference is constant
        logs = np.log(vec[45:56])
        d2 = np.diff(logs, 2)
        np.testing.assert_allclose(d2, d2[0], atol=1e-9)

    def test_neighbor_similarity_decays_with_distance(self):
        codec = LdlCodec(0.0, 100.0, bins=201, sigma=3.0)
        base = ldl_encode(50.0, codec)
        sims = [
            float(base @ ldl_encode(50.0 + delta, codec))
            for delta in (0.0, 0.5, 1.0, 2.0, 5.0)
        ]
        assert all(a > b for a, b in zip(sims, sims[1:]))

    def test_out_of_range_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            vec = ldl_encode(50.0, AL_CODEC)
        assert np.argmax(vec) == AL_CODEC.bins - 1
        with pytest.raises(ValueError):
            ldl_encode(float("nan"), AL_CODEC)

    def test_decode_argmax_round_trip_on_bin_centers(self):
        codec = LdlCodec(0.0, 10.0, bins=11)
        for value in codec.bin_centers():
            assert codec.decode_argmax(ldl_encode(value, codec)) == pytest.approx(value)
        with pytest.raises(ValueError):
            codec.decode_argmax(np.zeros(12))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(20.0, 36.0))
    def test_argmax_lands_on_nearest_bin(self, value):
        vec = ldl_encode(value, AL_CODEC)
        assert abs(AL_CODEC.decode_argmax(vec) - value) <= AL_CODEC.bin_width / 2 + 1e-9

    def test_joint_encoding_and_one_sided_error(self):
        vec = encode_continuous_conditions(26.0, -5.0)
        assert vec.shape == (EMBED_DIM,)
        assert vec[:512].sum() == pytest.approx(1.0)
        assert vec[512:].sum() == pytest.approx(1.0)
        assert encode_continuous_conditions(None, None) is None
        with pytest.raises(ValueError):
            encode_continuous_conditions(26.0, None)
        with pytest.raises(ValueError):
            encode_continuous_conditions(None, -5.0)


class TestLateralityTable:
    def test_default_rows(self):
        t = LateralityTable()
        assert t.weights.shape == (3, EMBED_DIM)
        assert t.row_index("OD") == 0
        assert t.row_index("OS") == 1
        assert t.row_index(None) == 2
        assert not np.array_equal(t.row("OD"), t.row("OS"))
        with pytest.raises(KeyError):
            t.row_index("both")

    def test_rejects_identical_sided_rows(self):
        w = np.zeros((3, EMBED_DIM))
        with pytest.raises(ValueError):
            LateralityTable(w)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            LateralityTable(np.zeros((2, EMBED_DIM)))

    def test_rows_are_frozen(self):
        t = LateralityTable()
        with pytest.raises(ValueError):
            t.weights[0, 0] = 1.0


class TestFusion:
    def test_sum_of_present_sources(self):
        a = np.ones(EMBED_DIM)
        b = 2 * np.ones(EMBED_DIM)
        fused = fuse_conditions(a, None, b)
        np.testing.assert_array_equal(fused.vector, 3 * np.ones(EMBED_DIM))
        assert fused.present == ("cfp", "continuous")
        assert not fused.is_null

    def test_null_condition(self):
        n = null_condition()
        assert n.is_null
        np.testing.assert_array_equal(n.vector, np.zeros(EMBED_DIM))
        assert fuse_conditions(None, None, None).is_null

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            fuse_conditions(np.ones(10), None, None)

    def test_build_condition_routes_sources(self):
        table = LateralityTable()
        src = ConditionSources(cfp=np.ones(EMBED_DIM), laterality="OS", al=28.0, se=-8.0)
        cond = build_condition(src, table)
        assert cond.present == ("cfp", "laterality", "continuous")
        expected = (
            np.ones(EMBED_DIM)
            + table.row("OS")
            + encode_continuous_conditions(28.0, -8.0)
        )
        np.testing.assert_allclose(cond.vector, expected)

    def test_build_condition_null_row_token(self):
        table = LateralityTable()
        src = ConditionSources(cfp=np.ones(EMBED_DIM))
        with_token = build_condition(src, table, use_null_row=True)
        without = build_condition(src, table)
        np.testing.assert_allclose(
            with_token.vector - without.vector, table.row(None)
        )
        # a fully null source set stays null even with the token enabled
        assert build_condition(ConditionSources(), table, use_null_row=True).is_null

    def test_build_condition_one_sided_error(self):
        with pytest.raises(ValueError):
            build_condition(ConditionSources(al=25.0), LateralityTable())


class TestDropout:
    def test_joint_dropout_all_or_nothing(self):
        src = ConditionSources(cfp=np.ones(EMBED_DIM), laterality="OD", al=25.0, se=-2.0)
        rng = np.random.default_rng(0)
        outcomes = {condition_dropout(src, 0.5, rng).is_null for _ in range(50)}
        assert outcomes == {True, False}
        assert condition_dropout(src, 0.0, rng) is src
        assert condition_dropout(src, 1.0, rng).is_null

    def test_per_source_dropout_is_independent(self):
        src = ConditionSources(cfp=np.ones(EMBED_DIM), laterality="OD", al=25.0, se=-2.0)
        rng = np.random.default_rng(1)
        n = 4000
        kept_cfp = kept_lat = kept_cont = 0
        mixed = 0
        for _ in range(n):
            out = condition_dropout(src, 0.5, rng, per_source=True)
            kept_cfp += out.cfp is not None
            kept_lat += out.laterality is not None
            kept_cont += out.al is not None
            # al and se always drop together
            assert (out.al is None) == (out.se is None)
            if (out.cfp is None) != (out.laterality is None):
                mixed += 1
        for kept in (kept_cfp, kept_lat, kept_cont):
            assert kept / n == pytest.approx(0.5, abs=0.03)
        assert mixed > 0  # sources really do drop independently

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            condition_dropout(ConditionSources(), 1.5, np.random.default_rng(0))


@pytest.fixture(scope="module")
def stub_params():
    params, _records, _meshes = zip(*make_cohort(40, seed=3, subdivisions=2))
    return params


class TestStubEmbedding:
    def test_deterministic_per_params(self, stub_params):
        a = stub_embedding(stub_params[0])
        b = stub_embedding(stub_params[0])
        np.testing.assert_array_equal(a, b)
        assert a.shape == (EMBED_DIM,)
        assert a.dtype == np.float32

    def test_distinct_across_cases(self, stub_params):
        assert not np.array_equal(stub_embedding(stub_params[0]), stub_embedding(stub_params[1]))

    def test_encodes_staphyloma_strongly(self, stub_params):
        # nearest-neighbour retrieval of staphyloma class from the embedding
        # space should beat chance by a wide margin
        embs = np.stack([stub_embedding(p) for p in stub_params])
        labels = np.array([p.staph_class for p in stub_params])
        d = np.linalg.norm(embs[:, None, :] - embs[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(axis=1)
        acc = (labels[nn] == labels).mean()
        assert acc > 0.6

    def test_provider_serves_and_rejects(self, stub_params):
        provider = StubEmbeddingProvider({"a": stub_params[0]})
        np.testing.assert_array_equal(provider.get("a"), stub_embedding(stub_params[0]))
        with pytest.raises(KeyError):
            provider.get("missing")


class TestFileProvider:
    def test_round_trip(self, tmp_path):
        provider = FileEmbeddingProvider(tmp_path)
        vec = np.arange(EMBED_DIM, dtype=np.float32)
        provider.put("case-1", vec)
        np.testing.assert_array_equal(provider.get("case-1"), vec)

    def test_missing_and_malformed(self, tmp_path):
        provider = FileEmbeddingProvider(tmp_path)
        with pytest.raises(KeyError):
            provider.get("absent")
        (tmp_path / "bad.emb").write_bytes(b"\x00" * 12)
        with pytest.raises(ValueError):
            provider.get("bad")
        with pytest.raises(ValueError):
            provider.put("short", np.zeros(3, np.float32))


class TestRecordsCsv:
    def test_round_trip(self, tmp_path):
        records = [
            EyeRecord("c0", "OD", 27.5, -9.25, 1, va=0.3, embedding_id="c0"),
            EyeRecord("c1", "OS", 23.125, -0.5, 0),
        ]
        path = tmp_path / "manifest.csv"
        write_records(path, records)
        assert read_records(path) == records

    def test_float_precision_survives(self, tmp_path):
        r = EyeRecord("c0", "OD", 27.123456789012345, -9.987654321098765, 2)
        path = tmp_path / "manifest.csv"
        write_records(path, [r])
        back = read_records(path)[0]
        assert back.al_mm == r.al_mm
        assert back.se_d == r.se_d

    def test_header_checked(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(ValueError):
            read_records(path)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            EyeRecord("c", "OD", 19.0, -5.0, 0)
        with pytest.raises(ValueError):
            EyeRecord("c", "OD", 25.0, 6.0, 0)
        with pytest.raises(ValueError):
            EyeRecord("c", "XX", 25.0, -5.0, 0)
        with pytest.raises(ValueError):
            EyeRecord("c", "OD", 25.0, -5.0, 7)
