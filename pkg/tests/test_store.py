import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairproto.errors import (
    CapacityError,
    CorruptionError,
    FormatError,
    NumericError,
    SinkError,
    ValidationError,
)
from fairproto.store import (
    ATTR_NAMES,
    DatasetManifest,
    EmbeddingRecord,
    Split,
    cluster_centers,
    concat_features,
    load_manifest,
    nested_support_query,
    save_manifest,
    synthesize_clusters,
    vit_only_view,
)

from helpers import make_manifest


# ---------------------------------------------------------------------------
# concat_features
# ---------------------------------------------------------------------------

def test_concat_order_preserving():
    assert np.array_equal(concat_features([1, 2], [3]), [1, 2, 3])


def test_concat_empty_second_block():
    assert np.array_equal(concat_features([5], []), [5])


def test_concat_matches_append_oracle(rng):
    a = rng.standard_normal(768)
    b = rng.standard_normal(512)
    got = concat_features(a, b)
    # independent oracle: build the result entry by entry
    expected = np.empty(1280)
    for i in range(768):
        expected[i] = a[i]
    for i in range(512):
        expected[768 + i] = b[i]
    assert got.shape == (1280,)
    assert np.array_equal(got, expected)


def test_concat_rejects_non_finite_with_index():
    vec = np.ones(4)
    vec[2] = np.nan
    with pytest.raises(NumericError, match="index 2"):
        concat_features(vec, [1.0])
    with pytest.raises(NumericError, match="resnet"):
        concat_features([1.0], [np.inf])


finite_vec = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False),
    min_size=0, max_size=8)


@given(finite_vec, finite_vec, finite_vec)
def test_concat_associative_with_empty_identity(a, b, c):
    left = concat_features(concat_features(a, b), c)
    right = concat_features(a, concat_features(b, c))
    assert np.array_equal(left, right)
    assert np.array_equal(concat_features(a, []), np.asarray(a))


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

def manifest_bytes(manifest):
    buf = io.BytesIO()
    n = save_manifest(manifest, buf)
    data = buf.getvalue()
    assert n == len(data)
    return data


def expected_size(manifest):
    # closed-form size from the documented layout
    def s(text):
        return 2 + len((text or "").encode("utf-8"))

    size = 4 + 2 + 4 + 4 + s(manifest.backbone_tag) + 4
    for cid, name in manifest.class_table.items():
        size += s(name) + 4
    size += 8
    for rec in manifest.records:
        size += s(rec.id) + 4 + sum(s(a) for a in rec.attrs) + 1 + 4 * manifest.dim_total
    return size


def test_empty_manifest_round_trip():
    m = DatasetManifest(4, 0, "synthetic", {}, [])
    data = manifest_bytes(m)
    assert len(data) == expected_size(m)
    m2 = load_manifest(data)
    assert m2.records == [] and m2.class_table == {}
    assert m2 == m


def test_round_trip_field_for_field(rng):
    m = make_manifest({0: rng.standard_normal((2, 5)), 3: rng.standard_normal((1, 5))})
    m.records[0] = EmbeddingRecord(m.records[0].id, 0, ("groupA", None, "older"),
                                   Split.QUERY, m.records[0].vector)
    m2 = load_manifest(manifest_bytes(m))
    assert m2 == m
    assert m2.backbone_tag == m.backbone_tag
    assert [r.id for r in m2.records] == [r.id for r in m.records]
    for a, b in zip(m.records, m2.records):
        assert a.vector.dtype == b.vector.dtype == np.float32
        assert a.vector.tobytes() == b.vector.tobytes()


def test_byte_count_matches_size_formula():
    m = synthesize_clusters(5, 200, 16, 3.0, seed=7)
    assert len(m.records) == 1000
    data = manifest_bytes(m)
    assert len(data) == expected_size(m)


def test_save_is_byte_deterministic():
    m = synthesize_clusters(3, 8, 4, 2.0, seed=5)
    assert manifest_bytes(m) == manifest_bytes(m)


def test_save_rejects_wrong_vector_length(rng):
    m = make_manifest({0: rng.standard_normal((2, 5))})
    bad = m.records[1]
    m.records[1] = EmbeddingRecord(bad.id, bad.class_id, bad.attrs, bad.split,
                                   np.zeros(3, dtype=np.float32))
    with pytest.raises(ValidationError, match=bad.id):
        manifest_bytes(m)


def test_save_rejects_non_finite_vector(rng):
    m = make_manifest({0: rng.standard_normal((2, 5))})
    bad = m.records[0]
    vec = bad.vector.copy()
    vec[1] = np.nan
    m.records[0] = EmbeddingRecord(bad.id, bad.class_id, bad.attrs, bad.split, vec)
    with pytest.raises(ValidationError, match=bad.id):
        manifest_bytes(m)


def test_save_reports_partial_write_count(rng):
    class FailingSink:
        def __init__(self, allow):
            self.allow = allow
            self.written = 0

        def write(self, data):
            if self.written + len(data) > self.allow:
                raise OSError("sink full")
            self.written += len(data)

    m = make_manifest({0: rng.standard_normal((2, 5))})
    sink = FailingSink(allow=10)
    with pytest.raises(SinkError) as err:
        save_manifest(m, sink)
    assert err.value.bytes_written == sink.written


def test_load_rejects_bad_magic():
    data = manifest_bytes(synthesize_clusters(2, 4, 3, 1.0, seed=0))
    with pytest.raises(FormatError, match="magic"):
        load_manifest(b"XXXX" + data[4:])


def test_load_rejects_bad_version():
    data = bytearray(manifest_bytes(synthesize_clusters(2, 4, 3, 1.0, seed=0)))
    data[4:6] = (99).to_bytes(2, "little")
    with pytest.raises(FormatError, match="version"):
        load_manifest(bytes(data))


def test_load_rejects_trailing_data():
    data = manifest_bytes(synthesize_clusters(2, 4, 3, 1.0, seed=0))
    with pytest.raises(FormatError, match="trailing"):
        load_manifest(data + b"\x00")


def test_load_rejects_unknown_class_id(rng):
    m = make_manifest({0: rng.standard_normal((1, 3)), 1: rng.standard_normal((1, 3))})
    data = bytearray(manifest_bytes(m))
    # second record's class id field sits right after its id string near the
    # end; corrupt by brute force: flip every u32-aligned window and expect
    # either a clean error or an equal/valid manifest, never a crash
    errors = 0
    for off in range(len(data) - 4):
        corrupted = bytearray(data)
        corrupted[off:off + 4] = (7).to_bytes(4, "little")
        try:
            load_manifest(bytes(corrupted))
        except (FormatError, CorruptionError, ValidationError):
            errors += 1
    assert errors > 0


def test_truncation_at_every_offset_errors():
    data = manifest_bytes(synthesize_clusters(2, 4, 3, 1.0, seed=2))
    for cut in range(len(data)):
        with pytest.raises((CorruptionError, FormatError)):
            load_manifest(data[:cut])


def test_truncation_error_names_offset():
    data = manifest_bytes(synthesize_clusters(2, 4, 3, 1.0, seed=2))
    cut = len(data) - 5
    with pytest.raises(CorruptionError) as err:
        load_manifest(data[:cut])
    assert err.value.offset <= cut
    assert str(err.value.offset) in str(err.value)


@st.composite
def manifests(draw):
    dim = draw(st.integers(min_value=1, max_value=6))
    n_classes = draw(st.integers(min_value=0, max_value=3))
    text = st.text(
        alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=8)
    attr = st.one_of(st.none(), text)
    records = []
    table = {}
    for cid in range(n_classes):
        table[cid] = draw(text)
        for i in range(draw(st.integers(min_value=1, max_value=3))):
            vec = np.asarray(
                draw(st.lists(st.floats(min_value=-1e3, max_value=1e3, width=32,
                                        allow_nan=False, allow_infinity=False),
                              min_size=dim, max_size=dim)),
                dtype=np.float32)
            records.append(EmbeddingRecord(
                id=draw(text) + f"#{cid}:{i}", class_id=cid,
                attrs=(draw(attr), draw(attr), draw(attr)),
                split=Split(draw(st.integers(min_value=0, max_value=3))),
                vector=vec))
    return DatasetManifest(dim, 0, draw(text), table, records)


@settings(max_examples=40, deadline=None)
@given(manifests())
def test_round_trip_property(manifest):
    assert load_manifest(manifest_bytes(manifest)) == manifest


# ---------------------------------------------------------------------------
# synthesize_clusters
# ---------------------------------------------------------------------------

def test_synthesize_is_seed_deterministic():
    a = synthesize_clusters(7, 20, 16, 10.0, seed=1)
    b = synthesize_clusters(7, 20, 16, 10.0, seed=1)
    assert a == b
    c = synthesize_clusters(7, 20, 16, 10.0, seed=2)
    assert a != c


def test_synthesize_rejects_bad_arguments():
    for bad in [dict(k=1), dict(per_class=1), dict(dim=0), dict(separation=-1.0)]:
        kwargs = dict(k=3, per_class=4, dim=4, separation=1.0, seed=0)
        kwargs.update(bad)
        with pytest.raises(ValidationError):
            synthesize_clusters(kwargs["k"], kwargs["per_class"], kwargs["dim"],
                                kwargs["separation"], kwargs["seed"])


def brute_force_nearest_center(manifest, centers):
    correct = 0
    for rec in manifest.records:
        best, best_d = None, None
        for cid in sorted(manifest.class_table):
            d = float(np.sqrt(np.sum((rec.vector.astype(np.float64) - centers[cid]) ** 2)))
            if best_d is None or d < best_d:
                best, best_d = cid, d
        correct += best == rec.class_id
    return correct / len(manifest.records)


def test_wide_separation_is_perfectly_separable():
    m = synthesize_clusters(7, 20, 16, 10.0, seed=1)
    centers = cluster_centers(7, 16, 10.0)
    assert brute_force_nearest_center(m, centers) == 1.0


def test_zero_separation_collapses_to_chance():
    k = 4
    m = synthesize_clusters(k, 200, 8, 0.0, seed=3)
    centers = cluster_centers(k, 8, 0.0)
    assert np.all(centers == 0.0)
    acc = brute_force_nearest_center(m, centers)
    assert abs(acc - 1.0 / k) <= 0.05


def test_center_separation_is_respected():
    for k, dim in [(7, 16), (9, 4), (5, 2)]:
        centers = cluster_centers(k, dim, 6.0)
        for i in range(k):
            for j in range(i + 1, k):
                assert np.linalg.norm(centers[i] - centers[j]) >= 6.0 - 1e-9


def test_split_plan_half_quarter_support_rest_query():
    m = synthesize_clusters(3, 60, 4, 1.0, seed=0)
    for cid in range(3):
        recs = [r for r in m.records if r.class_id == cid]
        by = {s: sum(1 for r in recs if r.split == s) for s in Split}
        assert by[Split.TRAIN] == 30
        assert by[Split.VAL] == 15
        assert by[Split.SUPPORT] == 5
        assert by[Split.QUERY] == 10


def test_informative_block_concentrates_signal():
    m = synthesize_clusters(5, 30, 12, 8.0, seed=4, dim_vit=8, dim_resnet=4,
                            informative="resnet")
    vectors = np.stack([r.vector for r in m.records]).astype(np.float64)
    labels = np.array([r.class_id for r in m.records])
    # class means of the first block stay near the origin; second block separates
    first_means = np.stack([vectors[labels == c, :8].mean(0) for c in range(5)])
    second_means = np.stack([vectors[labels == c, 8:].mean(0) for c in range(5)])
    assert np.abs(first_means).max() < 1.5
    assert np.abs(second_means).max() > 4.0


def test_vit_only_view_strips_second_block():
    m = synthesize_clusters(3, 8, 10, 2.0, seed=5, dim_vit=6, dim_resnet=4)
    v = vit_only_view(m)
    assert v.dim_vit == 6 and v.dim_resnet == 0
    assert all(r.vector.shape == (6,) for r in v.records)
    for a, b in zip(m.records, v.records):
        assert np.array_equal(a.vector[:6], b.vector)


# ---------------------------------------------------------------------------
# nested_support_query
# ---------------------------------------------------------------------------

def test_nested_supports_grow_and_queries_stay_static():
    m = synthesize_clusters(7, 60, 8, 3.0, seed=6)
    nested = nested_support_query(m, [1, 3, 5], queries_per_class=10, seed=0)
    ids = {s: {r.id for r in nested[s][0]} for s in (1, 3, 5)}
    assert ids[1] < ids[3] < ids[5]
    per_class = {s: {} for s in (1, 3, 5)}
    for s in (1, 3, 5):
        for rec in nested[s][0]:
            per_class[s].setdefault(rec.class_id, set()).add(rec.id)
        for cid, got in per_class[s].items():
            assert len(got) == s
    for cid in range(7):
        assert per_class[1][cid] < per_class[3][cid] < per_class[5][cid]
    assert nested[1][1] is nested[3][1] is nested[5][1]
    assert len(nested[1][1]) == 70


def test_nested_support_query_disjoint():
    m = synthesize_clusters(5, 40, 8, 3.0, seed=7)
    nested = nested_support_query(m, [2, 4], queries_per_class=5, seed=1)
    for s, (support, query) in nested.items():
        assert {r.id for r in support} & {r.id for r in query} == set()


def test_nested_capacity_error_names_class():
    m = synthesize_clusters(4, 20, 8, 3.0, seed=8)  # 5 support, 0 query per class
    with pytest.raises(CapacityError, match="class_000"):
        nested_support_query(m, [1, 3, 5], queries_per_class=10, seed=0)
    with pytest.raises(CapacityError, match="support"):
        nested_support_query(m, [1, 3, 7], queries_per_class=1, seed=0)


def test_nested_rejects_non_increasing_shots():
    m = synthesize_clusters(4, 40, 8, 3.0, seed=9)
    for bad in ([], [3, 1], [2, 2], [0, 1]):
        with pytest.raises(ValidationError):
            nested_support_query(m, bad, queries_per_class=2, seed=0)


def test_attrs_survive_round_trip():
    m = make_manifest({0: np.zeros((1, 3), dtype=np.float32)},
                      attrs_by_class={0: ("groupA", "groupB", None)})
    m2 = load_manifest(manifest_bytes(m))
    assert m2.records[0].attrs == ("groupA", "groupB", None)
    assert ATTR_NAMES == ("race", "gender", "age_group")
