import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discrec.data import (
    Interaction,
    ParseError,
    Sample,
    SyntheticConfig,
    UserSequence,
    bucket_by_length,
    bucket_by_popularity,
    build_sequences,
    generate_synthetic,
    kcore_filter,
    leave_one_out_split,
    load_embeddings,
    load_interactions,
    load_split_manifest,
    user_random_split,
    write_embeddings,
    write_interactions_tsv,
    write_split_manifest,
)


def rec(u, i, t):
    return Interaction(u, i, t)


class TestLoadInteractions:
    def test_three_lines_in_file_order(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t5\nu2\ti2\t3\nu1\ti3\t9\n")
        out = load_interactions(p)
        assert out == [rec("u1", "i1", 5), rec("u2", "i2", 3), rec("u1", "i3", 9)]

    def test_non_integer_timestamp_names_line(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t5\nu2\ti2\tabc\n")
        with pytest.raises(ParseError, match="line 2"):
            load_interactions(p)

    def test_duplicates_kept_distinct(self, tmp_path):
        # oracle: record count equals line count
        lines = ["u1\ti1\t5"] * 2 + ["u2\ti2\t7"]
        p = tmp_path / "x.tsv"
        p.write_text("\n".join(lines) + "\n")
        out = load_interactions(p)
        assert len(out) == len(lines)
        assert out[0] == out[1]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("")
        assert load_interactions(p) == []

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\n")
        with pytest.raises(ParseError, match="line 1"):
            load_interactions(p)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            load_interactions(tmp_path / "x.tsv", format="csv")


def peel_oracle(records, k):
    """Brute-force fixpoint peeling: drop any user/item below k, one at a time."""
    records = list(records)
    while True:
        from collections import Counter

        uc = Counter(r.user_id for r in records)
        ic = Counter(r.item_id for r in records)
        bad_users = {u for u, c in uc.items() if c < k}
        bad_items = {i for i, c in ic.items() if c < k}
        if not bad_users and not bad_items:
            return records
        records = [r for r in records if r.user_id not in bad_users and r.item_id not in bad_items]


class TestKcoreFilter:
    def test_empty(self):
        assert kcore_filter([], 5) == []

    def test_already_fixpoint_unchanged(self):
        records = [rec(f"u{u}", f"i{i}", u * 10 + i) for u in range(5) for i in range(5)]
        assert kcore_filter(records, 5) == records

    def test_cascading_matches_peeling_oracle(self):
        # u3 only touches i3; i3 only has u3 and u2; removing them cascades
        records = [
            rec("u1", "i1", 0), rec("u1", "i2", 1),
            rec("u2", "i1", 0), rec("u2", "i2", 1), rec("u2", "i3", 2),
            rec("u3", "i3", 0),
        ]
        got = kcore_filter(records, 2)
        assert got == peel_oracle(records, 2)
        users = {r.user_id for r in got}
        items = {r.item_id for r in got}
        assert "u3" not in users and "i3" not in items

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(0, 6), st.integers(0, 6)),
            min_size=0,
            max_size=20,
        ),
        st.integers(1, 4),
    )
    def test_random_graphs_match_oracle_and_fixpoint(self, edges, k):
        records = [rec(f"u{u}", f"i{i}", t) for t, (u, i) in enumerate(edges)]
        got = kcore_filter(records, k)
        assert got == peel_oracle(records, k)
        assert kcore_filter(got, k) == got  # idempotent


class TestBuildSequences:
    def test_sorts_by_timestamp(self):
        records = [rec("u", "a", 5), rec("u", "b", 1), rec("u", "c", 3)]
        (seq,) = build_sequences(records)
        assert seq.items == ("b", "c", "a")

    def test_stable_on_ties(self):
        records = [rec("u", "x", 7), rec("u", "y", 7)]
        (seq,) = build_sequences(records)
        assert seq.items == ("x", "y")

    def test_shuffled_log_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        times = rng.integers(0, 30, size=50)
        records = [rec("u", f"i{n}", int(t)) for n, t in enumerate(times)]
        oracle = tuple(
            item for _, item in sorted(
                ((int(t), f"i{n}") for n, t in enumerate(times)),
                key=lambda p: (p[0], int(p[1][1:])),
            )
        )
        (seq,) = build_sequences(records)
        assert seq.items == oracle


class TestLeaveOneOut:
    def test_five_item_sequence(self):
        split = leave_one_out_split([UserSequence("u", tuple("abcde"))], max_len=20)
        (t,) = split.test
        assert t.history == tuple("abcd") and t.target == "e"
        (v,) = split.valid
        assert v.history == tuple("abc") and v.target == "d"
        assert [(s.history, s.target) for s in split.train] == [(("a",), "b"), (("a", "b"), "c")]

    def test_one_test_sample_per_user(self):
        seqs = [UserSequence(f"u{k}", tuple(f"i{k}{j}" for j in range(3 + k))) for k in range(6)]
        split = leave_one_out_split(seqs)
        assert len(split.test) == len(seqs)

    def test_truncation_slicing_oracle(self):
        items = tuple(f"i{j}" for j in range(25))
        split = leave_one_out_split([UserSequence("u", items)], max_len=20)
        assert split.test[0].history == items[4:24]  # items 5..24 of the 24-long prefix
        assert split.test[0].target == items[24]

    def test_short_sequences_dropped_and_counted(self):
        seqs = [UserSequence("u1", ("a", "b")), UserSequence("u2", ("a", "b", "c"))]
        split = leave_one_out_split(seqs)
        assert split.dropped_users == 1
        assert len(split.test) == 1

    def test_targets_in_catalog_and_disjoint_from_history(self):
        rng = np.random.default_rng(1)
        seqs = []
        for k in range(10):
            n = int(rng.integers(3, 12))
            seqs.append(UserSequence(f"u{k}", tuple(f"i{rng.integers(0, 40)}" for _ in range(n))))
        split = leave_one_out_split(seqs)
        for s in split.train + split.valid + split.test:
            assert s.target in split.item_catalog


class TestUserRandomSplit:
    def test_eight_one_one(self):
        seqs = [UserSequence(f"u{k}", ("a", "b", "c")) for k in range(10)]
        split = user_random_split(seqs, (0.8, 0.1, 0.1), seed=3)
        train_users = {s.user_id for s in split.train}
        assert (len(train_users), len(split.valid), len(split.test)) == (8, 1, 1)

    def test_same_seed_identical(self):
        seqs = [UserSequence(f"u{k}", ("a", "b", "c", "d")) for k in range(20)]
        a = user_random_split(seqs, seed=7)
        b = user_random_split(seqs, seed=7)
        assert a.train == b.train and a.valid == b.valid and a.test == b.test

    def test_partition_set_algebra(self):
        seqs = [UserSequence(f"u{k}", ("a", "b", "c")) for k in range(23)]
        split = user_random_split(seqs, seed=11)
        groups = [
            {s.user_id for s in split.train},
            {s.user_id for s in split.valid},
            {s.user_id for s in split.test},
        ]
        assert set().union(*groups) == {f"u{k}" for k in range(23)}
        assert not (groups[0] & groups[1]) and not (groups[0] & groups[2]) and not (groups[1] & groups[2])

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            user_random_split([], (0.5, 0.2, 0.2))


class TestGenerateSynthetic:
    def test_deterministic_given_seed(self):
        cfg = SyntheticConfig(n_users=20, n_items=15, embed_dim=8, seed=42)
        inter_a, emb_a = generate_synthetic(cfg)
        inter_b, emb_b = generate_synthetic(cfg)
        assert inter_a == inter_b
        for k in emb_a:
            assert emb_a[k].tobytes() == emb_b[k].tobytes()

    def test_zero_sharpness_uniform_next_item(self):
        from scipy import stats

        cfg = SyntheticConfig(
            n_users=10_000, n_items=20, embed_dim=4,
            transition_sharpness=0.0, seq_len_range=(11, 11), seed=5,
        )
        interactions, _ = generate_synthetic(cfg)
        # next-item draws are every non-initial event: 10 per user -> 1e5
        nxt = [r.item_id for r in interactions if r.timestamp > 0]
        assert len(nxt) == 100_000
        counts = np.bincount([int(i[1:]) for i in nxt], minlength=20)
        _, p = stats.chisquare(counts)
        assert p > 0.001

    def test_depth_one_has_no_cluster_structure(self):
        from sklearn.cluster import KMeans
        from sklearn.metrics import silhouette_score

        flat = SyntheticConfig(n_users=1, n_items=300, embed_dim=16, hierarchy_depth=1, seed=9)
        deep = SyntheticConfig(n_users=1, n_items=300, embed_dim=16, hierarchy_depth=3, seed=9)
        _, emb_flat = generate_synthetic(flat)
        _, emb_deep = generate_synthetic(deep)

        def silhouette(emb_map):
            x = np.stack([emb_map[k] for k in sorted(emb_map)])
            labels = KMeans(8, n_init=5, random_state=0).fit_predict(x)
            return silhouette_score(x, labels)

        s_flat, s_deep = silhouette(emb_flat), silhouette(emb_deep)
        assert abs(s_flat) < 0.15
        assert s_deep > s_flat + 0.1


class TestBuckets:
    def _samples(self):
        return [
            Sample("u1", ("a",), "x"),
            Sample("u2", ("a", "b"), "y"),
            Sample("u3", ("a", "b"), "x"),
            Sample("u4", ("a", "b", "c"), "z"),
        ]

    def test_length_partition(self):
        buckets = bucket_by_length(self._samples(), [1, 2, 3])
        assert [len(buckets[k]) for k in (1, 2, 3)] == [1, 2, 1]

    def test_single_length(self):
        samples = [Sample("u", ("a", "b"), "t")] * 4
        buckets = bucket_by_length(samples, [2, 3])
        assert len(buckets[2]) == 4 and len(buckets[3]) == 0

    def test_membership_matches_sort_then_slice_oracle(self):
        train = (
            [rec("u", "w", t) for t in range(1)]
            + [rec("u", "x", t) for t in range(2)]
            + [rec("u", "y", t) for t in range(3)]
            + [rec("u", "z", t) for t in range(5)]
        )
        samples = [Sample(f"u{i}", ("a",), t) for i, t in enumerate("wxyz")]
        buckets = bucket_by_popularity(samples, [25.0, 50.0, 100.0], train)
        # oracle: popularity-ascending item order is w(1) < x(2) < y(3) < z(5)
        assert {s.target for s in buckets[25.0]} == {"w"}
        assert {s.target for s in buckets[50.0]} == {"w", "x"}
        assert {s.target for s in buckets[100.0]} == {"w", "x", "y", "z"}
        # nested prefixes
        assert set(id(s) for s in buckets[25.0]) <= set(id(s) for s in buckets[50.0])

    def test_percentile_validation(self):
        with pytest.raises(ValueError):
            bucket_by_popularity([], [0.0], [])


class TestRoundTrips:
    def test_interactions_tsv_round_trip(self, tmp_path):
        records = [rec("u1", "i1", 3), rec("u2", "i2", 0)]
        p = tmp_path / "r.tsv"
        write_interactions_tsv(records, p)
        assert load_interactions(p) == records

    def test_embeddings_round_trip(self, tmp_path):
        emb = {"i1": np.array([0.25, -1.5]), "i2": np.array([3.125, 0.0])}
        p = tmp_path / "e.txt"
        write_embeddings(emb, p)
        back = load_embeddings(p)
        for k in emb:
            assert np.array_equal(emb[k], back[k])

    def test_split_manifest_round_trip(self, tmp_path):
        samples = [Sample("u1", ("a", "b"), "c"), Sample("u2", (), "a")]
        p = tmp_path / "s.jsonl"
        write_split_manifest(samples, p)
        assert load_split_manifest(p) == samples
