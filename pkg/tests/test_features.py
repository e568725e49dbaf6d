import math
import random

import pytest

from triagekit.features import (
    FeatureSpace,
    HashedFeatureVector,
    hash_ngrams,
    mutual_information_scores,
    select_features_mi,
    stable_hash64,
    vectors_to_csr,
)
from triagekit.textprep import TokenStream


def brute_force_mi(presence_by_example, labels):
    """Independent MI oracle: direct add-one-smoothed contingency table.

    ``presence_by_example`` is a list of sets of feature ids. Returns
    {feature id: MI in nats} over every feature id that appears anywhere.
    """
    classes = sorted(set(labels))
    n = len(labels)
    features = sorted(set().union(*presence_by_example) if presence_by_example else set())
    out = {}
    for f in features:
        cell = {(x, c): 1.0 for x in (0, 1) for c in classes}  # add-one smoothing
        for present, label in zip(presence_by_example, labels):
            cell[(1 if f in present else 0, label)] += 1.0
        total = sum(cell.values())
        mi = 0.0
        for x in (0, 1):
            px = sum(cell[(x, c)] for c in classes) / total
            for c in classes:
                pc = sum(cell[(xx, c)] for xx in (0, 1)) / total
                pxc = cell[(x, c)] / total
                mi += pxc * math.log(pxc / (px * pc))
        out[f] = max(mi, 0.0)
    return out


def vectors_from_presence(presence_by_example, dim=1024):
    return [
        HashedFeatureVector(dim=dim, entries={f: 1.0 for f in present})
        for present in presence_by_example
    ]


class TestStableHash:
    def test_documented_values_frozen(self):
        # Frozen so a hash change (which would invalidate every artifact)
        # cannot slip in silently.
        assert stable_hash64("disk") == 1091659701304918778
        assert stable_hash64("disk failed") == 10361720373033007270

    def test_spread(self):
        values = {stable_hash64(f"token-{i}") % 4096 for i in range(2000)}
        assert len(values) > 1500


class TestHashNgrams:
    def test_unigram_bigram_counting(self):
        stream = TokenStream([["a", "b"]])
        vec = hash_ngrams(stream, n_max=2, dim=1 << 12)
        assert vec.total_mass() == 3.0  # "a", "b", "a b"
        expected = {stable_hash64(t) % (1 << 12) for t in ("a", "b", "a b")}
        assert set(vec.entries) == expected

    def test_empty_stream(self):
        vec = hash_ngrams(TokenStream([]), n_max=2, dim=1 << 12)
        assert vec.entries == {}

    def test_identical_ngram_multisets_identical_vectors(self):
        a = hash_ngrams(TokenStream([["x", "y"], ["z", "w"]]), 2, 1 << 12)
        b = hash_ngrams(TokenStream([["z", "w"], ["x", "y"]]), 2, 1 << 12)
        assert a.entries == b.entries

    def test_ngrams_do_not_cross_sentences(self):
        joined = hash_ngrams(TokenStream([["a", "b"]]), 2, 1 << 12)
        split = hash_ngrams(TokenStream([["a"], ["b"]]), 2, 1 << 12)
        assert split.total_mass() == 2.0
        assert joined.total_mass() == 3.0

    def test_dim_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            hash_ngrams(TokenStream([]), 2, 1000)

    def test_n_max_validated(self):
        with pytest.raises(ValueError):
            hash_ngrams(TokenStream([]), 4, 1 << 12)


class TestMutualInformation:
    def test_perfect_feature_value_matches_oracle(self):
        # Feature 5 present iff label A, balanced 2-class set of 100.
        presence = [{5} if i < 50 else set() for i in range(100)]
        labels = ["A"] * 50 + ["B"] * 50
        oracle = brute_force_mi(presence, labels)
        scores = mutual_information_scores(vectors_from_presence(presence), labels)
        assert scores[5] == pytest.approx(oracle[5], abs=1e-12)
        # Smoothed estimate sits just under the ln 2 ideal of a perfectly
        # predictive balanced binary feature.
        assert oracle[5] == pytest.approx(0.59812, abs=1e-4)
        assert oracle[5] < math.log(2.0)

    def test_perfect_feature_ranked_first(self):
        presence = [{5, 9} if i < 50 else {9} for i in range(100)]
        labels = ["A"] * 50 + ["B"] * 50
        space = select_features_mi(vectors_from_presence(presence), labels, k=1)
        assert space.selected == [5]

    def test_constant_feature_zero_mi_balanced(self):
        presence = [{9} for _ in range(100)]
        labels = ["A"] * 50 + ["B"] * 50
        scores = mutual_information_scores(vectors_from_presence(presence), labels)
        assert scores[9] == pytest.approx(0.0, abs=1e-12)

    def test_oracle_rank_agreement_randomized(self):
        # Exact rank agreement with the brute-force oracle on small instances.
        rng = random.Random(99)
        for trial in range(25):
            n = rng.randrange(10, 200)
            n_features = rng.randrange(2, 32)
            n_classes = rng.randrange(2, 5)
            labels = [f"team-{rng.randrange(n_classes)}" for _ in range(n)]
            if len(set(labels)) < 2:
                labels[0] = "team-x"
            presence = [
                {f for f in range(n_features) if rng.random() < 0.3}
                for _ in range(n)
            ]
            oracle = brute_force_mi(presence, labels)
            scores = mutual_information_scores(vectors_from_presence(presence), labels)
            assert set(scores) == {f for f in oracle if any(f in p for p in presence)}
            for f, s in scores.items():
                assert s == pytest.approx(oracle[f], abs=1e-10)
            # Quantize before ranking: mathematically tied features (equal
            # contingency tables up to symmetry) differ only by float noise
            # between the two summation orders.
            oracle_rank = sorted(scores, key=lambda f: (-round(oracle[f], 9), f))
            impl_rank = sorted(scores, key=lambda f: (-round(scores[f], 9), f))
            assert impl_rank == oracle_rank

    def test_k_saturates_at_nonzero_mi_features(self):
        presence = [{1} if i < 50 else {2} for i in range(100)]
        labels = ["A"] * 50 + ["B"] * 50
        space = select_features_mi(vectors_from_presence(presence), labels, k=500)
        assert space.selected == [1, 2]

    def test_k_validated(self):
        with pytest.raises(ValueError):
            select_features_mi(vectors_from_presence([{1}, {2}]), ["A", "B"], k=0)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            mutual_information_scores(vectors_from_presence([{1}, {2}]), ["A", "A"])


class TestFeatureSpaceProjection:
    def test_projection_and_csr(self):
        space = FeatureSpace(dim=1024, selected=[3, 10, 77])
        vecs = [
            HashedFeatureVector(1024, {3: 2.0, 500: 9.0}),
            HashedFeatureVector(1024, {10: 1.0, 77: 4.0}),
        ]
        X = vectors_to_csr(vecs, space)
        assert X.shape == (2, 3)
        assert X[0, 0] == 2.0 and X[0, 1] == 0.0
        assert X[1, 1] == 1.0 and X[1, 2] == 4.0
