import json
import math

import numpy as np
import pytest

from triagekit.base import NotFittedError
from triagekit.corpus import Corpus
from triagekit.features import FeatureSpace, HashedFeatureVector
from triagekit.gbdt import GbdtClassifier, GbdtConfig, train_bucketed_family, train_gbdt
from triagekit.incident import Incident
from triagekit.sampling import Bucket, SamplingConfig, sample_and_partition
from triagekit.synthetic import GeneratorSpec, generate_synthetic


def stump_oracle(X, y, min_leaf=1, lam=1.0):
    """Exhaustive single-stump search at the zero-score starting point.

    Logistic gradients at raw=0 are g = 0.5 - y, h = 0.25. Enumerates every
    (feature, threshold) pair over each feature's unique values; ties resolve
    to the lowest feature index, then the lowest threshold, by scan order.
    """
    g = 0.5 - y
    h = np.full(len(y), 0.25)
    G, H = g.sum(), h.sum()
    best = None
    for f in range(X.shape[1]):
        for t in sorted(set(X[:, f]))[:-1]:
            left = X[:, f] <= t
            nl = int(left.sum())
            if nl < min_leaf or len(y) - nl < min_leaf:
                continue
            GL, HL = g[left].sum(), h[left].sum()
            GR, HR = G - GL, H - HL
            gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam))
            if best is None or gain > best[0]:
                best = (gain, f, float(t))
    return best


def incidents_with_vectors(counts, labels, dim=1 << 10):
    """Wrap a dense count matrix as incidents plus a hashed-vector cache."""
    incidents, vectors = [], {}
    for i, (row, team) in enumerate(zip(counts, labels)):
        inc = Incident(
            id=f"INC-{i:05d}", created_at=float(i), severity=1, incident_type="LSI",
            title=f"synthetic row {i}", owning_team=team, routing_path=[team],
        )
        incidents.append(inc)
        vectors[inc.id] = HashedFeatureVector(
            dim=dim, entries={j: float(v) for j, v in enumerate(row) if v}
        )
    return incidents, vectors


def identity_space(n_features, dim=1 << 10):
    return FeatureSpace(dim=dim, selected=list(range(n_features)))


class TestSingleStump:
    def test_perfect_separator_four_points(self):
        X = np.array([[0.0, 1.0], [0.0, 2.0], [3.0, 1.0], [3.0, 2.0]])
        y_labels = ["team-a", "team-a", "team-b", "team-b"]
        incidents, vectors = incidents_with_vectors(X, y_labels)
        est = GbdtClassifier(num_trees=1, min_examples_per_leaf=1, max_leaves=2)
        est.fit(incidents, feature_space=identity_space(2), vectors=vectors)
        tree = est.trees_["team-a"][0]
        assert tree.feature[0] == 0
        assert tree.threshold[0] == 0.0
        curve = est.loss_curves_["team-a"]
        assert curve[1] < curve[0]
        assert curve[0] == pytest.approx(math.log(2.0))

    def test_first_tree_matches_oracle_on_50x8_toy(self):
        rng = np.random.default_rng(17)
        n, n_features = 50, 8
        labels = np.array([f"team-{i % 3}" for i in range(n)])
        X = rng.integers(0, 3, size=(n, n_features)).astype(float)
        # plant a strong (but imperfect) signal for the first class on feature 3
        X[:, 3] = np.where(labels == "team-0", 2.0, 0.0)
        flips = rng.choice(n, size=5, replace=False)
        X[flips, 3] = 2.0 - X[flips, 3]

        y = (labels == "team-0").astype(float)
        oracle_gain, oracle_feature, oracle_threshold = stump_oracle(X, y)

        incidents, vectors = incidents_with_vectors(X, labels)
        est = GbdtClassifier(num_trees=1, min_examples_per_leaf=1, max_leaves=2)
        est.fit(incidents, feature_space=identity_space(n_features), vectors=vectors)
        tree = est.trees_["team-0"][0]
        assert tree.feature[0] == oracle_feature == 3
        assert tree.threshold[0] == oracle_threshold


class TestBoosting:
    def build_separable(self, n_per_class=30):
        rows, labels = [], []
        for i in range(n_per_class):
            rows.append([1.0 + (i % 2), 0.0, 1.0, 0.0])
            labels.append("team-a")
            rows.append([0.0, 1.0 + (i % 3), 0.0, 1.0])
            labels.append("team-b")
        return np.array(rows), labels

    def test_loss_monotone_non_increasing(self):
        X, labels = self.build_separable()
        incidents, vectors = incidents_with_vectors(X, labels)
        est = GbdtClassifier(num_trees=30, min_examples_per_leaf=2,
                             early_stopping_tol=0.0)
        est.fit(incidents, feature_space=identity_space(4), vectors=vectors)
        for curve in est.loss_curves_.values():
            assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))

    def test_confidence_step_bounded_by_leaf_values(self):
        X, labels = self.build_separable()
        incidents, vectors = incidents_with_vectors(X, labels)
        est = GbdtClassifier(num_trees=10, min_examples_per_leaf=2,
                             learning_rate=0.1, early_stopping_tol=0.0)
        est.fit(incidents, feature_space=identity_space(4), vectors=vectors)
        probe = vectors[incidents[0].id]
        trees = est.trees_["team-a"]
        for k in range(1, len(trees) + 1):
            prev = est.decision_scores(probe, max_trees=k - 1)["team-a"]
            cur = est.decision_scores(probe, max_trees=k)["team-a"]
            sig = lambda r: 1.0 / (1.0 + math.exp(-r))
            assert abs(sig(cur) - sig(prev)) <= trees[k - 1].max_abs_value() + 1e-12

    def test_deterministic_model_bytes(self):
        X, labels = self.build_separable()
        incidents, vectors = incidents_with_vectors(X, labels)
        blobs = []
        for _ in range(2):
            est = GbdtClassifier(num_trees=5, min_examples_per_leaf=2, seed=0)
            est.fit(incidents, feature_space=identity_space(4), vectors=vectors)
            blobs.append(json.dumps(est.to_dict(), sort_keys=True))
        assert blobs[0] == blobs[1]

    def test_serialization_round_trip(self):
        X, labels = self.build_separable()
        incidents, vectors = incidents_with_vectors(X, labels)
        est = GbdtClassifier(num_trees=5, min_examples_per_leaf=2)
        est.fit(incidents, feature_space=identity_space(4), vectors=vectors)
        clone = GbdtClassifier.from_dict(est.to_dict())
        probe = vectors[incidents[1].id]
        assert clone.predict_output(probe).scores == est.predict_output(probe).scores

    def test_learning_rate_zero_rejected(self):
        with pytest.raises(ValueError):
            GbdtConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            GbdtClassifier(learning_rate=0.0).fit([], feature_space=None)

    def test_empty_bucket_rejected(self):
        bucket = Bucket(bucket_id=0, incidents=[])
        with pytest.raises(ValueError):
            train_gbdt(bucket, GbdtConfig())

    def test_class_without_positives_skipped_with_warning(self, caplog):
        X, labels = self.build_separable()
        incidents, vectors = incidents_with_vectors(X, labels)
        est = GbdtClassifier(num_trees=2, min_examples_per_leaf=2)
        with caplog.at_level("WARNING"):
            est.fit(incidents, feature_space=identity_space(4), vectors=vectors,
                    classes=["team-a", "team-b", "team-ghost"])
        assert "team-ghost" not in est.trees_
        assert any("team-ghost" in r.message for r in caplog.records)


class TestPrediction:
    def fitted(self):
        X = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 2.0]] * 5)
        labels = (["team-a", "team-a", "team-b", "team-b"] * 5)
        incidents, vectors = incidents_with_vectors(X, labels)
        est = GbdtClassifier(num_trees=10, min_examples_per_leaf=1)
        est.fit(incidents, feature_space=identity_space(2), vectors=vectors)
        return est, vectors, incidents

    def test_all_zero_leaves_give_half_confidence(self):
        est, vectors, incidents = self.fitted()
        for trees in est.trees_.values():
            for tree in trees:
                tree.value = [0.0] * len(tree.value)
        out = est.predict_output(vectors[incidents[0].id])
        assert all(conf == pytest.approx(0.5) for _, conf in out.top)

    def test_sigmoid_of_raw_two(self):
        # assembled model: team-a raw +2, team-b raw -2
        est = GbdtClassifier()
        est.classes_ = ["team-a", "team-b"]
        from triagekit.gbdt import _Tree
        plus = _Tree(); plus.add_node(); plus.value[0] = 2.0
        minus = _Tree(); minus.add_node(); minus.value[0] = -2.0
        est.trees_ = {"team-a": [plus], "team-b": [minus]}
        est.loss_curves_ = {}
        est.feature_space_ = identity_space(1)
        out = est.predict_output(HashedFeatureVector(1 << 10, {}))
        assert out.top[0] == ("team-a", pytest.approx(0.8807970779778823))
        assert out.top[1] == ("team-b", pytest.approx(1.0 - 0.8807970779778823))

    def test_top_size_saturates_at_class_count(self):
        est, vectors, incidents = self.fitted()
        out = est.predict_output(vectors[incidents[0].id])
        assert len(out.top) == 2

    def test_prediction_stateless_order_invariant(self):
        est, vectors, incidents = self.fitted()
        a = [est.predict_output(vectors[i.id]).scores for i in incidents]
        b = [est.predict_output(vectors[i.id]).scores for i in reversed(incidents)]
        assert a == list(reversed(b))

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            GbdtClassifier().predict_output(HashedFeatureVector(1 << 10, {}))


class TestBucketedFamily:
    def corpus_and_buckets(self, num_buckets, teams=4, per_team=40):
        corpus = generate_synthetic(
            GeneratorSpec(teams=teams, per_team=per_team, cri_fraction=0.5), seed=5
        )
        config = SamplingConfig(per_class_cap=30, num_buckets=num_buckets, rng_seed=1)
        return sample_and_partition(corpus, config)

    def test_family_size_matches_buckets(self):
        buckets = self.corpus_and_buckets(3)
        config = GbdtConfig(num_trees=3, num_buckets=3, min_examples_per_leaf=2)
        models = train_bucketed_family(buckets, config, family_id="mart")
        assert [m.model_id for m in models] == ["mart-0", "mart-1", "mart-2"]

    def test_cri_filter_trains_on_cris_only(self):
        buckets = self.corpus_and_buckets(2)
        config = GbdtConfig.cri_specialized(num_trees=3, num_buckets=2,
                                            min_examples_per_leaf=2)
        models = train_bucketed_family(buckets, config, family_id="cri")
        assert len(models) == 2
        for m in models:
            assert set(m.classes_) <= set(b.owning_team for b in buckets[0].incidents) | \
                   set(b.owning_team for b in buckets[1].incidents)

    def test_single_bucket_degenerate_family(self):
        buckets = self.corpus_and_buckets(1)
        config = GbdtConfig(num_trees=2, num_buckets=1, min_examples_per_leaf=2)
        assert len(train_bucketed_family(buckets, config)) == 1

    def test_bucket_count_mismatch_rejected(self):
        buckets = self.corpus_and_buckets(2)
        with pytest.raises(ValueError):
            train_bucketed_family(buckets, GbdtConfig(num_buckets=5))
