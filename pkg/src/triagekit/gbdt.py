"""One-vs-all gradient boosted regression trees over hashed text features.

Two configurations share this learner: the general bucketed family (ten bagged
models) and the CRI-specialized family (three buckets, CRI incidents only,
wider feature budget). Boosting minimizes logistic loss with Newton leaf
values; a backtracking step guarantee keeps per-class training loss
non-increasing across boosting steps, which the loss curves record.

Split finding is exact greedy over the selected features with per-feature
value binning (at most ``max_bins`` bins); ties resolve to the lowest feature
index, then the lowest threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .base import ModelOutput, TriageEstimator
from .features import (
    DEFAULT_DIM,
    DEFAULT_NGRAM_MAX,
    FeatureSpace,
    HashedFeatureVector,
    hash_ngrams,
    select_features_mi,
    vectors_to_csr,
)
from .textprep import incident_token_stream

logger = logging.getLogger(__name__)

_LOSS_SLACK = 1e-12
_PROB_CLIP = 1e-12


@dataclass
class GbdtConfig:
    """Family-level configuration: booster parameters plus bucket orchestration."""

    num_trees: int = 100
    max_leaves: int = 20
    learning_rate: float = 0.2
    min_examples_per_leaf: int = 10
    feature_top_k: int = 30000
    corpus_filter: str = "all"
    num_buckets: int = 10
    reg_lambda: float = 1.0
    max_bins: int = 64
    early_stopping_tol: float = 1e-5
    ngram_max: int = DEFAULT_NGRAM_MAX
    hash_dim: int = DEFAULT_DIM
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.corpus_filter not in ("all", "cri_only"):
            raise ValueError("corpus_filter must be 'all' or 'cri_only'")

    @classmethod
    def general(cls, **overrides) -> "GbdtConfig":
        return cls(**overrides)

    @classmethod
    def cri_specialized(cls, **overrides) -> "GbdtConfig":
        params = dict(feature_top_k=50000, corpus_filter="cri_only", num_buckets=3)
        params.update(overrides)
        return cls(**params)

    def estimator_kwargs(self) -> dict:
        return dict(
            num_trees=self.num_trees,
            max_leaves=self.max_leaves,
            learning_rate=self.learning_rate,
            min_examples_per_leaf=self.min_examples_per_leaf,
            feature_top_k=self.feature_top_k,
            reg_lambda=self.reg_lambda,
            max_bins=self.max_bins,
            early_stopping_tol=self.early_stopping_tol,
            ngram_max=self.ngram_max,
            hash_dim=self.hash_dim,
            seed=self.seed,
        )


@dataclass
class _Tree:
    """Flat-array regression tree; ``value`` holds final (shrunk) leaf deltas."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def predict_one(self, cols: dict) -> float:
        node = 0
        while self.feature[node] >= 0:
            x = cols.get(self.feature[node], 0.0)
            node = self.left[node] if x <= self.threshold[node] else self.right[node]
        return self.value[node]

    def scale(self, factor: float) -> None:
        self.value = [v * factor for v in self.value]

    def max_abs_value(self) -> float:
        leaves = [abs(v) for f, v in zip(self.feature, self.value) if f < 0]
        return max(leaves) if leaves else 0.0

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "_Tree":
        return cls(**{k: list(data[k]) for k in ("feature", "threshold", "left", "right", "value")})


class _BinnedMatrix:
    """CSR count matrix with per-feature value bins (code 0 = implicit zero)."""

    def __init__(self, X: sparse.csr_matrix, max_bins: int):
        self.n_rows, self.n_features = X.shape
        self.max_bins = max_bins
        Xc = X.tocsc()
        bin_values = []
        codes = np.zeros(Xc.nnz, dtype=np.int64)
        for f in range(self.n_features):
            start, end = Xc.indptr[f], Xc.indptr[f + 1]
            col = Xc.data[start:end]
            uniques = np.unique(col)
            if len(uniques) >= max_bins:
                qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins - 1))
                uniques = np.unique(qs)
                uniques[-1] = col.max()  # cover every training value
            bin_values.append(uniques.astype(np.float64))
            codes[start:end] = np.searchsorted(uniques, col, side="left") + 1
        self.bin_values = bin_values
        binned = sparse.csc_matrix((codes, Xc.indices, Xc.indptr), shape=X.shape)
        self.csr = binned.tocsr()
        self.csc = binned.tocsc()
        self.n_bins = max(self.max_bins, 2)

    def threshold_for(self, feature: int, bin_j: int) -> float:
        if bin_j == 0:
            return 0.0
        return float(self.bin_values[feature][bin_j - 1])


def _node_nonzeros(Xb: "_BinnedMatrix", rows: np.ndarray):
    if len(rows) == Xb.n_rows:
        sub = Xb.csr
    else:
        sub = Xb.csr[rows]
    return sub.indices.astype(np.int64), sub.data.astype(np.int64), np.diff(sub.indptr)


def _best_split(Xb, rows, g, h, min_leaf, lam):
    """Histogram split search; returns (gain, feature, bin_j) or None."""
    g_node = g[rows]
    h_node = h[rows]
    G, H, C = g_node.sum(), h_node.sum(), len(rows)
    if C < 2 * min_leaf:
        return None
    cols, codes, row_nnz = _node_nonzeros(Xb, rows)
    if len(cols) == 0:
        return None
    width = Xb.n_bins + 1
    key = cols * width + codes
    uniq, inv = np.unique(key, return_inverse=True)
    g_hist = np.bincount(inv, weights=np.repeat(g_node, row_nnz))
    h_hist = np.bincount(inv, weights=np.repeat(h_node, row_nnz))
    c_hist = np.bincount(inv)
    feats = uniq // width
    fcodes = uniq % width
    P, fpos = np.unique(feats, return_inverse=True)
    Gm = np.zeros((len(P), width))
    Hm = np.zeros((len(P), width))
    Cm = np.zeros((len(P), width))
    Gm[fpos, fcodes] = g_hist
    Hm[fpos, fcodes] = h_hist
    Cm[fpos, fcodes] = c_hist
    Gm[:, 0] = G - Gm.sum(axis=1)
    Hm[:, 0] = H - Hm.sum(axis=1)
    Cm[:, 0] = C - Cm.sum(axis=1)

    GL = np.cumsum(Gm, axis=1)
    HL = np.cumsum(Hm, axis=1)
    CL = np.cumsum(Cm, axis=1)
    GR, HR, CR = G - GL, H - HL, C - CL
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam))
    gain[(CL < min_leaf) | (CR < min_leaf)] = -np.inf
    flat = int(np.argmax(gain))  # row-major: lowest feature index, lowest threshold
    best = gain.ravel()[flat]
    if not np.isfinite(best) or best <= 0.0:
        return None
    fdx, bin_j = divmod(flat, width)
    return float(best), int(P[fdx]), int(bin_j)


def _partition_rows(Xb, rows, feature, bin_j, mask):
    start, end = Xb.csc.indptr[feature], Xb.csc.indptr[feature + 1]
    col_rows = Xb.csc.indices[start:end]
    col_codes = Xb.csc.data[start:end]
    mask[rows] = True
    right_candidates = col_rows[(col_codes > bin_j) & mask[col_rows]]
    right_mask = np.zeros(Xb.n_rows, dtype=bool)
    right_mask[right_candidates] = True
    mask[rows] = False
    node_right = right_mask[rows]
    return rows[~node_right], rows[node_right]


def _grow_tree(Xb, g, h, min_leaf, lam, max_leaves):
    """Best-first growth up to max_leaves; returns (tree, per-row leaf ids)."""
    tree = _Tree()
    root = tree.add_node()
    all_rows = np.arange(Xb.n_rows)
    mask = np.zeros(Xb.n_rows, dtype=bool)
    leaf_rows = {root: all_rows}
    candidates = {}
    split = _best_split(Xb, all_rows, g, h, min_leaf, lam)
    if split is not None:
        candidates[root] = split
    n_leaves = 1
    while candidates and n_leaves < max_leaves:
        node = max(candidates, key=lambda k: (candidates[k][0], -k))
        gain, feature, bin_j = candidates.pop(node)
        rows = leaf_rows.pop(node)
        left_rows, right_rows = _partition_rows(Xb, rows, feature, bin_j, mask)
        tree.feature[node] = feature
        tree.threshold[node] = Xb.threshold_for(feature, bin_j)
        lid, rid = tree.add_node(), tree.add_node()
        tree.left[node], tree.right[node] = lid, rid
        leaf_rows[lid] = left_rows
        leaf_rows[rid] = right_rows
        n_leaves += 1
        for child, child_rows in ((lid, left_rows), (rid, right_rows)):
            child_split = _best_split(Xb, child_rows, g, h, min_leaf, lam)
            if child_split is not None:
                candidates[child] = child_split

    assignment = np.zeros(Xb.n_rows, dtype=np.int64)
    for leaf, rows in leaf_rows.items():
        tree.value[leaf] = float(-g[rows].sum() / (h[rows].sum() + lam))
        assignment[rows] = leaf
    return tree, assignment


def _log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    p = 1.0 / (1.0 + np.exp(-raw))
    p = np.clip(p, _PROB_CLIP, 1.0 - _PROB_CLIP)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


class GbdtClassifier(TriageEstimator):
    """One-vs-all boosted-tree classifier over selected hashed n-gram features.

    Fitted attributes: ``classes_`` (sorted team ids), ``trees_`` (class ->
    list of _Tree, leaf deltas include shrinkage), ``loss_curves_`` (class ->
    per-step training log-loss starting at step 0), ``feature_space_``.
    """

    def __init__(self, num_trees=100, max_leaves=20, learning_rate=0.2,
                 min_examples_per_leaf=10, feature_top_k=30000, reg_lambda=1.0,
                 max_bins=64, early_stopping_tol=1e-5, ngram_max=DEFAULT_NGRAM_MAX,
                 hash_dim=DEFAULT_DIM, seed=0, model_id="gbdt"):
        self.num_trees = num_trees
        self.max_leaves = max_leaves
        self.learning_rate = learning_rate
        self.min_examples_per_leaf = min_examples_per_leaf
        self.feature_top_k = feature_top_k
        self.reg_lambda = reg_lambda
        self.max_bins = max_bins
        self.early_stopping_tol = early_stopping_tol
        self.ngram_max = ngram_max
        self.hash_dim = hash_dim
        self.seed = seed
        self.model_id = model_id
        self.classes_ = None
        self.trees_ = None
        self.loss_curves_ = None
        self.feature_space_ = None

    # -- fitting ---------------------------------------------------------

    def _vector_for(self, incident, vectors=None) -> HashedFeatureVector:
        if vectors is not None and incident.id in vectors:
            return vectors[incident.id]
        return hash_ngrams(incident_token_stream(incident), self.ngram_max, self.hash_dim)

    def fit(self, incidents, feature_space: FeatureSpace = None, vectors=None,
            classes=None):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if not incidents:
            raise ValueError("cannot fit on an empty bucket")
        labels = [inc.owning_team for inc in incidents]
        classes = sorted(classes) if classes is not None else sorted(set(labels))
        if len(set(labels)) < 2:
            raise ValueError(f"need >= 2 classes to fit, got {sorted(set(labels))}")

        feats = [self._vector_for(inc, vectors) for inc in incidents]
        if feature_space is None:
            feature_space = select_features_mi(feats, labels, self.feature_top_k)
        X = vectors_to_csr(feats, feature_space)
        Xb = _BinnedMatrix(X, self.max_bins)
        y_all = np.array(labels)

        self.classes_ = classes
        self.trees_ = {}
        self.loss_curves_ = {}
        self.feature_space_ = feature_space
        for c in classes:
            y = (y_all == c).astype(np.float64)
            if y.sum() == 0:
                logger.warning("class %r has no positives after filtering; skipped", c)
                continue
            self.trees_[c], self.loss_curves_[c] = self._boost_class(Xb, y)
        return self

    def _boost_class(self, Xb, y):
        raw = np.zeros(Xb.n_rows)
        trees = []
        losses = [_log_loss(y, raw)]
        for _ in range(self.num_trees):
            p = 1.0 / (1.0 + np.exp(-raw))
            g = p - y
            h = np.maximum(p * (1.0 - p), _PROB_CLIP)
            tree, assignment = _grow_tree(
                Xb, g, h, self.min_examples_per_leaf, self.reg_lambda, self.max_leaves
            )
            tree.scale(self.learning_rate)
            delta = np.asarray(tree.value)[assignment]
            # Backtrack the step until the training loss does not increase;
            # a step that cannot be rescued is dropped and boosting stops.
            scale = 1.0
            new_loss = _log_loss(y, raw + delta)
            while new_loss > losses[-1] + _LOSS_SLACK and scale > 0.1:
                scale *= 0.5
                new_loss = _log_loss(y, raw + scale * delta)
            if new_loss > losses[-1] + _LOSS_SLACK:
                break
            if scale != 1.0:
                tree.scale(scale)
                delta = delta * scale
            raw = raw + delta
            trees.append(tree)
            losses.append(new_loss)
            if losses[-2] - losses[-1] < self.early_stopping_tol:
                break
        return trees, losses

    # -- prediction ------------------------------------------------------

    def decision_scores(self, features: HashedFeatureVector, max_trees=None) -> dict:
        """Raw per-class scores: the plain sum of leaf deltas."""
        self._check_fitted("trees_")
        cols = self.feature_space_.project(features)
        out = {}
        for c, trees in self.trees_.items():
            use = trees if max_trees is None else trees[:max_trees]
            out[c] = sum(tree.predict_one(cols) for tree in use)
        return out

    def predict_output(self, incident_or_features) -> ModelOutput:
        if isinstance(incident_or_features, HashedFeatureVector):
            features = incident_or_features
        else:
            features = self._vector_for(incident_or_features)
        raw = self.decision_scores(features)
        scores = {c: float(1.0 / (1.0 + np.exp(-r))) for c, r in raw.items()}
        return ModelOutput.from_scores(self.model_id, scores)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted("trees_")
        return {
            "format": "gbdt/1",
            "params": self.get_params(),
            "classes": self.classes_,
            "trees": {c: [t.to_dict() for t in trees] for c, trees in self.trees_.items()},
            "loss_curves": self.loss_curves_,
            "feature_space": {
                "dim": self.feature_space_.dim,
                "selected": list(self.feature_space_.selected),
                "mi_scores": {str(k): v for k, v in self.feature_space_.mi_scores.items()},
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GbdtClassifier":
        if data.get("format") != "gbdt/1":
            raise ValueError(f"unsupported gbdt format {data.get('format')!r}")
        est = cls(**data["params"])
        est.classes_ = list(data["classes"])
        est.trees_ = {c: [_Tree.from_dict(t) for t in trees] for c, trees in data["trees"].items()}
        est.loss_curves_ = {c: list(v) for c, v in data["loss_curves"].items()}
        fs = data["feature_space"]
        est.feature_space_ = FeatureSpace(
            dim=fs["dim"],
            selected=list(fs["selected"]),
            mi_scores={int(k): v for k, v in fs["mi_scores"].items()},
        )
        return est


def train_gbdt(bucket, config: GbdtConfig, feature_space=None, vectors=None,
               model_id=None) -> GbdtClassifier:
    """Fit one GBDT model on a bucket, honoring the config's corpus filter."""
    incidents = list(bucket.incidents)
    if config.corpus_filter == "cri_only":
        incidents = [inc for inc in incidents if inc.is_cri]
    if not incidents:
        raise ValueError(f"bucket {bucket.bucket_id} is empty after {config.corpus_filter!r} filter")
    est = GbdtClassifier(
        model_id=model_id or f"gbdt-{bucket.bucket_id}", **config.estimator_kwargs()
    )
    return est.fit(incidents, feature_space=feature_space, vectors=vectors)


def predict_gbdt(model: GbdtClassifier, features: HashedFeatureVector) -> ModelOutput:
    return model.predict_output(features)


def train_bucketed_family(buckets, config: GbdtConfig, family_id="gbdt", vectors=None):
    """Train one model per bucket, independently (bagging)."""
    if len(buckets) != config.num_buckets:
        raise ValueError(f"expected {config.num_buckets} buckets, got {len(buckets)}")
    models = []
    for bucket in buckets:
        models.append(train_gbdt(
            bucket, config, vectors=vectors, model_id=f"{family_id}-{bucket.bucket_id}"
        ))
    return models
