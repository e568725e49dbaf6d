"""N-gram feature hashing and mutual-information feature selection."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .textprep import TokenStream

logger = logging.getLogger(__name__)

#: Floor below which an MI score is treated as exactly zero.
MI_EPS = 1e-12

DEFAULT_DIM = 1 << 20
DEFAULT_NGRAM_MAX = 2


def stable_hash64(text: str) -> int:
    """Platform- and process-independent 64-bit hash (blake2b, 8-byte digest)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _check_dim(dim: int) -> None:
    if dim < (1 << 10) or dim & (dim - 1) != 0:
        raise ValueError(f"dim must be a power of two >= 1024, got {dim}")


@dataclass
class HashedFeatureVector:
    dim: int
    entries: dict = field(default_factory=dict)

    def total_mass(self) -> float:
        return float(sum(self.entries.values()))


def hash_ngrams(stream: TokenStream, n_max: int = DEFAULT_NGRAM_MAX, dim: int = DEFAULT_DIM) -> HashedFeatureVector:
    """Count within-sentence n-grams (n <= n_max) into a hashed vector.

    The hash is fixed and documented (blake2b folded mod dim), so two streams
    with the same n-gram multiset produce identical vectors on any machine.
    """
    if n_max not in (1, 2, 3):
        raise ValueError(f"n_max must be 1, 2 or 3, got {n_max}")
    _check_dim(dim)
    entries = {}
    for sentence in stream.sentences:
        for n in range(1, n_max + 1):
            for i in range(len(sentence) - n + 1):
                idx = stable_hash64(" ".join(sentence[i : i + n])) % dim
                entries[idx] = entries.get(idx, 0.0) + 1.0
    return HashedFeatureVector(dim=dim, entries=entries)


@dataclass
class FeatureSpace:
    """Hashed vocabulary plus the indices retained by MI selection."""

    dim: int
    selected: list = field(default_factory=list)
    mi_scores: dict = field(default_factory=dict)

    def __post_init__(self):
        self.column_of = {idx: col for col, idx in enumerate(self.selected)}

    @property
    def n_features(self) -> int:
        return len(self.selected)

    def project(self, vector: HashedFeatureVector) -> dict:
        """Map a hashed vector onto selected-column space."""
        out = {}
        for idx, value in vector.entries.items():
            col = self.column_of.get(idx)
            if col is not None:
                out[col] = value
        return out


def mutual_information_scores(vectors, labels):
    """MI (nats) between binarized feature presence and the team label.

    Uses an add-one smoothed 2xC contingency table per observed index; indices
    never observed in the sample are by definition constant-absent and carry
    zero MI, so they are not returned.
    """
    n = len(vectors)
    if n != len(labels) or n < 2:
        raise ValueError("need matching vectors/labels with at least 2 examples")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("need at least 2 distinct labels")
    class_pos = {c: i for i, c in enumerate(classes)}
    y = np.array([class_pos[label] for label in labels], dtype=np.int64)

    idx_list = []
    cls_list = []
    for vec, yi in zip(vectors, y):
        present = [i for i, v in vec.entries.items() if v > 0]
        idx_list.extend(present)
        cls_list.extend([yi] * len(present))
    if not idx_list:
        return {}

    idx_arr = np.array(idx_list, dtype=np.int64)
    cls_arr = np.array(cls_list, dtype=np.int64)
    observed, inverse = np.unique(idx_arr, return_inverse=True)
    C = len(classes)
    present_counts = np.zeros((len(observed), C), dtype=np.int64)
    np.add.at(present_counts, (inverse, cls_arr), 1)

    class_totals = np.bincount(y, minlength=C).astype(np.float64)
    a = present_counts.astype(np.float64) + 1.0          # present, per class
    b = (class_totals[None, :] - present_counts) + 1.0   # absent, per class
    n_eff = n + 2.0 * C
    pa = a / n_eff
    pb = b / n_eff
    p1 = pa.sum(axis=1, keepdims=True)
    p0 = pb.sum(axis=1, keepdims=True)
    py = (a + b) / n_eff
    mi = (pa * np.log(pa / (p1 * py))).sum(axis=1) + (pb * np.log(pb / (p0 * py))).sum(axis=1)
    mi = np.maximum(mi, 0.0)
    return {int(i): float(s) for i, s in zip(observed, mi)}


def select_features_mi(vectors, labels, k: int, dim: int | None = None) -> FeatureSpace:
    """Keep the top-k indices by mutual information, ties to the lower index.

    Only indices with nonzero MI are eligible, so the retained set saturates
    at the number of informative features when k is larger.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if dim is None:
        if not vectors:
            raise ValueError("cannot infer dim from empty vector list")
        dim = vectors[0].dim
    scores = mutual_information_scores(vectors, labels)
    eligible = [(idx, s) for idx, s in scores.items() if s > MI_EPS]
    eligible.sort(key=lambda pair: (-pair[1], pair[0]))
    retained = eligible[:k]
    selected = sorted(idx for idx, _ in retained)
    logger.info("MI selection kept %d of %d observed indices (k=%d)", len(selected), len(scores), k)
    return FeatureSpace(dim=dim, selected=selected, mi_scores={idx: s for idx, s in retained})


def vectors_to_csr(vectors, space: FeatureSpace) -> sparse.csr_matrix:
    """Stack hashed vectors into a CSR matrix over the selected columns."""
    indptr = [0]
    indices = []
    data = []
    for vec in vectors:
        cols = space.project(vec)
        for col in sorted(cols):
            indices.append(col)
            data.append(cols[col])
        indptr.append(len(indices))
    return sparse.csr_matrix(
        (np.array(data, dtype=np.float32),
         np.array(indices, dtype=np.int32),
         np.array(indptr, dtype=np.int64)),
        shape=(len(vectors), space.n_features),
    )
