"""Similar-incident retrieval via minhash signatures with LSH banding.

Shingles are unigrams plus within-sentence bigrams of the cleaned incident
text. Each of the ``num_hashes`` hash functions is a splitmix64-style 64-bit
mixer keyed by its own random seed, applied to a stable 64-bit shingle hash;
the per-function minimum gives the signature. The index is split into shards
whose band buckets can be searched in parallel and merged deterministically; a
brute-force exact-Jaccard search over the same shingle definition serves as
the fidelity oracle.
"""

from __future__ import annotations

import logging

import numpy as np

from .base import ModelOutput, TriageEstimator
from .features import stable_hash64
from .textprep import TokenStream, incident_token_stream

logger = logging.getLogger(__name__)

_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer: a 64-bit bijection with full avalanche, so each
    # seed column behaves like an independent random hash function.
    z = (z ^ (z >> np.uint64(30))) * _MIX_1
    z = (z ^ (z >> np.uint64(27))) * _MIX_2
    return z ^ (z >> np.uint64(31))

DEFAULT_NUM_HASHES = 128
DEFAULT_BANDS = 32
DEFAULT_NEIGHBORS = 25
DEFAULT_SHARDS = 10


def shingle_set(stream: TokenStream) -> set:
    """Unigrams plus within-sentence bigrams, as strings."""
    shingles = set()
    for sentence in stream.sentences:
        shingles.update(sentence)
        for i in range(len(sentence) - 1):
            shingles.add(sentence[i] + " " + sentence[i + 1])
    return shingles


def exact_jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def banding_candidate_probability(jaccard: float, bands: int, rows_per_band: int) -> float:
    """S-curve: probability that at least one band collides at this similarity."""
    return 1.0 - (1.0 - jaccard**rows_per_band) ** bands


class SimilarIncidentModel(TriageEstimator):
    """Approximate nearest-neighbour team recommender.

    Fitted attributes: ``signatures_`` id -> uint64 signature array,
    ``team_of_`` id -> team, ``shards_`` list of per-shard band-bucket dicts.
    """

    def __init__(self, num_hashes: int = DEFAULT_NUM_HASHES, bands: int = DEFAULT_BANDS,
                 neighbors: int = DEFAULT_NEIGHBORS, num_shards: int = DEFAULT_SHARDS,
                 seed: int = 0, model_id: str = "similar-incidents"):
        self.num_hashes = num_hashes
        self.bands = bands
        self.neighbors = neighbors
        self.num_shards = num_shards
        self.seed = seed
        self.model_id = model_id
        self.signatures_ = None
        self.team_of_ = None
        self.shards_ = None
        self._seeds = None

    @property
    def rows_per_band(self) -> int:
        return self.num_hashes // self.bands

    def _validate(self):
        if self.num_hashes % self.bands != 0:
            raise ValueError(
                f"num_hashes ({self.num_hashes}) must be divisible by bands ({self.bands})"
            )
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")

    def _hash_seeds(self) -> np.ndarray:
        if self._seeds is None:
            rng = np.random.default_rng(self.seed)
            self._seeds = rng.integers(
                0, 1 << 63, size=self.num_hashes, dtype=np.uint64
            )
        return self._seeds

    def signature(self, shingles: set) -> np.ndarray:
        """Minhash signature; raises on an empty shingle set."""
        if not shingles:
            raise ValueError("cannot sign an empty shingle set")
        seeds = self._hash_seeds()
        x = np.array([stable_hash64(s) for s in sorted(shingles)], dtype=np.uint64)
        with np.errstate(over="ignore"):
            hashed = _mix64(x[:, None] ^ seeds[None, :])
        return hashed.min(axis=0)

    def _band_keys(self, sig: np.ndarray):
        r = self.rows_per_band
        for band in range(self.bands):
            yield band, sig[band * r : (band + 1) * r].tobytes()

    def fit(self, incidents):
        self._validate()
        self.signatures_ = {}
        self.team_of_ = {}
        self.shards_ = [{} for _ in range(self.num_shards)]
        skipped = 0
        for inc in sorted(incidents, key=lambda x: x.id):
            shingles = shingle_set(incident_token_stream(inc))
            if not shingles:
                skipped += 1
                continue
            sig = self.signature(shingles)
            shard = self.shards_[len(self.signatures_) % self.num_shards]
            self.signatures_[inc.id] = sig
            self.team_of_[inc.id] = inc.owning_team
            for band, key in self._band_keys(sig):
                shard.setdefault((band, key), []).append(inc.id)
        if skipped:
            logger.warning("skipped %d incidents with empty shingle sets", skipped)
        return self

    # -- querying --------------------------------------------------------

    def _query_stream(self, query) -> TokenStream:
        if isinstance(query, TokenStream):
            return query
        return incident_token_stream(query)

    def candidates(self, sig: np.ndarray) -> set:
        """Union of band-bucket members across all shards."""
        found = set()
        keys = list(self._band_keys(sig))
        for shard in self.shards_:
            for key in keys:
                found.update(shard.get(key, ()))
        return found

    def estimated_jaccard(self, sig_a: np.ndarray, sig_b: np.ndarray) -> float:
        return float((sig_a == sig_b).mean())

    def neighbors_of(self, query, k: int = None):
        """Ranked (incident id, estimated Jaccard) candidates, best first."""
        self._check_fitted("signatures_")
        k = k if k is not None else self.neighbors
        stream = self._query_stream(query)
        shingles = shingle_set(stream)
        if not shingles:
            return []
        sig = self.signature(shingles)
        scored = [
            (cid, self.estimated_jaccard(sig, self.signatures_[cid]))
            for cid in self.candidates(sig)
        ]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored[:k]

    def predict_output(self, query, k: int = None) -> ModelOutput:
        ranked = self.neighbors_of(query, k)
        if not ranked:
            return ModelOutput.empty(self.model_id)
        confidences = {}
        for cid, jac in ranked:
            team = self.team_of_[cid]
            confidences[team] = max(confidences.get(team, 0.0), jac)
        return ModelOutput.from_scores(self.model_id, confidences)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted("signatures_")
        return {
            "format": "lsh/1",
            "params": self.get_params(),
            "signatures": {cid: [int(v) for v in sig] for cid, sig in self.signatures_.items()},
            "team_of": self.team_of_,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimilarIncidentModel":
        if data.get("format") != "lsh/1":
            raise ValueError(f"unsupported lsh format {data.get('format')!r}")
        est = cls(**data["params"])
        est._validate()
        est.team_of_ = dict(data["team_of"])
        est.signatures_ = {}
        est.shards_ = [{} for _ in range(est.num_shards)]
        for i, cid in enumerate(sorted(data["signatures"])):
            sig = np.array(data["signatures"][cid], dtype=np.uint64)
            est.signatures_[cid] = sig
            shard = est.shards_[i % est.num_shards]
            for band, key in est._band_keys(sig):
                shard.setdefault((band, key), []).append(cid)
        return est


def build_lsh_index(train, num_hashes: int = DEFAULT_NUM_HASHES,
                    bands: int = DEFAULT_BANDS, **kwargs) -> SimilarIncidentModel:
    return SimilarIncidentModel(num_hashes=num_hashes, bands=bands, **kwargs).fit(train)


def predict_similar(index: SimilarIncidentModel, query, k: int = None) -> ModelOutput:
    return index.predict_output(query, k)


def brute_force_neighbors(train, query, k: int):
    """Exact-Jaccard oracle over the same shingle definition.

    Descending similarity, ties by incident id; the expensive exhaustive
    search the banded index approximates.
    """
    if isinstance(query, TokenStream):
        q_shingles = shingle_set(query)
    else:
        q_shingles = shingle_set(incident_token_stream(query))
    scored = []
    for inc in train:
        shingles = shingle_set(incident_token_stream(inc))
        if not shingles:
            continue
        scored.append((inc.id, exact_jaccard(q_shingles, shingles)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]
