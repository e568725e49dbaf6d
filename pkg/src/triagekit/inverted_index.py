"""Two-table IDF inverted index over per-team vocabulary.

Cold-start friendly: a team is indexed from however little text it has, so a
single templated incident is enough to make the team reachable. Each team's
local table keeps its top-200 words by within-team tf x idf; the global table
keeps the team's top-500 words by tf, weighted at query time by global idf.
The two table scores blend as confidence = alpha * local + (1 - alpha) *
global, alpha 0.2 by default.
"""

from __future__ import annotations

import logging
import math

from .base import ModelOutput, TriageEstimator
from .textprep import TokenStream, incident_token_stream

logger = logging.getLogger(__name__)

_EPS = 1e-9

LOCAL_TOP = 200
GLOBAL_TOP = 500


def blend_confidence(local_score: float, global_score: float, alpha: float) -> float:
    """The published blend: alpha * local + (1 - alpha) * global, in [0,1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0,1]")
    return min(max(alpha * local_score + (1.0 - alpha) * global_score, 0.0), 1.0)


def idf_from_doc_frequency(df: int, n_docs: int) -> float:
    return math.log((n_docs + 1) / (df + 1)) + 1.0


class InvertedIndexModel(TriageEstimator):
    """Per-team word tables scored by idf mass overlap with the query set.

    Fitted attributes: ``local_table_`` team -> {token: tf*idf weight},
    ``global_table_`` team -> {token: idf weight}, ``idf_`` token -> idf over
    team documents, ``default_idf_`` for unseen tokens (df = 0).
    """

    def __init__(self, alpha: float = 0.2, local_top: int = LOCAL_TOP,
                 global_top: int = GLOBAL_TOP, model_id: str = "inverted-index"):
        self.alpha = alpha
        self.local_top = local_top
        self.global_top = global_top
        self.model_id = model_id
        self.local_table_ = None
        self.global_table_ = None
        self.idf_ = None
        self.default_idf_ = None

    def fit(self, incidents):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")
        incidents = list(incidents)
        if not incidents:
            raise ValueError("cannot build an index from an empty corpus")

        team_tf = {}
        for inc in incidents:
            tf = team_tf.setdefault(inc.owning_team, {})
            for tok in incident_token_stream(inc).tokens():
                tf[tok] = tf.get(tok, 0) + 1

        n_teams = len(team_tf)
        df = {}
        for tf in team_tf.values():
            for tok in tf:
                df[tok] = df.get(tok, 0) + 1
        self.idf_ = {tok: idf_from_doc_frequency(d, n_teams) for tok, d in df.items()}
        self.default_idf_ = idf_from_doc_frequency(0, n_teams)

        self.local_table_ = {}
        self.global_table_ = {}
        for team in sorted(team_tf):
            tf = team_tf[team]
            if not tf:
                logger.warning("team %r has no tokens; index entry is empty", team)
                self.local_table_[team] = {}
                self.global_table_[team] = {}
                continue
            by_tfidf = sorted(
                tf.items(), key=lambda kv: (-kv[1] * self.idf_[kv[0]], kv[0])
            )
            self.local_table_[team] = {
                tok: count * self.idf_[tok] for tok, count in by_tfidf[: self.local_top]
            }
            by_tf = sorted(tf.items(), key=lambda kv: (-kv[1], kv[0]))
            self.global_table_[team] = {
                tok: self.idf_[tok] for tok, _ in by_tf[: self.global_top]
            }
        return self

    # -- scoring ---------------------------------------------------------

    def _query_set(self, query) -> set:
        if isinstance(query, TokenStream):
            return set(query.tokens())
        return set(incident_token_stream(query).tokens())

    def table_scores(self, query_tokens: set) -> dict:
        """Per team (local, global) idf-mass overlap scores, each in [0,1]."""
        self._check_fitted("idf_")
        denom = max(
            sum(self.idf_.get(tok, self.default_idf_) for tok in query_tokens), _EPS
        )
        scores = {}
        for team in self.local_table_:
            local = sum(
                self.idf_[tok] for tok in query_tokens if tok in self.local_table_[team]
            ) / denom
            glob = sum(
                self.idf_[tok] for tok in query_tokens if tok in self.global_table_[team]
            ) / denom
            if local or glob:
                scores[team] = (local, glob)
        return scores

    def predict_output(self, query) -> ModelOutput:
        tokens = self._query_set(query)
        if not tokens:
            return ModelOutput.empty(self.model_id)
        confidences = {
            team: blend_confidence(local, glob, self.alpha)
            for team, (local, glob) in self.table_scores(tokens).items()
        }
        confidences = {t: c for t, c in confidences.items() if c > 0.0}
        if not confidences:
            return ModelOutput.empty(self.model_id)
        return ModelOutput.from_scores(self.model_id, confidences)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted("idf_")
        return {
            "format": "inverted-index/1",
            "params": self.get_params(),
            "idf": self.idf_,
            "default_idf": self.default_idf_,
            "local_table": self.local_table_,
            "global_table": self.global_table_,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InvertedIndexModel":
        if data.get("format") != "inverted-index/1":
            raise ValueError(f"unsupported index format {data.get('format')!r}")
        est = cls(**data["params"])
        est.idf_ = dict(data["idf"])
        est.default_idf_ = data["default_idf"]
        est.local_table_ = {t: dict(v) for t, v in data["local_table"].items()}
        est.global_table_ = {t: dict(v) for t, v in data["global_table"].items()}
        return est


def build_inverted_index(train, alpha: float = 0.2) -> InvertedIndexModel:
    return InvertedIndexModel(alpha=alpha).fit(train)


def predict_inverted_index(tables: InvertedIndexModel, query_tokens) -> ModelOutput:
    return tables.predict_output(query_tokens)
