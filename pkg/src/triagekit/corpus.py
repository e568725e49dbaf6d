"""Corpus container, line-delimited file ingestion, label policy, temporal split."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .incident import Incident, OTHER_TEAM_ID, RecordError, incident_from_record

logger = logging.getLogger(__name__)


@dataclass
class RejectedRecord:
    line_number: int
    reason: str


@dataclass
class Corpus:
    """Immutable-by-convention collection of incidents with a team index.

    ``premerge_teams`` maps incident id -> original owning team for incidents
    whose label was rewritten to the Other class, so evaluation and insights
    can still see the raw label.
    """

    incidents: list = field(default_factory=list)
    other_team_id: str = OTHER_TEAM_ID
    rejects: list = field(default_factory=list)
    premerge_teams: dict = field(default_factory=dict)

    def __post_init__(self):
        self.team_index = {}
        seen = set()
        for inc in self.incidents:
            if inc.id in seen:
                raise ValueError(f"duplicate incident id {inc.id!r}")
            seen.add(inc.id)
            self.team_index.setdefault(inc.owning_team, []).append(inc.id)

    def __len__(self) -> int:
        return len(self.incidents)

    def __iter__(self):
        return iter(self.incidents)

    def by_id(self, incident_id: str):
        if not hasattr(self, "_id_index"):
            self._id_index = {inc.id: inc for inc in self.incidents}
        return self._id_index.get(incident_id)

    @property
    def teams(self) -> list:
        return sorted(self.team_index)

    def team_counts(self) -> dict:
        return {team: len(ids) for team, ids in self.team_index.items()}

    def time_range(self):
        if not self.incidents:
            return None
        times = [inc.created_at for inc in self.incidents]
        return min(times), max(times)

    def original_team(self, incident_id: str) -> str:
        """Pre-merge owning team (differs from the label only for merged incidents)."""
        if incident_id in self.premerge_teams:
            return self.premerge_teams[incident_id]
        inc = self.by_id(incident_id)
        return inc.owning_team if inc else ""


def load_corpus(path) -> Corpus:
    """Load a line-delimited incident file.

    Invalid records are collected into ``corpus.rejects`` with their line
    number and reason; they are never silently dropped. An unreadable file
    raises OSError.
    """
    incidents = []
    rejects = []
    seen_ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                rejects.append(RejectedRecord(line_number, f"invalid JSON: {exc.msg}"))
                continue
            try:
                inc = incident_from_record(record)
            except RecordError as exc:
                rejects.append(RejectedRecord(line_number, str(exc)))
                continue
            if inc.id in seen_ids:
                rejects.append(RejectedRecord(line_number, f"duplicate incident id {inc.id!r}"))
                continue
            seen_ids.add(inc.id)
            incidents.append(inc)
    if rejects:
        logger.warning("rejected %d of %d records in %s", len(rejects), len(rejects) + len(incidents), path)
    return Corpus(incidents=incidents, rejects=rejects)


def save_corpus(corpus: Corpus, path) -> None:
    """Write one JSON record per line; byte-stable for a fixed corpus."""
    with open(path, "w", encoding="utf-8") as fh:
        for inc in corpus.incidents:
            fh.write(inc.to_json())
            fh.write("\n")


def write_rejects_report(rejects, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rej in rejects:
            fh.write(json.dumps({"line": rej.line_number, "reason": rej.reason}))
            fh.write("\n")


def merge_infrequent_teams(corpus: Corpus, min_count: int) -> Corpus:
    """Relabel every team with fewer than ``min_count`` incidents to Other.

    Original labels are retained in ``premerge_teams``. Idempotent: the Other
    bucket itself is never re-merged, and already-merged ids keep their
    original premerge label.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = corpus.team_counts()
    infrequent = {
        team
        for team, count in counts.items()
        if count < min_count and team != corpus.other_team_id
    }
    if not infrequent:
        return Corpus(
            incidents=list(corpus.incidents),
            other_team_id=corpus.other_team_id,
            rejects=list(corpus.rejects),
            premerge_teams=dict(corpus.premerge_teams),
        )
    merged = []
    premerge = dict(corpus.premerge_teams)
    for inc in corpus.incidents:
        if inc.owning_team in infrequent:
            premerge.setdefault(inc.id, inc.owning_team)
            record = inc.to_record()
            record["owning_team"] = corpus.other_team_id
            if record["routing_path"]:
                record["routing_path"] = record["routing_path"][:-1] + [corpus.other_team_id]
            merged.append(Incident(**record))
        else:
            merged.append(inc)
    logger.info(
        "merged %d infrequent teams (< %d incidents) into %r",
        len(infrequent), min_count, corpus.other_team_id,
    )
    return Corpus(
        incidents=merged,
        other_team_id=corpus.other_team_id,
        rejects=list(corpus.rejects),
        premerge_teams=premerge,
    )


def split_train_test(corpus: Corpus, cutoff: float):
    """Temporal split: train strictly before ``cutoff``, test at or after.

    Disjoint and exhaustive by construction. A cutoff outside the corpus time
    range leaves one side empty and logs a warning.
    """
    train, test = [], []
    for inc in corpus.incidents:
        (train if inc.created_at < cutoff else test).append(inc)
    if corpus.incidents and (not train or not test):
        lo, hi = corpus.time_range()
        logger.warning(
            "cutoff %s outside corpus time range [%s, %s]: train=%d test=%d",
            cutoff, lo, hi, len(train), len(test),
        )
    make = lambda incs: Corpus(
        incidents=incs,
        other_team_id=corpus.other_team_id,
        premerge_teams={i.id: t for i, t in ((inc, corpus.premerge_teams.get(inc.id)) for inc in incs) if t},
    )
    return make(train), make(test)
