"""Incident record type and record-level validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

SEVERITIES = (0, 1, 2, 3, 4)
INCIDENT_TYPES = ("LSI", "CRI")
STATUSES = ("active", "mitigated", "resolved")

#: Reserved team id that absorbs infrequent classes; must never appear in raw data.
OTHER_TEAM_ID = "Other"

#: High severity per triage convention: severities 0-2 page an on-call engineer.
HIGH_SEVERITY_MAX = 2


class RecordError(ValueError):
    """A single corpus record failed validation."""


@dataclass
class Incident:
    id: str
    created_at: float
    severity: int
    incident_type: str
    title: str
    summary: str = ""
    discussion: list = field(default_factory=list)
    source_name: str = ""
    originating_service_id: str = ""
    occurring_device_name: str = ""
    raising_dc: str = ""
    keywords: list = field(default_factory=list)
    routing_path: list = field(default_factory=list)
    owning_team: str = ""
    mitigating_oce: str = ""
    status: str = "resolved"

    @property
    def reroutes(self) -> int:
        return max(len(self.routing_path) - 1, 0)

    @property
    def is_high_severity(self) -> bool:
        return self.severity <= HIGH_SEVERITY_MAX

    @property
    def is_cri(self) -> bool:
        return self.incident_type == "CRI"

    def to_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))


def incident_from_record(record: dict) -> Incident:
    """Build a validated Incident from a parsed record dict.

    Unknown fields are ignored for forward compatibility. Raises RecordError
    with a human-readable reason on any violated invariant.
    """
    if not isinstance(record, dict):
        raise RecordError("record is not an object")

    def _text(name, default=None, required=False):
        value = record.get(name, default)
        if value is None:
            if required:
                raise RecordError(f"missing required field {name!r}")
            return ""
        if not isinstance(value, str):
            raise RecordError(f"field {name!r} must be a string")
        return value

    inc_id = _text("id", required=True)
    if not inc_id:
        raise RecordError("field 'id' is empty")
    title = _text("title", required=True)
    if not title.strip():
        raise RecordError("field 'title' is empty")
    owning_team = _text("owning_team", required=True)
    if not owning_team:
        raise RecordError("field 'owning_team' is empty")
    if owning_team == OTHER_TEAM_ID:
        raise RecordError(f"owning_team {OTHER_TEAM_ID!r} is reserved for merged classes")

    try:
        created_at = float(record.get("created_at", 0.0))
    except (TypeError, ValueError):
        raise RecordError("field 'created_at' must be a number") from None

    severity = record.get("severity", 4)
    if severity not in SEVERITIES:
        raise RecordError(f"severity must be one of {SEVERITIES}, got {severity!r}")

    incident_type = _text("incident_type", "LSI")
    if incident_type not in INCIDENT_TYPES:
        raise RecordError(f"incident_type must be one of {INCIDENT_TYPES}, got {incident_type!r}")

    status = _text("status", "resolved")
    if status not in STATUSES:
        raise RecordError(f"status must be one of {STATUSES}, got {status!r}")

    def _str_list(name):
        value = record.get(name, [])
        if value is None:
            return []
        if not isinstance(value, list) or any(not isinstance(x, str) for x in value):
            raise RecordError(f"field {name!r} must be a list of strings")
        return list(value)

    discussion = _str_list("discussion")
    keywords = _str_list("keywords")
    routing_path = _str_list("routing_path")

    if not routing_path:
        routing_path = [owning_team]
    if status == "resolved" and routing_path[-1] != owning_team:
        raise RecordError(
            "resolved incident must end its routing_path at owning_team "
            f"(path ends at {routing_path[-1]!r}, owner is {owning_team!r})"
        )

    return Incident(
        id=inc_id,
        created_at=created_at,
        severity=severity,
        incident_type=incident_type,
        title=title,
        summary=_text("summary", ""),
        discussion=discussion,
        source_name=_text("source_name", ""),
        originating_service_id=_text("originating_service_id", ""),
        occurring_device_name=_text("occurring_device_name", ""),
        raising_dc=_text("raising_dc", ""),
        keywords=keywords,
        routing_path=routing_path,
        owning_team=owning_team,
        mitigating_oce=_text("mitigating_oce", ""),
        status=status,
    )
