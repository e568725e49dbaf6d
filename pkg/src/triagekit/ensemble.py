"""Max-confidence-per-team merging of model outputs, plus the rules workflow.

The merge keeps each team's highest confidence across all outputs, which
optimizes top-N team coverage rather than top-1 accuracy. Ties everywhere
break by team id. ``merge_scores`` is the exact, associative core; family and
global merges are views over it (family emissions truncate to the top five,
which is deliberately lossy).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

from .base import ModelOutput

logger = logging.getLogger(__name__)


class EnsembleUnavailableError(RuntimeError):
    """No model produced any output; maps to the service failure status."""


@dataclass
class Recommendation:
    teams: list = field(default_factory=list)  # (team, confidence, [model ids])
    request_id: str = ""
    models_responded: int = 0
    models_total: int = 0

    def team_ids(self) -> list:
        return [team for team, _, _ in self.teams]

    def is_empty(self) -> bool:
        return not self.teams

    def to_record(self) -> dict:
        return {
            "request_id": self.request_id,
            "teams": [
                {"team": t, "confidence": c, "models": m} for t, c, m in self.teams
            ],
            "models_responded": self.models_responded,
            "models_total": self.models_total,
        }


def merge_scores(outputs) -> dict:
    """Max confidence per team, with the model ids achieving that max.

    Returns {team: (confidence, sorted model ids)}. Commutative and
    associative: regrouping or reordering outputs cannot change the result.
    """
    merged = {}
    for output in outputs:
        for team, conf in output.scores.items():
            if team not in merged or conf > merged[team][0]:
                merged[team] = (conf, [output.model_id])
            elif conf == merged[team][0]:
                merged[team] = (conf, sorted(set(merged[team][1]) | {output.model_id}))
    return merged


def apply_model_weights(outputs, weights) -> list:
    """Optional calibration hook: scale each model's confidences by its weight."""
    if not weights:
        return list(outputs)
    rescaled = []
    for output in outputs:
        w = weights.get(output.model_id, 1.0)
        if w == 1.0:
            rescaled.append(output)
        else:
            scores = {t: min(max(c * w, 0.0), 1.0) for t, c in output.scores.items()}
            rescaled.append(ModelOutput.from_scores(output.model_id, scores))
    return rescaled


def merge_outputs(outputs, n: int = 5, request_id: str = "",
                  models_responded: int = None, models_total: int = None,
                  weights: dict = None) -> Recommendation:
    """Merge model outputs into the final top-n Recommendation."""
    outputs = list(outputs)
    if not outputs:
        raise EnsembleUnavailableError("no model outputs to merge")
    merged = merge_scores(apply_model_weights(outputs, weights))
    ranked = sorted(merged.items(), key=lambda kv: (-kv[1][0], kv[0]))
    teams = [(team, conf, models) for team, (conf, models) in ranked[:n]]
    return Recommendation(
        teams=teams,
        request_id=request_id,
        models_responded=models_responded if models_responded is not None else len(outputs),
        models_total=models_total if models_total is not None else len(outputs),
    )


def merge_family(outputs, family_id: str, top_n: int = 5) -> ModelOutput:
    """Collapse one family's bucket outputs into a single family emission.

    Same max-per-team rule; the emission keeps only the family's top five
    teams, mirroring how each underlying model reports a top-five list.
    """
    outputs = list(outputs)
    if not outputs:
        return ModelOutput.empty(family_id)
    merged = merge_scores(outputs)
    ranked = sorted(merged.items(), key=lambda kv: (-kv[1][0], kv[0]))[:top_n]
    return ModelOutput(
        model_id=family_id,
        scores={team: conf for team, (conf, _) in ranked},
        top=[(team, conf) for team, (conf, _) in ranked],
    )


# --------------------------------------------------------------------------
# rules + ML workflow

_OPERATORS = ("equals", "contains", "regex")

#: Incident fields a rule predicate may reference.
RULE_FIELDS = (
    "id", "severity", "incident_type", "title", "summary", "source_name",
    "originating_service_id", "occurring_device_name", "raising_dc",
    "keywords", "owning_team", "status",
)


@dataclass
class RoutingRule:
    rule_id: str
    priority: int
    target_team: str
    predicate: list = field(default_factory=list)  # [(field, op, value)]

    def matches(self, incident) -> bool:
        for fname, op, value in self.predicate:
            actual = getattr(incident, fname, None)
            if isinstance(actual, list):
                actual = " ".join(str(v) for v in actual)
            elif actual is None:
                actual = ""
            else:
                actual = str(actual)
            if op == "equals":
                if actual != str(value):
                    return False
            elif op == "contains":
                if str(value).lower() not in actual.lower():
                    return False
            elif op == "regex":
                if not re.search(str(value), actual):
                    return False
            else:
                raise ValueError(f"unknown operator {op!r}")
        return True


def load_rules(path) -> list:
    """Load and validate a rules file; invalid entries are skipped, not fatal.

    Schema: a JSON array of objects {rule_id, priority, target_team,
    predicate: [{field, op, value}, ...]} with op in equals/contains/regex and
    unique priorities. Rules come back sorted by priority ascending (highest
    priority first).
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("rules file must contain a JSON array")
    rules = []
    seen_priorities = set()
    for i, entry in enumerate(raw):
        problem = None
        if not isinstance(entry, dict):
            problem = "not an object"
        else:
            missing = [k for k in ("rule_id", "priority", "target_team", "predicate") if k not in entry]
            if missing:
                problem = f"missing keys {missing}"
            elif not isinstance(entry["priority"], int):
                problem = "priority must be an integer"
            elif entry["priority"] in seen_priorities:
                problem = f"duplicate priority {entry['priority']}"
        predicate = []
        if problem is None:
            for clause in entry["predicate"]:
                fname, op, value = clause.get("field"), clause.get("op"), clause.get("value")
                if fname not in RULE_FIELDS:
                    problem = f"unknown field {fname!r}"
                    break
                if op not in _OPERATORS:
                    problem = f"unknown op {op!r}"
                    break
                if op == "regex":
                    try:
                        re.compile(value)
                    except re.error as exc:
                        problem = f"bad regex {value!r}: {exc}"
                        break
                predicate.append((fname, op, value))
        if problem is not None:
            logger.warning("skipping rule %d in %s: %s", i, path, problem)
            continue
        seen_priorities.add(entry["priority"])
        rules.append(RoutingRule(
            rule_id=str(entry["rule_id"]),
            priority=entry["priority"],
            target_team=str(entry["target_team"]),
            predicate=predicate,
        ))
    rules.sort(key=lambda r: r.priority)
    return rules


def apply_rules(rules, incident, rec: Recommendation):
    """First matching rule wins; the ML top-1 is the fallback.

    Returns (team id or None, provenance in {"rule", "ml", "none"}). A rule
    that blows up while matching is skipped with a warning; routing never
    blocks on a bad rule.
    """
    for rule in sorted(rules, key=lambda r: r.priority):
        try:
            if rule.matches(incident):
                return rule.target_team, "rule"
        except Exception as exc:  # malformed predicate must never block routing
            logger.warning("rule %s failed to evaluate: %s", rule.rule_id, exc)
    if rec is not None and not rec.is_empty():
        return rec.teams[0][0], "ml"
    return None, "none"
