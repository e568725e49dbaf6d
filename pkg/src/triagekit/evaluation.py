"""Precision/Recall/F1@N, scenario slices, and the model-ablation harness.

Metric definitions (the estimators are ours, stated once and used everywhere):
with hits(n) = number of incidents whose true team appears in the first
min(n, list length) predicted entries,

    recall@n    = hits(n) / #incidents
    precision@n = hits(n) / sum_i min(n, len_i)   (emitted slots, so models
                  that abstain emit fewer slots and are not charged for them)
    f1@n        = harmonic mean, 0 when both are 0.

A prediction of the Other class counts as a hit only in the separate
``other_credit`` view, and only when the true team was one of those merged
into Other at training time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .incident import HIGH_SEVERITY_MAX, OTHER_TEAM_ID

logger = logging.getLogger(__name__)

MAX_N = 5

ABLATION_ORDER = ("mart", "cri", "index", "si", "dnn")


@dataclass
class ScenarioSlice:
    name: str
    predicate: object  # callable Incident -> bool

    def member(self, incident) -> bool:
        return bool(self.predicate(incident))


def standard_slices(core_services=()):
    """The six evaluation scenarios; core services come from configuration."""
    core = set(core_services)

    def in_core(inc):
        return inc.originating_service_id in core

    return [
        ScenarioSlice("All", lambda inc: True),
        ScenarioSlice("Sev0-2", lambda inc: inc.severity <= HIGH_SEVERITY_MAX),
        ScenarioSlice("Min2Hop", lambda inc: inc.reroutes >= 2),
        ScenarioSlice("CRI", lambda inc: inc.is_cri),
        ScenarioSlice("Sev0-2@CoreServices",
                      lambda inc: inc.severity <= HIGH_SEVERITY_MAX and in_core(inc)),
        ScenarioSlice("CRI(Sev0-2)@CoreServices",
                      lambda inc: inc.is_cri and inc.severity <= HIGH_SEVERITY_MAX and in_core(inc)),
    ]


def cold_start_slice(train_corpus, max_train_incidents: int = 5) -> ScenarioSlice:
    """Incidents whose true team had at most ``max_train_incidents`` in training."""
    counts = train_corpus.team_counts()
    small = {t for t, c in counts.items() if c <= max_train_incidents}

    def predicate(inc, small=small, counts=counts):
        return inc.owning_team in small or inc.owning_team not in counts

    return ScenarioSlice("ColdStart", predicate)


def metrics_at_n(predictions: dict, truth: dict, n: int, merged_teams=frozenset(),
                 credit_other: bool = False):
    """(precision, recall, f1) at n over aligned prediction/truth maps."""
    if set(predictions) != set(truth):
        raise ValueError("predictions and truth must cover the same incidents")
    if not truth:
        raise ValueError("cannot evaluate an empty test set")
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = 0
    slots = 0
    for incident_id, team in truth.items():
        listed = predictions[incident_id][:n]
        slots += len(listed)
        if team in listed:
            hits += 1
        elif credit_other and team in merged_teams and OTHER_TEAM_ID in listed:
            hits += 1
    recall = hits / len(truth)
    precision = hits / slots if slots else 0.0
    # harmonic mean 2pr/(p+r) simplifies to one exact integer division
    f1 = 2 * hits / (slots + len(truth)) if hits else 0.0
    return precision, recall, f1


def _reroute_distribution(incidents) -> dict:
    dist = {"0": 0, "1": 0, "2": 0, "3+": 0}
    for inc in incidents:
        r = inc.reroutes
        dist["3+" if r >= 3 else str(r)] += 1
    return dist


@dataclass
class EvalReport:
    slices: dict = field(default_factory=dict)        # name -> {n: (p, r, f1)} or None
    counts: dict = field(default_factory=dict)        # name -> incident count
    reroutes: dict = field(default_factory=dict)      # name -> reroute distribution
    other_credit: dict = field(default_factory=dict)  # same shape as slices
    ablation: list = field(default_factory=list)      # [(subset name, {slice: {n: ...}})]

    def recall_at(self, n: int, slice_name: str = "All") -> float:
        metrics = self.slices.get(slice_name)
        if not metrics:
            raise KeyError(f"slice {slice_name!r} absent from report")
        return metrics[n][1]

    def to_json_dict(self) -> dict:
        def pack(table):
            return {
                name: (None if metrics is None else
                       {str(n): list(metrics[n]) for n in sorted(metrics)})
                for name, metrics in table.items()
            }

        return {
            "format": "eval-report/1",
            "slices": pack(self.slices),
            "counts": self.counts,
            "reroutes": self.reroutes,
            "other_credit": pack(self.other_credit),
            "ablation": [
                {"subset": name, "slices": pack(table)} for name, table in self.ablation
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "EvalReport":
        def unpack(table):
            return {
                name: (None if metrics is None else
                       {int(n): tuple(v) for n, v in metrics.items()})
                for name, metrics in table.items()
            }

        return cls(
            slices=unpack(data["slices"]),
            counts=dict(data["counts"]),
            reroutes={k: dict(v) for k, v in data["reroutes"].items()},
            other_credit=unpack(data["other_credit"]),
            ablation=[(row["subset"], unpack(row["slices"])) for row in data["ablation"]],
        )

    def to_table(self) -> str:
        """Aligned plain-text table, stable for diffing in CI."""
        lines = [f"{'slice':28s} {'n':>2s} {'precision':>9s} {'recall':>9s} {'f1':>9s} {'count':>6s}"]

        def emit(table, counts, prefix=""):
            for name in sorted(table):
                metrics = table[name]
                if metrics is None:
                    lines.append(f"{prefix + name:28s}  - {'absent':>9s} {'':>9s} {'':>9s} {counts.get(name, 0):6d}")
                    continue
                for n in sorted(metrics):
                    p, r, f1 = metrics[n]
                    lines.append(
                        f"{prefix + name:28s} {n:2d} {p:9.4f} {r:9.4f} {f1:9.4f} {counts.get(name, 0):6d}"
                    )

        emit(self.slices, self.counts)
        for subset_name, table in self.ablation:
            lines.append(f"-- ablation: {subset_name}")
            emit(table, self.counts, prefix="  ")
        return "\n".join(lines) + "\n"

    def save(self, json_path, table_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if table_path is not None:
            with open(table_path, "w", encoding="utf-8") as fh:
                fh.write(self.to_table())


def _slice_tables(predictions, test_corpus, slices, merged_teams):
    by_slice = {}
    counts = {}
    reroutes = {}
    credit = {}
    for sl in slices:
        members = [inc for inc in test_corpus if sl.member(inc)]
        counts[sl.name] = len(members)
        reroutes[sl.name] = _reroute_distribution(members)
        if not members:
            by_slice[sl.name] = None
            credit[sl.name] = None
            continue
        truth = {inc.id: inc.owning_team for inc in members}
        preds = {inc.id: predictions[inc.id] for inc in members}
        by_slice[sl.name] = {
            n: metrics_at_n(preds, truth, n) for n in range(1, MAX_N + 1)
        }
        credit[sl.name] = {
            n: metrics_at_n(preds, truth, n, merged_teams, credit_other=True)
            for n in range(1, MAX_N + 1)
        }
    return by_slice, counts, reroutes, credit


def evaluate_scenarios(predict_teams, test_corpus, slices=None,
                       merged_teams=frozenset()) -> EvalReport:
    """Run one prediction pass over the test corpus and slice the metrics.

    ``predict_teams`` maps an Incident to its ordered recommended team list;
    it is called exactly once per incident, so every slice sees identical
    per-incident predictions. Slices with no incidents report absent metrics.
    """
    slices = slices if slices is not None else standard_slices()
    if not any(sl.name == "All" for sl in slices):
        raise ValueError("slices must include All")
    if not len(test_corpus):
        raise ValueError("cannot evaluate an empty test corpus")
    predictions = {inc.id: list(predict_teams(inc)) for inc in test_corpus}
    by_slice, counts, reroutes, credit = _slice_tables(
        predictions, test_corpus, slices, merged_teams
    )
    return EvalReport(slices=by_slice, counts=counts, reroutes=reroutes,
                      other_credit=credit)


def ablation(family_outputs, test_corpus, subsets, slices=None,
             merged_teams=frozenset(), n: int = MAX_N) -> list:
    """Ensemble each family subset from one shared prediction pass.

    ``family_outputs`` maps incident id -> {family id: ModelOutput}; subsets
    is an ordered list of (subset name, family id tuple). Returns
    [(subset name, {slice: {n: metrics}})] rows in the given order.
    """
    from .ensemble import merge_outputs

    slices = slices if slices is not None else standard_slices()
    rows = []
    for subset_name, families in subsets:
        predictions = {}
        for inc in test_corpus:
            outputs = [
                family_outputs[inc.id][f]
                for f in families
                if f in family_outputs[inc.id] and not family_outputs[inc.id][f].is_empty()
            ]
            if outputs:
                rec = merge_outputs(outputs, n=n)
                predictions[inc.id] = rec.team_ids()
            else:
                predictions[inc.id] = []
        by_slice, _, _, _ = _slice_tables(predictions, test_corpus, slices, merged_teams)
        rows.append((subset_name, by_slice))
    return rows


def standard_ablation_subsets():
    """Cumulative subsets in the order the families were added to the system."""
    return [
        ("mart", ("mart",)),
        ("mart+cri", ("mart", "cri")),
        ("mart+cri+index", ("mart", "cri", "index")),
        ("mart+cri+index+si", ("mart", "cri", "index", "si")),
        ("all", ABLATION_ORDER),
    ]
