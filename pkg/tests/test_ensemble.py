import json
import random

import pytest

from triagekit.base import ModelOutput
from triagekit.ensemble import (
    EnsembleUnavailableError,
    Recommendation,
    RoutingRule,
    apply_rules,
    load_rules,
    merge_family,
    merge_outputs,
    merge_scores,
)
from triagekit.incident import Incident


def output(model_id, **scores):
    return ModelOutput.from_scores(model_id, scores)


def random_outputs(rng, n_outputs=None, teams=None):
    teams = teams or [f"team-{i}" for i in range(8)]
    n_outputs = n_outputs or rng.randrange(1, 6)
    outs = []
    for m in range(n_outputs):
        chosen = rng.sample(teams, rng.randrange(1, 6))
        outs.append(output(f"model-{m}", **{t: round(rng.random(), 6) for t in chosen}))
    return outs


class TestMergeOutputs:
    def test_worked_example_max_rule(self):
        a = output("A", t1=0.9, t2=0.5)
        b = output("B", t2=0.7, t3=0.6)
        rec = merge_outputs([a, b])
        assert rec.teams == [("t1", 0.9, ["A"]), ("t2", 0.7, ["B"]), ("t3", 0.6, ["B"])]

    def test_single_output_identity(self):
        a = output("A", t1=0.9, t2=0.5, t3=0.4)
        rec = merge_outputs([a], n=5)
        assert [(t, c) for t, c, _ in rec.teams] == a.top

    def test_sixteen_disjoint_equal_outputs_tie_break(self):
        outs = [output(f"m{i:02d}", **{f"team-{i:02d}": 0.5}) for i in range(16)]
        rec = merge_outputs(outs, n=5)
        assert rec.team_ids() == [f"team-{i:02d}" for i in range(5)]

    def test_empty_outputs_is_ensemble_unavailable(self):
        with pytest.raises(EnsembleUnavailableError):
            merge_outputs([])

    def test_commutative_under_shuffle(self):
        rng = random.Random(11)
        for _ in range(200):
            outs = random_outputs(rng)
            rec = merge_outputs(outs)
            shuffled = list(outs)
            rng.shuffle(shuffled)
            assert merge_outputs(shuffled).teams == rec.teams

    def test_associative_over_groupings(self):
        rng = random.Random(13)
        for _ in range(200):
            outs = random_outputs(rng, n_outputs=rng.randrange(2, 7))
            flat = merge_scores(outs)
            cut = rng.randrange(1, len(outs))
            left, right = outs[:cut], outs[cut:]
            regrouped = {}
            for team, (conf, models) in merge_scores(left).items():
                regrouped[team] = (conf, models)
            for team, (conf, models) in merge_scores(right).items():
                if team not in regrouped or conf > regrouped[team][0]:
                    regrouped[team] = (conf, models)
                elif conf == regrouped[team][0]:
                    regrouped[team] = (conf, sorted(set(regrouped[team][1]) | set(models)))
            assert regrouped == flat

    def test_never_invents_teams_or_exceeds_max(self):
        rng = random.Random(17)
        for _ in range(200):
            outs = random_outputs(rng)
            rec = merge_outputs(outs)
            for team, conf, models in rec.teams:
                inputs = [o.scores[team] for o in outs if team in o.scores]
                assert inputs, "merged team absent from every input"
                assert conf == max(inputs)
                assert models == sorted(
                    o.model_id for o in outs if o.scores.get(team) == conf
                )

    def test_monotone_under_input_removal(self):
        rng = random.Random(19)
        for _ in range(100):
            outs = random_outputs(rng, n_outputs=rng.randrange(2, 6))
            full = merge_scores(outs)
            dropped = outs[: len(outs) - 1]
            partial = merge_scores(dropped)
            for team, (conf, _) in partial.items():
                assert conf <= full[team][0]

    def test_recall_preservation_at_equal_n(self):
        # If the true team's merged confidence ranks in the top n, it stays in
        # the merged list; enumerated over small cases.
        rng = random.Random(23)
        for _ in range(200):
            outs = random_outputs(rng, n_outputs=3, teams=[f"t{i}" for i in range(6)])
            true_team = "t0"
            rec = merge_outputs(outs, n=3)
            merged = merge_scores(outs)
            if true_team in merged:
                rank = sorted(merged.items(), key=lambda kv: (-kv[1][0], kv[0]))
                position = [t for t, _ in rank].index(true_team)
                if position < 3:
                    assert true_team in rec.team_ids()

    def test_per_model_weight_hook(self):
        a = output("A", t1=0.9)
        b = output("B", t1=0.8, t2=0.8)
        rec = merge_outputs([a, b], weights={"A": 0.5})
        assert dict((t, c) for t, c, _ in rec.teams)["t1"] == 0.8  # A down-weighted


class TestMergeFamily:
    def test_identity_on_single_output(self):
        a = output("mart-0", t1=0.9, t2=0.2)
        fam = merge_family([a], "mart")
        assert fam.top == a.top
        assert fam.model_id == "mart"

    def test_max_rule_on_two(self):
        fam = merge_family([output("m0", t1=0.4, t2=0.9),
                            output("m1", t1=0.6)], "mart")
        assert dict(fam.top) == {"t1": 0.6, "t2": 0.9}

    def test_truncates_to_top_five(self):
        outs = [output(f"m{i}", **{f"team-{j:02d}": 0.1 * (j + 1) for j in range(8)})
                for i in range(2)]
        fam = merge_family(outs, "mart")
        assert len(fam.top) == 5
        assert len(fam.scores) == 5

    def test_empty_family_abstains(self):
        assert merge_family([], "mart").is_empty()

    def test_deterministic_tie_break(self):
        fam = merge_family([output("m0", b=0.5), output("m1", a=0.5)], "fam")
        assert [t for t, _ in fam.top] == ["a", "b"]


def incident_for_rules(**overrides):
    fields = dict(
        id="INC-1", created_at=0.0, severity=1, incident_type="CRI",
        title="database failure in west dc", summary="customers impacted",
        source_name="customer-portal", owning_team="team-db",
        routing_path=["team-db"], keywords=["database", "outage"],
    )
    fields.update(overrides)
    return Incident(**fields)


class TestRules:
    def rec(self):
        return Recommendation(teams=[("team-ml", 0.9, ["cnn"])], models_responded=1,
                              models_total=16)

    def test_matching_rule_wins_over_ml(self):
        rule = RoutingRule("r1", 1, "team-rules",
                           predicate=[("incident_type", "equals", "CRI")])
        team, provenance = apply_rules([rule], incident_for_rules(), self.rec())
        assert (team, provenance) == ("team-rules", "rule")

    def test_no_rules_falls_back_to_ml(self):
        team, provenance = apply_rules([], incident_for_rules(), self.rec())
        assert (team, provenance) == ("team-ml", "ml")

    def test_priority_order(self):
        rules = [
            RoutingRule("low", 2, "team-low", predicate=[("severity", "equals", "1")]),
            RoutingRule("high", 1, "team-high", predicate=[("severity", "equals", "1")]),
        ]
        team, _ = apply_rules(rules, incident_for_rules(), self.rec())
        assert team == "team-high"

    def test_broken_rule_skipped_never_blocks(self, caplog):
        class ExplodingRule(RoutingRule):
            def matches(self, incident):
                raise RuntimeError("boom")

        rules = [ExplodingRule("bad", 1, "team-bad", predicate=[])]
        with caplog.at_level("WARNING"):
            team, provenance = apply_rules(rules, incident_for_rules(), self.rec())
        assert (team, provenance) == ("team-ml", "ml")

    def test_empty_recommendation_and_no_rule_is_no_route(self):
        team, provenance = apply_rules([], incident_for_rules(),
                                       Recommendation(teams=[]))
        assert (team, provenance) == (None, "none")

    def test_contains_and_regex_operators(self):
        rules = [
            RoutingRule("kw", 1, "team-kw", predicate=[("keywords", "contains", "outage")]),
            RoutingRule("rx", 2, "team-rx", predicate=[("title", "regex", r"west\s+dc")]),
        ]
        assert apply_rules(rules, incident_for_rules(), self.rec())[0] == "team-kw"
        assert apply_rules(rules[1:], incident_for_rules(), self.rec())[0] == "team-rx"


class TestRulesLoader:
    def write(self, tmp_path, payload):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps(payload))
        return path

    def test_valid_file_round_trip(self, tmp_path):
        path = self.write(tmp_path, [{
            "rule_id": "cri-to-support",
            "priority": 1,
            "target_team": "team-support",
            "predicate": [{"field": "incident_type", "op": "equals", "value": "CRI"}],
        }])
        rules = load_rules(path)
        assert len(rules) == 1
        assert rules[0].matches(incident_for_rules())

    def test_invalid_entries_skipped_with_warning(self, tmp_path, caplog):
        path = self.write(tmp_path, [
            {"rule_id": "ok", "priority": 1, "target_team": "t",
             "predicate": [{"field": "title", "op": "contains", "value": "x"}]},
            {"rule_id": "bad-op", "priority": 2, "target_team": "t",
             "predicate": [{"field": "title", "op": "fuzzes", "value": "x"}]},
            {"rule_id": "bad-field", "priority": 3, "target_team": "t",
             "predicate": [{"field": "nope", "op": "equals", "value": "x"}]},
            {"rule_id": "dup-priority", "priority": 1, "target_team": "t",
             "predicate": []},
            {"rule_id": "bad-regex", "priority": 4, "target_team": "t",
             "predicate": [{"field": "title", "op": "regex", "value": "("}]},
        ])
        with caplog.at_level("WARNING"):
            rules = load_rules(path)
        assert [r.rule_id for r in rules] == ["ok"]
        assert len(caplog.records) == 4

    def test_rules_sorted_by_priority(self, tmp_path):
        path = self.write(tmp_path, [
            {"rule_id": "b", "priority": 5, "target_team": "t", "predicate": []},
            {"rule_id": "a", "priority": 1, "target_team": "t", "predicate": []},
        ])
        assert [r.rule_id for r in load_rules(path)] == ["a", "b"]
