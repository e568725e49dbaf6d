"""Synthetic incident corpus generator for desk-scale verification.

Each team gets its own topical vocabulary of pseudo-words plus a shared
background vocabulary, so team identity is recoverable from text. A
configurable fraction of LSIs is stamped from per-team templates (shared
title, near-duplicate summary), which is what makes nearest-neighbour models
effective on this data. Cold-start teams are generated on top of the regular
ones with only a handful of incidents, half of them placed inside the final
three days of the window so a trailing temporal split always sees them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .incident import Incident

#: Fixed corpus end time (UTC seconds) so generated files are reproducible.
DEFAULT_END_TIME = 1_700_000_000.0

_SYLLABLES = [
    c + v for c in "bdfgklmnprstvz" for v in ("a", "e", "i", "o", "u", "ar", "en", "or")
]

TEST_WINDOW_DAYS = 3.0
SECONDS_PER_DAY = 86400.0


@dataclass
class GeneratorSpec:
    teams: int = 20
    per_team: int = 200
    topical_vocab: int = 40
    background_vocab: int = 150
    template_fraction: float = 0.3
    templates_per_team: int = 3
    cri_fraction: float = 0.15
    high_severity_fraction: float = 0.35
    multi_hop_fraction: float = 0.2
    cold_start_fraction: float = 0.0
    cold_start_per_team: int = 4
    discussion_max: int = 3
    window_days: float = 180.0
    end_time: float = DEFAULT_END_TIME

    def __post_init__(self):
        if self.teams < 2:
            raise ValueError("need at least 2 teams")
        if self.per_team < 1:
            raise ValueError("per_team must be >= 1")
        if not 0.0 <= self.template_fraction <= 1.0:
            raise ValueError("template_fraction must be in [0,1]")
        if not 0.0 <= self.cold_start_fraction <= 1.0:
            raise ValueError("cold_start_fraction must be in [0,1]")


def _make_words(rng: np.random.Generator, count: int) -> list:
    words = []
    seen = set()
    while len(words) < count:
        n = rng.integers(2, 5)
        word = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=n))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


class _TeamProfile:
    def __init__(self, rng, name, team_number, topical, background, spec):
        self.name = name
        self.number = team_number
        self.topical = topical
        self.background = background
        self.home_service = f"svc-{team_number:03d}"
        self.oces = [f"oce-{team_number:03d}-{k}" for k in range(3)]
        self.templates = []
        for _ in range(max(spec.templates_per_team, 1)):
            title = self._pick(rng, 4 + int(rng.integers(0, 3)), topical_ratio=0.9)
            summary = self._pick(rng, 14 + int(rng.integers(0, 7)), topical_ratio=0.7)
            self.templates.append((title, summary))

    def _pick(self, rng, n, topical_ratio):
        words = []
        for _ in range(n):
            source = self.topical if rng.random() < topical_ratio else self.background
            words.append(source[rng.integers(0, len(source))])
        return words


def generate_synthetic(spec: GeneratorSpec, seed: int) -> Corpus:
    """Generate a deterministic synthetic corpus for the given spec and seed."""
    rng = np.random.default_rng(seed)

    num_cold = int(round(spec.teams * spec.cold_start_fraction))
    total_teams = spec.teams + num_cold
    words = _make_words(rng, total_teams * spec.topical_vocab + spec.background_vocab)
    background = words[: spec.background_vocab]

    profiles = []
    for t in range(total_teams):
        topical = words[
            spec.background_vocab + t * spec.topical_vocab :
            spec.background_vocab + (t + 1) * spec.topical_vocab
        ]
        name = f"team-{t:02d}" if t < spec.teams else f"team-cold-{t - spec.teams:02d}"
        profiles.append(_TeamProfile(rng, name, t, topical, background, spec))

    incidents = []
    seq = 0
    window = spec.window_days * SECONDS_PER_DAY
    tail = min(TEST_WINDOW_DAYS * SECONDS_PER_DAY, window)
    all_team_names = [p.name for p in profiles]

    for profile in profiles:
        is_cold = profile.number >= spec.teams
        count = spec.cold_start_per_team if is_cold else spec.per_team
        lsi_seen = 0
        templated_done = 0
        template_cursor = 0
        for j in range(count):
            seq += 1
            if is_cold:
                # Alternate between the body of the window and the final test
                # days so a trailing split always has train and test examples.
                if j % 2 == 0:
                    created = spec.end_time - tail - rng.uniform(0.0, window - tail)
                else:
                    created = spec.end_time - rng.uniform(0.0, tail)
            else:
                created = spec.end_time - rng.uniform(0.0, window)

            is_cri = bool(rng.random() < spec.cri_fraction)
            if rng.random() < spec.high_severity_fraction:
                severity = int(rng.integers(0, 3))
            else:
                severity = int(rng.integers(3, 5))

            # Template share is met by quota, not coin flips, so a requested
            # fraction is a floor on the generated duplicate rate.
            if is_cold:
                templated = True
            elif is_cri:
                templated = False
            else:
                lsi_seen += 1
                templated = templated_done < spec.template_fraction * lsi_seen
                templated_done += templated
            if templated:
                title_words, summary_words = profile.templates[
                    template_cursor % len(profile.templates)
                ]
                template_cursor += 1
                summary_words = list(summary_words)
                # Perturb ~15% of the template summary so duplicates are near, not exact.
                for k in range(len(summary_words)):
                    if rng.random() < 0.15:
                        summary_words[k] = profile._pick(rng, 1, 0.5)[0]
            else:
                title_words = profile._pick(rng, 3 + int(rng.integers(0, 4)), 0.7)
                summary_words = profile._pick(rng, 12 + int(rng.integers(0, 14)), 0.65)

            discussion = []
            for _ in range(int(rng.integers(0, spec.discussion_max + 1))):
                discussion.append(" ".join(profile._pick(rng, 6 + int(rng.integers(0, 7)), 0.6)))

            r = rng.random()
            if r < spec.multi_hop_fraction:
                hops = 2 + int(rng.integers(0, 2))
            elif r < spec.multi_hop_fraction + 0.3:
                hops = 1
            else:
                hops = 0
            path = []
            for _ in range(hops):
                path.append(all_team_names[int(rng.integers(0, len(all_team_names)))])
            path.append(profile.name)

            keywords = sorted(
                {profile.topical[int(rng.integers(0, len(profile.topical)))]
                 for _ in range(int(rng.integers(1, 4)))}
            )

            incidents.append(Incident(
                id=f"INC-{seq:06d}",
                created_at=round(created, 3),
                severity=severity,
                incident_type="CRI" if is_cri else "LSI",
                title=" ".join(title_words),
                summary=" ".join(summary_words),
                discussion=discussion,
                source_name="customer-portal" if is_cri else f"monitor-{int(rng.integers(0, 5))}",
                originating_service_id=(
                    profile.home_service
                    if rng.random() < 0.8
                    else f"svc-{int(rng.integers(0, total_teams)):03d}"
                ),
                occurring_device_name=f"dev-{int(rng.integers(0, 400)):04d}",
                raising_dc=f"dc-{int(rng.integers(0, 8))}",
                keywords=keywords,
                routing_path=path,
                owning_team=profile.name,
                mitigating_oce=profile.oces[int(rng.integers(0, len(profile.oces)))],
                status="resolved",
            ))

    incidents.sort(key=lambda inc: (inc.created_at, inc.id))
    return Corpus(incidents=incidents)
