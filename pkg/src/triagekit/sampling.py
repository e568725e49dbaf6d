"""Imbalance-aware sampling of a training corpus into bagged buckets.

The pool is shaped once (same-title cap, then high-severity quota), after
which each bucket draws per class without replacement under recency weights,
using an independent rng stream per bucket so buckets can be produced in
parallel and still be deterministic for a fixed seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0

#: Upper bound on per_class_cap * num_classes before we refuse the config.
MAX_BUCKET_ROWS = 2_000_000


class ConfigurationError(ValueError):
    pass


@dataclass
class SamplingConfig:
    per_class_cap: int = 500
    num_buckets: int = 10
    recency_halflife_days: float = 60.0
    same_title_cap: int = 50
    high_severity_quota: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if self.per_class_cap < 1:
            raise ConfigurationError("per_class_cap must be >= 1")
        if self.num_buckets < 1:
            raise ConfigurationError("num_buckets must be >= 1")
        if self.recency_halflife_days <= 0:
            raise ConfigurationError("recency_halflife_days must be positive")
        if self.same_title_cap < 1:
            raise ConfigurationError("same_title_cap must be >= 1")
        if not 0.0 <= self.high_severity_quota <= 1.0:
            raise ConfigurationError("high_severity_quota must be in [0,1]")


@dataclass
class Bucket:
    bucket_id: int
    incidents: list = field(default_factory=list)
    class_counts: dict = field(default_factory=dict)


def _normalized_title(title: str) -> str:
    return " ".join(title.lower().split())


def _is_highly_impacted(inc) -> bool:
    return inc.is_high_severity or inc.is_cri


def _recency_weights(incidents, halflife_days: float, now: float) -> np.ndarray:
    ages = np.array([(now - inc.created_at) / SECONDS_PER_DAY for inc in incidents])
    return np.exp2(-ages / halflife_days)


def build_sampling_pool(train: Corpus, config: SamplingConfig):
    """Apply the same-title cap and severity quota, returning the pool list.

    Within a (normalized title, team) group the most recent incidents survive
    the cap. The quota keeps every highly impacted incident (severity 0-2 or
    CRI) and subsamples low-severity LSIs down to the remainder share; it is
    best-effort and never drops highly impacted data.
    """
    groups = {}
    for inc in train.incidents:
        groups.setdefault((_normalized_title(inc.title), inc.owning_team), []).append(inc)
    pool = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda i: (-i.created_at, i.id))
        pool.extend(members[: config.same_title_cap])

    high = [inc for inc in pool if _is_highly_impacted(inc)]
    low = [inc for inc in pool if not _is_highly_impacted(inc)]
    q = config.high_severity_quota
    if q > 0.0 and high and low:
        low_target = int(round(len(high) * (1.0 - q) / q))
        if low_target < len(low):
            rng = np.random.default_rng([config.rng_seed, 0])
            now = max(inc.created_at for inc in train.incidents)
            low_sorted = sorted(low, key=lambda i: i.id)
            weights = _recency_weights(low_sorted, config.recency_halflife_days, now)
            if low_target == 0:
                low = []
            else:
                picks = rng.choice(
                    len(low_sorted), size=low_target, replace=False, p=weights / weights.sum()
                )
                low = [low_sorted[i] for i in sorted(picks)]
            pool = high + low

    pool.sort(key=lambda i: i.id)
    return pool


def sample_and_partition(train: Corpus, config: SamplingConfig):
    """Sample the training corpus into ``num_buckets`` bagged buckets.

    Each class contributes at most ``per_class_cap`` incidents per bucket,
    drawn without replacement with weight 2^(-age_days / halflife). An
    incident never repeats within a bucket; repeats across buckets are the
    point (bagging).
    """
    if not train.incidents:
        raise ValueError("training corpus is empty")
    num_classes = len(train.team_index)
    if config.per_class_cap * num_classes > MAX_BUCKET_ROWS:
        suggested = MAX_BUCKET_ROWS // max(num_classes, 1)
        raise ConfigurationError(
            f"per_class_cap={config.per_class_cap} with {num_classes} classes exceeds "
            f"the {MAX_BUCKET_ROWS}-row bucket budget; try per_class_cap <= {suggested}"
        )

    pool = build_sampling_pool(train, config)
    by_class = {}
    for inc in pool:
        by_class.setdefault(inc.owning_team, []).append(inc)
    now = max(inc.created_at for inc in train.incidents)

    class_weights = {}
    for team, members in by_class.items():
        w = _recency_weights(members, config.recency_halflife_days, now)
        class_weights[team] = w / w.sum()

    buckets = []
    for b in range(config.num_buckets):
        rng = np.random.default_rng([config.rng_seed, 1, b])
        chosen = []
        counts = {}
        for team in sorted(by_class):
            members = by_class[team]
            k = min(config.per_class_cap, len(members))
            if k == len(members):
                picked = members
            else:
                idx = rng.choice(len(members), size=k, replace=False, p=class_weights[team])
                picked = [members[i] for i in sorted(idx)]
            chosen.extend(picked)
            counts[team] = len(picked)
        buckets.append(Bucket(bucket_id=b, incidents=chosen, class_counts=counts))
    logger.info(
        "sampled %d buckets from pool of %d (train %d): sizes %s",
        config.num_buckets, len(pool), len(train), [len(b.incidents) for b in buckets],
    )
    return buckets
