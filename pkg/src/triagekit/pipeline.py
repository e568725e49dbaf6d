"""End-to-end training pipeline, the in-memory triage system, and retraining.

Train order mirrors how the system grew: the bucketed general GBDT family,
the CRI-specialized GBDT family, the inverted index, the similar-incident
index, then the CNN. Supervised families learn on the Other-merged corpus;
the two unsupervised models index the unmerged corpus so brand-new teams
stay reachable (that is their whole point).
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .artifacts import (
    FAMILY_CRI,
    FAMILY_DNN,
    FAMILY_INDEX,
    FAMILY_MART,
    FAMILY_SI,
    ArtifactBundle,
    corpus_fingerprint,
    current_artifact_path,
    load_artifact,
    promote_artifact,
    save_artifact,
)
from .cnn import CnnConfig, IncidentCnn
from .corpus import Corpus, load_corpus, merge_infrequent_teams, split_train_test
from .ensemble import Recommendation, merge_family, merge_outputs
from .evaluation import (
    EvalReport,
    ablation,
    evaluate_scenarios,
    standard_ablation_subsets,
    standard_slices,
)
from .features import hash_ngrams
from .gbdt import GbdtClassifier, GbdtConfig, train_bucketed_family
from .inverted_index import InvertedIndexModel
from .lsh import SimilarIncidentModel
from .sampling import SamplingConfig, sample_and_partition
from .textprep import build_stoplist, incident_token_stream

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0


@dataclass
class TrainingConfig:
    seed: int = 0
    min_team_count: int = 10
    stoplist_threshold: float = 0.5
    test_days: float = 3.0
    gate_tolerance: float = 0.02
    index_alpha: float = 0.2
    core_services: list = field(default_factory=list)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    gbdt_general: GbdtConfig = field(default_factory=GbdtConfig.general)
    gbdt_cri: GbdtConfig = field(default_factory=GbdtConfig.cri_specialized)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    lsh_num_hashes: int = 128
    lsh_bands: int = 32

    def __post_init__(self):
        # One seed drives every stage unless a sub-config was given its own.
        self.sampling = replace(self.sampling, rng_seed=self.sampling.rng_seed or self.seed)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        if "sampling" in data:
            data["sampling"] = SamplingConfig(**data["sampling"])
        if "gbdt_general" in data:
            data["gbdt_general"] = GbdtConfig(**data["gbdt_general"])
        if "gbdt_cri" in data:
            data["gbdt_cri"] = GbdtConfig(**data["gbdt_cri"])
        if "cnn" in data:
            cnn = dict(data["cnn"])
            if "filter_counts" in cnn:
                cnn["filter_counts"] = tuple(cnn["filter_counts"])
            data["cnn"] = CnnConfig(**cnn)
        return cls(**data)


def desk_scale_config(seed: int = 0) -> TrainingConfig:
    """Defaults sized for the 20-team synthetic benchmark on one machine."""
    return TrainingConfig(
        seed=seed,
        sampling=SamplingConfig(rng_seed=seed),
        gbdt_general=GbdtConfig.general(num_trees=60, early_stopping_tol=1e-4, seed=seed),
        gbdt_cri=GbdtConfig.cri_specialized(num_trees=60, early_stopping_tol=1e-4,
                                            min_examples_per_leaf=5, seed=seed),
        cnn=CnnConfig(embed_dim=32, context_embed_dim=8, max_tokens=96,
                      filter_counts=(16, 24, 32), context_fc_dim=16,
                      text_hash_dim=1 << 14, epochs=8, batch_size=32,
                      learning_rate=0.08, dropout_rate=0.2, seed=seed),
        lsh_num_hashes=128,
        lsh_bands=32,
    )


def train_bundle(train: Corpus, config: TrainingConfig) -> ArtifactBundle:
    """Train all five model families on the training corpus."""
    if not len(train):
        raise ValueError("training corpus is empty")
    t0 = time.monotonic()
    merged = merge_infrequent_teams(train, config.min_team_count)
    stoplist = build_stoplist(merged, config.stoplist_threshold)

    vectors = {
        inc.id: hash_ngrams(
            incident_token_stream(inc, stoplist),
            config.gbdt_general.ngram_max,
            config.gbdt_general.hash_dim,
        )
        for inc in merged
    }

    models = {}
    family_of = {}

    buckets = sample_and_partition(merged, replace(
        config.sampling, num_buckets=config.gbdt_general.num_buckets))
    for model in train_bucketed_family(buckets, config.gbdt_general,
                                       family_id=FAMILY_MART, vectors=vectors):
        models[model.model_id] = model
        family_of[model.model_id] = FAMILY_MART
    logger.info("trained %s family in %.1fs", FAMILY_MART, time.monotonic() - t0)

    cri_incidents = [inc for inc in merged if inc.is_cri]
    cri_teams = {inc.owning_team for inc in cri_incidents}
    if len(cri_teams) >= 2:
        cri_corpus = Corpus(incidents=cri_incidents,
                            premerge_teams=dict(merged.premerge_teams))
        cri_buckets = sample_and_partition(cri_corpus, replace(
            config.sampling,
            num_buckets=config.gbdt_cri.num_buckets,
            rng_seed=config.sampling.rng_seed + 1,
        ))
        for model in train_bucketed_family(cri_buckets, config.gbdt_cri,
                                           family_id=FAMILY_CRI, vectors=vectors):
            models[model.model_id] = model
            family_of[model.model_id] = FAMILY_CRI
    else:
        logger.warning("fewer than 2 teams have CRIs; skipping the %s family", FAMILY_CRI)

    index = InvertedIndexModel(alpha=config.index_alpha).fit(train)
    models[index.model_id] = index
    family_of[index.model_id] = FAMILY_INDEX

    si = SimilarIncidentModel(num_hashes=config.lsh_num_hashes, bands=config.lsh_bands,
                              seed=config.seed).fit(train)
    models[si.model_id] = si
    family_of[si.model_id] = FAMILY_SI

    cnn_config = replace(config.cnn, seed=config.seed) if config.cnn.seed != config.seed else config.cnn
    cnn = IncidentCnn(cnn_config).fit(buckets[0].incidents)
    models[cnn.model_id] = cnn
    family_of[cnn.model_id] = FAMILY_DNN

    logger.info("trained %d models in %.1fs", len(models), time.monotonic() - t0)
    merged_team_names = sorted({merged.premerge_teams[i] for i in merged.premerge_teams})
    bundle = ArtifactBundle(models, family_of, stoplist=stoplist)
    bundle.manifest = {"merged_teams": merged_team_names}
    return bundle


class TriageSystem:
    """Direct (fault-free) prediction path over a trained bundle.

    The HTTP service wraps this with a registry for deadlines and fault
    injection; evaluation and the CLI use it directly.
    """

    def __init__(self, bundle: ArtifactBundle):
        self.bundle = bundle

    def model_outputs(self, incident, model_ids=None) -> dict:
        ids = sorted(self.bundle.models) if model_ids is None else model_ids
        out = {}
        for model_id in ids:
            model = self.bundle.models[model_id]
            if isinstance(model, GbdtClassifier):
                vec = hash_ngrams(
                    incident_token_stream(incident, self.bundle.stoplist),
                    model.ngram_max, model.hash_dim,
                )
                out[model_id] = model.predict_output(vec)
            else:
                out[model_id] = model.predict_output(incident)
        return out

    def family_outputs(self, incident, outputs=None) -> dict:
        outputs = outputs if outputs is not None else self.model_outputs(incident)
        grouped = {}
        for model_id, output in outputs.items():
            grouped.setdefault(self.bundle.family_of[model_id], []).append(output)
        return {
            family: merge_family(members, family)
            for family, members in sorted(grouped.items())
        }

    def recommend(self, incident, families=None, request_id="") -> Recommendation:
        outputs = self.model_outputs(incident)
        fams = self.family_outputs(incident, outputs)
        if families is not None:
            fams = {f: o for f, o in fams.items() if f in families}
        inputs = [o for o in fams.values() if not o.is_empty()]
        if not inputs:
            return Recommendation(
                teams=[], request_id=request_id,
                models_responded=len(outputs), models_total=len(self.bundle.models),
            )
        return merge_outputs(
            inputs, n=5, request_id=request_id,
            models_responded=len(outputs), models_total=len(self.bundle.models),
        )

    def predict_teams(self, incident) -> list:
        return self.recommend(incident).team_ids()


def evaluate_bundle(bundle: ArtifactBundle, test: Corpus, config: TrainingConfig,
                    with_ablation: bool = True, extra_slices=()) -> EvalReport:
    system = TriageSystem(bundle)
    slices = standard_slices(config.core_services) + list(extra_slices)
    merged_teams = frozenset(bundle.manifest.get("merged_teams", ()))

    family_cache = {}

    def predict(incident):
        fams = system.family_outputs(incident)
        family_cache[incident.id] = fams
        inputs = [o for o in fams.values() if not o.is_empty()]
        if not inputs:
            return []
        return merge_outputs(inputs, n=5).team_ids()

    report = evaluate_scenarios(predict, test, slices, merged_teams)
    if with_ablation:
        report.ablation = ablation(family_cache, test, standard_ablation_subsets(),
                                   slices, merged_teams)
    return report


@dataclass
class RetrainResult:
    promoted: bool
    artifact_dir: str
    report: EvalReport
    reason: str


def trailing_split(corpus: Corpus, test_days: float):
    lo, hi = corpus.time_range()
    cutoff = hi - test_days * SECONDS_PER_DAY
    return split_train_test(corpus, cutoff)


def train_artifact_from_file(corpus_path, config: TrainingConfig, out_dir,
                             with_ablation: bool = True):
    """Full pipeline: load, split on the trailing test window, train, evaluate."""
    corpus = load_corpus(corpus_path)
    if not len(corpus):
        raise ValueError(f"no valid incidents in {corpus_path}")
    train, test = trailing_split(corpus, config.test_days)
    bundle = train_bundle(train, config)
    if len(test):
        report = evaluate_bundle(bundle, test, config, with_ablation=with_ablation)
        eval_summary = {
            "all_recall_at_5": report.recall_at(5),
            "all_recall_at_1": report.recall_at(1),
            "test_incidents": len(test),
        }
    else:
        logger.warning("no test incidents in the trailing %.1f days", config.test_days)
        report = None
        eval_summary = {}
    save_artifact(
        bundle, out_dir,
        corpus_fp=corpus_fingerprint(corpus_path),
        seed=config.seed,
        config_snapshot=config.to_json_dict(),
        eval_summary=eval_summary,
    )
    if report is not None:
        report.save(Path(out_dir) / "eval_report.json", Path(out_dir) / "eval_report.txt")
    return bundle, report


def retrain(corpus_path, config: TrainingConfig, serving_root,
            artifact_name: str = None) -> RetrainResult:
    """Retrain and promote behind the recall gate.

    The fresh artifact is promoted only when its All-slice recall@5 is at
    least the current artifact's recall@5 minus the configured tolerance; a
    gated-out artifact is still written for inspection and the old one stays
    in place for rollback.
    """
    serving_root = Path(serving_root)
    artifact_name = artifact_name or f"artifact-{corpus_fingerprint(corpus_path)[:12]}-s{config.seed}"
    out_dir = serving_root / artifact_name
    bundle, report = train_artifact_from_file(corpus_path, config, out_dir,
                                              with_ablation=False)
    new_recall = bundle.manifest.get("eval", {}).get("all_recall_at_5")

    current = current_artifact_path(serving_root)
    if current is None:
        promote_artifact(serving_root, out_dir)
        return RetrainResult(True, str(out_dir), report, "no current artifact; promoted")
    baseline = load_artifact(current).gate_metrics.get("all_recall_at_5")
    if new_recall is None:
        return RetrainResult(False, str(out_dir), report,
                             "no evaluation window; not promoted")
    if baseline is None or new_recall >= baseline - config.gate_tolerance:
        promote_artifact(serving_root, out_dir)
        return RetrainResult(
            True, str(out_dir), report,
            f"recall@5 {new_recall:.4f} within tolerance of baseline "
            f"{baseline if baseline is not None else float('nan'):.4f}",
        )
    return RetrainResult(
        False, str(out_dir), report,
        f"recall@5 {new_recall:.4f} below baseline {baseline:.4f} - "
        f"tolerance {config.gate_tolerance}",
    )
