"""Model artifact directory: versioned files, manifest, atomic promotion.

An artifact directory is immutable once written. The serving root holds one
``current`` pointer file naming the live artifact; promotion rewrites the
pointer with os.replace so a reader never observes a half-written state. All
files are byte-deterministic for a fixed corpus, config and seed (JSON with
sorted keys; tensors in a little-endian shape-tagged container).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .cnn import IncidentCnn
from .gbdt import GbdtClassifier
from .inverted_index import InvertedIndexModel
from .lsh import SimilarIncidentModel

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CURRENT_POINTER = "current"
TENSOR_MAGIC = b"TKTN1\n"

FAMILY_MART = "mart"
FAMILY_CRI = "cri"
FAMILY_INDEX = "index"
FAMILY_SI = "si"
FAMILY_DNN = "dnn"

ALL_FAMILIES = (FAMILY_MART, FAMILY_CRI, FAMILY_INDEX, FAMILY_SI, FAMILY_DNN)


def _dump_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _load_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_tensors(path: Path, tensors: dict) -> None:
    """Shape-tagged binary container; names sorted for byte determinism."""
    header = {}
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        header[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
        }
        offset += arr.nbytes
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name]).tobytes())


def load_tensors(path: Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(TENSOR_MAGIC))
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path} is not a tensor container (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    out = {}
    for name, info in header.items():
        dtype = np.dtype(info["dtype"])
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(shape)
        out[name] = arr.copy()
    return out


def corpus_fingerprint(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactBundle:
    """In-memory trained system: every model keyed by model id."""

    def __init__(self, models: dict, family_of: dict, stoplist=(), manifest=None):
        self.models = models
        self.family_of = family_of
        self.stoplist = {tuple(p.split()) if isinstance(p, str) else tuple(p) for p in stoplist}
        self.manifest = manifest or {}

    def model_ids(self):
        return sorted(self.models)

    def families(self) -> dict:
        grouped = {}
        for model_id, family in self.family_of.items():
            grouped.setdefault(family, []).append(model_id)
        return {f: sorted(ids) for f, ids in grouped.items()}

    @property
    def gate_metrics(self) -> dict:
        return self.manifest.get("eval", {})


def save_artifact(bundle: ArtifactBundle, directory, corpus_fp: str = "",
                  seed: int = 0, config_snapshot: dict = None,
                  eval_summary: dict = None, merged_teams=()) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model_entries = {}
    for model_id in sorted(bundle.models):
        model = bundle.models[model_id]
        family = bundle.family_of[model_id]
        if isinstance(model, GbdtClassifier):
            fname = f"gbdt-{model_id}.json"
            _dump_json(directory / fname, model.to_dict())
            files = [fname]
        elif isinstance(model, InvertedIndexModel):
            fname = "inverted_index.json"
            _dump_json(directory / fname, model.to_dict())
            files = [fname]
        elif isinstance(model, SimilarIncidentModel):
            fname = "lsh.json"
            _dump_json(directory / fname, model.to_dict())
            files = [fname]
        elif isinstance(model, IncidentCnn):
            _dump_json(directory / "cnn.meta.json", model.metadata())
            save_tensors(directory / "cnn.tensors.bin", model.tensors())
            files = ["cnn.meta.json", "cnn.tensors.bin"]
        else:
            raise TypeError(f"unknown model type {type(model).__name__}")
        model_entries[model_id] = {"family": family, "files": files}

    _dump_json(directory / "stoplist.json", sorted(" ".join(p) for p in bundle.stoplist))
    manifest = {
        "format": "artifact/1",
        "seed": seed,
        "corpus_fingerprint": corpus_fp,
        "models": model_entries,
        "stoplist_file": "stoplist.json",
        "config": config_snapshot or {},
        "eval": eval_summary or {},
        "merged_teams": sorted(merged_teams) or bundle.manifest.get("merged_teams", []),
    }
    _dump_json(directory / MANIFEST_NAME, manifest)
    bundle.manifest = manifest
    logger.info("saved artifact with %d models to %s", len(model_entries), directory)
    return directory


def load_artifact(directory) -> ArtifactBundle:
    directory = Path(directory)
    manifest = _load_json(directory / MANIFEST_NAME)
    if manifest.get("format") != "artifact/1":
        raise ValueError(f"unsupported artifact format {manifest.get('format')!r}")
    models = {}
    family_of = {}
    for model_id, entry in manifest["models"].items():
        family = entry["family"]
        family_of[model_id] = family
        if family in (FAMILY_MART, FAMILY_CRI):
            models[model_id] = GbdtClassifier.from_dict(_load_json(directory / entry["files"][0]))
        elif family == FAMILY_INDEX:
            models[model_id] = InvertedIndexModel.from_dict(_load_json(directory / entry["files"][0]))
        elif family == FAMILY_SI:
            models[model_id] = SimilarIncidentModel.from_dict(_load_json(directory / entry["files"][0]))
        elif family == FAMILY_DNN:
            meta = _load_json(directory / "cnn.meta.json")
            tensors = load_tensors(directory / "cnn.tensors.bin")
            models[model_id] = IncidentCnn.from_saved(meta, tensors)
        else:
            raise ValueError(f"unknown family {family!r} for model {model_id!r}")
    stoplist = _load_json(directory / manifest["stoplist_file"])
    return ArtifactBundle(models, family_of, stoplist=stoplist, manifest=manifest)


# --------------------------------------------------------------------------
# promotion


def current_artifact_path(serving_root) -> Path | None:
    pointer = Path(serving_root) / CURRENT_POINTER
    if not pointer.exists():
        return None
    name = pointer.read_text(encoding="utf-8").strip()
    if not name:
        return None
    return Path(serving_root) / name


def promote_artifact(serving_root, artifact_dir) -> None:
    """Atomically repoint ``current`` at the artifact directory."""
    serving_root = Path(serving_root)
    serving_root.mkdir(parents=True, exist_ok=True)
    artifact_dir = Path(artifact_dir)
    if not (artifact_dir / MANIFEST_NAME).exists():
        raise ValueError(f"refusing to promote {artifact_dir}: no manifest")
    tmp = serving_root / (CURRENT_POINTER + ".tmp")
    tmp.write_text(artifact_dir.name + "\n", encoding="utf-8")
    os.replace(tmp, serving_root / CURRENT_POINTER)
    logger.info("promoted artifact %s", artifact_dir.name)
