"""Versioned JSON documents for ensembles, encoder classes and fitted models.

Floats are written with Python's shortest round-trip ``repr``, so a
save/load cycle reproduces every double bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .features import EncoderClass, FeatureMap
from .mdp import EnsembleSpec, TabularMDP, TaskEnsemble

ENSEMBLE_SCHEMA_VERSION = 1
MODEL_SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def _check_version(doc: dict, kind: str, expected: int):
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise SchemaError(f"not a {kind} document")
    if doc.get("schema_version") != expected:
        raise SchemaError(
            f"{kind} schema_version {doc.get('schema_version')!r} is not supported "
            f"(this library reads version {expected})"
        )


def encoders_to_dict(encoders: EncoderClass) -> dict:
    first = encoders[0]
    return {
        "schema_version": ENSEMBLE_SCHEMA_VERSION,
        "kind": "mtfqi-encoders",
        "S": first.num_states,
        "K": first.num_actions,
        "d": first.dim,
        "contains_truth": encoders.contains_truth,
        "members": [{"label": m.label, "table": m.table.tolist()} for m in encoders],
    }


def encoders_from_dict(doc: dict) -> EncoderClass:
    _check_version(doc, "mtfqi-encoders", ENSEMBLE_SCHEMA_VERSION)
    K = int(doc["K"])
    members = tuple(FeatureMap(np.array(m["table"], dtype=float), K, m["label"]) for m in doc["members"])
    return EncoderClass(members, bool(doc.get("contains_truth", False)))


def ensemble_to_dict(ensemble: TaskEnsemble) -> dict:
    spec = ensemble.spec
    doc = {
        "schema_version": ENSEMBLE_SCHEMA_VERSION,
        "kind": "mtfqi-ensemble",
        "S": spec.num_states,
        "K": spec.num_actions,
        "H": spec.horizon,
        "T": ensemble.num_tasks,
        "d": spec.latent_dim,
        "gamma": spec.gamma,
        "w_max": spec.w_max if math.isfinite(spec.w_max) else None,
        "seed": ensemble.seed,
        "feature_scale": ensemble.feature_scale,
        "reward_scale": ensemble.reward_scale,
        "features": ensemble.features.tolist(),
        "tasks": [
            {"transitions": m.transitions.tolist(), "rewards": m.rewards.tolist()}
            for m in ensemble.tasks
        ],
        "decoders": ensemble.decoders.tolist(),
        "reward_params": ensemble.reward_params.tolist(),
        "next_state_measures": ensemble.next_state_measures.tolist(),
    }
    if ensemble.encoders is not None:
        doc["encoders"] = encoders_to_dict(ensemble.encoders)
    return doc


def ensemble_from_dict(doc: dict) -> TaskEnsemble:
    _check_version(doc, "mtfqi-ensemble", ENSEMBLE_SCHEMA_VERSION)
    spec = EnsembleSpec(
        int(doc["S"]), int(doc["K"]), int(doc["H"]), int(doc["T"]), int(doc["d"]),
        float(doc["gamma"]), math.inf if doc.get("w_max", 1.0) is None else float(doc["w_max"]),
    )
    tasks = [
        TabularMDP(np.array(t["transitions"], dtype=float), np.array(t["rewards"], dtype=float), spec.gamma)
        for t in doc["tasks"]
    ]
    d = spec.latent_dim
    return TaskEnsemble(
        spec=spec,
        seed=int(doc["seed"]),
        tasks=tasks,
        features=np.array(doc["features"], dtype=float),
        decoders=np.array(doc["decoders"], dtype=float).reshape(len(tasks), spec.horizon, d),
        reward_params=np.array(doc["reward_params"], dtype=float).reshape(len(tasks), spec.horizon, d),
        next_state_measures=np.array(doc["next_state_measures"], dtype=float).reshape(len(tasks), d, spec.num_states),
        feature_scale=float(doc["feature_scale"]),
        reward_scale=float(doc["reward_scale"]),
        encoders=encoders_from_dict(doc["encoders"]) if "encoders" in doc else None,
    )


def ensemble_hash(ensemble: TaskEnsemble) -> str:
    doc = ensemble_to_dict(ensemble)
    doc.pop("encoders", None)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from None


def save_ensemble(ensemble: TaskEnsemble, path) -> None:
    dump_json(ensemble_to_dict(ensemble), path)


def load_ensemble(path) -> TaskEnsemble:
    return ensemble_from_dict(load_json(path))


def load_encoders(path) -> EncoderClass:
    """Encoder class from an encoder document or an ensemble that embeds one."""
    doc = load_json(path)
    if isinstance(doc, dict) and doc.get("kind") == "mtfqi-ensemble":
        if "encoders" not in doc:
            raise SchemaError(f"{path}: ensemble document carries no encoder class")
        doc = doc["encoders"]
    return encoders_from_dict(doc)
