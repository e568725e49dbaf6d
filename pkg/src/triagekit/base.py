"""Estimator base class and shared model-output type.

All model families follow the scikit-learn estimator convention: constructor
arguments are hyperparameters stored verbatim on the instance, ``fit`` returns
``self``, and fitted state lives in trailing-underscore attributes. get_params/
set_params are implemented by introspecting ``__init__`` so the estimators
compose with pipeline/grid tooling that speaks that protocol.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field


class NotFittedError(RuntimeError):
    """Raised when predict is called before fit."""


class TriageEstimator:
    """Minimal sklearn-style base: get_params/set_params over __init__ args."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "TriageEstimator":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters: {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def _check_fitted(self, *attrs: str) -> None:
        for attr in attrs:
            if getattr(self, attr, None) is None:
                raise NotFittedError(
                    f"{type(self).__name__} is not fitted (missing {attr!r}); call fit first"
                )

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


@dataclass
class ModelOutput:
    """One model's scored team list.

    ``scores`` holds every team the model mentions; ``top`` is the ranked
    (team, confidence) view capped at five entries, descending confidence with
    ties broken by team id.
    """

    model_id: str
    scores: dict = field(default_factory=dict)
    top: list = field(default_factory=list)

    TOP_N = 5

    @classmethod
    def from_scores(cls, model_id: str, scores: dict, top_n: int = TOP_N) -> "ModelOutput":
        for team, conf in scores.items():
            if not (0.0 <= conf <= 1.0):
                raise ValueError(f"confidence for {team!r} outside [0,1]: {conf}")
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(model_id=model_id, scores=dict(scores), top=ranked[:top_n])

    @classmethod
    def empty(cls, model_id: str) -> "ModelOutput":
        """Abstention: the model has nothing to say about this incident."""
        return cls(model_id=model_id, scores={}, top=[])

    def is_empty(self) -> bool:
        return not self.top
