"""Detection filtering, prompt construction, embedding-similarity ranking and
final proposal choice. Ties always go to the lowest index."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EmptyCategory, EmptyList, KTooLarge, ZeroVector

DEFAULT_SIGMA = 0.4
PROMPT_TEMPLATE = "High quality, authentic style {category}"


@dataclass
class DetectionRecord:
    instance_id: str
    category: str
    confidence: float
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ConfigError(f"confidence {self.confidence} outside [0, 1]")


class CandidateRanking(NamedTuple):
    candidate_index: int
    similarity: float


def filter_detections(dets: Sequence[DetectionRecord], sigma: float = DEFAULT_SIGMA) -> list[DetectionRecord]:
    """Keep detections whose confidence is strictly above ``sigma``."""
    if not 0.0 <= sigma <= 1.0:
        raise ConfigError(f"sigma {sigma} outside [0, 1]")
    return [d for d in dets if d.confidence > sigma]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


def select_top_k(reference, candidates: Sequence, k: int) -> list[CandidateRanking]:
    if k > len(candidates):
        raise KTooLarge(f"k={k} exceeds {len(candidates)} candidates")
    if k < 0:
        raise ConfigError("k must be non-negative")
    sims = [cosine_similarity(reference, c) for c in candidates]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return [CandidateRanking(i, sims[i]) for i in order[:k]]


def select_best_proposal(errors: Sequence[float]) -> int:
    """Index of the smallest matching error (first one on ties)."""
    if len(errors) == 0:
        raise EmptyList("no matching errors to choose from")
    arr = np.asarray(errors, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise ConfigError("matching errors must not be NaN")
    return int(np.argmin(arr))


def build_prompt(category: str, fallback: bool = False) -> str:
    category = category.strip()
    if not category:
        raise EmptyCategory("category label is empty")
    if fallback:
        return category
    return PROMPT_TEMPLATE.format(category=category)
