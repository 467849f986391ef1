"""Top-k accuracy on a fixed test split."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, softmax_temp


@dataclass
class EvalResult:
    top1: float
    top5: float
    per_class: list
    n_test: int
    weights_used: str = "raw"
    k: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


def scores_to_result(scores: np.ndarray, labels: np.ndarray, weights_used: str = "raw") -> EvalResult:
    """Accuracy from a [N, n] score matrix; top-5 falls back to top-n when n < 5.

    Ties are broken toward the lower class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) == 0:
        raise ValueError(f"need a non-empty [N, n] score matrix, got shape {scores.shape}")
    if len(labels) != len(scores):
        raise ValueError(f"{len(scores)} score rows but {len(labels)} labels")
    n = scores.shape[1]
    k = min(5, n)
    order = np.argsort(-scores, axis=1, kind="stable")
    hit1 = order[:, 0] == labels
    hitk = np.any(order[:, :k] == labels[:, None], axis=1)
    per_class = [float(hit1[labels == c].mean()) if np.any(labels == c) else None
                 for c in range(n)]
    return EvalResult(float(hit1.mean()), float(hitk.mean()), per_class, int(len(labels)),
                      weights_used, k)


def evaluate(model, images: np.ndarray, labels: np.ndarray, gamma: float = 1.0,
             batch_size: int = 256, weights_used: str = "raw") -> EvalResult:
    """Classify with the image encoder and its probe only."""
    if len(images) == 0:
        raise ValueError("empty test set")
    probs = [softmax_temp(model.image_logits(Tensor(images[i:i + batch_size])), gamma).data
             for i in range(0, len(images), batch_size)]
    return scores_to_result(np.concatenate(probs), labels, weights_used)
