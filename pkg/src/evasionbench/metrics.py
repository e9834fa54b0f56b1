"""F1, thresholded accuracy and AUROC for real (0) vs generated (1) scores."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ScoredSample",
    "EvalReport",
    "MetricsError",
    "EvaluationError",
    "f1_score",
    "accuracy_at_threshold",
    "auroc",
    "auroc_bruteforce",
    "report_from_scores",
    "evaluate",
    "evaluate_images",
]

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
MAX_FAILURE_RATE = 0.01


class MetricsError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    id: str
    true_label: int
    probability: float

    def __post_init__(self):
        if self.true_label not in (0, 1):
            raise MetricsError(f"{self.id}: label must be 0 or 1")
        p = float(self.probability)
        if not (np.isfinite(p) and 0.0 <= p <= 1.0):
            raise MetricsError(f"{self.id}: probability {self.probability!r} outside [0, 1]")


def _arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and not isinstance(samples[0], ScoredSample):
        labels, probs = (np.asarray(a) for a in samples)
    else:
        samples = list(samples)
        labels = np.array([s.true_label for s in samples], dtype=np.int64)
        probs = np.array([s.probability for s in samples], dtype=np.float64)
    if labels.size == 0:
        raise MetricsError("no samples")
    return labels.astype(np.int64), probs.astype(np.float64)


def _confusion(labels, probs, threshold=THRESHOLD):
    pred = probs >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    return tp, fp, tn, fn


def f1_score(samples) -> float:
    """F1 of the "generated" class at threshold 0.5; 0 when nothing is truly or falsely found.

    ``samples`` is a sequence of :class:`ScoredSample` or a ``(labels, probabilities)`` pair.
    """
    labels, probs = _arrays(samples)
    tp, fp, _, fn = _confusion(labels, probs)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def accuracy_at_threshold(samples, threshold: float = THRESHOLD) -> float:
    labels, probs = _arrays(samples)
    return float(np.mean((probs >= threshold) == (labels == 1)))


def _check_two_classes(labels):
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUROC undefined: need at least one positive and one negative sample")
    return n_pos, n_neg


def auroc(samples) -> float:
    """Mann-Whitney AUROC from midranks; ties count one half."""
    labels, probs = _arrays(samples)
    n_pos, n_neg = _check_two_classes(labels)
    ranks = rankdata(probs, method="average")
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc_bruteforce(samples) -> float:
    """Same statistic by comparing every positive/negative pair."""
    labels, probs = _arrays(samples)
    n_pos, n_neg = _check_two_classes(labels)
    pos = probs[labels == 1][:, None]
    neg = probs[labels == 0][None, :]
    wins = int(np.sum(pos > neg))
    ties = int(np.sum(pos == neg))
    return (wins + 0.5 * ties) / (n_pos * n_neg)


@dataclass(frozen=True)
class EvalReport:
    f1: float
    accuracy: float
    auroc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    n_pos: int
    n_neg: int
    n_failed: int = 0

    KEYS = ("f1", "accuracy", "auroc", "tp", "fp", "tn", "fn", "n_pos", "n_neg", "n_failed")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.KEYS})


def report_from_scores(labels, probs, n_failed: int = 0, require_auroc: bool = True) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if labels.size == 0:
        raise MetricsError("no samples")
    tp, fp, tn, fn = _confusion(labels, probs)
    n_pos = int(np.sum(labels == 1))
    try:
        area = auroc((labels, probs))
    except MetricsError:
        if require_auroc:
            raise
        area = None
    return EvalReport(
        f1=f1_score((labels, probs)),
        accuracy=accuracy_at_threshold((labels, probs)),
        auroc=area,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n_pos=n_pos,
        n_neg=int(labels.size - n_pos),
        n_failed=n_failed,
    )


def evaluate_images(detector, images: np.ndarray, labels) -> EvalReport:
    """Score an in-memory stack of images with the batched forward pass."""
    from .autodiff import stable_sigmoid
    from .zoo import batch_logits

    return report_from_scores(labels, stable_sigmoid(batch_logits(detector, images)))


def evaluate(scorer, manifest, parallelism: int = 1) -> EvalReport:
    """Score every manifest record one image at a time and summarize.

    ``scorer`` is a Detector or any callable mapping an image to the
    probability that it is generated. Records whose scoring raises are
    skipped; more than 1% of them failing aborts the evaluation.
    """
    from .zoo import Detector, probability

    if len(manifest) == 0:
        raise MetricsError("empty manifest")
    if isinstance(scorer, Detector):
        side = scorer.spec.input_side
        fn: Callable = lambda img: probability(scorer, img)  # noqa: E731
    else:
        side = None
        fn = scorer

    def one(record):
        try:
            return fn(manifest.load_image(record, side)), None
        except Exception as exc:  # noqa: BLE001 - per-record failures are tallied
            return None, f"{record.id}: {exc}"

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, manifest.records))
    else:
        outcomes = [one(r) for r in manifest.records]
    return _summarize(manifest.records, outcomes)


def _summarize(records: Sequence, outcomes) -> EvalReport:
    labels, probs, errors = [], [], []
    for rec, (p, err) in zip(records, outcomes):
        if err is not None:
            errors.append(err)
            continue
        labels.append(rec.label)
        probs.append(p)
    for err in errors[:10]:
        logger.warning("scoring failed: %s", err)
    if len(errors) > MAX_FAILURE_RATE * len(records):
        raise EvaluationError(
            f"{len(errors)} of {len(records)} records failed (limit 1%); first: {errors[0]}"
        )
    return report_from_scores(labels, probs, n_failed=len(errors))
