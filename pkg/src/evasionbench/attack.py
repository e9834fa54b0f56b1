"""Targeted L-infinity PGD against one detector or an averaged ensemble.

One step moves the perturbation against the sign of the input gradient of
the mean binary cross-entropy towards the target label, then projects back
onto the epsilon ball and onto the [0, 1] pixel box. Both projections run
after every step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .datagen import DatasetManifest, ManifestRecord

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackFailure",
    "AttackRun",
    "BatchAttack",
    "AttackError",
    "flip_target",
    "ensemble_loss",
    "pgd_attack",
    "attack_images",
    "attack_dataset",
    "leave_one_out_ensembles",
]

logger = logging.getLogger(__name__)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """PGD parameters; the budget is ``eps_k / 255``."""

    eps_k: int = 16
    steps: int = 10
    step_size: float = 0.05
    init: str = "zero"
    seed: int = 0
    target_policy: str = "flip"
    fixed_target: int | None = None

    def __post_init__(self):
        if isinstance(self.eps_k, bool) or not isinstance(self.eps_k, (int, np.integer)):
            raise AttackError(f"eps_k must be an integer, got {self.eps_k!r}")
        if not 1 <= self.eps_k <= 255:
            raise AttackError(f"eps_k must lie in 1..255, got {self.eps_k}")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 0:
            raise AttackError(f"steps must be a non-negative integer, got {self.steps!r}")
        if not self.step_size > 0:
            raise AttackError(f"step_size must be positive, got {self.step_size}")
        if self.init not in ("zero", "uniform"):
            raise AttackError(f"init must be 'zero' or 'uniform', got {self.init!r}")
        if self.target_policy == "fixed":
            if self.fixed_target not in (0, 1):
                raise AttackError("fixed target policy needs fixed_target in {0, 1}")
        elif self.target_policy != "flip":
            raise AttackError(f"target_policy must be 'flip' or 'fixed', got {self.target_policy!r}")

    @property
    def epsilon(self) -> float:
        return self.eps_k / 255.0

    def target_for(self, true_label: int) -> int:
        if self.target_policy == "fixed":
            return int(self.fixed_target)
        return flip_target(true_label)


def flip_target(true_label: int) -> int:
    """Generated (1) is pushed towards real (0) and vice versa."""
    if true_label not in (0, 1):
        raise AttackError(f"label must be 0 or 1, got {true_label!r}")
    return 1 - int(true_label)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    delta: np.ndarray
    loss_trace: list[float]
    success_per_detector: dict[str, bool]
    target: int


@dataclass(frozen=True)
class AttackFailure:
    id: str
    error: str


@dataclass
class BatchAttack:
    adversarial: np.ndarray  # (N, S, S, 3)
    loss_trace: np.ndarray  # (N, steps + 1)
    success: np.ndarray  # (N, M) bool
    targets: np.ndarray  # (N,)
    names: list[str]


@dataclass
class AttackRun:
    results: list[AttackResult]
    failures: list[AttackFailure]
    manifest: DatasetManifest
    records: list[ManifestRecord] = field(default_factory=list)


def _named(detectors) -> list[tuple[str, object]]:
    if isinstance(detectors, Mapping):
        items = list(detectors.items())
    else:
        items = []
        seen: dict[str, int] = {}
        for d in detectors:
            n = seen.get(d.name, 0)
            seen[d.name] = n + 1
            items.append((d.name if n == 0 else f"{d.name}#{n}", d))
    if not items:
        raise AttackError("the detector ensemble is empty")
    return items


def _per_image_loss(x, dets, targets: np.ndarray):
    """(B,) node: mean over detectors of BCE(logit_m(x_b), target_b)."""
    total = None
    for det in dets:
        term = ad.bce_with_logit(det.forward(x), targets)
        total = term if total is None else ad.add(total, term)
    return ad.mul_scalar(total, 1.0 / len(dets))


def ensemble_loss(image, detectors, y_t: int):
    """Scalar node ``(1/M) sum_m BCE(logit_m(image), y_t)``.

    The image is the graph's only leaf, so ``backward(node.graph, node,
    node.graph.roots)`` yields the input gradient.
    """
    dets = [d for _, d in _named(detectors)]
    arr = image.data if isinstance(image, ad.Tensor) else np.asarray(image, dtype=np.float64)
    g = Graph()
    x = g.leaf(arr[None])
    per = _per_image_loss(x, dets, np.array([float(y_t)]))
    return ad.reshape(per, ())


def _project(clean: np.ndarray, delta: np.ndarray, eps: float):
    """Clamp onto the eps-ball and the pixel box; ``delta == adv - clean`` exactly."""
    delta = ad.clamp(delta, -eps, eps).data
    adv = ad.clamp(clean + delta, 0.0, 1.0).data.copy()
    delta = adv - clean
    bad = np.abs(delta) > eps
    while bad.any():
        # rounding in clean + delta can overshoot the ball by an ulp
        adv[bad] = np.nextafter(adv[bad], clean[bad])
        delta = adv - clean
        bad = np.abs(delta) > eps
    return adv, delta


def _initial_delta(clean: np.ndarray, cfg: AttackConfig, indices: Sequence[int]) -> np.ndarray:
    if cfg.init == "zero":
        return np.zeros_like(clean)
    out = np.empty_like(clean)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(idx)]))
        out[row] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=clean.shape[1:])
    return out


def _pgd_batch(clean, targets, named, cfg: AttackConfig, indices):
    dets = [d for _, d in named]
    eps = cfg.epsilon
    targets = np.asarray(targets, dtype=np.float64)
    adv, delta = _project(clean, _initial_delta(clean, cfg, indices), eps)
    trace = np.empty((len(clean), cfg.steps + 1))
    for step in range(cfg.steps):
        g = Graph()
        x = g.leaf(adv)
        per = _per_image_loss(x, dets, targets)
        grad = ad.backward(g, ad.sum_all(per), [x])[x.id]
        trace[:, step] = per.data
        delta = ad.sub(delta, ad.mul_scalar(ad.sign(grad), cfg.step_size)).data
        adv, delta = _project(clean, delta, eps)
    # final forward: loss after the last step and per-detector decisions
    g = Graph()
    x = g.constant(adv)
    logits = [det.forward(x).data for det in dets]
    losses = [ad.bce_with_logit(lg, targets).data for lg in logits]
    trace[:, cfg.steps] = np.sum(losses, axis=0) / len(dets)
    success = np.stack([(lg >= 0).astype(np.float64) == targets for lg in logits], axis=1)
    return adv, trace, success


def _check_images(images: np.ndarray, named) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images / 255.0
    images = np.asarray(images, dtype=np.float64)
    side = named[0][1].spec.input_side
    if images.ndim != 4 or images.shape[1:] != (side, side, 3):
        raise AttackError(f"expected images of shape (N, {side}, {side}, 3), got {images.shape}")
    for name, det in named:
        if det.spec.input_side != side:
            raise AttackError(f"{name}: input side {det.spec.input_side} differs from {side}")
    if images.size and (not np.isfinite(images).all() or images.min() < 0 or images.max() > 1):
        raise AttackError("pixel values must lie in [0, 1]")
    return images


def pgd_attack(clean, true_label: int, detectors, cfg: AttackConfig, index: int = 0) -> AttackResult:
    """Attack one image; ``index`` seeds the uniform start."""
    named = _named(detectors)
    arr = clean.data if isinstance(clean, ad.Tensor) else clean
    images = _check_images(np.asarray(arr)[None], named)
    target = cfg.target_for(true_label)
    adv, trace, success = _pgd_batch(images, [target], named, cfg, [index])
    return AttackResult(
        adversarial=adv[0],
        delta=adv[0] - images[0],
        loss_trace=[float(v) for v in trace[0]],
        success_per_detector={name: bool(s) for (name, _), s in zip(named, success[0])},
        target=target,
    )


def attack_images(
    images: np.ndarray,
    labels,
    detectors,
    cfg: AttackConfig,
    parallelism: int = 1,
    chunk_size: int = 32,
    indices: Sequence[int] | None = None,
) -> BatchAttack:
    """Attack a stack of images in fixed-size chunks.

    Chunk boundaries do not depend on ``parallelism``, so results are
    bitwise identical for any worker count.
    """
    named = _named(detectors)
    images = _check_images(images, named)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(images):
        raise AttackError("images and labels differ in length")
    targets = np.array([cfg.target_for(int(y)) for y in labels], dtype=np.int64)
    indices = np.arange(len(images)) if indices is None else np.asarray(indices)
    n = len(images)
    if n == 0:
        side = named[0][1].spec.input_side
        return BatchAttack(
            np.zeros((0, side, side, 3)),
            np.zeros((0, cfg.steps + 1)),
            np.zeros((0, len(named)), dtype=bool),
            targets,
            [nm for nm, _ in named],
        )
    starts = list(range(0, n, chunk_size))

    def run(start):
        sl = slice(start, start + chunk_size)
        return _pgd_batch(images[sl], targets[sl], named, cfg, indices[sl])

    if parallelism > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return BatchAttack(
        adversarial=np.concatenate([p[0] for p in parts]),
        loss_trace=np.concatenate([p[1] for p in parts]),
        success=np.concatenate([p[2] for p in parts]),
        targets=targets,
        names=[nm for nm, _ in named],
    )


def attack_dataset(
    manifest: DatasetManifest,
    detectors,
    cfg: AttackConfig,
    parallelism: int = 1,
    chunk_size: int = 32,
) -> AttackRun:
    """Attack every record of ``manifest``; unreadable images become failures.

    The returned manifest lists the adversarial counterparts (ids suffixed
    with ``-eps{k}``, ``epsilon_k`` set) in input order; their paths reuse the
    clean file names and are only materialized by the caller.
    """
    named = _named(detectors)
    side = named[0][1].spec.input_side
    good, imgs, failures = [], [], []
    for i, rec in enumerate(manifest):
        try:
            imgs.append(manifest.load_image(rec, side))
            good.append(i)
        except Exception as exc:  # noqa: BLE001 - recorded per record
            failures.append(AttackFailure(rec.id, str(exc)))
            logger.warning("cannot load %s: %s", rec.id, exc)
    labels = [manifest[i].label for i in good]
    stack = np.stack(imgs) if imgs else np.zeros((0, side, side, 3))
    batch = attack_images(stack, labels, dict(named), cfg, parallelism, chunk_size, indices=good)

    results, records = [], []
    for row, i in enumerate(good):
        rec = manifest[i]
        adv = batch.adversarial[row]
        results.append(
            AttackResult(
                adversarial=adv,
                delta=adv - stack[row],
                loss_trace=[float(v) for v in batch.loss_trace[row]],
                success_per_detector={nm: bool(s) for nm, s in zip(batch.names, batch.success[row])},
                target=int(batch.targets[row]),
            )
        )
        records.append(replace(rec, id=f"{rec.id}-eps{cfg.eps_k}", epsilon_k=cfg.eps_k, seed=cfg.seed))
    if failures:
        logger.warning("%d of %d records failed", len(failures), len(manifest))
    return AttackRun(results, failures, DatasetManifest(records, manifest.root), records)


def leave_one_out_ensembles(detectors) -> list[tuple[str, dict]]:
    """For each detector, the ensemble of all the others (order preserved)."""
    named = _named(detectors)
    if len(named) < 2:
        raise AttackError("leave-one-out needs at least two detectors")
    return [
        (held, {name: det for name, det in named if name != held})
        for held, _ in named
    ]
