"""Clean baseline, transfer matrices with leave-one-out ensembles, seed aggregation.

A matrix row is an attack source (one detector, the ensemble of all
detectors but one, or the full ensemble); a column is the detector being
evaluated on that row's adversarial images.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, _named, attack_images, leave_one_out_ensembles
from .datagen import DatasetManifest
from .metrics import EvalReport, evaluate, evaluate_images

__all__ = [
    "BenchError",
    "Cell",
    "TransferMatrix",
    "SeedAggregate",
    "FULL_SOURCE",
    "loo_source",
    "run_clean_baseline",
    "run_matrix",
    "aggregate_seeds",
    "render_report",
    "render_baseline",
    "write_matrix",
    "write_aggregate",
    "load_matrix",
    "COMPOSITIONS",
]

logger = logging.getLogger(__name__)

FULL_SOURCE = "N"
COMPOSITIONS = ("adversarial", "mixed")
CSV_HEADER = ("source", "target", "f1", "auroc")


class BenchError(ValueError):
    pass


def loo_source(held_out: str) -> str:
    return f"N-{held_out}"


@dataclass(frozen=True)
class Cell:
    f1: float
    auroc: float | None


@dataclass
class TransferMatrix:
    sources: list[str]
    targets: list[str]
    cells: dict[tuple[str, str], Cell]
    config: AttackConfig
    seed: int
    composition: str = "adversarial"
    n_images: int = 0

    @property
    def eps_k(self) -> int:
        return self.config.eps_k

    def cell(self, source: str, target: str) -> Cell:
        return self.cells[(source, target)]

    def to_dict(self) -> dict:
        return {
            "composition": self.composition,
            "config": asdict(self.config),
            "n_images": self.n_images,
            "seed": self.seed,
            "sources": list(self.sources),
            "targets": list(self.targets),
            "cells": [
                {"source": s, "target": t, "f1": self.cells[(s, t)].f1, "auroc": self.cells[(s, t)].auroc}
                for s in self.sources
                for t in self.targets
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        cells = {(c["source"], c["target"]): Cell(c["f1"], c["auroc"]) for c in d["cells"]}
        return cls(
            sources=list(d["sources"]),
            targets=list(d["targets"]),
            cells=cells,
            config=AttackConfig(**d["config"]),
            seed=int(d["seed"]),
            composition=d["composition"],
            n_images=int(d["n_images"]),
        )


@dataclass
class SeedAggregate:
    sources: list[str]
    targets: list[str]
    mean: dict[tuple[str, str], Cell]
    std: dict[tuple[str, str], Cell]
    n: int
    eps_k: int
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eps_k": self.eps_k,
            "n": self.n,
            "seeds": list(self.seeds),
            "sources": list(self.sources),
            "targets": list(self.targets),
            "cells": [
                {
                    "source": s,
                    "target": t,
                    "f1_mean": self.mean[(s, t)].f1,
                    "f1_std": self.std[(s, t)].f1,
                    "auroc_mean": self.mean[(s, t)].auroc,
                    "auroc_std": self.std[(s, t)].auroc,
                }
                for s in self.sources
                for t in self.targets
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SeedAggregate":
        mean, std = {}, {}
        for c in d["cells"]:
            key = (c["source"], c["target"])
            mean[key] = Cell(c["f1_mean"], c["auroc_mean"])
            std[key] = Cell(c["f1_std"], c["auroc_std"])
        return cls(
            sources=list(d["sources"]),
            targets=list(d["targets"]),
            mean=mean,
            std=std,
            n=int(d["n"]),
            eps_k=int(d["eps_k"]),
            seeds=list(d["seeds"]),
        )


def run_clean_baseline(detectors, manifest: DatasetManifest, parallelism: int = 1) -> dict[str, EvalReport]:
    """One EvalReport per detector on unmodified images."""
    return {name: evaluate(det, manifest, parallelism) for name, det in _named(detectors)}


def _subsample(manifest: DatasetManifest, n: int | None, seed: int) -> list[int]:
    """Balanced, seed-dependent subset of record positions (all of them when ``n`` is None)."""
    if n is None or n >= len(manifest):
        return list(range(len(manifest)))
    if n < 2:
        raise BenchError("subsample needs at least one image per class")
    labels = manifest.labels
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    picked = []
    for label, k in ((0, n // 2), (1, n - n // 2)):
        pool = np.flatnonzero(labels == label)
        if len(pool) < k:
            raise BenchError(f"only {len(pool)} images with label {label}; cannot draw {k}")
        picked.extend(rng.choice(pool, size=k, replace=False).tolist())
    return sorted(int(i) for i in picked)


def run_matrix(
    detectors,
    cfg: AttackConfig,
    manifest: DatasetManifest,
    seed: int = 0,
    composition: str = "adversarial",
    subsample: int | None = None,
    parallelism: int = 1,
    include_full: bool = True,
) -> TransferMatrix:
    """Attack from every source and evaluate every detector on the result.

    Sources are the single detectors, then ``N-<id>`` (all detectors except
    ``<id>``) for each detector, then the full ensemble ``N``. With
    composition ``"adversarial"`` both classes are attacked towards the
    opposite label; ``"mixed"`` keeps the real images clean.
    """
    if composition not in COMPOSITIONS:
        raise BenchError(f"composition must be one of {COMPOSITIONS}, got {composition!r}")
    named = _named(detectors)
    if len(named) < 2:
        raise BenchError("a transfer matrix needs at least two detectors")
    side = named[0][1].spec.input_side
    positions = _subsample(manifest, subsample, seed)
    records = [manifest[i] for i in positions]
    images = np.stack([manifest.load_image(r, side) for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    cfg = AttackConfig(**{**asdict(cfg), "seed": int(seed)})

    plan = [(name, {name: det}) for name, det in named]
    plan += [(loo_source(held), ens) for held, ens in leave_one_out_ensembles(dict(named))]
    if include_full:
        plan.append((FULL_SOURCE, dict(named)))

    cells = {}
    for source, ensemble in plan:
        batch = attack_images(images, labels, ensemble, cfg, parallelism, indices=positions)
        adv = batch.adversarial
        if composition == "mixed":
            adv = np.where((labels == 1)[:, None, None, None], adv, images)
        for target, det in named:
            rep = evaluate_images(det, adv, labels)
            cells[(source, target)] = Cell(rep.f1, rep.auroc)
        logger.info("source %s done", source)
    return TransferMatrix(
        sources=[s for s, _ in plan],
        targets=[n for n, _ in named],
        cells=cells,
        config=cfg,
        seed=int(seed),
        composition=composition,
        n_images=len(records),
    )


def _mean_std(values) -> tuple[float, float]:
    # shifting by the first value keeps repeated inputs exact
    v = np.asarray(values, dtype=np.float64)
    d = v - v[0]
    return float(v[0] + np.mean(d)), float(np.std(d, ddof=1))


def aggregate_seeds(matrices) -> SeedAggregate:
    """Per-cell mean and sample standard deviation (n - 1 denominator)."""
    matrices = list(matrices)
    if len(matrices) < 2:
        raise BenchError("aggregation needs at least two matrices")
    first = matrices[0]
    for m in matrices[1:]:
        if (m.sources, m.targets, m.eps_k, m.composition) != (
            first.sources,
            first.targets,
            first.eps_k,
            first.composition,
        ):
            raise BenchError("matrices differ in structure; cannot aggregate")
    mean, std = {}, {}
    for key in first.cells:
        f1_mean, f1_std = _mean_std([m.cells[key].f1 for m in matrices])
        au = [m.cells[key].auroc for m in matrices]
        au_mean, au_std = (None, None) if any(a is None for a in au) else _mean_std(au)
        mean[key] = Cell(f1_mean, au_mean)
        std[key] = Cell(f1_std, au_std)
    return SeedAggregate(
        sources=list(first.sources),
        targets=list(first.targets),
        mean=mean,
        std=std,
        n=len(matrices),
        eps_k=first.eps_k,
        seeds=[m.seed for m in matrices],
    )


def _fmt(v) -> str:
    return "" if v is None else f"{v:.2f}"


def _fmt_pm(m, s) -> str:
    return "n/a" if m is None else f"{m:.2f}±{s:.2f}"


def render_report(obj, fmt: str) -> bytes:
    """CSV or markdown bytes for a TransferMatrix or SeedAggregate.

    Values are rounded to two decimals here and nowhere else.
    """
    if fmt not in ("csv", "markdown", "md"):
        raise BenchError(f"unknown report format {fmt!r}; expected 'csv' or 'markdown'")
    if isinstance(obj, TransferMatrix):
        rows = {k: (_fmt(c.f1), _fmt(c.auroc)) for k, c in obj.cells.items()}
        md_cell = {k: f"{_fmt(c.f1)}/{_fmt(c.auroc) or 'n/a'}" for k, c in obj.cells.items()}
        header = list(CSV_HEADER)
        title = f"F1/AUROC, eps={obj.eps_k}/255, seed {obj.seed}, {obj.composition}"
    elif isinstance(obj, SeedAggregate):
        rows = {
            k: (_fmt(m.f1), _fmt(m.auroc), _fmt(obj.std[k].f1), _fmt(obj.std[k].auroc))
            for k, m in obj.mean.items()
        }
        md_cell = {
            k: f"{_fmt_pm(m.f1, obj.std[k].f1)}/{_fmt_pm(m.auroc, obj.std[k].auroc)}"
            for k, m in obj.mean.items()
        }
        header = list(CSV_HEADER) + ["f1_std", "auroc_std"]
        title = f"F1/AUROC mean±std over {obj.n} seeds, eps={obj.eps_k}/255"
    else:
        raise BenchError(f"cannot render {type(obj).__name__}")

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for s in obj.sources:
            for t in obj.targets:
                w.writerow([s, t, *rows[(s, t)]])
        return buf.getvalue().encode()
    lines = [
        f"{title}",
        "",
        "| source \\ target | " + " | ".join(obj.targets) + " |",
        "|---|" + "---|" * len(obj.targets),
    ]
    for s in obj.sources:
        lines.append(f"| {s} | " + " | ".join(md_cell[(s, t)] for t in obj.targets) + " |")
    return ("\n".join(lines) + "\n").encode()


def render_baseline(reports: dict[str, EvalReport], fmt: str) -> bytes:
    """Per-detector F1 / accuracy / AUROC on clean data."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["detector", "f1", "accuracy", "auroc"])
        for name, r in reports.items():
            w.writerow([name, _fmt(r.f1), _fmt(r.accuracy), _fmt(r.auroc)])
        return buf.getvalue().encode()
    if fmt in ("markdown", "md"):
        lines = ["| detector | F1 | Accuracy | AUROC |", "|---|---|---|---|"]
        for name, r in reports.items():
            lines.append(f"| {name} | {_fmt(r.f1)} | {_fmt(r.accuracy)} | {_fmt(r.auroc)} |")
        return ("\n".join(lines) + "\n").encode()
    raise BenchError(f"unknown report format {fmt!r}; expected 'csv' or 'markdown'")


def _dump(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_matrix(matrix: TransferMatrix, reports_dir) -> list[Path]:
    """``matrix_eps{k}_seed{s}.csv|md|json``; the json keeps full precision."""
    d = Path(reports_dir)
    d.mkdir(parents=True, exist_ok=True)
    stem = d / f"matrix_eps{matrix.eps_k}_seed{matrix.seed}"
    paths = [stem.with_suffix(".csv"), stem.with_suffix(".md"), stem.with_suffix(".json")]
    paths[0].write_bytes(render_report(matrix, "csv"))
    paths[1].write_bytes(render_report(matrix, "markdown"))
    _dump(paths[2], matrix.to_dict())
    return paths


def write_aggregate(agg: SeedAggregate, reports_dir) -> list[Path]:
    d = Path(reports_dir)
    d.mkdir(parents=True, exist_ok=True)
    stem = d / f"matrix_eps{agg.eps_k}_mean"
    paths = [stem.with_suffix(".csv"), stem.with_suffix(".md"), stem.with_suffix(".json")]
    paths[0].write_bytes(render_report(agg, "csv"))
    paths[1].write_bytes(render_report(agg, "markdown"))
    _dump(paths[2], agg.to_dict())
    return paths


def load_matrix(path) -> TransferMatrix | SeedAggregate:
    """Read a matrix or aggregate written by :func:`write_matrix` / :func:`write_aggregate`."""
    d = json.loads(Path(path).read_text())
    return SeedAggregate.from_dict(d) if "n" in d and "config" not in d else TransferMatrix.from_dict(d)
