"""End-to-end acceptance criteria on the default synthetic corpus.

The module fixture builds the corpus and trains all four detectors through
the command line; later fixtures reuse those checkpoints. Each criterion
records a one-line verdict that pytest prints in its terminal summary.
Expect roughly 20 minutes on one CPU core.
"""

import hashlib
import json
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from evasionbench import autodiff as ad
from evasionbench.attack import AttackConfig
from evasionbench.autodiff import Tensor, finite_difference_gradient
from evasionbench.bench import FULL_SOURCE, loo_source, run_clean_baseline, run_matrix
from evasionbench.cli import main
from evasionbench.datagen import DatasetManifest, build_raid
from evasionbench.metrics import auroc, auroc_bruteforce, evaluate, evaluate_images
from evasionbench.zoo import KINDS, DetectorSpec, batch_logits, init_detector, input_gradient, load_detector

pytestmark = pytest.mark.acceptance

EPS_TIERS = (8, 16, 32)


def verdict(log, n, ok, detail):
    log[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t = time.time()
    assert main(["gen-data", "--out", str(root / "data"), "--quiet"]) == 0
    assert main(["train", "--data", str(root / "data/corpus/train"), "--out", str(root / "det"), "--quiet"]) == 0
    print(f"corpus + training: {time.time() - t:.0f}s")
    return root


@pytest.fixture(scope="module")
def test_set(work):
    return DatasetManifest.read(work / "data/corpus/test")


@pytest.fixture(scope="module")
def detectors(work):
    return {k: load_detector((work / f"det/{k}.evfg").read_bytes()) for k in KINDS}


def detector_flags(work):
    out = []
    for k in KINDS:
        out += ["--detector", str(work / f"det/{k}.evfg")]
    return out


@pytest.fixture(scope="module")
def clean_reports(detectors, test_set):
    return run_clean_baseline(detectors, test_set)


@pytest.fixture(scope="module")
def matrices(detectors, test_set):
    return {k: run_matrix(detectors, AttackConfig(eps_k=k), test_set, seed=0) for k in (16, 32)}


@pytest.fixture(scope="module")
def raid(work):
    """Two identical command-line runs of build-raid."""
    argv = ["build-raid", "--data", str(work / "data/corpus/test"), *detector_flags(work), "--quiet"]
    for name in ("raid1", "raid2"):
        assert main([*argv, "--out", str(work / name)]) == 0
    return work / "raid1", work / "raid2"


def test_01_gradients_match_finite_differences(acceptance_log):
    worst, worst_fine = {}, {}
    rng = np.random.default_rng(2024)
    for kind in KINDS:
        det = init_detector(DetectorSpec(kind, input_side=16), 1)

        def batch_loss(pts, det=det):
            z = batch_logits(det, pts)
            return ad.bce_with_logit(z, np.zeros_like(z)).data

        errs, fine = [], []
        for _ in range(10):
            img = rng.uniform(0.02, 0.98, size=(16, 16, 3))
            g = input_gradient(det, img, 0).data
            for h, out in ((1e-3, errs), (1e-4, fine)):
                fd = finite_difference_gradient(None, Tensor(img), h=h, batch_f=batch_loss).data
                out.append(np.linalg.norm(g - fd) / np.linalg.norm(fd))
        worst[kind], worst_fine[kind] = max(errs), max(fine)
    ok = all(e < 1e-3 for e in worst.values())
    # h=1e-3 can straddle a ReLU kink; the h=1e-4 column is reported alongside for diagnosis
    detail = "max relative L2 error at h=1e-3 (h=1e-4) " + ", ".join(
        f"{k} {worst[k]:.1e} ({worst_fine[k]:.1e})" for k in KINDS
    )
    assert verdict(acceptance_log, 1, ok, detail), detail


def test_02_clean_baseline(acceptance_log, clean_reports):
    ok = all(r.f1 >= 0.95 and r.auroc >= 0.97 for r in clean_reports.values())
    detail = "F1/AUROC " + ", ".join(f"{k} {r.f1:.3f}/{r.auroc:.3f}" for k, r in clean_reports.items())
    assert verdict(acceptance_log, 2, ok, detail), detail


def test_03_white_box_collapse(acceptance_log, matrices):
    m = matrices[16]
    cells = {k: m.cell(k, k) for k in KINDS}
    ok = all(c.f1 <= 0.05 and 0.40 <= c.auroc <= 0.60 for c in cells.values())
    detail = "diagonal F1/AUROC at 16/255 " + ", ".join(f"{k} {c.f1:.2f}/{c.auroc:.2f}" for k, c in cells.items())
    assert verdict(acceptance_log, 3, ok, detail), detail


def test_04_leave_one_out_transfer(acceptance_log, matrices, clean_reports):
    m = matrices[16]
    parts, wins = [], 0
    for held in KINDS:
        loo = m.cell(loo_source(held), held).f1
        singles = np.mean([m.cell(s, held).f1 for s in KINDS if s != held])
        clean = clean_reports[held].f1
        good = loo <= singles and loo <= clean - 0.30
        wins += good
        parts.append(f"{held} {loo:.2f} (singles {singles:.2f}, clean-0.3 {clean - 0.3:.2f})")
    ok = wins >= 3
    detail = f"{wins}/4 held-out detectors; " + ", ".join(parts)
    assert verdict(acceptance_log, 4, ok, detail), detail


def test_05_epsilon_monotonicity(acceptance_log, matrices, test_set):
    # F1 = 2tp / (2tp + fp + fn) has denominator <= 2n, so the float pins down
    # the exact fraction and the bound is checked without rounding noise
    n2 = 2 * len(test_set.labels)
    m16, m32 = matrices[16], matrices[32]

    def exact(f1):
        return Fraction(f1).limit_denominator(n2)

    gaps = {key: exact(m32.cells[key].f1) - exact(m16.cells[key].f1) for key in m16.cells}
    worst = max(gaps, key=gaps.get)
    ok = all(g <= Fraction(1, 20) for g in gaps.values())
    a, b = exact(m16.cells[worst].f1), exact(m32.cells[worst].f1)
    detail = (
        f"largest F1 increase 16->32: {float(gaps[worst]):+.4f} ({b} - {a}) "
        f"at {worst[0]} -> {worst[1]} ({len(gaps)} cells)"
    )
    assert verdict(acceptance_log, 5, ok, detail), detail


def test_06_quantization_fidelity(acceptance_log, work, detectors, test_set, raid):
    _, results = build_raid(test_set, detectors, EPS_TIERS, work / "raid_mem", return_results=True)
    labels = test_set.labels
    worst, where = 0.0, ""
    for k in EPS_TIERS:
        tensors = np.stack([r.adversarial for r in results[k]])
        stored = DatasetManifest.read(raid[0] / f"eps{k}").load_images()
        for name, det in detectors.items():
            a = evaluate_images(det, tensors, labels)
            b = evaluate_images(det, stored, labels)
            for metric in ("f1", "accuracy", "auroc"):
                d = abs(getattr(a, metric) - getattr(b, metric))
                if d >= worst:
                    worst, where = d, f"{name} {metric} at {k}/255"
    ok = worst <= 0.05
    detail = f"largest |tensor - PNG| metric gap {worst:.3f} ({where})"
    assert verdict(acceptance_log, 6, ok, detail), detail


def test_07_linf_survives_png(acceptance_log, raid):
    root = raid[0]
    clean = DatasetManifest.read(root / "clean")
    checked, bad = 0, []
    for k in EPS_TIERS:
        tier = DatasetManifest.read(root / f"eps{k}")
        for c, a in zip(clean, tier):
            assert a.id == f"{c.id}-eps{k}"
            x = clean.load_image(c)
            y = tier.load_image(a)
            checked += 1
            if np.max(np.abs(y - x)) > (k + 1) / 255 + 1e-12:
                bad.append(a.id)
    ok = not bad
    detail = f"{checked - len(bad)}/{checked} PNG pairs within eps + 1/255"
    assert verdict(acceptance_log, 7, ok, detail), detail


def test_08_auroc_oracle(acceptance_log):
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(2, 500))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        levels = int(rng.integers(2, 50))
        probs = rng.integers(0, levels, size=n) / (levels - 1)
        worst = max(worst, abs(auroc((labels, probs)) - auroc_bruteforce((labels, probs))))
    ok = worst <= 1e-12
    detail = f"200 tied score sets, max |rank - pairwise| = {worst:.1e}"
    assert verdict(acceptance_log, 8, ok, detail), detail


def test_09_build_raid_is_deterministic(acceptance_log, raid):
    a, b = tree_digest(raid[0]), tree_digest(raid[1])
    ok = a == b and len(a) > 0
    detail = f"{len(a)} files, trees {'identical' if a == b else 'differ'}"
    assert verdict(acceptance_log, 9, ok, detail), detail


def _balanced_subset(manifest, n):
    labels = manifest.labels
    idx = list(np.flatnonzero(labels == 0)[: n // 2]) + list(np.flatnonzero(labels == 1)[: n - n // 2])
    return sorted(int(i) for i in idx)


def test_10_remote_round_trip(acceptance_log, work, detectors, raid, capsys):
    clean_all = DatasetManifest.read(raid[0] / "clean")
    adv_all = DatasetManifest.read(raid[0] / "eps16")
    idx = _balanced_subset(clean_all, 100)
    clean = clean_all.subset(idx)
    adv = adv_all.subset(idx)
    clean.write(work / "remote/clean/manifest.jsonl")
    adv.write(work / "remote/adv/manifest.jsonl")

    kind = "TinyCNN"
    proc = subprocess.Popen(
        [sys.executable, "-m", "evasionbench", "serve", "--detector", str(work / f"det/{kind}.evfg"), "--port", "0", "--quiet"],
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        url = proc.stderr.readline().strip()
        reports = {}
        for name in ("clean", "adv"):
            capsys.readouterr()
            code = main(["remote-eval", "--endpoint", url, "--data", str(work / "remote" / name), "--quiet"])
            assert code == 0
            reports[name] = json.loads(capsys.readouterr().out)
    finally:
        proc.terminate()
        proc.wait(timeout=10)
    det = detectors[kind]
    local = {"clean": evaluate(det, clean).to_dict(), "adv": evaluate(det, adv).to_dict()}
    same = reports == local
    lower = reports["adv"]["accuracy"] < reports["clean"]["accuracy"]
    ok = same and lower
    detail = (
        f"{kind} over HTTP: remote {'==' if same else '!='} local; accuracy clean "
        f"{reports['clean']['accuracy']:.2f} vs adversarial {reports['adv']['accuracy']:.2f}"
    )
    assert verdict(acceptance_log, 10, ok, detail), detail


def test_11_seed_aggregation(acceptance_log, work):
    out = work / "seeds"
    argv = [
        "matrix", "--data", str(work / "data/corpus/test"), *detector_flags(work),
        "--eps-k", "16", "--seeds", "5", "--subsample", "64", "--out", str(out), "--quiet",
    ]
    assert main(argv) == 0
    reports = out / "reports"
    per_seed = [json.loads((reports / f"matrix_eps16_seed{s}.json").read_text()) for s in range(5)]
    agg = json.loads((reports / "matrix_eps16_mean.json").read_text())
    worst = 0.0
    for i, cell in enumerate(agg["cells"]):
        for metric in ("f1", "auroc"):
            vals = np.array([m["cells"][i][metric] for m in per_seed])
            assert all(m["cells"][i]["source"] == cell["source"] for m in per_seed)
            worst = max(
                worst,
                abs(np.mean(vals) - cell[f"{metric}_mean"]),
                abs(np.std(vals, ddof=1) - cell[f"{metric}_std"]),
            )
    ok = agg["n"] == 5 and worst <= 1e-12
    detail = f"n={agg['n']}, {len(agg['cells'])} cells, max recomputation error {worst:.1e}"
    assert verdict(acceptance_log, 11, ok, detail), detail


def test_full_ensemble_row_is_reported(matrices):
    m = matrices[16]
    assert m.sources[-1] == FULL_SOURCE
    assert all(m.cell(FULL_SOURCE, k).f1 <= 0.1 for k in KINDS)
