"""Train two detectors on a small corpus, attack one, and see what transfers.

Runs in well under a minute:

    python demos/white_box_vs_transfer.py
"""

import tempfile

import numpy as np

from evasionbench.attack import AttackConfig, attack_images
from evasionbench.datagen import CorpusConfig, build_corpus
from evasionbench.metrics import evaluate_images
from evasionbench.zoo import DetectorSpec, default_train_config, init_detector, train

SIDE = 32


def main():
    cfg = CorpusConfig(n_real=200, n_fake_per_generator=50, n_test_real=40, n_test_fake_per_generator=10, side=SIDE)
    with tempfile.TemporaryDirectory() as tmp:
        corpus = build_corpus(cfg, tmp)
        train_set, test_set = corpus["train"], corpus["test"]
        x_train = train_set.load_images()
        x_test = test_set.load_images() / 255.0
        y_test = test_set.labels

    dets = {}
    for kind in ("TinyCNN", "HighPassLinear"):
        det = init_detector(DetectorSpec(kind, input_side=SIDE), seed=0)
        dets[kind] = train(det, train_set, default_train_config(kind), images=x_train)
        clean = evaluate_images(dets[kind], x_test, y_test)
        print(f"{kind:15s} clean       F1 {clean.f1:.2f}  AUROC {clean.auroc:.2f}")

    # attack TinyCNN only, then score the same adversarial images with both
    attack = AttackConfig(eps_k=16)
    adv = attack_images(x_test, y_test, {"TinyCNN": dets["TinyCNN"]}, attack).adversarial
    print(f"max |delta| = {np.abs(adv - x_test).max() * 255:.1f}/255")
    for kind, det in dets.items():
        r = evaluate_images(det, adv, y_test)
        role = "white-box" if kind == "TinyCNN" else "transfer"
        print(f"{kind:15s} {role:11s} F1 {r.f1:.2f}  AUROC {r.auroc:.2f}")


if __name__ == "__main__":
    main()
