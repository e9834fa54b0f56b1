"""Leave-one-out ensemble attacks: each row attacks without the column's gradients.

Trains the four zoo detectors briefly on a 32x32 corpus, then prints a
transfer matrix. A row "N-X" is the ensemble of every detector except X;
its entry in column X is the black-box number that matters.

    python demos/leave_one_out.py
"""

import tempfile

from evasionbench.attack import AttackConfig
from evasionbench.bench import render_report, run_matrix
from evasionbench.datagen import CorpusConfig, build_corpus
from evasionbench.zoo import KINDS, DetectorSpec, default_train_config, init_detector, train

SIDE = 32

cfg = CorpusConfig(n_real=320, n_fake_per_generator=80, n_test_real=48, n_test_fake_per_generator=12, side=SIDE)

with tempfile.TemporaryDirectory() as tmp:
    corpus = build_corpus(cfg, tmp)
    images = corpus["train"].load_images()
    detectors = {}
    for kind in KINDS:
        det = init_detector(DetectorSpec(kind, input_side=SIDE), seed=0)
        detectors[kind] = train(det, corpus["train"], default_train_config(kind, epochs=8), images=images)
        print(f"trained {kind}: validation accuracy {detectors[kind].train_meta['val_accuracy']:.2f}")

    matrix = run_matrix(detectors, AttackConfig(eps_k=16), corpus["test"], seed=0)

print()
print(render_report(matrix, "markdown").decode())
