"""Put a detector behind HTTP and evaluate it as a black box.

The server answers POST /v1/score with the probability that a PNG is
generated; the client posts the stored PNG bytes unchanged. Clean and
adversarial versions of the same images go through the same endpoint.

    python demos/remote_scoring.py
"""

import tempfile
from pathlib import Path

from evasionbench.datagen import CorpusConfig, build_corpus, build_raid
from evasionbench.metrics import evaluate
from evasionbench.remote import remote_evaluate, serve
from evasionbench.zoo import DetectorSpec, default_train_config, init_detector, train

SIDE = 32

with tempfile.TemporaryDirectory() as tmp:
    cfg = CorpusConfig(n_real=200, n_fake_per_generator=50, n_test_real=24, n_test_fake_per_generator=6, side=SIDE)
    corpus = build_corpus(cfg, tmp)
    det = init_detector(DetectorSpec("HighPassLinear", input_side=SIDE), seed=0)
    det = train(det, corpus["train"], default_train_config("HighPassLinear"))

    raid = build_raid(corpus["test"], {"HighPassLinear": det}, epsilon_ks=[8], out_dir=Path(tmp) / "raid")
    clean = raid.filter(epsilon_k=None)
    adversarial = raid.filter(epsilon_k=8)

    with serve(det, model="highpass-demo") as server:
        print("serving at", server.url)
        for name, manifest in (("clean", clean), ("eps 8/255", adversarial)):
            remote = remote_evaluate(server.url, manifest, concurrency=4)
            local = evaluate(det, manifest)
            print(f"{name:10s} accuracy {remote.accuracy:.2f}  F1 {remote.f1:.2f}  same as local: {remote == local}")
