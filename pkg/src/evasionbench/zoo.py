"""Four small differentiable real-vs-generated detectors.

All detectors map an (H, W, 3) image in [0, 1] to one logit; positive means
"generated". They differ along the axes that matter for transfer:

``PixelMLP``
    raw pixels -> dense -> ReLU -> dense.
``TinyCNN``
    two stride-2 3x3 convolutions, global average pooling, linear head.
``PatchCNN``
    1x1 convolution, then a dense layer applied to each disjoint 9x9 patch
    (a 9x9 stride-9 convolution), a per-patch linear score, and the mean of
    the patch scores.
``HighPassLinear``
    fixed 3x3 Laplacian residual per channel at full resolution, 1x1 channel
    mixing with ReLU, averaging of positions that share the same offset on
    an 8-pixel grid, linear head.

The three pixel-space detectors first map [0, 1] onto a zero-centred range
(``(x - 0.5) * 2 * gain``); the Laplacian residual is amplified by a fixed
gain. Both are constants of the architecture, not learned.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node, Tensor, stable_sigmoid

__all__ = [
    "KINDS",
    "DetectorSpec",
    "Detector",
    "TrainConfig",
    "DetectorError",
    "init_detector",
    "zero_detector",
    "score",
    "probability",
    "batch_logits",
    "input_gradient",
    "train",
    "save_detector",
    "load_detector",
    "default_train_config",
]

KINDS = ("PixelMLP", "TinyCNN", "PatchCNN", "HighPassLinear")
PATCH = 9
PHASE = 8
MAGIC = b"EVFG"
FORMAT_VERSION = 1

_INPUT_GAIN = {"PixelMLP": 1.0, "TinyCNN": 1.0, "PatchCNN": 2.0}
_RESIDUAL_GAIN = 4.0

_DEFAULT_WIDTHS = {
    "PixelMLP": (32,),
    "TinyCNN": (8, 16),
    "PatchCNN": (8, 16),
    "HighPassLinear": (8,),
}

# center 8, all eight neighbours -1, applied to each channel separately
_LAPLACE = -np.ones((3, 3))
_LAPLACE[1, 1] = 8.0
_LAPLACE_KERNEL = np.zeros((3, 3, 3, 3))
for _c in range(3):
    _LAPLACE_KERNEL[_c, _c] = _LAPLACE
_LAPLACE_KERNEL = Tensor(_LAPLACE_KERNEL)


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorSpec:
    kind: str
    input_side: int = 64
    widths: tuple[int, ...] = ()
    patch_size: int = PATCH

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DetectorError(f"unknown detector kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.input_side, int) or self.input_side <= 0 or self.input_side % 4:
            raise DetectorError(f"input_side must be a positive multiple of 4, got {self.input_side!r}")
        if self.patch_size != PATCH:
            raise DetectorError(f"patch size is fixed at {PATCH}")
        widths = tuple(int(w) for w in (self.widths or _DEFAULT_WIDTHS[self.kind]))
        if len(widths) != len(_DEFAULT_WIDTHS[self.kind]) or any(w <= 0 for w in widths):
            raise DetectorError(
                f"{self.kind} needs {len(_DEFAULT_WIDTHS[self.kind])} positive widths, got {widths}"
            )
        object.__setattr__(self, "widths", widths)
        if self.kind == "PatchCNN" and self.input_side < PATCH:
            raise DetectorError(f"PatchCNN needs input_side >= {PATCH}")
        if self.kind == "TinyCNN" and self.input_side < 8:
            raise DetectorError("TinyCNN needs input_side >= 8")
        if self.kind == "HighPassLinear" and self.input_side < PHASE + 2:
            raise DetectorError(f"HighPassLinear needs input_side >= {PHASE + 2}")

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "kind": self.kind,
            "patch_size": self.patch_size,
            "widths": list(self.widths),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorSpec":
        return cls(
            kind=d["kind"],
            input_side=int(d["input_side"]),
            widths=tuple(d["widths"]),
            patch_size=int(d.get("patch_size", PATCH)),
        )


def _param_shapes(spec: DetectorSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in canonical order."""
    s = spec.input_side
    w = spec.widths
    if spec.kind == "PixelMLP":
        d = s * s * 3
        return [("w1", (w[0], d), d), ("b1", (w[0],), d), ("w2", (1, w[0]), w[0]), ("b2", (1,), w[0])]
    if spec.kind == "TinyCNN":
        return [
            ("k1", (w[0], 3, 3, 3), 27),
            ("c1", (w[0],), 27),
            ("k2", (w[1], w[0], 3, 3), 9 * w[0]),
            ("c2", (w[1],), 9 * w[0]),
            ("w", (1, w[1]), w[1]),
            ("b", (1,), w[1]),
        ]
    if spec.kind == "PatchCNN":
        return [
            ("k1", (w[0], 3, 1, 1), 3),
            ("c1", (w[0],), 3),
            ("k2", (w[1], w[0], PATCH, PATCH), w[0] * PATCH * PATCH),
            ("c2", (w[1],), w[0] * PATCH * PATCH),
            ("k3", (1, w[1], 1, 1), w[1]),
            ("c3", (1,), w[1]),
        ]
    d = w[0] * PHASE * PHASE
    return [
        ("k1", (w[0], 3, 1, 1), 3),
        ("c1", (w[0],), 3),
        ("w", (1, d), d),
        ("b", (1,), d),
    ]


@dataclass(frozen=True)
class Detector:
    spec: DetectorSpec
    params: Mapping[str, Tensor]
    train_meta: Mapping = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.spec.kind

    def forward(self, x: Node, params: Mapping[str, Node] | None = None) -> Node:
        """Batched logits (B,) for images ``x`` of shape (B, S, S, 3)."""
        g = x.graph
        if params is None:
            params = {k: g.constant(v) for k, v in self.params.items()}
        return _FORWARD[self.spec.kind](self.spec, x, params)


def _centre(spec, x):
    gain = _INPUT_GAIN[spec.kind]
    return ad.sub(ad.mul_scalar(x, 2.0 * gain), np.full(x.shape, gain))


def _forward_pixel_mlp(spec, x, p):
    b = x.shape[0]
    h = ad.reshape(_centre(spec, x), (b, -1))
    h = ad.relu(ad.dense(h, p["w1"], p["b1"]))
    return ad.reshape(ad.dense(h, p["w2"], p["b2"]), (b,))


def _forward_tiny_cnn(spec, x, p):
    b = x.shape[0]
    h = ad.transpose(_centre(spec, x), (0, 3, 1, 2))
    h = ad.relu(ad.conv2d(h, p["k1"], stride=2, bias=p["c1"]))
    h = ad.relu(ad.conv2d(h, p["k2"], stride=2, bias=p["c2"]))
    h = ad.mean(h, (2, 3))
    return ad.reshape(ad.dense(h, p["w"], p["b"]), (b,))


def _forward_patch_cnn(spec, x, p):
    h = ad.transpose(_centre(spec, x), (0, 3, 1, 2))
    h = ad.relu(ad.conv2d(h, p["k1"], stride=1, bias=p["c1"]))
    h = ad.relu(ad.conv2d(h, p["k2"], stride=PATCH, bias=p["c2"]))
    h = ad.conv2d(h, p["k3"], stride=1, bias=p["c3"])  # (B, 1, P, P) patch logits
    return ad.mean(h, (1, 2, 3))


def _forward_high_pass(spec, x, p):
    b = x.shape[0]
    h = ad.transpose(x, (0, 3, 1, 2))
    h = ad.mul_scalar(ad.conv2d(h, _LAPLACE_KERNEL, stride=1), _RESIDUAL_GAIN)
    h = ad.relu(ad.conv2d(h, p["k1"], stride=1, bias=p["c1"]))
    # mean over all positions with the same (row, col) offset modulo PHASE
    c, n = h.shape[1], (h.shape[2] // PHASE) * PHASE
    h = ad.crop(h, (0, 0, 0, 0), (b, c, n, n))
    h = ad.mean(ad.reshape(h, (b, c, n // PHASE, PHASE, n // PHASE, PHASE)), (2, 4))
    h = ad.reshape(h, (b, -1))
    return ad.reshape(ad.dense(h, p["w"], p["b"]), (b,))


_FORWARD = {
    "PixelMLP": _forward_pixel_mlp,
    "TinyCNN": _forward_tiny_cnn,
    "PatchCNN": _forward_patch_cnn,
    "HighPassLinear": _forward_high_pass,
}


def init_detector(spec: DetectorSpec, seed: int) -> Detector:
    """Parameters ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in canonical order."""
    if not isinstance(spec, DetectorSpec):
        raise DetectorError("init_detector expects a DetectorSpec")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), KINDS.index(spec.kind)]))
    params = {}
    for name, shape, fan_in in _param_shapes(spec):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return Detector(spec, params, {"seed": int(seed)})


def zero_detector(spec: DetectorSpec, bias: float = 0.0) -> Detector:
    """All-zero parameters except the output bias; its logit is ``bias`` for every image."""
    shapes = _param_shapes(spec)
    params = {name: Tensor.zeros(shape) for name, shape, _ in shapes}
    last = shapes[-1][0]
    params[last] = Tensor(np.full(shapes[-1][1], float(bias)))
    return Detector(spec, params, {})


def _check_image(detector: Detector, image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    s = detector.spec.input_side
    if arr.shape != (s, s, 3):
        raise DetectorError(f"{detector.name}: expected image shape {(s, s, 3)}, got {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise DetectorError(f"{detector.name}: pixel values must lie in [0, 1]")
    return arr


def score(detector: Detector, image) -> float:
    """Logit of one image; positive means "generated"."""
    arr = _check_image(detector, image)
    g = Graph()
    return detector.forward(g.constant(arr[None])).data[0].item()


def probability(detector: Detector, image) -> float:
    return float(stable_sigmoid(score(detector, image)))


def batch_logits(detector: Detector, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits for a stack of images (N, S, S, 3); uint8 input is scaled by 1/255.

    Chunked evaluation; values can differ from :func:`score` in the last ulp.
    """
    images = np.asarray(images)
    out = np.empty(len(images))
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        if chunk.dtype == np.uint8:
            chunk = chunk / 255.0
        g = Graph()
        out[start : start + len(chunk)] = detector.forward(g.constant(chunk)).data
    return out


def input_gradient(detector: Detector, image, target: int) -> Tensor:
    """Gradient of BCE(score(image), target) with respect to the pixels."""
    if target not in (0, 1):
        raise DetectorError("target must be 0 or 1")
    arr = _check_image(detector, image)
    g = Graph()
    x = g.leaf(arr[None])
    loss = ad.reshape(ad.bce_with_logit(detector.forward(x), target), ())
    return Tensor._wrap(ad.backward(g, loss, [x])[x.id].data[0].copy())


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DetectorError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise DetectorError("learning_rate must be >= 0 and momentum in [0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise DetectorError("validation_fraction must lie in (0, 1)")


_DEFAULT_TRAIN = {
    "PixelMLP": TrainConfig(epochs=20, learning_rate=0.02),
    "TinyCNN": TrainConfig(epochs=15, learning_rate=0.1),
    "PatchCNN": TrainConfig(epochs=20, learning_rate=0.05),
    "HighPassLinear": TrainConfig(epochs=15, learning_rate=0.1),
}


def default_train_config(kind: str, seed: int = 0, **overrides) -> TrainConfig:
    return replace(_DEFAULT_TRAIN[kind], seed=seed, **overrides)


def _split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(detector: Detector, data, cfg: TrainConfig, images: np.ndarray | None = None) -> Detector:
    """Mini-batch momentum SGD on the mean BCE loss.

    ``data`` is a DatasetManifest (images are loaded from disk unless the
    matching uint8 stack is passed as ``images``).
    """
    labels = data.labels if hasattr(data, "labels") else np.asarray(data)
    if len(np.unique(labels)) < 2:
        raise DetectorError("training data must contain both labels")
    if images is None:
        images = data.load_images(detector.spec.input_side)
    if len(images) != len(labels):
        raise DetectorError("images and labels differ in length")
    train_idx, val_idx = _split_indices(len(labels), cfg)
    if len(np.unique(labels[train_idx])) < 2:
        raise DetectorError("training split lost a class; lower validation_fraction")

    params = {k: v.numpy() for k, v in detector.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    losses = []
    for _ in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = _as_float(images[idx])
            g = Graph()
            nodes = {k: g.leaf(v) for k, v in params.items()}
            logits = detector.forward(g.constant(batch), nodes)
            loss = ad.mean(ad.bce_with_logit(logits, labels[idx].astype(np.float64)), 0)
            grads = ad.backward(g, loss, nodes.values())
            for k, node in nodes.items():
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grads[node.id].data
                params[k] = params[k] + velocity[k]
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)

    trained = Detector(detector.spec, {k: Tensor(v) for k, v in params.items()}, {})
    val_logits = batch_logits(trained, images[val_idx])
    pred = (val_logits >= 0).astype(np.int64)
    truth = labels[val_idx]
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    meta = {
        "seed": int(cfg.seed),
        "init_seed": detector.train_meta.get("seed"),
        "epochs": int(cfg.epochs),
        "learning_rate": float(cfg.learning_rate),
        "loss_history": [float(x) for x in losses],
        "val_accuracy": float(np.mean(pred == truth)),
        "val_f1": float(2 * tp / (2 * tp + fp + fn)) if tp else 0.0,
    }
    return Detector(trained.spec, trained.params, meta)


def _as_float(batch: np.ndarray) -> np.ndarray:
    return batch / 255.0 if batch.dtype == np.uint8 else np.asarray(batch, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoint format: MAGIC | version u8 | u32 json length | json | u32 count |
# per tensor: u16 name length, name, u8 ndim, u32 dims..., float64 LE data


def save_detector(detector: Detector) -> bytes:
    header = json.dumps(
        {"meta": detector.train_meta, "spec": detector.spec.to_dict()},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, bytes([FORMAT_VERSION]), struct.pack("<I", len(header)), header]
    names = [name for name, _, _ in _param_shapes(detector.spec)]
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        t = detector.params[name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", len(t.shape)) + struct.pack(f"<{len(t.shape)}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DetectorError(f"checkpoint truncated in section {section!r}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def load_detector(data: bytes) -> Detector:
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise DetectorError("checkpoint section 'magic': not an EVFG file")
    (version,) = r.unpack("<B", "version")
    if version != FORMAT_VERSION:
        raise DetectorError(f"checkpoint section 'version': unsupported version {version}")
    (n,) = r.unpack("<I", "header")
    try:
        header = json.loads(r.take(n, "header").decode("utf-8"))
        spec = DetectorSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DetectorError(f"checkpoint section 'header': {exc}") from exc
    expected = _param_shapes(spec)
    (count,) = r.unpack("<I", "params")
    if count != len(expected):
        raise DetectorError(f"checkpoint section 'params': expected {len(expected)} tensors, got {count}")
    params = {}
    for name, shape, _ in expected:
        section = f"params[{name}]"
        (ln,) = r.unpack("<H", section)
        got = r.take(ln, section).decode("utf-8", errors="replace")
        if got != name:
            raise DetectorError(f"checkpoint section {section!r}: found tensor {got!r}")
        (ndim,) = r.unpack("<B", section)
        dims = r.unpack(f"<{ndim}I", section)
        if tuple(dims) != shape:
            raise DetectorError(f"checkpoint section {section!r}: shape {dims} != {shape}")
        raw = r.take(8 * int(np.prod(shape)), section)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        try:
            params[name] = Tensor(arr)
        except ad.AutodiffError as exc:
            raise DetectorError(f"checkpoint section {section!r}: {exc}") from exc
    if r.pos != len(r.data):
        raise DetectorError("checkpoint section 'trailer': unexpected trailing bytes")
    return Detector(spec, params, header.get("meta", {}))
