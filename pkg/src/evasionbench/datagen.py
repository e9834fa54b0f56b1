"""Synthetic real/generated image corpus, 8-bit PNG storage and JSONL manifests.

Real images are smooth random fields (8x8 uniform noise per channel,
bilinearly upsampled) plus fine uniform noise. Each of the four fake
generators adds one planted fingerprint on top of the real image with the
same index:

* ``G1`` additive checkerboard with a 2-pixel period,
* ``G2`` additive horizontal sinusoid with a 4-pixel period,
* ``G3`` blend towards 8x8 block means (flattens fine detail, adds block edges),
* ``G4`` leakage of channel 0 into channel 2.

Every pixel is a deterministic function of ``(seed, index)``.
"""

from __future__ import annotations

import io
import json
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "GeneratorId",
    "FAKE_GENERATORS",
    "CorpusConfig",
    "ManifestRecord",
    "DatasetManifest",
    "ManifestError",
    "PngError",
    "gen_real",
    "gen_fake",
    "center_crop",
    "quantize8",
    "png_write",
    "png_read",
    "build_corpus",
    "build_raid",
]

MANIFEST_NAME = "manifest.jsonl"
RECORD_KEYS = ("id", "path", "label", "generator", "epsilon_k", "split", "seed")
COARSE = 8
BLOCK = 8


class GeneratorId(str, Enum):
    REAL = "REAL"
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    G4 = "G4"


FAKE_GENERATORS = (GeneratorId.G1, GeneratorId.G2, GeneratorId.G3, GeneratorId.G4)


class ManifestError(ValueError):
    pass


class PngError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    """Sizes, seed and fingerprint strengths of the synthetic corpus."""

    n_real: int = 2000
    n_fake_per_generator: int = 500
    n_test_real: int = 240
    n_test_fake_per_generator: int = 60
    side: int = 64
    seed: int = 0
    noise: float = 0.03
    amplitudes: Mapping[str, float] = field(
        default_factory=lambda: {"G1": 0.04, "G2": 0.04, "G3": 0.25, "G4": 0.25}
    )

    def __post_init__(self):
        for name in ("n_real", "n_fake_per_generator", "n_test_real", "n_test_fake_per_generator"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.side <= 0 or self.side % 4:
            raise ValueError(f"side must be a positive multiple of 4, got {self.side}")
        if not 0 <= self.noise <= 0.25:
            raise ValueError(f"noise must lie in [0, 0.25], got {self.noise}")
        amps = dict(self.amplitudes)
        if set(amps) != {g.value for g in FAKE_GENERATORS}:
            raise ValueError(f"amplitudes must be given for exactly G1..G4, got {sorted(amps)}")
        for g, a in amps.items():
            if not 0 < a <= 0.25:
                raise ValueError(f"amplitude for {g} must lie in (0, 0.25], got {a}")
        object.__setattr__(self, "amplitudes", amps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amplitudes"] = dict(sorted(self.amplitudes.items()))
        return d

    @property
    def test_offset(self) -> int:
        # first image index used by the test split; train indices stay below it
        return max(self.n_real, len(FAKE_GENERATORS) * self.n_fake_per_generator)


# ---------------------------------------------------------------------------
# pixel synthesis


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _upsample_bilinear(coarse: np.ndarray, side: int) -> np.ndarray:
    n = coarse.shape[0]
    pos = np.linspace(0.0, n - 1.0, side)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    t = (pos - i0)[:, None, None]
    rows = coarse[i0] * (1 - t) + coarse[i0 + 1] * t  # (side, n, C)
    t2 = (pos - i0)[None, :, None]
    return rows[:, i0] * (1 - t2) + rows[:, i0 + 1] * t2


def gen_real(cfg: CorpusConfig, index: int) -> np.ndarray:
    """Pseudo-natural image for ``index``, shape (side, side, 3), values in [0, 1]."""
    rng = _rng(cfg.seed, index)
    coarse = rng.uniform(0.0, 1.0, size=(COARSE, COARSE, 3))
    fine = rng.uniform(-cfg.noise, cfg.noise, size=(cfg.side, cfg.side, 3))
    return np.clip(_upsample_bilinear(coarse, cfg.side) + fine, 0.0, 1.0)


def _block_means(img: np.ndarray, block: int) -> np.ndarray:
    h, w, c = img.shape
    hb, wb = -(-h // block), -(-w // block)
    out = np.empty_like(img)
    for by in range(hb):
        for bx in range(wb):
            sl = (slice(by * block, (by + 1) * block), slice(bx * block, (bx + 1) * block))
            out[sl] = img[sl].mean(axis=(0, 1))
    return out


def apply_fingerprint(base: np.ndarray, generator: GeneratorId | str, amplitude: float) -> np.ndarray:
    gen = GeneratorId(generator)
    h, w, _ = base.shape
    if gen is GeneratorId.G1:
        yy, xx = np.indices((h, w))
        pattern = np.where((yy + xx) % 2 == 0, 1.0, -1.0)[:, :, None]
        out = base + amplitude * pattern
    elif gen is GeneratorId.G2:
        xx = np.arange(w)
        wave = np.sin(np.pi * xx / 2 + np.pi / 4)[None, :, None]
        out = base + amplitude * wave
    elif gen is GeneratorId.G3:
        out = (1.0 - amplitude) * base + amplitude * _block_means(base, BLOCK)
    elif gen is GeneratorId.G4:
        out = base.copy()
        out[:, :, 2] += amplitude * base[:, :, 0]
    else:
        raise ValueError("REAL has no fingerprint")
    return np.clip(out, 0.0, 1.0)


def gen_fake(cfg: CorpusConfig, generator: GeneratorId | str, index: int) -> np.ndarray:
    """Real image ``index`` with the fingerprint of ``generator`` planted on it."""
    gen = GeneratorId(generator)
    if gen is GeneratorId.REAL:
        raise ValueError("gen_fake needs a fake generator, got REAL")
    return apply_fingerprint(gen_real(cfg, index), gen, cfg.amplitudes[gen.value])


def center_crop(image: np.ndarray, side: int) -> np.ndarray:
    """Centered ``side`` x ``side`` window; odd margins lose their extra row/column at the bottom/right."""
    h, w = image.shape[:2]
    if side <= 0 or side > h or side > w:
        raise ValueError(f"cannot crop {h}x{w} image to {side}x{side}")
    top = (h - side) // 2
    left = (w - side) // 2
    return image[top : top + side, left : left + side]


# ---------------------------------------------------------------------------
# 8-bit storage


def _to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.size and (np.nanmin(arr) < 0 or np.nanmax(arr) > 1 or not np.isfinite(arr).all()):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def quantize8(image: np.ndarray) -> np.ndarray:
    """Round half up onto the 1/255 grid."""
    return _to_uint8(image) / 255.0


def png_write(image: np.ndarray) -> bytes:
    """Encode an (H, W, 3) image in [0, 1] as a non-interlaced 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(arr)).save(buf, format="PNG")
    return buf.getvalue()


def png_read(data: bytes) -> np.ndarray:
    """Decode PNG bytes to a float64 (H, W, 3) image on the 1/255 grid."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "PNG":
                raise PngError(f"not a PNG image (format {im.format})")
            im.load()
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except PngError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise PngError(f"malformed PNG: {exc}") from exc
    return arr / 255.0


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: int
    generator: str
    epsilon_k: int | None
    split: str
    seed: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"{self.id}: label must be 0 or 1")
        if self.generator not in GeneratorId._value2member_map_:
            raise ManifestError(f"{self.id}: unknown generator {self.generator!r}")
        if (self.generator == "REAL") != (self.label == 0):
            raise ManifestError(f"{self.id}: label {self.label} inconsistent with {self.generator}")
        if self.epsilon_k is not None and not (
            isinstance(self.epsilon_k, int) and 1 <= self.epsilon_k <= 255
        ):
            raise ManifestError(f"{self.id}: epsilon_k must be null or an int in 1..255")
        if self.split not in ("train", "test"):
            raise ManifestError(f"{self.id}: split must be train or test")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in RECORD_KEYS}, ensure_ascii=False)


class DatasetManifest:
    """Ordered image records; ``path`` fields are relative to ``root``."""

    def __init__(self, records: Iterable[ManifestRecord], root: str | os.PathLike = "."):
        self.records = list(records)
        self.root = Path(root)
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> ManifestRecord:
        return self.records[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.root)

    def filter(self, **match) -> "DatasetManifest":
        keep = [r for r in self.records if all(getattr(r, k) == v for k, v in match.items())]
        return DatasetManifest(keep, self.root)

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def read_bytes(self, record: ManifestRecord) -> bytes:
        return self.image_path(record).read_bytes()

    def load_image(self, record: ManifestRecord, side: int | None = None) -> np.ndarray:
        img = png_read(self.read_bytes(record))
        if side is not None and img.shape[:2] != (side, side):
            img = center_crop(img, side)
        return img

    def load_images(self, side: int | None = None) -> np.ndarray:
        """All images as one uint8 array (N, H, W, 3); divide by 255 for pixels."""
        out = []
        for r in self.records:
            out.append(_to_uint8(self.load_image(r, side)))
        if not out:
            return np.zeros((0, side or 0, side or 0, 3), dtype=np.uint8)
        return np.stack(out)

    def write(self, path: str | os.PathLike) -> Path:
        """Write JSONL at ``path``; record paths are re-expressed relative to its directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for r in self.records:
            rel = os.path.relpath(self.root / r.path, path.parent)
            lines.append(replace(r, path=Path(rel).as_posix()).to_json())
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != set(RECORD_KEYS):
                raise ManifestError(f"{path}:{lineno}: keys must be exactly {list(RECORD_KEYS)}")
            records.append(ManifestRecord(**obj))
        return cls(records, path.parent)


# ---------------------------------------------------------------------------
# corpus and adversarial dataset


def _write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_write(image))


def _split_plan(cfg: CorpusConfig, split: str):
    if split == "train":
        offset, n_real, n_fake = 0, cfg.n_real, cfg.n_fake_per_generator
    else:
        offset, n_real, n_fake = cfg.test_offset, cfg.n_test_real, cfg.n_test_fake_per_generator
    for j in range(n_real):
        yield GeneratorId.REAL, offset + j, j
    for g_pos, gen in enumerate(FAKE_GENERATORS):
        for j in range(n_fake):
            yield gen, offset + g_pos * n_fake + j, j


def build_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike) -> dict[str, DatasetManifest]:
    """Write ``corpus/{train,test}`` PNGs and manifests under ``out_dir``.

    Returns the train and test manifests keyed by split name.
    """
    corpus = Path(out_dir) / "corpus"
    manifests = {}
    for split in ("train", "test"):
        split_dir = corpus / split
        split_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for gen, index, j in _split_plan(cfg, split):
            if gen is GeneratorId.REAL:
                img = gen_real(cfg, index)
            else:
                img = gen_fake(cfg, gen, index)
            name = f"{gen.value.lower()}_{j:05d}.png"
            _write_png(split_dir / name, img)
            records.append(
                ManifestRecord(
                    id=f"{split}-{gen.value}-{j:05d}",
                    path=name,
                    label=0 if gen is GeneratorId.REAL else 1,
                    generator=gen.value,
                    epsilon_k=None,
                    split=split,
                    seed=cfg.seed,
                )
            )
        manifest = DatasetManifest(records, split_dir)
        manifest.write(split_dir / MANIFEST_NAME)
        manifests[split] = manifest
    return manifests


def build_raid(
    manifest: DatasetManifest,
    detectors,
    epsilon_ks: Sequence[int] = (8, 16, 32),
    out_dir: str | os.PathLike = "raid",
    *,
    steps: int = 10,
    step_size: float = 0.05,
    seed: int = 0,
    parallelism: int = 1,
    return_results: bool = False,
):
    """Attack every image of ``manifest`` against the full ensemble at each epsilon.

    Writes ``clean/``, ``eps{k}/`` (each with its own manifest) and a combined
    ``manifest.jsonl`` under ``out_dir``. Returns the combined manifest, plus
    the in-memory attack results per epsilon when ``return_results`` is set.
    """
    from .attack import AttackConfig, attack_dataset

    if not epsilon_ks:
        raise ValueError("at least one epsilon tier is required")
    out = Path(out_dir)
    clean_dir = out / "clean"
    clean_dir.mkdir(parents=True, exist_ok=True)
    clean_records = []
    for r in manifest:
        name = Path(r.path).name
        shutil.copyfile(manifest.image_path(r), clean_dir / name)
        clean_records.append(replace(r, path=name))
    clean = DatasetManifest(clean_records, clean_dir)
    clean.write(clean_dir / MANIFEST_NAME)

    combined = [replace(r, path=f"clean/{r.path}") for r in clean_records]
    results = {}
    for k in epsilon_ks:
        cfg = AttackConfig(eps_k=int(k), steps=steps, step_size=step_size, seed=seed)
        run = attack_dataset(clean, detectors, cfg, parallelism=parallelism)
        if run.failures:
            raise RuntimeError(
                f"eps{k}: {len(run.failures)} record(s) failed: "
                + "; ".join(f"{f.id}: {f.error}" for f in run.failures[:5])
            )
        tier_dir = out / f"eps{k}"
        tier_dir.mkdir(parents=True, exist_ok=True)
        tier_records = []
        for rec, res in zip(clean_records, run.results):
            name = Path(rec.path).name
            _write_png(tier_dir / name, res.adversarial)
            tier_records.append(
                replace(rec, id=f"{rec.id}-eps{k}", path=name, epsilon_k=int(k), seed=int(seed))
            )
        DatasetManifest(tier_records, tier_dir).write(tier_dir / MANIFEST_NAME)
        combined.extend(replace(r, path=f"eps{k}/{r.path}") for r in tier_records)
        if return_results:
            results[int(k)] = run.results
    combined_manifest = DatasetManifest(combined, out)
    combined_manifest.write(out / MANIFEST_NAME)
    if return_results:
        return combined_manifest, results
    return combined_manifest
