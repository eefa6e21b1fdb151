"""Dataset ingestion, preprocessing/augmentation, identity-balanced batch
sampling, synthetic striped-person generation and occlusion synthesis.

All randomness is injected through numpy Generators so a fixed seed gives
bit-identical pipelines.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PKBatchSpec, PreprocessConfig, SyntheticSpec

FILENAME_RE = re.compile(r"^(?P<identity>\d+)_c(?P<camera>\d+)_.*\.(?:jpg|png)$")


class DatasetError(ValueError):
    """Unreadable dataset directory or malformed sample files."""


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W, 3) uint8 RGB
    identity: int
    camera: int
    visible_fraction: float = 1.0
    visible_anchor: str = "top"  # which end of the body is visible

    def __post_init__(self):
        if not (0.0 < self.visible_fraction <= 1.0):
            raise DatasetError(f"visible_fraction={self.visible_fraction} outside (0, 1]")
        if self.identity < 0:
            raise DatasetError(f"identity={self.identity} must be nonnegative")
        if self.visible_anchor not in ("top", "bottom"):
            raise DatasetError(f"visible_anchor={self.visible_anchor!r} not in (top, bottom)")


def parse_sample_filename(name: str) -> tuple[int, int]:
    m = FILENAME_RE.match(name)
    if m is None:
        raise DatasetError(f"filename {name!r} does not match '<personID>_c<cameraID>_*.jpg|png'")
    return int(m.group("identity")), int(m.group("camera"))


def load_directory(path: str | Path) -> list[LabeledSample]:
    """Load every `<personID>_c<cameraID>_*.{jpg,png}` file under `path`,
    ordered by filename."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"dataset directory not found: {path}")
    names = sorted(p.name for p in path.iterdir() if p.is_file())
    names = [n for n in names if not n.startswith(".") and not n.endswith(".json")]
    if not names:
        raise DatasetError(f"dataset directory is empty: {path}")
    bad = [n for n in names if FILENAME_RE.match(n) is None]
    if bad:
        raise DatasetError(f"{path}: unparsable filenames: {', '.join(bad)}")
    samples = []
    for name in names:
        identity, camera = parse_sample_filename(name)
        with Image.open(path / name) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.uint8)
        samples.append(LabeledSample(array, identity, camera))
    return samples


def write_dataset(samples: list[LabeledSample], path: str | Path) -> list[str]:
    """Write samples as PNGs in the layout load_directory expects.  Returns
    the filenames, in write order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    seq: dict[tuple[int, int], int] = {}
    names = []
    for s in samples:
        key = (s.identity, s.camera)
        seq[key] = seq.get(key, 0) + 1
        name = f"{s.identity:04d}_c{s.camera}_{seq[key]:06d}.png"
        Image.fromarray(s.image).save(path / name)
        names.append(name)
    return names


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> list[LabeledSample]:
    """Striped stand-ins for person images: each identity is a fixed color
    per horizontal body band, with per-image brightness jitter, a small
    horizontal shift and pixel noise on top.

    Band colors are drawn independently per identity and per band.  That
    keeps every band discriminative on its own, which mirrors what part
    alignment needs from real person crops: the content of a stripe, not
    its height, is what identifies the person.
    """
    band_h = spec.height // spec.num_bands
    samples = []
    for i in range(spec.num_identities):
        identity = spec.id_start + i
        colors = rng.integers(30, 226, size=(spec.num_bands, 3)).astype(np.float64)
        base = np.zeros((spec.height, spec.width, 3), dtype=np.float64)
        for b in range(spec.num_bands):
            base[b * band_h : (b + 1) * band_h, :, :] = colors[b]
        for j in range(spec.images_per_identity):
            img = base.copy()
            if spec.brightness_jitter > 0:
                img *= rng.uniform(1 - spec.brightness_jitter, 1 + spec.brightness_jitter)
            if spec.max_shift > 0:
                shift = int(rng.integers(-spec.max_shift, spec.max_shift + 1))
                img = np.roll(img, shift, axis=1)
            if spec.noise_sigma > 0:
                img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
            camera = 1 + j % spec.num_cameras
            samples.append(
                LabeledSample(np.clip(img, 0, 255).astype(np.uint8), identity, camera)
            )
    return samples


def dataset_manifest(samples: list[LabeledSample], names: list[str], spec: SyntheticSpec) -> dict:
    """Deterministic manifest: spec echo plus per-file labels and pixel hashes."""
    from dataclasses import asdict

    files = [
        {
            "name": name,
            "identity": s.identity,
            "camera": s.camera,
            "pixel_sha256": hashlib.sha256(s.image.tobytes()).hexdigest(),
        }
        for name, s in zip(names, samples)
    ]
    return {"schema": 1, "spec": asdict(spec), "num_files": len(files), "files": files}


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def occlude(
    sample: LabeledSample,
    fraction: float,
    anchor: str = "top",
    mode: str = "rescale",
    fill: int = 128,
) -> LabeledSample:
    """Simulate a partially visible person: keep the top (or bottom)
    `fraction` of rows.

    mode="rescale" stretches the kept region back to full size, the way a
    fixed-size pipeline receives a resized partial crop.  mode="pad" keeps
    the visible rows in place and fills the hidden rows with a flat color,
    which preserves the row-to-body correspondence that stripe-indexed
    matching relies on.
    """
    if not (0.0 < fraction <= 1.0):
        raise DatasetError(f"fraction={fraction} outside (0, 1]")
    if anchor not in ("top", "bottom"):
        raise DatasetError(f"anchor={anchor!r} not in (top, bottom)")
    if mode not in ("rescale", "pad"):
        raise DatasetError(f"mode={mode!r} not in (rescale, pad)")
    h, w = sample.image.shape[:2]
    if fraction == 1.0:
        return replace(sample, visible_fraction=1.0, visible_anchor=anchor)
    kept = max(1, round(fraction * h))
    if mode == "pad":
        padded = np.full_like(sample.image, fill)
        if anchor == "top":
            padded[:kept] = sample.image[:kept]
        else:
            padded[h - kept :] = sample.image[h - kept :]
        return replace(sample, image=padded, visible_fraction=fraction, visible_anchor=anchor)
    region = sample.image[:kept] if anchor == "top" else sample.image[h - kept :]
    rescaled = np.asarray(
        Image.fromarray(region).resize((w, h), Image.BILINEAR), dtype=np.uint8
    )
    return replace(sample, image=rescaled, visible_fraction=fraction, visible_anchor=anchor)


def _resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR), dtype=np.uint8)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror an (H, W, 3) image left-right."""
    return image[:, ::-1]


def _standardize(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    arr = image.astype(np.float32) / 255.0
    arr = (arr - np.asarray(cfg.mean, dtype=np.float32)) / np.asarray(cfg.std, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))  # (3, H, W)


def preprocess_train(image: np.ndarray, cfg: PreprocessConfig, rng: np.random.Generator) -> np.ndarray:
    """Resize, random-crop, random horizontal flip, standardize.

    Returns a float32 (3, crop_h, crop_w) array.  Crop offsets and the flip
    coin all come from `rng`.
    """
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < 2:
        raise DatasetError(f"expected an (H, W, 3) image with H, W >= 2, got shape {image.shape}")
    resized = _resize(image, cfg.resize_height, cfg.resize_width)
    top = int(rng.integers(0, cfg.resize_height - cfg.crop_height + 1))
    left = int(rng.integers(0, cfg.resize_width - cfg.crop_width + 1))
    crop = resized[top : top + cfg.crop_height, left : left + cfg.crop_width]
    if rng.random() < cfg.flip_prob:
        crop = hflip(crop)
    return _standardize(crop, cfg)


def preprocess_eval(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Deterministic variant: resize straight to the crop size, no flip."""
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < 2:
        raise DatasetError(f"expected an (H, W, 3) image with H, W >= 2, got shape {image.shape}")
    resized = _resize(image, cfg.crop_height, cfg.crop_width)
    return _standardize(resized, cfg)


def compute_channel_stats(samples: list[LabeledSample]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean/std over all pixels of a dataset, on the 0..1 scale."""
    if not samples:
        raise DatasetError("cannot compute statistics of an empty dataset")
    acc = np.zeros(3)
    acc_sq = np.zeros(3)
    count = 0
    for s in samples:
        arr = s.image.astype(np.float64) / 255.0
        acc += arr.sum(axis=(0, 1))
        acc_sq += (arr**2).sum(axis=(0, 1))
        count += arr.shape[0] * arr.shape[1]
    mean = acc / count
    var = np.maximum(acc_sq / count - mean**2, 1e-8)
    return tuple(mean.tolist()), tuple(np.sqrt(var).tolist())


def identities_of(samples: list[LabeledSample]) -> dict[int, list[int]]:
    by_id: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_id.setdefault(s.identity, []).append(i)
    return by_id


def sample_pk(
    samples: list[LabeledSample], spec: PKBatchSpec, rng: np.random.Generator
) -> list[int]:
    """Draw a P*K batch of sample indices: P distinct identities, K images
    each (with replacement only when an identity has fewer than K images)."""
    by_id = identities_of(samples)
    ids = sorted(by_id)
    if len(ids) < spec.P:
        raise DatasetError(f"need at least P={spec.P} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=spec.P, replace=False)
    batch: list[int] = []
    for idx in chosen:
        pool = by_id[ids[int(idx)]]
        if len(pool) >= spec.K:
            picks = rng.choice(len(pool), size=spec.K, replace=False)
        else:
            picks = rng.integers(0, len(pool), size=spec.K)
        batch.extend(pool[int(p)] for p in picks)
    return batch


def relabel_contiguous(samples: list[LabeledSample]) -> tuple[list[LabeledSample], dict[int, int]]:
    """Map raw identity labels onto 0..n-1 (classifier label space)."""
    ids = sorted({s.identity for s in samples})
    mapping = {identity: i for i, identity in enumerate(ids)}
    return [replace(s, identity=mapping[s.identity]) for s in samples], mapping


def merge_label_spaces(datasets: list[list[LabeledSample]]) -> tuple[list[LabeledSample], dict[tuple[int, int], int]]:
    """Join several datasets into one contiguous label space.

    Identities are kept distinct across source datasets even when their raw
    labels collide; the mapping keys are (dataset_index, raw_identity).
    """
    mapping: dict[tuple[int, int], int] = {}
    merged: list[LabeledSample] = []
    for d_idx, ds in enumerate(datasets):
        for raw in sorted({s.identity for s in ds}):
            mapping[(d_idx, raw)] = len(mapping)
        merged.extend(replace(s, identity=mapping[(d_idx, s.identity)]) for s in ds)
    return merged, mapping
