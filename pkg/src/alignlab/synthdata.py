"""Synthetic benchmark world: images with planted class-specific lesions,
exact expert masks, demographics, and a controllable spurious shortcut (a
corner marker correlated with positive+disadvantaged-subgroup in the training
distribution, decorrelated out-of-domain).

Also provides the randomized attention masks for the misalignment ablation
and a bit-exact dataset file format (manifest.json + payload.bin, CRC-32).
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DomainError

SEX_LABELS = ("female", "male")
AGE_LABELS = ("young", "old")
SPLIT_NAMES = ("train", "val", "test_id", "test_ood")
DATASET_FORMAT = "alignlab-dataset"
DATASET_VERSION = 1
MARKER_SIZE = 4  # marker patch is MARKER_SIZE x MARKER_SIZE at the top-left


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test_id: int = 1000
    n_test_ood: int = 2000
    image_size: int = 32
    classes: int = 3
    shortcut_strength: float = 0.8    # rho: marker vs (positive & disadvantaged)
    subgroup_mix: tuple = (0.25, 0.25, 0.25, 0.25)  # (f/young, f/old, m/young, m/old)
    label_prob: float = 0.4           # per-class positive prevalence
    marker_base_rate: float = 0.3     # marker rate when decoupled from the label
    noise_sigma: float = 0.08
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test_id", "n_test_ood"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.shortcut_strength <= 1.0:
            raise ConfigError("shortcut_strength must lie in [0, 1]")
        if len(self.subgroup_mix) != 4 or any(p <= 0 for p in self.subgroup_mix):
            raise ConfigError("subgroup_mix needs 4 positive cell prevalences")
        if abs(sum(self.subgroup_mix) - 1.0) > 1e-9:
            raise ConfigError("subgroup_mix must sum to 1")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16 to fit the lesion shapes")
        if not 1 <= self.classes <= 3:
            raise ConfigError("classes must be 1..3 (one per lesion signature)")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["subgroup_mix"] = list(self.subgroup_mix)
        return d


@dataclass
class Sample:
    """Per-sample view onto a SampleSet."""
    image: np.ndarray
    labels: np.ndarray
    sex: str
    age_group: str
    masks: dict
    align_eligible: bool


@dataclass
class SampleSet:
    images: np.ndarray          # (n, S, S) float64 in [0, 1]
    labels: np.ndarray          # (n, C) uint8
    sex: np.ndarray             # (n,) uint8 index into SEX_LABELS
    age: np.ndarray             # (n,) uint8 index into AGE_LABELS
    masks: np.ndarray           # (n, C, S, S) uint8; nonzero only for positives
    align_eligible: np.ndarray = field(default=None)  # (n,) uint8

    def __post_init__(self):
        if self.align_eligible is None:
            self.align_eligible = np.zeros(self.n, dtype=np.uint8)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def sample(self, i: int) -> Sample:
        masks = {c: self.masks[i, c] for c in range(self.n_classes)
                 if self.labels[i, c] == 1 and self.masks[i, c].any()}
        return Sample(image=self.images[i], labels=self.labels[i],
                      sex=SEX_LABELS[self.sex[i]], age_group=AGE_LABELS[self.age[i]],
                      masks=masks, align_eligible=bool(self.align_eligible[i]))

    def subset(self, indices) -> "SampleSet":
        idx = np.asarray(indices)
        return SampleSet(self.images[idx], self.labels[idx], self.sex[idx],
                         self.age[idx], self.masks[idx], self.align_eligible[idx])

    def group_labels(self, grouping: str) -> np.ndarray:
        if grouping == "sex":
            return np.asarray([SEX_LABELS[i] for i in self.sex])
        if grouping == "age_group":
            return np.asarray([AGE_LABELS[i] for i in self.age])
        raise ConfigError(f"unknown grouping {grouping!r} (use sex | age_group)")

    def __eq__(self, other):
        return (isinstance(other, SampleSet)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("images", "labels", "sex", "age", "masks",
                                  "align_eligible")))


def _paint_blob(image, mask, rng, s, contrast):
    """Class 0: compact bright blob at a random location (away from the
    marker corner); mask is the exact disk support."""
    r = 3
    cy = rng.integers(r + MARKER_SIZE, s - r)
    cx = rng.integers(r + MARKER_SIZE, s - r)
    yy, xx = np.mgrid[0:s, 0:s]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    support = d2 <= r * r
    image[support] += contrast * 0.36 * np.exp(-d2[support] / (2 * 1.5 ** 2))
    mask[support] = 1


def _paint_texture_band(image, mask, rng, s, contrast):
    """Class 1: high-frequency vertical stripes in a band in the lower third."""
    band_h = 4
    top = rng.integers(2 * s // 3, s - band_h + 1)
    left = rng.integers(0, s // 2)
    width = min(int(rng.integers(s // 4, s // 2 + 1)), s - left)
    cols = np.arange(left, left + width)
    stripe = contrast * 0.145 * np.where(cols % 2 == 0, 1.0, -1.0)
    image[top:top + band_h, left:left + width] += stripe
    mask[top:top + band_h, left:left + width] = 1


def _paint_haze(image, mask, rng, s, contrast):
    """Class 2: diffuse low-contrast elliptical haze."""
    ry = rng.uniform(5.0, 7.0)
    rx = rng.uniform(6.0, 9.0)
    cy = rng.uniform(ry + MARKER_SIZE, s - 1 - ry)
    cx = rng.uniform(rx + MARKER_SIZE, s - 1 - rx)
    yy, xx = np.mgrid[0:s, 0:s]
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    image[inside] += contrast * 0.11
    mask[inside] = 1

_LESION_PAINTERS = (_paint_blob, _paint_texture_band, _paint_haze)

# Lesion contrast multipliers per demographic cell: the disadvantaged
# subgroup's lesions present weaker, so a model has more to gain from the
# shortcut there (presentation disparity). Indexed [sex][age].
SEX_CONTRAST = (0.35, 1.0)   # female, male
AGE_CONTRAST = (1.0, 0.85)   # young, old


def _generate_split(cfg: GeneratorConfig, n: int, rng: np.random.Generator,
                    ood: bool) -> SampleSet:
    s = cfg.image_size
    c = cfg.classes
    images = np.empty((n, s, s), dtype=np.float64)
    labels = np.empty((n, c), dtype=np.uint8)
    sex = np.empty(n, dtype=np.uint8)
    age = np.empty(n, dtype=np.uint8)
    masks = np.zeros((n, c, s, s), dtype=np.uint8)
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]  # (sex, age) index pairs
    for i in range(n):
        cell = cells[rng.choice(4, p=np.asarray(cfg.subgroup_mix))]
        sex[i], age[i] = cell
        labels[i] = rng.random(c) < cfg.label_prob
        img = 0.35 + rng.normal(0.0, cfg.noise_sigma, size=(s, s))
        contrast = SEX_CONTRAST[sex[i]] * AGE_CONTRAST[age[i]]
        for k in range(c):
            if labels[i, k]:
                _LESION_PAINTERS[k](img, masks[i, k], rng, s, contrast)
        # shortcut marker: correlated with (any positive & female) in-domain,
        # label/subgroup-independent out-of-domain
        shortcut_target = bool(labels[i].any()) and sex[i] == 0
        if not ood and rng.random() < cfg.shortcut_strength:
            marker = shortcut_target
        else:
            marker = rng.random() < cfg.marker_base_rate
        if marker:
            img[:MARKER_SIZE, :MARKER_SIZE] = 1.0
        images[i] = np.clip(img, 0.0, 1.0)
    return SampleSet(images, labels, sex, age, masks)


def generate(cfg: GeneratorConfig) -> dict[str, SampleSet]:
    """Deterministic four-split dataset; same config gives bit-identical sets."""
    sizes = {"train": cfg.n_train, "val": cfg.n_val,
             "test_id": cfg.n_test_id, "test_ood": cfg.n_test_ood}
    out = {}
    for idx, name in enumerate(SPLIT_NAMES):
        rng = np.random.default_rng([cfg.seed, idx])
        out[name] = _generate_split(cfg, sizes[name], rng, ood=(name == "test_ood"))
    return out


def random_attention(seed: int, epoch: int, grid: tuple[int, int]) -> np.ndarray:
    """One random binary shape (ellipse or rectangle, equal probability) with
    area between 5% and 40% of the grid, fully inside bounds. Deterministic
    per (seed, epoch); independent across pairs."""
    rows, cols = grid
    if rows < 2 or cols < 2:
        raise ConfigError(f"random_attention: grid {grid} too small")
    n = rows * cols
    area_lo = int(np.ceil(0.05 * n))
    area_hi = int(np.floor(0.40 * n))
    if area_hi < 1 or area_lo > area_hi:
        raise ConfigError(f"random_attention: no feasible area for grid {grid}")
    rng = np.random.default_rng([0xA77E, seed, epoch, rows, cols])
    for _ in range(1000):
        mask = np.zeros((rows, cols), dtype=np.uint8)
        if rng.random() < 0.5:
            h = int(rng.integers(1, rows + 1))
            w = int(rng.integers(1, cols + 1))
            top = int(rng.integers(0, rows - h + 1))
            left = int(rng.integers(0, cols - w + 1))
            mask[top:top + h, left:left + w] = 1
        else:
            ry = rng.uniform(0.5, rows / 2.0)
            rx = rng.uniform(0.5, cols / 2.0)
            cy = rng.uniform(ry, rows - 1 - ry) if rows - 1 - ry > ry else (rows - 1) / 2.0
            cx = rng.uniform(rx, cols - 1 - rx) if cols - 1 - rx > rx else (cols - 1) / 2.0
            yy, xx = np.mgrid[0:rows, 0:cols]
            mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1
        area = int(mask.sum())
        if area_lo <= area <= area_hi:
            return mask
    raise ConfigError(f"random_attention: could not fit a shape in grid {grid}")


def maxpool_mask(mask: np.ndarray, grid_side: int) -> np.ndarray:
    """Downsample a pixel-resolution binary mask to the attention grid by
    max-pooling."""
    mask = np.asarray(mask)
    s = mask.shape[0]
    if mask.shape != (s, s) or s % grid_side != 0:
        raise DomainError(f"maxpool_mask: mask {mask.shape} not divisible into {grid_side}x{grid_side}")
    p = s // grid_side
    return mask.reshape(grid_side, p, grid_side, p).max(axis=(1, 3))


# ---------------------------------------------------------------------------
# Dataset file format: manifest.json + payload.bin

_SECTIONS = (
    ("images", "<f8"),
    ("labels", "u1"),
    ("sex", "u1"),
    ("age", "u1"),
    ("masks", "u1"),
    ("align_eligible", "u1"),
)


def write_dataset(splits: dict[str, SampleSet], path,
                  generator_config: GeneratorConfig | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    manifest_splits = {}
    for name in sorted(splits):
        ss = splits[name]
        sections = {}
        for sec, dtype in _SECTIONS:
            arr = np.ascontiguousarray(getattr(ss, sec), dtype=dtype)
            raw = arr.tobytes()
            sections[sec] = {"offset": len(payload), "bytes": len(raw),
                             "dtype": dtype, "shape": list(arr.shape)}
            payload.extend(raw)
        manifest_splits[name] = {"n": ss.n, "sections": sections}
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(bytes(payload)),
        "class_names": ["blob", "texture_band", "haze"][: next(iter(splits.values())).n_classes],
        "demographics": {"sex": list(SEX_LABELS), "age_group": list(AGE_LABELS)},
        "generator_config": generator_config.to_dict() if generator_config else None,
        "splits": manifest_splits,
    }
    (path / "payload.bin").write_bytes(bytes(payload))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_dataset(path) -> dict[str, SampleSet]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed manifest.json: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"not an {DATASET_FORMAT} manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise DataFormatError(
            f"unsupported dataset version {manifest.get('version')!r}, "
            f"expected {DATASET_VERSION}")
    try:
        payload = (path / "payload.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing payload.bin in {path}") from exc
    if len(payload) != manifest["payload_bytes"]:
        raise DataFormatError(
            f"payload truncated at byte {len(payload)}, expected {manifest['payload_bytes']}")
    if zlib.crc32(payload) != manifest["crc32"]:
        raise DataFormatError("payload checksum mismatch (CRC-32)")
    splits = {}
    for name, meta in manifest["splits"].items():
        arrays = {}
        for sec, dtype in _SECTIONS:
            info = meta["sections"][sec]
            if info["dtype"] != dtype:
                raise DataFormatError(f"section {sec}: unexpected dtype {info['dtype']}")
            start, nbytes = info["offset"], info["bytes"]
            if start + nbytes > len(payload):
                raise DataFormatError(f"section {sec} overruns payload at byte {start}")
            arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype)
            arrays[sec] = arr.reshape(info["shape"]).copy()
        arrays["images"] = arrays["images"].astype(np.float64)
        splits[name] = SampleSet(**arrays)
    return splits
