"""Dataset ingestion, 12-view multi-crop augmentation, balanced
modality-specialty batch sampling, and a synthetic multi-modality corpus
generator for desk-scale runs.

Augmentation streams are seeded per (run seed, sample, epoch), so any degree
of worker parallelism reproduces the sequential order bit for bit. Images are
decoded to float32 in [0, 1] (grayscale replicated to 3 channels so one
augmentation path serves every modality) and standardized per channel at the
end of the view pipeline.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import backend as K
from .errors import ConfigError, DataError, ManifestError
from .seeding import derive_seed, derived_rng

KNOWN_MODALITIES = ("CXR", "CT", "US", "CFP", "OCT", "PATH", "DERM")
_SYNTH_TAG = re.compile(r"^SYN\d+$")
MANIFEST_HEADER = ["path", "modality", "specialty", "label", "split"]
SPLITS = ("train", "val", "test")


def is_valid_modality(tag: str) -> bool:
    return tag in KNOWN_MODALITIES or bool(_SYNTH_TAG.match(tag))


@dataclass(frozen=True)
class SampleRecord:
    path: str
    modality: str
    specialty: str
    label: int | None
    split: str


@dataclass(frozen=True)
class AugmentConfig:
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # asymmetric per-slot probabilities, following the multi-crop convention:
    # first global view always blurred, second rarely blurred but sometimes
    # solarized, locals blurred half the time
    blur_prob_global1: float = 1.0
    blur_prob_global2: float = 0.1
    blur_prob_local: float = 0.5
    solarize_prob_global2: float = 0.2
    solarize_threshold: float = 0.5
    norm_mean: float = 0.5
    norm_std: float = 0.25

    def __post_init__(self):
        for name in (
            "hflip_prob",
            "jitter_prob",
            "blur_prob_global1",
            "blur_prob_global2",
            "blur_prob_local",
            "solarize_prob_global2",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigError(f"{name} must be a range within (0, 1], got ({lo}, {hi})")
        if self.norm_std <= 0:
            raise ConfigError(f"norm_std must be positive, got {self.norm_std}")


@dataclass
class ViewSet:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    source_id: str
    rng_seed: int

    def __post_init__(self):
        if len(self.global_views) != 2 or len(self.local_views) != 10:
            raise ValueError(
                f"a ViewSet holds exactly 2 global and 10 local views, got "
                f"{len(self.global_views)}/{len(self.local_views)}"
            )

    @property
    def all_views(self) -> list[np.ndarray]:
        return self.global_views + self.local_views


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse a manifest CSV into records, in file order; every problem is an
    error naming the offending line."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: list[SampleRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header {header} != {MANIFEST_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            rel, modality, specialty, label_s, split = (f.strip() for f in row)
            if not is_valid_modality(modality):
                raise ManifestError(f"{path}:{lineno}: unknown modality tag {modality!r}")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if label_s == "":
                label = None
            else:
                try:
                    label = int(label_s)
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: label {label_s!r} is not an integer") from None
                if label < 0:
                    raise ManifestError(f"{path}:{lineno}: label {label} out of range (must be >= 0)")
            img_path = (path.parent / rel).resolve()
            if not img_path.exists():
                raise ManifestError(f"{path}:{lineno}: image not found: {img_path}")
            records.append(SampleRecord(str(img_path), modality, specialty, label, split))
    return records


def write_manifest(path: str | Path, rows: list[tuple[str, str, str, str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PNG to float32 (H, W, 3) in [0, 1]; grayscale inputs
    are replicated across channels."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


class ImageStore:
    """Small in-memory decode cache; desk corpora fit comfortably in RAM."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            arr = load_image(path)
            self._cache[path] = arr
        return arr


# ---------------------------------------------------------------------------
# augmentation


def _sample_crop(rng, h, w, scale, ratio):
    """RandomResizedCrop box: area fraction from `scale`, aspect log-uniform
    from `ratio`; falls back to a centered max-area box after 10 attempts."""
    for _ in range(10):
        area = h * w * rng.uniform(scale[0], scale[1])
        log_r = rng.uniform(math.log(ratio[0]), math.log(ratio[1]))
        r = math.exp(log_r)
        cw = int(round(math.sqrt(area * r)))
        ch = int(round(math.sqrt(area / r)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = int(round(min(h, w) * math.sqrt(scale[1])))
    side = max(1, min(side, h, w))
    return (h - side) // 2, (w - side) // 2, side, side


def _rgb_to_hsv(x):
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    maxc = x.max(axis=-1)
    minc = x.min(axis=-1)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(spread, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(x):
    h, s, v = x[..., 0], x[..., 1], x[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros_like(choices[0])
    for k in range(6):
        out[i == k] = choices[k][i == k]
    return out


def _color_jitter(img, rng, cfg: AugmentConfig):
    # fixed order: brightness, contrast, saturation, hue; clipped after each
    f = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    img = np.clip(img * f, 0.0, 1.0)
    f = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    mean = img.mean()
    img = np.clip(mean + (img - mean) * f, 0.0, 1.0)
    f = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
    gray = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])[..., None]
    img = np.clip(gray + (img - gray) * f, 0.0, 1.0)
    if cfg.hue > 0:
        shift = rng.uniform(-cfg.hue, cfg.hue)
        hsv = _rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        img = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return img.astype(np.float32)


def _augment_one(img, rng, cfg: AugmentConfig, out_px, scale, blur_prob, solarize_prob):
    h, w = img.shape[:2]
    top, left, ch, cw = _sample_crop(rng, h, w, scale, cfg.crop_ratio)
    view = img[top : top + ch, left : left + cw]
    view = K.bilinear_resize(np.ascontiguousarray(view), out_px, out_px)
    if rng.random() < cfg.hflip_prob:
        view = view[:, ::-1].copy()
    if rng.random() < cfg.jitter_prob:
        view = _color_jitter(view, rng, cfg)
    if rng.random() < blur_prob:
        sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1])
        view = gaussian_filter(view, sigma=(sigma, sigma, 0.0), mode="reflect").astype(np.float32)
    if solarize_prob > 0 and rng.random() < solarize_prob:
        view = np.where(view >= cfg.solarize_threshold, 1.0 - view, view).astype(np.float32)
    view = np.clip(view, 0.0, 1.0)
    return ((view - cfg.norm_mean) / cfg.norm_std).astype(np.float32)


def generate_views(
    image: np.ndarray,
    config: AugmentConfig,
    seed: int,
    global_px: int,
    local_px: int,
    source_id: str = "",
) -> ViewSet:
    """Produce 2 global + 10 local augmented views, fully determined by
    (image, config, seed). Slot order and per-slot draw order are fixed."""
    h, w = image.shape[:2]
    if min(h, w) < local_px:
        raise DataError(f"image {h}x{w} smaller than the local view size {local_px}")
    rng = np.random.Generator(np.random.PCG64(seed))
    globals_ = [
        _augment_one(image, rng, config, global_px, config.global_scale, config.blur_prob_global1, 0.0),
        _augment_one(
            image,
            rng,
            config,
            global_px,
            config.global_scale,
            config.blur_prob_global2,
            config.solarize_prob_global2,
        ),
    ]
    locals_ = [
        _augment_one(image, rng, config, local_px, config.local_scale, config.blur_prob_local, 0.0)
        for _ in range(10)
    ]
    return ViewSet(globals_, locals_, source_id, seed)


def view_seed(run_seed: int, sample_index: int, epoch: int) -> int:
    return derive_seed(run_seed, f"views:{epoch}", sample_index)


# ---------------------------------------------------------------------------
# balanced batches


class BalancedSampler:
    """Exact per-batch modality balance: every batch holds batch_size/m
    records of each modality, drawn without replacement per modality and
    reshuffled on exhaustion. State is (cycle, position) per modality, so a
    resumed run continues the identical sequence."""

    def __init__(
        self,
        records: list[SampleRecord],
        batch_size: int,
        seed: int,
        modalities: list[str] | None = None,
    ):
        groups: dict[str, list[SampleRecord]] = {}
        for rec in records:
            groups.setdefault(rec.modality, []).append(rec)
        self.modalities = sorted(groups) if modalities is None else list(modalities)
        for tag in self.modalities:
            if tag not in groups:
                raise ConfigError(f"no records for modality {tag!r}")
        m = len(self.modalities)
        if m == 0:
            raise ConfigError("no modalities to sample from")
        if batch_size % m:
            raise ConfigError(f"batch_size {batch_size} not divisible by {m} modalities")
        self.per_modality = batch_size // m
        self.batch_size = batch_size
        self.seed = seed
        self._groups = {tag: groups[tag] for tag in self.modalities}
        for tag, rows in self._groups.items():
            if len(rows) < self.per_modality:
                raise ConfigError(
                    f"modality {tag!r} has {len(rows)} records, fewer than "
                    f"{self.per_modality} needed per batch"
                )
        self._cycle = {tag: 0 for tag in self.modalities}
        self._pos = {tag: 0 for tag in self.modalities}
        self._perm = {tag: self._permutation(tag, 0) for tag in self.modalities}

    def _permutation(self, tag: str, cycle: int) -> np.ndarray:
        return derived_rng(self.seed, f"sampler:{tag}", cycle).permutation(len(self._groups[tag]))

    def batches_per_epoch(self) -> int:
        return max(
            math.ceil(len(rows) / self.per_modality) for rows in self._groups.values()
        )

    def next_batch(self) -> list[SampleRecord]:
        batch: list[SampleRecord] = []
        for tag in self.modalities:
            rows = self._groups[tag]
            taken = 0
            while taken < self.per_modality:
                if self._pos[tag] == len(rows):
                    self._cycle[tag] += 1
                    self._pos[tag] = 0
                    self._perm[tag] = self._permutation(tag, self._cycle[tag])
                idx = self._perm[tag][self._pos[tag]]
                self._pos[tag] += 1
                batch.append(rows[idx])
                taken += 1
        return batch

    def state(self) -> dict[str, tuple[int, int]]:
        return {tag: (self._cycle[tag], self._pos[tag]) for tag in self.modalities}

    def restore_state(self, state: dict[str, tuple[int, int]]) -> None:
        if set(state) != set(self.modalities):
            raise ConfigError(f"sampler state modalities {sorted(state)} != {self.modalities}")
        for tag, (cycle, pos) in state.items():
            self._cycle[tag] = int(cycle)
            self._pos[tag] = int(pos)
            self._perm[tag] = self._permutation(tag, int(cycle))


def balanced_batch_iter(
    records: list[SampleRecord],
    batch_size: int,
    seed: int,
    n_batches: int | None = None,
):
    """One epoch (or n_batches) of exactly balanced batches."""
    sampler = BalancedSampler(records, batch_size, seed)
    total = sampler.batches_per_epoch() if n_batches is None else n_batches
    for _ in range(total):
        yield sampler.next_batch()


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CorpusSpec:
    n_modalities: int = 3
    n_classes: int = 4
    samples_per_class: int = 50
    image_px: int = 64

    def __post_init__(self):
        if min(self.n_modalities, self.n_classes, self.samples_per_class, self.image_px) < 1:
            raise ConfigError("all corpus spec counts must be >= 1")


def _background(modality: int, rng, px: int) -> np.ndarray:
    yy, xx = np.mgrid[0:px, 0:px].astype(np.float64)
    family = modality % 3
    if family == 0:
        freq = 2.0 + 2.0 * rng.random()
        angle = rng.random() * math.pi
        phase = rng.random() * 2 * math.pi
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) / px + phase)
        bg = 0.5 * (wave + 1.0)
    elif family == 1:
        noise = rng.normal(size=(px, px))
        bg = gaussian_filter(noise, sigma=px / 10.0, mode="reflect")
        lo, hi = bg.min(), bg.max()
        bg = (bg - lo) / max(hi - lo, 1e-9)
    else:
        tile = max(2, px // 8 + int(rng.integers(-1, 2)))
        ox, oy = rng.integers(0, tile, size=2)
        bg = (((xx + ox) // tile + (yy + oy) // tile) % 2).astype(np.float64)
        bg = gaussian_filter(bg, sigma=1.0, mode="reflect")
    return bg


def _shape_score(cls: int, rng, px: int) -> np.ndarray:
    """Signed-distance-like field for the class shape; smaller means more
    inside. Shapes are position- and size-jittered."""
    yy, xx = np.mgrid[0:px, 0:px].astype(np.float64)
    jitter = px / 6.0
    cx = px / 2.0 + rng.uniform(-jitter, jitter)
    cy = px / 2.0 + rng.uniform(-jitter, jitter)
    r = px * 0.18 * (1.0 + rng.uniform(-0.15, 0.15))
    dx = xx - cx
    dy = yy - cy
    kind = cls % 4
    if kind == 0:  # filled disk
        return np.hypot(dx, dy) - r
    if kind == 1:  # annulus
        return np.abs(np.hypot(dx, dy) - r) - 0.35 * r
    if kind == 2:  # plus cross
        arm = 0.40 * r
        horiz = np.maximum(np.abs(dx) - 1.4 * r, np.abs(dy) - arm)
        vert = np.maximum(np.abs(dx) - arm, np.abs(dy) - 1.4 * r)
        return np.minimum(horiz, vert)
    # diamond outline
    return np.abs((np.abs(dx) + np.abs(dy)) - 1.2 * r) - 0.35 * r


def render_synthetic_image(modality: int, cls: int, rng, px: int) -> np.ndarray:
    """One grayscale uint8 image: modality picks the texture family, class
    the foreground shape. Every class mask covers exactly the same pixel
    count, so class identity is structural, not a brightness cue."""
    bg = _background(modality, rng, px)
    img = 0.32 + 0.30 * bg
    score = _shape_score(cls, rng, px)
    area = int(round(0.06 * px * px))
    flat = np.argpartition(score.reshape(-1), area)[:area]
    img_flat = img.reshape(-1)
    img_flat[flat] += 0.38
    img = np.clip(img_flat.reshape(px, px), 0.02, 0.98)
    return np.round(img * 255.0).astype(np.uint8)


def generate_synthetic_corpus(spec: CorpusSpec, seed: int, out_dir: str | Path) -> Path:
    """Render the corpus and its manifest under out_dir; returns the manifest
    path. Fully deterministic from (spec, seed). Splits are per-class
    round-robin: 70% train, 10% val, 20% test."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    index = 0
    for mi in range(spec.n_modalities):
        for ci in range(spec.n_classes):
            for si in range(spec.samples_per_class):
                rng = derived_rng(seed, "synth", index)
                img = render_synthetic_image(mi, ci, rng, spec.image_px)
                name = f"m{mi}_c{ci}_{si:04d}.png"
                Image.fromarray(img, mode="L").save(img_dir / name)
                pos = si % 10
                split = "train" if pos < 7 else ("val" if pos == 7 else "test")
                rows.append((f"images/{name}", f"SYN{mi}", f"domain{mi}", str(ci), split))
                index += 1
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
