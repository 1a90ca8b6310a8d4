"""Annotated cases: synthetic multi-annotator generator, manifest loader/writer, splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class AnnotatedCase:
    """One image with ``M`` reference masks from distinct annotators."""

    image: np.ndarray   # H x W float32 in [0, 1]
    masks: np.ndarray   # M x H x W uint8 in {0, 1}
    case_id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.image.ndim != 2:
            raise DatasetError(f"{self.case_id}: image must be 2-d, got shape {self.image.shape}")
        if self.masks.ndim != 3 or self.masks.shape[0] < 1 or self.masks.shape[1:] != self.image.shape:
            raise DatasetError(f"{self.case_id}: masks {self.masks.shape} do not match image {self.image.shape}")
        if np.any(self.masks > 1):
            raise DatasetError(f"{self.case_id}: masks must be binary")
        if np.any(self.image < 0) or np.any(self.image > 1) or not np.all(np.isfinite(self.image)):
            raise DatasetError(f"{self.case_id}: image intensities must lie in [0, 1]")

    @property
    def n_annotators(self) -> int:
        return self.masks.shape[0]


# -- synthetic corpus ---------------------------------------------------------

@dataclass
class SyntheticParams:
    """Knobs of the synthetic lesion generator.

    ``presence_prob[m]`` is the chance annotator ``m`` marks the lesion at all.
    In an ambiguous case (probability ``ambiguous_fraction``) a random subset
    of ``ambiguous_empty`` annotators additionally draws an empty mask.
    ``thresholds[m]`` is the level at which annotator ``m`` cuts the soft blob
    and ``jitter`` the maximum per-annotator radius perturbation in pixels.
    """

    presence_prob: Optional[Sequence[float]] = None
    thresholds: Optional[Sequence[float]] = None
    jitter: float = 1.0
    ambiguous_fraction: float = 0.0
    ambiguous_empty: Optional[int] = None
    radius_range: tuple = (4.0, 8.0)
    softness: float = 1.5
    contrast: float = 0.5
    background: float = 0.25
    noise_std: float = 0.05


def generate_synthetic(n_cases: int, image_size: int = 32, n_annotators: int = 4,
                       params: Optional[SyntheticParams] = None, seed: int = 0) -> list[AnnotatedCase]:
    """Noisy background with one soft-edged blob; each annotator thresholds it differently."""
    p = params or SyntheticParams()
    if image_size < 16:
        raise DatasetError("image_size must be >= 16")
    if n_annotators < 1:
        raise DatasetError("need at least one annotator")
    r_lo, r_hi = p.radius_range
    if not 0 < r_lo <= r_hi:
        raise DatasetError(f"invalid radius range {p.radius_range}")
    margin = r_hi + p.jitter + 2 * p.softness
    if 2 * margin >= image_size:
        raise DatasetError(f"blob (radius {r_hi}, jitter {p.jitter}) does not fit a {image_size}px image")
    presence = np.ones(n_annotators) if p.presence_prob is None else np.asarray(p.presence_prob, float)
    thresholds = np.full(n_annotators, 0.5) if p.thresholds is None else np.asarray(p.thresholds, float)
    if presence.shape != (n_annotators,) or thresholds.shape != (n_annotators,):
        raise DatasetError("presence_prob and thresholds need one entry per annotator")
    if np.any((presence < 0) | (presence > 1)) or np.any((thresholds <= 0) | (thresholds >= 1)):
        raise DatasetError("presence probabilities must be in [0, 1] and thresholds in (0, 1)")
    n_empty = n_annotators // 2 if p.ambiguous_empty is None else p.ambiguous_empty
    if not 0 <= n_empty <= n_annotators:
        raise DatasetError("ambiguous_empty must be between 0 and n_annotators")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cases = []
    for idx in range(n_cases):
        cy, cx = rng.uniform(margin, image_size - 1 - margin, size=2)
        radius = rng.uniform(r_lo, r_hi)
        dist = np.hypot(yy - cy, xx - cx)
        blob = 1.0 / (1.0 + np.exp((dist - radius) / p.softness))
        image = p.background + p.contrast * blob + p.noise_std * rng.standard_normal(dist.shape)
        image = np.clip(image, 0.0, 1.0)

        present = rng.random(n_annotators) < presence
        if rng.random() < p.ambiguous_fraction:
            present[rng.permutation(n_annotators)[:n_empty]] = False
        masks = np.zeros((n_annotators, image_size, image_size), dtype=np.uint8)
        offsets = rng.uniform(-p.jitter, p.jitter, size=n_annotators)
        for m in range(n_annotators):
            if not present[m]:
                continue
            level = 1.0 / (1.0 + np.exp((dist - radius - offsets[m]) / p.softness))
            masks[m] = level > thresholds[m]
        cases.append(AnnotatedCase(image.astype(np.float32), masks, f"case{idx:05d}"))
    return cases


# -- manifest format ----------------------------------------------------------

def _parse_flag(token: str) -> bool:
    t = token.strip().lower()
    if t in ("1", "true", "yes", "raw"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise DatasetError(f"invalid raw_intensity_flag {token!r}")


def load_dataset(manifest_path) -> list[AnnotatedCase]:
    """Read cases listed in a text manifest.

    One record per line: ``case_id, H, W, M, image_path, mask_path_1..mask_path_M,
    raw_intensity_flag``.  Paths are relative to the manifest's directory.
    Images are ``H*W`` little-endian float32, masks ``H*W`` uint8.  Raw images
    are min-max scaled into ``[0, 1]``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    cases = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        try:
            case_id, H, W, M = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        except (IndexError, ValueError):
            raise DatasetError(f"{manifest_path}:{lineno}: malformed record") from None
        if len(fields) != 6 + M:
            raise DatasetError(f"{manifest_path}:{lineno}: expected {6 + M} fields, got {len(fields)}")
        image = _read_payload(root / fields[4], np.dtype("<f4"), H * W).reshape(H, W).astype(np.float64)
        if _parse_flag(fields[-1]):
            lo, hi = image.min(), image.max()
            image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
        elif np.any(image < 0) or np.any(image > 1):
            raise DatasetError(f"{fields[4]}: intensities outside [0, 1] but record not flagged raw")
        masks = []
        for rel in fields[5:5 + M]:
            mask = _read_payload(root / rel, np.dtype("u1"), H * W).reshape(H, W)
            if np.any(mask > 1):
                raise DatasetError(f"{rel}: mask values must be 0 or 1")
            masks.append(mask)
        cases.append(AnnotatedCase(image.astype(np.float32), np.stack(masks), case_id))
    return cases


def _read_payload(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise DatasetError(f"{path}: expected {count} values, found {data.size}")
    return data.astype(dtype.newbyteorder("="))


def save_dataset(cases: Sequence[AnnotatedCase], directory) -> Path:
    """Write cases in the manifest format; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["# case_id, H, W, M, image_path, mask_path_1..mask_path_M, raw_intensity_flag"]
    for case in cases:
        H, W = case.image.shape
        img_rel = f"images/{case.case_id}.f32"
        case.image.astype("<f4").tofile(directory / img_rel)
        mask_rels = []
        for m, mask in enumerate(case.masks):
            rel = f"masks/{case.case_id}_{m}.u8"
            mask.astype(np.uint8).tofile(directory / rel)
            mask_rels.append(rel)
        lines.append(", ".join([case.case_id, str(H), str(W), str(case.n_annotators), img_rel, *mask_rels, "0"]))
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# -- splitting ----------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    ratios: tuple = (0.6, 0.2, 0.2)

    def select(self, cases: Sequence[AnnotatedCase], part: str) -> list[AnnotatedCase]:
        by_id = {c.case_id: c for c in cases}
        return [by_id[i] for i in getattr(self, part)]


def split_dataset(cases: Sequence[AnnotatedCase], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous partition; validation/test sizes are floored."""
    if not cases:
        raise DatasetError("cannot split an empty corpus")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DatasetError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise DatasetError("case ids must be unique")
    n = len(ids)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val],
                        shuffled[n_train + n_val:], tuple(ratios))


def stack_images(cases: Sequence[AnnotatedCase]) -> np.ndarray:
    """``B x 1 x H x W`` float32 batch."""
    return np.stack([c.image for c in cases])[:, None].astype(np.float32)
