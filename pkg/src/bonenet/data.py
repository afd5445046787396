"""Synthetic whole-body skeleton scans with a known age-generating function.

Each sample is a tall grayscale stick skeleton. Age drives the rendering
deterministically: bone intensity fades with age, the rib gap widens, the
skull shrinks relative to the torso, and the knee landmark drops. The
upper-body features read age through a small latent jitter while the
lower-body features get a much larger one, so ``upper_signal_weight`` of
the recoverable age signal sits in the top half of the canvas. Gender
changes pelvis/shoulder widths and adds extra latent jitter for males.

Dataset statistics (sample count, gender counts, age bands, tall aspect)
follow the published cohort so the data-handling code paths are exercised
exactly as they would be on the real scans.
"""

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, TooFewSamples
from .image import bilinear_resize, save_pgm

AGE_BANDS = ((0.67, 40.0), (40.0, 61.0), (61.0, 87.0))
CROP_MARGIN = 8  # resize to target+8 per side, then crop


@dataclass
class GenParams:
    n: int = 813
    female_fraction: float = 679 / 813
    age_band_weights: tuple = (0.08487, 0.73432, 0.18081)
    canvas: tuple = (192, 64)
    seed: int = 42
    upper_signal_weight: float = 0.8

    def validate(self):
        if self.n < 2:
            raise InvalidConfig("need at least 2 samples")
        if abs(sum(self.age_band_weights) - 1.0) > 1e-9:
            raise InvalidConfig("age band weights must sum to 1")
        if not 0.0 < self.upper_signal_weight < 1.0:
            raise InvalidConfig("upper_signal_weight must be in (0, 1)")
        if not 0.0 <= self.female_fraction <= 1.0:
            raise InvalidConfig("female_fraction must be in [0, 1]")
        return self

    def to_dict(self):
        d = asdict(self)
        d["age_band_weights"] = list(d["age_band_weights"])
        d["canvas"] = list(d["canvas"])
        return d


@dataclass
class ManifestRow:
    id: int
    path: str
    age_years: float
    gender: str


@dataclass
class Manifest:
    rows: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def __len__(self):
        return len(self.rows)

    def gender_counts(self):
        counts = {"F": 0, "M": 0}
        for r in self.rows:
            counts[r.gender] += 1
        return counts

    def save(self, path):
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "path", "age_years", "gender"])
            for r in self.rows:
                writer.writerow([r.id, r.path, f"{r.age_years:.4f}", r.gender])

    @classmethod
    def load(cls, path):
        path = Path(path)
        rows = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for rec in reader:
                rows.append(ManifestRow(int(rec["id"]), rec["path"],
                                        float(rec["age_years"]), rec["gender"]))
        ids = [r.id for r in rows]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("duplicate ids in manifest")
        return cls(rows, path.parent)


# -- deterministic drawing helpers -------------------------------------

def _soft_line(canvas, p0, p1, thickness, value):
    """Anti-aliased segment; max-composited so crossings stay flat."""
    h, w = canvas.shape
    y0, x0 = p0
    y1, x1 = p1
    lo_y = max(0, int(min(y0, y1) - thickness - 2))
    hi_y = min(h, int(max(y0, y1) + thickness + 3))
    lo_x = max(0, int(min(x0, x1) - thickness - 2))
    hi_x = min(w, int(max(x0, x1) + thickness + 3))
    if lo_y >= hi_y or lo_x >= hi_x:
        return
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dy, dx = y1 - y0, x1 - x0
    den = dy * dy + dx * dx
    if den == 0:
        dist = np.hypot(yy - y0, xx - x0)
    else:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / den, 0.0, 1.0)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    cov = np.clip(thickness / 2 + 0.6 - dist, 0.0, 1.0)
    region = canvas[lo_y:hi_y, lo_x:hi_x]
    np.maximum(region, value * cov, out=region)


def _soft_ellipse(canvas, center, rx, ry, thickness, value):
    """Anti-aliased ellipse outline."""
    h, w = canvas.shape
    cy, cx = center
    lo_y = max(0, int(cy - ry - thickness - 2))
    hi_y = min(h, int(cy + ry + thickness + 3))
    lo_x = max(0, int(cx - rx - thickness - 2))
    hi_x = min(w, int(cx + rx + thickness + 3))
    if lo_y >= hi_y or lo_x >= hi_x:
        return
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    dist = np.abs(r - 1.0) * min(rx, ry)
    cov = np.clip(thickness / 2 + 0.6 - dist, 0.0, 1.0)
    region = canvas[lo_y:hi_y, lo_x:hi_x]
    np.maximum(region, value * cov, out=region)


# latent jitter scale (years): upper features get the small share
_SIGNAL_SCALE = 12.0
_MALE_JITTER = 3.0
_MALE_SHIFT = 2.5
_AGE_CAP = 95.0


def render_skeleton(age, gender, params, rng):
    """Draw one scan; returns a uint8 canvas of ``params.canvas`` shape."""
    h, w = params.canvas
    canvas = np.zeros((h, w))
    cx = w / 2

    wgt = params.upper_signal_weight
    age_u = age + rng.normal(0.0, _SIGNAL_SCALE * (1.0 - wgt))
    age_l = age + rng.normal(0.0, _SIGNAL_SCALE * wgt)
    if gender == "M":
        age_u += _MALE_SHIFT + rng.normal(0.0, _MALE_JITTER)
        age_l += _MALE_SHIFT + rng.normal(0.0, _MALE_JITTER)
    f_u = np.clip(age_u, 0.0, _AGE_CAP) / _AGE_CAP
    f_l = np.clip(age_l, 0.0, _AGE_CAP) / _AGE_CAP
    f_a = np.clip(age, 0.0, _AGE_CAP) / _AGE_CAP

    base = 235.0 - 110.0 * f_a + rng.normal(0.0, 5.0)  # intensity fades with age
    base = float(np.clip(base, 60.0, 255.0))

    female = gender == "F"
    shoulder_hw = (0.36 if female else 0.44) * w
    pelvis_hw = (0.42 if female else 0.34) * w

    # skull: ratio to torso shrinks with age
    skull_ry = h * (0.055 - 0.022 * f_u)
    skull_rx = 0.72 * skull_ry
    skull_cy = 0.080 * h
    _soft_ellipse(canvas, (skull_cy, cx), skull_rx, skull_ry, 2.2, base)

    # shoulders + spine
    y_sh = 0.155 * h
    y_pv = 0.550 * h
    _soft_line(canvas, (y_sh, cx - shoulder_hw), (y_sh, cx + shoulder_hw), 2.0, 0.95 * base)
    _soft_line(canvas, (skull_cy + skull_ry, cx), (y_pv + 8, cx), 2.2, 0.90 * base)

    # ribs: gap widens with age
    gap = (0.016 + 0.020 * f_u) * h
    y_rib = 0.190 * h
    rib_len = 0.30 * w
    for _ in range(5):
        _soft_line(canvas, (y_rib, cx - 2), (y_rib + 3.0, cx - rib_len), 1.6, 0.92 * base)
        _soft_line(canvas, (y_rib, cx + 2), (y_rib + 3.0, cx + rib_len), 1.6, 0.92 * base)
        y_rib += gap

    # arms (static)
    _soft_line(canvas, (y_sh, cx - shoulder_hw), (0.47 * h, cx - shoulder_hw - 2), 1.6, 0.80 * base)
    _soft_line(canvas, (y_sh, cx + shoulder_hw), (0.47 * h, cx + shoulder_hw + 2), 1.6, 0.80 * base)

    # pelvis (gender width)
    _soft_ellipse(canvas, (y_pv + 6, cx), pelvis_hw, 7.0, 2.0, 0.95 * base)

    # legs: knee landmark drops and ankles spread with age
    y_knee = (0.620 + 0.100 * f_l) * h
    leg_sep = (0.10 + 0.14 * f_l) * w
    y_ankle = 0.945 * h
    for side in (-1, 1):
        hip = (y_pv + 12, cx + side * 6.0)
        knee = (y_knee, cx + side * (6.0 + 0.4 * (leg_sep - 6.0)))
        ankle = (y_ankle, cx + side * leg_sep)
        _soft_line(canvas, hip, knee, 1.8, 0.85 * base)
        _soft_line(canvas, knee, ankle, 1.6, 0.85 * base)
        _soft_ellipse(canvas, knee, 2.6, 2.6, 1.6, base)

    canvas += rng.normal(0.0, 4.5, size=canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


# -- generation ---------------------------------------------------------

def _largest_remainder_counts(n, weights):
    raw = [n * w for w in weights]
    counts = [int(np.floor(r)) for r in raw]
    short = n - sum(counts)
    order = np.argsort([c - r for c, r in zip(counts, raw)])  # most negative first
    for i in range(short):
        counts[order[i]] += 1
    return counts


def generate(params, out_dir):
    """Render n samples + manifest.csv under ``out_dir``; returns the Manifest."""
    params.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n = params.n
    band_counts = _largest_remainder_counts(n, params.age_band_weights)
    bands = np.repeat(np.arange(len(AGE_BANDS)), band_counts)
    n_f = int(round(n * params.female_fraction))
    genders = np.array(["F"] * n_f + ["M"] * (n - n_f))

    assign = np.random.default_rng(np.random.SeedSequence(params.seed, spawn_key=(0xA551,)))
    bands = bands[assign.permutation(n)]
    genders = genders[assign.permutation(n)]

    rows = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(params.seed, spawn_key=(i,)))
        lo, hi = AGE_BANDS[bands[i]]
        age = float(rng.uniform(lo, hi))
        img = render_skeleton(age, genders[i], params, rng)
        name = f"img_{i:04d}.pgm"
        save_pgm(img, out_dir / name)
        rows.append(ManifestRow(i, name, age, str(genders[i])))

    manifest = Manifest(rows, out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest


def split(manifest, train_fraction=0.7, seed=0):
    """Seeded shuffle into (train, test); train gets floor(n * fraction)."""
    n = len(manifest)
    if n < 2:
        raise TooFewSamples(f"cannot split {n} samples")
    if not 0.0 < train_fraction < 1.0:
        raise InvalidConfig(f"train_fraction {train_fraction} outside (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(np.floor(n * train_fraction))
    pick = lambda idxs: Manifest(
        sorted((manifest.rows[i] for i in idxs), key=lambda r: r.id), manifest.base_dir
    )
    return pick(perm[:k]), pick(perm[k:])


# -- preprocessing ------------------------------------------------------

def letterbox(image):
    """Pad to square with zeros, content centred."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    side = max(h, w)
    out = np.zeros((side, side))
    top = (side - h) // 2
    left = (side - w) // 2
    out[top:top + h, left:left + w] = img
    return out


def resize_for_input(image, target_size):
    """Letterbox + bilinear resize to (target+margin) per side; cacheable."""
    return bilinear_resize(letterbox(image), target_size + CROP_MARGIN,
                           target_size + CROP_MARGIN)


def crop_flip_normalize(resized, target_size, mode, rng=None):
    """Random (train) or centre (eval) crop, train-time mirroring, then
    per-image standardisation. Returns [1, S, S] float64."""
    s = target_size
    if mode == "train":
        off_y, off_x = (int(v) for v in rng.integers(0, CROP_MARGIN + 1, size=2))
        flip = bool(rng.random() < 0.5)
    else:
        off_y = off_x = CROP_MARGIN // 2
        flip = False
    crop = resized[off_y:off_y + s, off_x:off_x + s]
    if flip:
        crop = crop[:, ::-1]
    mean = crop.mean()
    std = max(float(crop.std()), 1e-6)
    return ((crop - mean) / std)[None, :, :]


def augment(image, target_size, mode, rng=None):
    """Full preprocessing: resize, crop, mirror, standardise."""
    if target_size + CROP_MARGIN > max(np.asarray(image).shape):
        raise InvalidConfig(f"target_size {target_size} exceeds the resize canvas")
    return crop_flip_normalize(resize_for_input(image, target_size), target_size, mode, rng)


def crop_region(image, region):
    """full -> identity, upper -> top half rows, lower -> bottom half rows."""
    img = np.asarray(image)
    h = img.shape[0]
    if region == "full":
        return img
    if region == "upper":
        return img[: h // 2]
    if region == "lower":
        return img[h // 2:]
    raise InvalidConfig(f"unknown region {region!r}")


class Dataset:
    """In-memory samples (post region crop) with a resize cache for training."""

    def __init__(self, images, ages, genders, region="full"):
        from .errors import EmptyDataset
        if len(images) == 0:
            raise EmptyDataset("dataset has no samples")
        self.images = images
        self.ages = np.asarray(ages, dtype=np.float64)
        self.genders = list(genders)
        self.region = region
        self._resized = {}

    @classmethod
    def from_manifest(cls, manifest, region="full"):
        from .image import load_pgm
        images, ages, genders = [], [], []
        for r in manifest.rows:
            img = load_pgm(Path(manifest.base_dir) / r.path)
            images.append(crop_region(img, region))
            ages.append(r.age_years)
            genders.append(r.gender)
        return cls(images, ages, genders, region)

    def __len__(self):
        return len(self.images)

    def resized(self, target_size):
        if target_size not in self._resized:
            self._resized[target_size] = np.stack(
                [resize_for_input(img, target_size) for img in self.images]
            )
        return self._resized[target_size]
