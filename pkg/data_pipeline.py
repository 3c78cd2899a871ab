"""Data-curation geometry: subtitle/logo crops, FPS normalisation and bucketing."""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Protocol

import numpy as np
import pandas as pd

from errors import DomainError
from runtime import parallel_map

logger = logging.getLogger(__name__)

TARGET_FPS = (16, 24)
BRUTEFORCE_LIMIT = 10_000
BLACK_LEVEL = 16 / 255

# Band sizes as a share of the frame side.
SUBTITLE_TOP = Fraction(20, 100)
SUBTITLE_BOTTOM = Fraction(40, 100)
SUBTITLE_SIDE = Fraction(20, 100)
LOGO_SIDE = Fraction(15, 100)


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    """Inclusive pixel rectangle. degenerate marks "no rectangle found"."""
    top: int
    left: int
    bottom: int
    right: int
    degenerate: bool = False

    @property
    def height(self):
        return 0 if self.degenerate else self.bottom - self.top + 1

    @property
    def width(self):
        return 0 if self.degenerate else self.right - self.left + 1

    @property
    def area(self):
        return self.height * self.width

    def within(self, m, n):
        return 0 <= self.top <= self.bottom < m and 0 <= self.left <= self.right < n

    def as_dict(self):
        return {"top": self.top, "left": self.left, "bottom": self.bottom,
                "right": self.right, "area": self.area, "degenerate": self.degenerate}


EMPTY_RECT = Rect(0, 0, 0, 0, degenerate=True)


@dataclass(frozen=True)
class CandidateRegions:
    subtitle: tuple
    logo: tuple

    def all(self):
        return self.subtitle + self.logo


@dataclass
class CropConfig:
    area_threshold: float = 0.8
    ar_tolerance: float = 0.1
    black_level: float = BLACK_LEVEL

    def __post_init__(self):
        if not 0 <= self.area_threshold <= 1:
            raise DomainError("area_threshold must lie in [0, 1]")
        if self.ar_tolerance < 0:
            raise DomainError("ar_tolerance must be >= 0")


@dataclass(frozen=True)
class Bucket:
    duration_index: int
    ar_index: int
    capacity: int
    duration_edges: tuple
    ar_edges: tuple
    n_ar: int = 1

    @property
    def id(self):
        return self.duration_index * self.n_ar + self.ar_index


@dataclass
class BucketGrid:
    """Duration x aspect-ratio grid of bucket centres with per-bucket batch capacity.

    Bin edges sit at the geometric midpoints between neighbouring centres, so the
    grid covers every positive (duration, ratio). When capacities is empty, a
    bucket holds base_capacity * shortest_duration / duration items (at least 1).
    """
    duration_centers: tuple = (2.0, 4.0, 8.0, 16.0)
    ar_centers: tuple = (9 / 16, 3 / 4, 1.0, 4 / 3, 16 / 9)
    base_capacity: int = 16
    capacities: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.duration_centers = tuple(float(v) for v in self.duration_centers)
        self.ar_centers = tuple(float(v) for v in self.ar_centers)
        for name, centers in (("duration_centers", self.duration_centers),
                              ("ar_centers", self.ar_centers)):
            if not centers or min(centers) <= 0:
                raise DomainError(f"{name} must be non-empty and positive")
            if any(a >= b for a, b in zip(centers, centers[1:])):
                raise DomainError(f"{name} must be strictly increasing")
        if self.base_capacity < 1:
            raise DomainError("base_capacity must be >= 1")
        if self.capacities:
            self.capacities = tuple(tuple(int(c) for c in row) for row in self.capacities)
            if (len(self.capacities) != self.n_duration
                    or any(len(row) != self.n_ar for row in self.capacities)):
                raise DomainError("capacities must be an n_duration x n_ar table")
            if min(min(row) for row in self.capacities) < 1:
                raise DomainError("capacities must be >= 1")

    @property
    def n_duration(self):
        return len(self.duration_centers)

    @property
    def n_ar(self):
        return len(self.ar_centers)

    def __len__(self):
        return self.n_duration * self.n_ar

    def capacity(self, i, j):
        if self.capacities:
            return self.capacities[i][j]
        return max(1, int(self.base_capacity * self.duration_centers[0] / self.duration_centers[i]))

    def bucket(self, i, j):
        return Bucket(i, j, self.capacity(i, j),
                      _edges(self.duration_centers, i), _edges(self.ar_centers, j), self.n_ar)

    def buckets(self):
        return [self.bucket(i, j) for i in range(self.n_duration) for j in range(self.n_ar)]


def _edges(centers, i):
    lo = math.sqrt(centers[i - 1] * centers[i]) if i > 0 else 0.0
    hi = math.sqrt(centers[i] * centers[i + 1]) if i + 1 < len(centers) else math.inf
    return lo, hi


class MaskProvider(Protocol):
    """Anything that yields the binary mask (1 = clean pixel) of a given frame."""

    def __call__(self, frame_index: int) -> np.ndarray: ...


# ------------------------------------------------------------
# Largest interior rectangle
# ------------------------------------------------------------

def _as_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise DomainError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    ones = mask == 1
    if not (ones | (mask == 0)).all():
        raise DomainError("mask entries must be 0 or 1")
    return ones


def _run_starts(mask, axis):
    """First index of every run of identical consecutive rows (axis 0) or columns (axis 1)."""
    if axis == 0:
        changed = (mask[1:] != mask[:-1]).any(axis=1)
    else:
        changed = (mask[:, 1:] != mask[:, :-1]).any(axis=0)
    return np.flatnonzero(np.concatenate([[True], changed]))


def _weighted_stack_scan(cells, row_starts, row_ends, col_starts, col_ends):
    """Monotonic-stack scan over a grid whose cells span row/column runs of the mask."""
    n = cells.shape[1]
    heights = np.zeros(n, dtype=np.int64)
    row_len = row_ends - row_starts + 1
    best, best_area = EMPTY_RECT, 0
    for i in range(cells.shape[0]):
        heights = np.where(cells[i], heights + row_len[i], 0)
        h = heights.tolist()

        left = [0] * n
        stack = []
        for j in range(n):
            while stack and h[stack[-1]] >= h[j]:
                stack.pop()
            left[j] = stack[-1] + 1 if stack else 0
            stack.append(j)

        right = [n - 1] * n
        stack = []
        for j in range(n - 1, -1, -1):
            while stack and h[stack[-1]] >= h[j]:
                stack.pop()
            right[j] = stack[-1] - 1 if stack else n - 1
            stack.append(j)

        bottom = int(row_ends[i])
        for j in range(n):
            if not h[j]:
                continue
            lo, hi = int(col_starts[left[j]]), int(col_ends[right[j]])
            area = h[j] * (hi - lo + 1)
            if area > best_area:
                best_area = area
                best = Rect(bottom - h[j] + 1, lo, bottom, hi)
    return best, best_area


def max_interior_rectangle(mask):
    """Largest all-ones rectangle via per-row heights and monotonic stacks.

    Runs of identical consecutive rows and columns are collapsed first; every
    maximal rectangle is a union of whole runs, so masks built from a few boxes
    reduce to a handful of cells. Returns (Rect, area). On equal areas the first
    rectangle found scanning rows top to bottom and columns left to right wins.
    An all-zero mask gives (EMPTY_RECT, 0).
    """
    mask = _as_mask(mask)
    m, n = mask.shape
    rows, cols = _run_starts(mask, 0), _run_starts(mask, 1)
    row_ends = np.append(rows[1:], m) - 1
    col_ends = np.append(cols[1:], n) - 1
    return _weighted_stack_scan(mask[np.ix_(rows, cols)], rows, row_ends, cols, col_ends)


def max_interior_rectangle_bruteforce(mask):
    """Exhaustive search over all rectangles; only for small masks (m*n <= 10^4)."""
    mask = _as_mask(mask)
    m, n = mask.shape
    if m * n > BRUTEFORCE_LIMIT:
        raise DomainError(f"brute force limited to {BRUTEFORCE_LIMIT} cells, got {m * n}")
    prefix = np.zeros((m + 1, n + 1), dtype=np.int64)
    prefix[1:, 1:] = mask.cumsum(axis=0).cumsum(axis=1)
    best, best_area = EMPTY_RECT, 0
    for top in range(m):
        for left in range(n):
            bottom = np.arange(top, m)[:, None]
            right = np.arange(left, n)[None, :]
            ones = (prefix[bottom + 1, right + 1] - prefix[top, right + 1]
                    - prefix[bottom + 1, left] + prefix[top, left])
            area = (bottom - top + 1) * (right - left + 1)
            area = np.where(ones == area, area, 0)
            k = int(np.argmax(area))
            if area.flat[k] > best_area:
                b, r = divmod(k, area.shape[1])
                best_area = int(area.flat[k])
                best = Rect(top, left, top + b, left + r)
    return best, best_area


def rect_is_clean(mask, rect):
    if rect.degenerate:
        return True
    mask = np.asarray(mask)
    return bool(np.all(mask[rect.top:rect.bottom + 1, rect.left:rect.right + 1] == 1))


# ------------------------------------------------------------
# Candidate regions and masks
# ------------------------------------------------------------

def _share(total, ratio):
    # half-up rounding, never below one pixel
    return max(1, math.floor(Fraction(total) * ratio + Fraction(1, 2)))


def candidate_regions(width, height):
    """Subtitle bands (top, bottom, left, right) and the four corner logo boxes."""
    if width < 1 or height < 1:
        raise DomainError(f"frame must be at least 1x1, got {width}x{height}")
    W, H = width - 1, height - 1
    top = _share(height, SUBTITLE_TOP)
    bottom = _share(height, SUBTITLE_BOTTOM)
    side = _share(width, SUBTITLE_SIDE)
    logo_w = _share(width, LOGO_SIDE)
    logo_h = _share(height, LOGO_SIDE)
    subtitle = (
        Rect(0, 0, top - 1, W),
        Rect(height - bottom, 0, H, W),
        Rect(0, 0, H, side - 1),
        Rect(0, width - side, H, W),
    )
    logo = (
        Rect(0, 0, logo_h - 1, logo_w - 1),
        Rect(0, width - logo_w, logo_h - 1, W),
        Rect(height - logo_h, 0, H, logo_w - 1),
        Rect(height - logo_h, width - logo_w, H, W),
    )
    return CandidateRegions(subtitle, logo)


def _box(det):
    if isinstance(det, dict):
        return int(det["top"]), int(det["left"]), int(det["bottom"]), int(det["right"])
    top, left, bottom, right = det
    return int(top), int(left), int(bottom), int(right)


def build_mask(width, height, detections):
    """Mask with 0 where a detection box overlaps a candidate region, 1 elsewhere.

    Boxes are (top, left, bottom, right) inclusive; parts outside the frame are
    clipped and parts outside every candidate region are ignored.
    """
    regions = np.zeros((height, width), dtype=bool)
    for r in candidate_regions(width, height).all():
        regions[r.top:r.bottom + 1, r.left:r.right + 1] = True
    hits = np.zeros_like(regions)
    for det in detections:
        top, left, bottom, right = _box(det)
        top, left = max(top, 0), max(left, 0)
        bottom, right = min(bottom, height - 1), min(right, width - 1)
        if top > bottom or left > right:
            continue
        hits[top:bottom + 1, left:right + 1] = True
    mask = np.ones((height, width), dtype=np.uint8)
    mask[hits & regions] = 0
    return mask


def synthetic_detections(width, height, rng, n_boxes=2):
    """Random detection boxes, each inside one candidate region."""
    regions = candidate_regions(width, height).all()
    boxes = []
    for _ in range(n_boxes):
        r = regions[int(rng.integers(0, len(regions)))]
        h = max(1, int(r.height * rng.uniform(0.1, 1.0)))
        w = max(1, int(r.width * rng.uniform(0.1, 1.0)))
        top = int(rng.integers(r.top, r.bottom - h + 2))
        left = int(rng.integers(r.left, r.right - w + 2))
        boxes.append((top, left, top + h - 1, left + w - 1))
    return boxes


def synthetic_mask(width, height, rng, n_boxes=2):
    return build_mask(width, height, synthetic_detections(width, height, rng, n_boxes))


class SyntheticMaskProvider:
    """Per-frame masks from random boxes that stay fixed for the whole clip."""

    def __init__(self, width, height, seed=0, n_boxes=2):
        rng = np.random.default_rng(seed)
        self.width = width
        self.height = height
        self.detections = synthetic_detections(width, height, rng, n_boxes)

    def __call__(self, frame_index):
        return build_mask(self.width, self.height, self.detections)


def trim_black_borders(frames, black_level=BLACK_LEVEL):
    """Rect left after dropping border rows/columns darker than black_level.

    frames is (H, W) or (N, H, W) with intensities in [0, 1].
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise DomainError("frames must be (H, W) or (N, H, W)")
    rows = frames.mean(axis=(0, 2)) >= black_level
    cols = frames.mean(axis=(0, 1)) >= black_level
    if not rows.any() or not cols.any():
        return EMPTY_RECT
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return Rect(int(r[0]), int(c[0]), int(r[-1]), int(c[-1]))


# ------------------------------------------------------------
# Crop acceptance
# ------------------------------------------------------------

def _crop_ratios(rect, frame_w, frame_h):
    if not rect.degenerate and not rect.within(frame_h, frame_w):
        raise DomainError(f"rect {rect} lies outside a {frame_w}x{frame_h} frame")
    if rect.degenerate:
        return 0.0, math.inf
    area_share = rect.area / (frame_w * frame_h)
    ar_ratio = (rect.width / rect.height) / (frame_w / frame_h)
    return area_share, ar_ratio


def accept_crop(rect, frame_w, frame_h, area_threshold=0.8, ar_tolerance=0.1):
    area_share, ar_ratio = _crop_ratios(rect, frame_w, frame_h)
    return area_share > area_threshold and abs(ar_ratio - 1.0) <= ar_tolerance


def crop_verdict(rect, frame_w, frame_h, cfg=None):
    """accept_crop plus the numbers behind it and the reasons for a rejection."""
    cfg = cfg or CropConfig()
    area_share, ar_ratio = _crop_ratios(rect, frame_w, frame_h)
    reasons = []
    if rect.degenerate:
        reasons.append("no clean rectangle")
    else:
        if not area_share > cfg.area_threshold:
            reasons.append(f"area {area_share:.3f} not above {cfg.area_threshold}")
        if abs(ar_ratio - 1.0) > cfg.ar_tolerance:
            reasons.append(f"aspect ratio off by {abs(ar_ratio - 1.0):.3f} (tolerance {cfg.ar_tolerance})")
    return {
        "rect": rect.as_dict(),
        "accepted": not reasons,
        "area_share": area_share,
        "ar_ratio": None if rect.degenerate else ar_ratio,
        "reasons": reasons,
    }


def crop_clip(provider, frame_indices, width, height, cfg=None):
    """Crop verdict for a clip: a pixel is clean only if it is clean in every frame."""
    masks = parallel_map(provider, list(frame_indices))
    if not masks:
        raise DomainError("crop_clip needs at least one frame")
    combined = np.minimum.reduce([np.asarray(m, dtype=np.uint8) for m in masks])
    rect, _ = max_interior_rectangle(combined)
    return crop_verdict(rect, width, height, cfg)


# ------------------------------------------------------------
# FPS and buckets
# ------------------------------------------------------------

def _rational(value):
    if isinstance(value, float):
        value = str(value)
    try:
        return Fraction(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise DomainError(f"not a frame rate: {value!r}") from exc


def fps_normalize(original_fps):
    """Target rate in {16, 24} leaving the smaller remainder; ties go to 24."""
    fps = _rational(original_fps)
    if fps <= 0:
        raise DomainError(f"fps must be > 0, got {original_fps}")
    r16, r24 = fps % 16, fps % 24
    return 16 if r16 < r24 else 24


def assign_bucket(duration_s, aspect_ratio, grid):
    """Nearest bucket under |log(d/d_c)| + |log(a/a_c)|; the lowest id wins ties."""
    if not (np.isfinite(duration_s) and np.isfinite(aspect_ratio)):
        raise DomainError(f"duration and aspect ratio must be finite, got {duration_s}, {aspect_ratio}")
    if duration_s <= 0 or aspect_ratio <= 0:
        raise DomainError("duration and aspect ratio must be > 0")
    dd = np.abs(np.log(duration_s) - np.log(np.asarray(grid.duration_centers)))
    da = np.abs(np.log(aspect_ratio) - np.log(np.asarray(grid.ar_centers)))
    k = int(np.argmin((dd[:, None] + da[None, :]).ravel()))
    return grid.bucket(*divmod(k, grid.n_ar))


def choose_bucket(occupancy, rng):
    """Index drawn with probability proportional to occupancy."""
    occ = np.asarray(occupancy, dtype=np.float64)
    total = occ.sum()
    if occ.size == 0 or total <= 0:
        raise DomainError("all buckets are empty")
    return int(rng.choice(occ.size, p=occ / total))


def stochastic_bucket_sample(pools, capacities, rng):
    """Pick a bucket by remaining occupancy and pop up to its capacity from it.

    pools maps bucket id -> list of items and is consumed in place.
    """
    ids = sorted(pools)
    k = ids[choose_bucket([len(pools[b]) for b in ids], rng)]
    take = capacities[k]
    batch, pools[k] = pools[k][:take], pools[k][take:]
    return k, batch


class BucketSampler:
    """Epochs of variable-shape batches; every item appears exactly once per epoch."""

    def __init__(self, bucket_ids, grid, seed=0):
        self.grid = grid
        self.rng = np.random.default_rng(seed)
        self.capacities = {b.id: b.capacity for b in grid.buckets()}
        self.members = {}
        for item, b in enumerate(bucket_ids):
            self.members.setdefault(int(b), []).append(item)

    def __len__(self):
        return sum(-(-len(v) // self.capacities[b]) for b, v in self.members.items())

    def __iter__(self):
        pools = {b: list(self.rng.permutation(v)) for b, v in self.members.items()}
        while any(pools.values()):
            k, batch = stochastic_bucket_sample(pools, self.capacities, self.rng)
            yield k, [int(i) for i in batch]


MANIFEST_COLUMNS = ("path", "duration", "width", "height", "fps")


def bucket_manifest(manifest, grid, skipped=None):
    """Add target_fps, aspect_ratio and bucket columns to a clip manifest.

    Rows with a missing, non-finite or non-positive duration, size or fps are
    dropped with a warning; (path, reason) pairs are appended to skipped if given.
    """
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise DomainError(f"manifest is missing columns: {missing}")
    rows = []
    for row in manifest.itertuples(index=False):
        try:
            target = fps_normalize(row.fps)
            ar = float(row.width) / float(row.height)
            bucket = assign_bucket(float(row.duration), ar, grid)
        except (DomainError, ZeroDivisionError) as exc:
            logger.warning("Skipping %s: %s", row.path, exc)
            if skipped is not None:
                skipped.append((row.path, str(exc)))
            continue
        rows.append({
            **row._asdict(),
            "target_fps": target,
            "aspect_ratio": ar,
            "bucket_id": bucket.id,
            "duration_index": bucket.duration_index,
            "ar_index": bucket.ar_index,
            "capacity": bucket.capacity,
        })
    return pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS) + [
        "target_fps", "aspect_ratio", "bucket_id", "duration_index", "ar_index", "capacity"])
