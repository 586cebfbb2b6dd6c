"""Per-frame target-candidate detection.

Stages: positive/negative median filtering marks interest pixels, an adaptive
threshold search caps the number of connected interest domains at a budget,
and a boosted-tree classifier scores 28-dim multiscale statistics extracted
around each candidate's representative pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import BRIGHT, DARK, Component, Frame, LabelMask, connected_components, mirror_indices

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_STRUCTURE_8 = np.ones((3, 3), dtype=int)

HIST_BINS = 256
HIST_SHIFT = 8  # 65536 / 256 = 2**8 per bin

# ordering of the per-scale statistics inside a feature vector
FEATURE_NAMES = ("kurtosis", "skew", "entropy", "mean", "variance", "maximum", "minimum")
FEATURES_PER_SCALE = len(FEATURE_NAMES)

DEFAULT_SCALES = (3, 7, 11, 15)


@dataclass(frozen=True)
class InterestFilterParams:
    """Median-filter interest detection settings.

    ``k1`` (positive) selects pixels brighter than their local median,
    ``k2`` (negative) selects darker ones. ``budget`` caps the number of
    candidates kept per frame.
    """

    median_window: int = 11
    k1: float = 100.0
    k2: float = -100.0
    budget: int = 3500

    def __post_init__(self):
        if self.median_window < 3 or self.median_window % 2 == 0:
            raise ValueError("median_window must be odd and >= 3")
        if not (self.k1 > 0 and self.k2 < 0):
            raise ValueError("require k1 > 0 and k2 < 0")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


@dataclass
class Candidate:
    """A detected spot: frame index, (x, y) pixel position, polarity, score.

    Score is the classifier probability; 1.0 until classification runs.
    """

    frame: int
    position: np.ndarray  # (2,) float, (x, y)
    polarity: int  # BRIGHT or DARK
    score: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


@dataclass
class TrainingSet:
    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int8 in {0, 1}

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must be parallel")


if _HAVE_NUMBA:

    @njit(cache=True)
    def _median_kernel(padded, h, w, win):  # pragma: no cover - exercised via median_map
        out = np.empty((h, w), np.uint16)
        rank = (win * win) // 2 + 1
        coarse = np.zeros(256, np.int32)
        fine = np.zeros(65536, np.int32)
        for y in range(h):
            coarse[:] = 0
            fine[:] = 0
            for dy in range(win):
                for dx in range(win):
                    v = padded[y + dy, dx]
                    coarse[v >> 8] += 1
                    fine[v] += 1
            for x in range(w):
                if x > 0:
                    for dy in range(win):
                        vr = padded[y + dy, x - 1]
                        coarse[vr >> 8] -= 1
                        fine[vr] -= 1
                        va = padded[y + dy, x + win - 1]
                        coarse[va >> 8] += 1
                        fine[va] += 1
                acc = 0
                cb = 0
                while acc + coarse[cb] < rank:
                    acc += coarse[cb]
                    cb += 1
                v = cb << 8
                while acc + fine[v] < rank:
                    acc += fine[v]
                    v += 1
                out[y, x] = v
        return out


def _median_partition(padded: np.ndarray, h: int, w: int, win: int) -> np.ndarray:
    # portable exact fallback: introselect per window, processed in row chunks
    from numpy.lib.stride_tricks import sliding_window_view

    windows = sliding_window_view(padded, (win, win))
    k = win * win
    mid = k // 2
    out = np.empty((h, w), np.uint16)
    chunk = max(1, (1 << 22) // (w * k))
    for y0 in range(0, h, chunk):
        y1 = min(y0 + chunk, h)
        block = windows[y0:y1].reshape(y1 - y0, w, k)
        out[y0:y1] = np.partition(block, mid, axis=2)[..., mid]
    return out


def median_map(frame: Frame, window: int) -> np.ndarray:
    """Exact median of the window x window mirror-padded neighborhood of
    every pixel, as uint16."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    pad = window // 2
    h, w = frame.pixels.shape
    padded = np.ascontiguousarray(
        frame.pixels[np.ix_(mirror_indices(h, pad), mirror_indices(w, pad))]
    )
    if _HAVE_NUMBA:
        return _median_kernel(padded, h, w, window)
    return _median_partition(padded, h, w, window)


def interest_mask(frame: Frame, median_window: int, k1: float, k2: float) -> LabelMask:
    """Label +1 where intensity exceeds local median + k1, -1 where it falls
    below local median + k2, 0 elsewhere."""
    if not (k1 > 0 and k2 < 0):
        raise ValueError("require k1 > 0 and k2 < 0")
    med = median_map(frame, median_window)
    diff = frame.pixels.astype(np.int64) - med.astype(np.int64)
    labels = np.zeros(frame.pixels.shape, dtype=np.int8)
    labels[diff > k1] = BRIGHT
    labels[diff < k2] = DARK
    return LabelMask(labels=labels)


def _count_components(diff: np.ndarray, magnitude: float) -> int:
    n_bright = int(ndimage.label(diff > magnitude, structure=_STRUCTURE_8)[1])
    n_dark = int(ndimage.label(diff < -magnitude, structure=_STRUCTURE_8)[1])
    return n_bright + n_dark


def select_candidates(frame: Frame, params: InterestFilterParams, n_iterations: int = 20) -> list[Candidate]:
    """Detect up to ``params.budget`` candidates by searching a shared offset
    magnitude m (k1 = +m, k2 = -m) from the frame's dynamic range toward 0.

    Bisection keeps the largest tested m whose bright+dark component count
    reaches the budget; if none does, the smallest tested m is used. One
    candidate per component, capped at the budget by descending contrast
    against the local median.
    """
    med = median_map(frame, params.median_window)
    diff = frame.pixels.astype(np.int64) - med.astype(np.int64)
    dynamic_range = float(int(frame.pixels.max()) - int(frame.pixels.min()))
    if dynamic_range <= 0:
        return []

    budget = params.budget
    evaluated = {}
    lo, hi = 0.0, dynamic_range
    for _ in range(n_iterations):
        mid = 0.5 * (lo + hi)
        # component count is bounded by the interest-pixel count, which is
        # much cheaper to evaluate than labeling
        n_interest = int(np.count_nonzero(diff > mid)) + int(np.count_nonzero(diff < -mid))
        count = _count_components(diff, mid) if n_interest >= budget else n_interest
        evaluated[mid] = count
        if count >= budget:
            lo = mid
        else:
            hi = mid
    passing = [m for m, c in evaluated.items() if c >= budget]
    magnitude = max(passing) if passing else min(evaluated)

    labels = np.zeros(frame.pixels.shape, dtype=np.int8)
    labels[diff > magnitude] = BRIGHT
    labels[diff < -magnitude] = DARK
    comps = connected_components(LabelMask(labels=labels))

    pixels = frame.pixels
    entries = []
    for comp in comps:
        rows, cols = comp.pixels[:, 0], comp.pixels[:, 1]
        vals = pixels[rows, cols]
        # ties resolve to the first pixel in row-major order
        best = int(np.argmax(vals)) if comp.polarity == BRIGHT else int(np.argmin(vals))
        r, c = int(rows[best]), int(cols[best])
        comp.representative = (r, c)
        entries.append((float(abs(diff[r, c])), r, c, comp.polarity))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    return [
        Candidate(frame=frame.index, position=np.array([c, r], dtype=float), polarity=pol)
        for _, r, c, pol in entries[:budget]
    ]


def intensity_histogram(frame: Frame) -> np.ndarray:
    """Global 256-bin probability histogram over the full 16-bit range."""
    counts = np.bincount(frame.pixels.ravel() >> HIST_SHIFT, minlength=HIST_BINS)
    return counts / counts.sum()


def _entropy_terms(global_hist: np.ndarray) -> np.ndarray:
    p = np.asarray(global_hist, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -p * np.log2(p)
    t[p <= 0] = 0.0
    return t


def extract_features_batch(
    frame: Frame,
    positions: np.ndarray,
    scales,
    global_hist: np.ndarray,
) -> np.ndarray:
    """Feature matrix (n_positions, 7 * len(scales)) for integer (x, y)
    positions. Regions are mirror-padded at the frame border."""
    positions = np.asarray(positions, dtype=np.intp).reshape(-1, 2)
    n = len(positions)
    scales = [int(s) for s in scales]
    if not scales:
        raise ValueError("need at least one scale")
    h, w = frame.pixels.shape
    xs, ys = positions[:, 0], positions[:, 1]
    if np.any(xs < 0) or np.any(xs >= w) or np.any(ys < 0) or np.any(ys >= h):
        raise ValueError("position outside frame")

    max_pad = max(scales) // 2
    padded = frame.pixels[np.ix_(mirror_indices(h, max_pad), mirror_indices(w, max_pad))]
    ent = _entropy_terms(global_hist)

    out = np.empty((n, FEATURES_PER_SCALE * len(scales)), dtype=np.float64)
    for si, s in enumerate(scales):
        half = s // 2
        offs = np.arange(-half, half + 1)
        rows = (ys + max_pad)[:, None, None] + offs[None, :, None]
        cols = (xs + max_pad)[:, None, None] + offs[None, None, :]
        region = padded[rows, cols].reshape(n, s * s).astype(np.float64)

        mean = region.mean(axis=1)
        centered = region - mean[:, None]
        var = np.mean(centered**2, axis=1)
        mu3 = np.mean(centered**3, axis=1)
        mu4 = np.mean(centered**4, axis=1)
        nonzero = var > 0
        skew = np.zeros(n)
        kurt = np.zeros(n)
        skew[nonzero] = mu3[nonzero] / var[nonzero] ** 1.5
        kurt[nonzero] = mu4[nonzero] / var[nonzero] ** 2 - 3.0
        bin_idx = (region.astype(np.int64) >> HIST_SHIFT).astype(np.intp)
        entropy = ent[bin_idx].sum(axis=1)

        base = si * FEATURES_PER_SCALE
        out[:, base + 0] = kurt
        out[:, base + 1] = skew
        out[:, base + 2] = entropy
        out[:, base + 3] = mean
        out[:, base + 4] = var
        out[:, base + 5] = region.max(axis=1)
        out[:, base + 6] = region.min(axis=1)
    return out


def extract_features(frame: Frame, position, scales, global_hist: np.ndarray) -> np.ndarray:
    """Feature vector for one integer (x, y) position."""
    return extract_features_batch(frame, np.asarray(position).reshape(1, 2), scales, global_hist)[0]


def build_training_set(
    frames: list[Frame],
    annotations,
    scales=DEFAULT_SCALES,
    negative_ratio: float = 10.0,
    seed: int = 0,
) -> TrainingSet:
    """Assemble classifier training data from annotated frames.

    Positives are every pixel of the 3x3 region centered on each annotated
    position (clipped at frame borders); negatives are uniformly random
    non-positive pixels, negative_ratio per positive, drawn with a seeded
    generator. ``annotations`` is an iterable of (frame, target_id, x, y).
    """
    by_index = {f.index: f for f in frames}
    positives: dict[int, set] = {f.index: set() for f in frames}
    n_pos = 0
    rows = list(annotations)
    if not rows:
        raise ValueError("cannot train without annotations")
    for frame_idx, _tid, x, y in rows:
        frame = by_index.get(int(frame_idx))
        if frame is None:
            raise ValueError(f"annotation references unknown frame {frame_idx}")
        xi, yi = int(round(float(x))), int(round(float(y)))
        if not (0 <= xi < frame.width and 0 <= yi < frame.height):
            raise ValueError(f"annotation ({x}, {y}) outside frame {frame_idx}")
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                px, py = xi + dx, yi + dy
                if 0 <= px < frame.width and 0 <= py < frame.height:
                    positives[frame.index].add((px, py))
    n_pos = sum(len(s) for s in positives.values())
    if n_pos == 0:
        raise ValueError("cannot train without annotations")

    rng = np.random.default_rng(seed)
    frame_list = sorted(by_index)
    n_neg = int(round(negative_ratio * n_pos))
    negatives: dict[int, list] = {idx: [] for idx in frame_list}
    drawn = 0
    while drawn < n_neg:
        fi = frame_list[int(rng.integers(len(frame_list)))]
        frame = by_index[fi]
        x = int(rng.integers(frame.width))
        y = int(rng.integers(frame.height))
        if (x, y) in positives[fi]:
            continue
        negatives[fi].append((x, y))
        drawn += 1

    feats = []
    labels = []
    for fi in frame_list:
        frame = by_index[fi]
        pos = sorted(positives[fi])
        neg = negatives[fi]
        pts = pos + neg
        if not pts:
            continue
        hist = intensity_histogram(frame)
        feats.append(extract_features_batch(frame, np.array(pts), scales, hist))
        labels.append(np.concatenate([np.ones(len(pos), np.int8), np.zeros(len(neg), np.int8)]))
    return TrainingSet(features=np.vstack(feats), labels=np.concatenate(labels))


def detect_candidates(
    frame: Frame,
    params: InterestFilterParams,
    scales,
    model,
    threshold: float = 0.5,
) -> list[Candidate]:
    """Full per-frame detection: budgeted interest selection, multiscale
    features at each representative pixel, classifier scoring, thresholding."""
    expected = FEATURES_PER_SCALE * len(list(scales))
    if model.feature_dim != expected:
        raise ValueError(
            f"model expects {model.feature_dim} features, scales produce {expected}"
        )
    cands = select_candidates(frame, params)
    if not cands:
        return []
    hist = intensity_histogram(frame)
    positions = np.array([c.position for c in cands], dtype=np.intp)
    feats = extract_features_batch(frame, positions, scales, hist)
    scores = model.predict_proba_batch(feats)
    kept = []
    for cand, score in zip(cands, scores):
        if score >= threshold:
            cand.score = float(score)
            kept.append(cand)
    return kept
